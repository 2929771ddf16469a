#include "hidvae/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

namespace hidvae {

using nlohmann::json;

int SynthConfig::leaf_count() const {
  int n = 1;
  for (int b : branching) n *= b;
  return n;
}

void SynthConfig::validate() const {
  if (levels < 2) throw std::runtime_error("synth config: levels must be >= 2");
  if (static_cast<int>(branching.size()) != levels) {
    throw std::runtime_error("synth config: branching length must equal levels");
  }
  for (int b : branching) {
    if (b < 1) throw std::runtime_error("synth config: branching factors must be >= 1");
  }
  if (sigma <= 0.0) throw std::runtime_error("synth config: sigma must be positive");
  if (items_per_leaf < 1 || n_users < 1) {
    throw std::runtime_error("synth config: items_per_leaf and n_users must be >= 1");
  }
  if (seq_min < 3 || seq_max < seq_min) {
    throw std::runtime_error("synth config: need 3 <= seq_min <= seq_max");
  }
  if (stickiness < 0.0 || stickiness > 1.0) {
    throw std::runtime_error("synth config: stickiness must be in [0, 1]");
  }
}

std::string SynthConfig::to_json() const {
  nlohmann::ordered_json j;
  j["levels"] = levels;
  j["branching"] = branching;
  j["items_per_leaf"] = items_per_leaf;
  j["n_users"] = n_users;
  j["seq_min"] = seq_min;
  j["seq_max"] = seq_max;
  j["sigma"] = sigma;
  j["alpha"] = alpha;
  j["stickiness"] = stickiness;
  j["d_feat"] = d_feat;
  j["core_threshold"] = core_threshold;
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

SynthConfig SynthConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  SynthConfig c;
  if (j.contains("levels")) c.levels = j["levels"].get<int>();
  if (j.contains("branching")) c.branching = j["branching"].get<std::vector<int>>();
  if (j.contains("items_per_leaf")) c.items_per_leaf = j["items_per_leaf"].get<int>();
  if (j.contains("n_users")) c.n_users = j["n_users"].get<int>();
  if (j.contains("seq_min")) c.seq_min = j["seq_min"].get<int>();
  if (j.contains("seq_max")) c.seq_max = j["seq_max"].get<int>();
  if (j.contains("sigma")) c.sigma = j["sigma"].get<double>();
  if (j.contains("alpha")) c.alpha = j["alpha"].get<double>();
  if (j.contains("stickiness")) c.stickiness = j["stickiness"].get<double>();
  if (j.contains("d_feat")) c.d_feat = j["d_feat"].get<int>();
  if (j.contains("core_threshold")) c.core_threshold = j["core_threshold"].get<int>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  c.validate();
  return c;
}

namespace {

// Per-level offset scale: coarse categories are far apart, refinements close.
double level_scale(int level) {
  static const double scales[] = {1.0, 0.35, 0.15};
  if (level < 3) return scales[level];
  return 0.15 * std::pow(0.4, level - 2);
}

std::string item_name(int idx) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "item_%05d", idx);
  return buf;
}

}  // namespace

std::pair<Catalog, TagHierarchy> gen_catalog(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  // Node centers, level by level. Node index at level l is mixed-radix over
  // the branching prefix; that index doubles as the level-l vocab index.
  std::vector<std::vector<Vec>> centers(static_cast<size_t>(cfg.levels));
  std::vector<std::vector<std::string>> names(static_cast<size_t>(cfg.levels));
  int width = 1;
  for (int l = 0; l < cfg.levels; ++l) {
    width *= cfg.branching[static_cast<size_t>(l)];
    centers[static_cast<size_t>(l)].resize(static_cast<size_t>(width));
    names[static_cast<size_t>(l)].resize(static_cast<size_t>(width));
    for (int n = 0; n < width; ++n) {
      const int parent = n / cfg.branching[static_cast<size_t>(l)];
      Vec offset(cfg.d_feat);
      for (int d = 0; d < cfg.d_feat; ++d) offset(d) = rng.normal() * level_scale(l);
      if (l == 0) {
        centers[0][static_cast<size_t>(n)] = offset;
        names[0][static_cast<size_t>(n)] = "cat" + std::to_string(n);
      } else {
        centers[static_cast<size_t>(l)][static_cast<size_t>(n)] =
            centers[static_cast<size_t>(l - 1)][static_cast<size_t>(parent)] + offset;
        names[static_cast<size_t>(l)][static_cast<size_t>(n)] =
            names[static_cast<size_t>(l - 1)][static_cast<size_t>(parent)] + "/sub" +
            std::to_string(n % cfg.branching[static_cast<size_t>(l)]);
      }
    }
  }

  TagHierarchy h;
  h.levels = cfg.levels;
  h.vocab = names;
  h.tag_embed.resize(static_cast<size_t>(cfg.levels));
  for (int l = 0; l < cfg.levels; ++l) {
    const auto& cl = centers[static_cast<size_t>(l)];
    Mat m(static_cast<Eigen::Index>(cl.size()), cfg.d_feat);
    for (size_t r = 0; r < cl.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = cl[r];
    h.tag_embed[static_cast<size_t>(l)] = std::move(m);
  }
  h.validate();

  const int leaves = cfg.leaf_count();
  Catalog catalog;
  int item_idx = 0;
  for (int leaf = 0; leaf < leaves; ++leaf) {
    // Tag path: node index at each level along the branch to this leaf.
    std::vector<int> path(static_cast<size_t>(cfg.levels));
    int n = leaf;
    for (int l = cfg.levels - 1; l >= 0; --l) {
      path[static_cast<size_t>(l)] = n;
      n /= cfg.branching[static_cast<size_t>(l)];
    }
    const Vec& center = centers[static_cast<size_t>(cfg.levels - 1)][static_cast<size_t>(leaf)];
    for (int i = 0; i < cfg.items_per_leaf; ++i) {
      Item item;
      item.item_id = item_name(item_idx++);
      item.text = "synthetic item " + item.item_id + " of " +
                  names[static_cast<size_t>(cfg.levels - 1)][static_cast<size_t>(leaf)];
      Vec noise(cfg.d_feat);
      for (int d = 0; d < cfg.d_feat; ++d) noise(d) = rng.normal() * cfg.sigma;
      item.feature = center + noise;
      item.tags = path;
      catalog.emplace(item.item_id, std::move(item));
    }
  }
  return {std::move(catalog), std::move(h)};
}

InteractionLog gen_interactions(const Catalog& catalog, const TagHierarchy& hierarchy,
                                const SynthConfig& cfg) {
  cfg.validate();
  if (catalog.empty()) throw std::runtime_error("gen_interactions: empty catalog");
  Rng rng(Rng(cfg.seed).fork(1).next_u64());

  // Items grouped by leaf (finest tag index).
  const int leaves = hierarchy.vocab_size(hierarchy.levels - 1);
  std::vector<std::vector<std::string>> leaf_items(static_cast<size_t>(leaves));
  for (const auto& [id, item] : catalog) {
    leaf_items[static_cast<size_t>(item.tags.back())].push_back(id);
  }

  InteractionLog log;
  std::vector<std::vector<double>> prefs(static_cast<size_t>(cfg.n_users));
  for (int u = 0; u < cfg.n_users; ++u) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "user_%05d", u);
    const std::string user = buf;

    // Dirichlet(alpha) over leaves via normalized Gammas.
    std::vector<double> pref(static_cast<size_t>(leaves));
    double total = 0.0;
    for (int l = 0; l < leaves; ++l) {
      pref[static_cast<size_t>(l)] = std::max(rng.gamma(cfg.alpha), 1e-12);
      total += pref[static_cast<size_t>(l)];
    }
    for (double& p : pref) p /= total;
    prefs[static_cast<size_t>(u)] = pref;

    auto draw_leaf = [&]() {
      double r = rng.uniform();
      for (int l = 0; l < leaves; ++l) {
        r -= pref[static_cast<size_t>(l)];
        if (r <= 0.0) return l;
      }
      return leaves - 1;
    };

    const int len = cfg.seq_min + rng.uniform_int(cfg.seq_max - cfg.seq_min + 1);
    std::vector<std::string> seq;
    int cur = draw_leaf();
    for (int t = 0; t < len; ++t) {
      if (t > 0 && rng.uniform() >= cfg.stickiness) cur = draw_leaf();
      while (leaf_items[static_cast<size_t>(cur)].empty()) cur = (cur + 1) % leaves;
      const auto& pool = leaf_items[static_cast<size_t>(cur)];
      seq.push_back(pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))]);
    }
    log.users.push_back(user);
    log.seq.emplace(user, std::move(seq));
  }

  // Coverage repair: every item must reach core_threshold occurrences, and
  // the appended interactions go to the users who like its leaf the most.
  std::map<std::string, int> degree;
  for (const auto& [u, s] : log.seq) {
    for (const auto& i : s) ++degree[i];
  }
  for (const auto& [id, item] : catalog) {
    int have = degree.count(id) ? degree[id] : 0;
    if (have >= cfg.core_threshold) continue;
    const int leaf = item.tags.back();
    std::vector<int> order(static_cast<size_t>(cfg.n_users));
    for (int u = 0; u < cfg.n_users; ++u) order[static_cast<size_t>(u)] = u;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return prefs[static_cast<size_t>(a)][static_cast<size_t>(leaf)] >
             prefs[static_cast<size_t>(b)][static_cast<size_t>(leaf)];
    });
    size_t cursor = 0;
    while (have < cfg.core_threshold) {
      const int u = order[cursor % order.size()];
      ++cursor;
      log.seq[log.users[static_cast<size_t>(u)]].push_back(id);
      ++have;
    }
  }
  return log;
}

}  // namespace hidvae
