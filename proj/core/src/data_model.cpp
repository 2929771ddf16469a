#include "hidvae/data_model.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace hidvae {

using nlohmann::json;

int TagHierarchy::index_of(int level, const std::string& tag) const {
  const auto& v = vocab[static_cast<size_t>(level)];
  auto it = std::find(v.begin(), v.end(), tag);
  return it == v.end() ? -1 : static_cast<int>(it - v.begin());
}

void TagHierarchy::validate() const {
  if (levels < 1 || static_cast<int>(vocab.size()) != levels) {
    throw std::runtime_error("tag hierarchy: vocab levels mismatch");
  }
  for (int l = 0; l < levels; ++l) {
    const auto& v = vocab[static_cast<size_t>(l)];
    if (v.empty()) {
      throw std::runtime_error("tag hierarchy: empty vocab at level " + std::to_string(l));
    }
    std::set<std::string> seen(v.begin(), v.end());
    if (seen.size() != v.size()) {
      throw std::runtime_error("tag hierarchy: duplicate tag at level " + std::to_string(l));
    }
    if (!tag_embed.empty() &&
        tag_embed[static_cast<size_t>(l)].rows() != static_cast<Eigen::Index>(v.size())) {
      throw std::runtime_error("tag hierarchy: embedding rows mismatch at level " +
                               std::to_string(l));
    }
  }
}

size_t InteractionLog::total_interactions() const {
  size_t n = 0;
  for (const auto& [u, s] : seq) n += s.size();
  return n;
}

void DatasetConfig::validate() const {
  if (levels < 2) throw std::runtime_error("dataset config: L must be >= 2");
  if (static_cast<int>(codebook_sizes.size()) != levels) {
    throw std::runtime_error("dataset config: K list length must equal L");
  }
  for (int k : codebook_sizes) {
    if (k < 2) throw std::runtime_error("dataset config: all K must be >= 2");
  }
}

namespace {

json parse_line(const std::string& line, const std::string& path, size_t lineno) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed JSON record");
  }
  return j;
}

}  // namespace

Catalog load_items(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open items file: " + path);
  Catalog catalog;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = parse_line(line, path, lineno);
    if (!j.contains("item_id") || !j["item_id"].is_string()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": missing item_id");
    }
    if (!j.contains("text") || !j["text"].is_string()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": missing text");
    }
    Item item;
    item.item_id = j["item_id"].get<std::string>();
    item.text = j["text"].get<std::string>();
    if (j.contains("feature")) {
      const auto& f = j["feature"];
      if (!f.is_array()) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": feature must be an array");
      }
      item.feature.resize(static_cast<Eigen::Index>(f.size()));
      for (size_t i = 0; i < f.size(); ++i) {
        item.feature(static_cast<Eigen::Index>(i)) = f[i].get<double>();
      }
    }
    if (j.contains("tags")) {
      const auto& tg = j["tags"];
      if (!tg.is_array()) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": tags must be an array");
      }
      for (const auto& t : tg) item.tags.push_back(t.get<int>());
    }
    if (catalog.count(item.item_id)) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": duplicate item_id '" + item.item_id + "'");
    }
    catalog.emplace(item.item_id, std::move(item));
  }
  return catalog;
}

void save_items(const Catalog& catalog, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write items file: " + path);
  for (const auto& [id, item] : catalog) {
    json j;
    j["item_id"] = id;
    j["text"] = item.text;
    if (item.feature.size() > 0) {
      json f = json::array();
      for (Eigen::Index i = 0; i < item.feature.size(); ++i) f.push_back(item.feature(i));
      j["feature"] = std::move(f);
    }
    if (!item.tags.empty()) j["tags"] = item.tags;
    out << j.dump() << "\n";
  }
}

InteractionLog load_interactions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open interactions file: " + path);
  InteractionLog log;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = parse_line(line, path, lineno);
    if (!j.contains("user_id") || !j["user_id"].is_string() || !j.contains("items")) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": record needs user_id and items");
    }
    const std::string user = j["user_id"].get<std::string>();
    if (log.seq.count(user)) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": duplicate user_id '" + user + "'");
    }
    std::vector<std::string> items = j["items"].get<std::vector<std::string>>();
    if (j.contains("timestamps")) {
      std::vector<long long> ts = j["timestamps"].get<std::vector<long long>>();
      if (ts.size() != items.size()) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": timestamps length mismatch");
      }
      std::vector<size_t> order(items.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](size_t a, size_t b) { return ts[a] < ts[b]; });
      std::vector<std::string> sorted;
      sorted.reserve(items.size());
      for (size_t i : order) sorted.push_back(items[i]);
      items = std::move(sorted);
    }
    log.seq.emplace(user, std::move(items));
  }
  for (const auto& [u, s] : log.seq) log.users.push_back(u);
  return log;
}

void save_interactions(const InteractionLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write interactions file: " + path);
  for (const std::string& u : log.users) {
    json j;
    j["user_id"] = u;
    j["items"] = log.seq.at(u);
    out << j.dump() << "\n";
  }
}

TagHierarchy load_tag_hierarchy(const std::string& path) {
  json j = json::parse(read_text_file(path));
  TagHierarchy h;
  h.levels = j.at("levels").get<int>();
  h.vocab = j.at("vocab").get<std::vector<std::vector<std::string>>>();
  if (j.contains("embeddings_path") && !j["embeddings_path"].is_null()) {
    const std::string epath = j["embeddings_path"].get<std::string>();
    // Resolve relative to the tags.json directory.
    std::string dir;
    const auto slash = path.find_last_of('/');
    if (slash != std::string::npos && epath.find('/') == std::string::npos) {
      dir = path.substr(0, slash + 1);
    }
    std::ifstream in(dir + epath);
    if (!in) throw std::runtime_error("cannot open tag embeddings: " + dir + epath);
    h.tag_embed.resize(static_cast<size_t>(h.levels));
    std::vector<std::vector<std::pair<int, std::vector<double>>>> rows(
        static_cast<size_t>(h.levels));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      int level = 0, idx = 0;
      ss >> level >> idx;
      std::vector<double> v;
      double x = 0.0;
      while (ss >> x) v.push_back(x);
      rows[static_cast<size_t>(level)].push_back({idx, std::move(v)});
    }
    for (int l = 0; l < h.levels; ++l) {
      auto& rl = rows[static_cast<size_t>(l)];
      if (rl.empty()) throw std::runtime_error("tag embeddings: no rows for level " + std::to_string(l));
      const auto dim = rl.front().second.size();
      Mat m = Mat::Zero(static_cast<Eigen::Index>(h.vocab[static_cast<size_t>(l)].size()),
                        static_cast<Eigen::Index>(dim));
      for (const auto& [idx, v] : rl) {
        if (v.size() != dim) throw std::runtime_error("tag embeddings: ragged rows");
        for (size_t c = 0; c < dim; ++c) m(idx, static_cast<Eigen::Index>(c)) = v[c];
      }
      h.tag_embed[static_cast<size_t>(l)] = std::move(m);
    }
  }
  h.validate();
  return h;
}

void save_tag_hierarchy(const TagHierarchy& h, const std::string& json_path,
                        const std::string& embeddings_path) {
  json j;
  j["levels"] = h.levels;
  j["vocab"] = h.vocab;
  if (!h.tag_embed.empty() && !embeddings_path.empty()) {
    // Store just the file name; loading resolves it next to tags.json.
    const auto slash = embeddings_path.find_last_of('/');
    j["embeddings_path"] =
        slash == std::string::npos ? embeddings_path : embeddings_path.substr(slash + 1);
    std::ofstream out(embeddings_path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write tag embeddings: " + embeddings_path);
    for (int l = 0; l < h.levels; ++l) {
      const Mat& m = h.tag_embed[static_cast<size_t>(l)];
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        out << l << "\t" << r;
        for (Eigen::Index c = 0; c < m.cols(); ++c) out << "\t" << format_double(m(r, c));
        out << "\n";
      }
    }
  }
  write_text_file(json_path, j.dump(2) + "\n");
}

std::pair<InteractionLog, Catalog> five_core_filter(const InteractionLog& log,
                                                    const Catalog& catalog,
                                                    int threshold) {
  if (threshold < 1) throw std::invalid_argument("five_core_filter: threshold must be >= 1");
  std::map<std::string, std::vector<std::string>> seq = log.seq;

  bool changed = true;
  while (changed) {
    changed = false;
    // Drop users below threshold.
    for (auto it = seq.begin(); it != seq.end();) {
      if (static_cast<int>(it->second.size()) < threshold) {
        it = seq.erase(it);
        changed = true;
      } else {
        ++it;
      }
    }
    // Count item degrees over the surviving users.
    std::map<std::string, int> degree;
    for (const auto& [u, s] : seq) {
      for (const std::string& i : s) ++degree[i];
    }
    // Drop occurrences of under-threshold items.
    for (auto& [u, s] : seq) {
      auto keep = [&](const std::string& i) {
        auto it = degree.find(i);
        return it != degree.end() && it->second >= threshold;
      };
      const size_t before = s.size();
      s.erase(std::remove_if(s.begin(), s.end(),
                             [&](const std::string& i) { return !keep(i); }),
              s.end());
      if (s.size() != before) changed = true;
    }
  }

  InteractionLog out;
  std::set<std::string> used_items;
  for (const auto& [u, s] : seq) {
    if (s.empty()) continue;
    out.users.push_back(u);
    out.seq.emplace(u, s);
    used_items.insert(s.begin(), s.end());
  }
  Catalog kept;
  for (const std::string& id : used_items) {
    auto it = catalog.find(id);
    if (it == catalog.end()) {
      throw std::runtime_error("five_core_filter: interaction references unknown item '" + id + "'");
    }
    kept.emplace(id, it->second);
  }
  if (out.users.empty() || kept.empty()) {
    throw std::runtime_error("five_core_filter: empty dataset after filtering");
  }
  return {std::move(out), std::move(kept)};
}

InteractionLog leave_one_out_split(const InteractionLog& log) {
  InteractionLog out = log;
  out.split.clear();
  for (const auto& [u, s] : out.seq) {
    if (s.size() < 3) {
      throw std::runtime_error("leave_one_out_split: sequence of user '" + u +
                               "' is shorter than 3");
    }
    out.split[u] = UserSplit{static_cast<int>(s.size()) - 2};
  }
  return out;
}

}  // namespace hidvae
