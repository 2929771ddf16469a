#include "hidvae/tag_gen.hpp"

#include <algorithm>

#include <json.hpp>

namespace hidvae {

std::string MockTagClassifier::classify(const std::string&,
                                        const std::vector<std::string>&,
                                        const std::vector<std::string>& candidates) const {
  if (candidates.empty()) throw std::invalid_argument("classify: empty candidate list");
  return candidates.front();
}

std::unique_ptr<TagClassifierInterface> make_tag_classifier(const std::string& name) {
  if (name == "mock" || name.empty()) return std::make_unique<MockTagClassifier>();
  throw std::invalid_argument("unknown tag classifier: " + name);
}

CandidateSet retrieve_candidates(const Vec& item_vec, const TagHierarchy& hierarchy,
                                 int level, int k) {
  if (k < 1) throw std::invalid_argument("retrieve_candidates: k must be >= 1");
  if (level < 0 || level >= hierarchy.levels) {
    throw std::out_of_range("retrieve_candidates: bad level");
  }
  if (hierarchy.tag_embed.empty()) {
    throw std::runtime_error("retrieve_candidates: hierarchy has no tag embeddings");
  }
  const Mat& emb = hierarchy.tag_embed[static_cast<size_t>(level)];
  if (item_vec.size() != emb.cols()) {
    throw std::invalid_argument("retrieve_candidates: dimension mismatch (" +
                                std::to_string(item_vec.size()) + " vs " +
                                std::to_string(emb.cols()) + ")");
  }
  const double in = std::max(item_vec.norm(), 1e-8);
  std::vector<std::pair<double, int>> scored;
  scored.reserve(static_cast<size_t>(emb.rows()));
  for (Eigen::Index r = 0; r < emb.rows(); ++r) {
    const double tn = std::max(emb.row(r).norm(), 1e-8);
    scored.push_back({emb.row(r).dot(item_vec) / (in * tn), static_cast<int>(r)});
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  CandidateSet cs;
  cs.level = level;
  const int take = std::min<int>(k, static_cast<int>(scored.size()));
  for (int i = 0; i < take; ++i) {
    cs.tags.push_back({hierarchy.vocab[static_cast<size_t>(level)]
                           [static_cast<size_t>(scored[static_cast<size_t>(i)].second)],
                       scored[static_cast<size_t>(i)].first});
  }
  return cs;
}

LevelChoice classify_level(const Item& item, const std::vector<std::string>& prior,
                           const CandidateSet& cands, const TagHierarchy& hierarchy,
                           const TagClassifierInterface& clf) {
  if (cands.tags.empty()) throw std::invalid_argument("classify_level: empty candidate set");
  std::vector<std::string> names;
  names.reserve(cands.tags.size());
  for (const auto& [tag, score] : cands.tags) names.push_back(tag);

  std::string answer;
  try {
    answer = clf.classify(item.text, prior, names);
  } catch (const std::exception& e) {
    throw std::runtime_error("classifier failed for item '" + item.item_id +
                             "': " + e.what());
  }

  LevelChoice choice;
  if (std::find(names.begin(), names.end(), answer) != names.end()) {
    choice.tag = answer;
  } else {
    choice.tag = names.front();
    choice.fallback = true;
  }
  choice.index = hierarchy.index_of(cands.level, choice.tag);
  return choice;
}

HierarchyResult generate_hierarchy(const Item& item, const TagHierarchy& hierarchy,
                                   int k, const TagClassifierInterface& clf) {
  if (item.text.empty()) {
    throw std::invalid_argument("generate_hierarchy: item '" + item.item_id +
                                "' has empty text");
  }
  if (item.feature.size() == 0) {
    throw std::invalid_argument("generate_hierarchy: item '" + item.item_id +
                                "' has no feature vector");
  }
  HierarchyResult res;
  std::vector<std::string> prior;
  for (int l = 0; l < hierarchy.levels; ++l) {
    CandidateSet cands = retrieve_candidates(item.feature, hierarchy, l, k);
    LevelChoice c;
    try {
      c = classify_level(item, prior, cands, hierarchy, clf);
    } catch (const std::exception& e) {
      throw std::runtime_error("level " + std::to_string(l + 1) + ": " + e.what());
    }
    res.tags.push_back(c.index);
    res.fallbacks.push_back(c.fallback);
    prior.push_back(c.tag);
  }
  return res;
}

std::string build_prompt(const std::string& item_text,
                         const std::vector<std::string>& prior_tags,
                         const std::vector<std::string>& candidates) {
  auto join = [](const std::vector<std::string>& v) {
    std::string s = "[";
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) s += ", ";
      s += v[i];
    }
    s += "]";
    return s;
  };
  std::string p;
  p += "You are a category expert specializing in hierarchical classification.\n";
  p += "Given the item description: \"" + item_text +
       "\", and the previous hierarchical tags: " + join(prior_tags) +
       ", please select the single best matching tag for the next level from "
       "the following candidate list: " +
       join(candidates) + ".\n";
  p += "Reason step-by-step if needed, but output only the selected tag in "
       "plain text, without any additional explanation or formatting.\n";
  return p;
}

std::string TagGenReport::to_json() const {
  nlohmann::ordered_json j;
  j["n_items"] = n_items;
  j["n_generated"] = n_generated;
  j["n_skipped"] = n_skipped;
  j["fallbacks_per_level"] = fallbacks_per_level;
  size_t total = 0;
  for (size_t f : fallbacks_per_level) total += f;
  j["n_fallbacks"] = total;
  return j.dump(2) + "\n";
}

TagGenReport generate_tags_for_catalog(Catalog& catalog, const TagHierarchy& hierarchy,
                                       int k, const TagClassifierInterface& clf,
                                       const EmbedderInterface& embedder) {
  TagGenReport report;
  report.fallbacks_per_level.assign(static_cast<size_t>(hierarchy.levels), 0);
  report.n_items = catalog.size();
  for (auto& [id, item] : catalog) {
    if (static_cast<int>(item.tags.size()) == hierarchy.levels) {
      ++report.n_skipped;  // ground truth present; generation is a no-op
      continue;
    }
    if (item.feature.size() == 0) {
      item.feature = embedder.embed(item.text);
    }
    HierarchyResult res = generate_hierarchy(item, hierarchy, k, clf);
    item.tags = res.tags;
    for (int l = 0; l < hierarchy.levels; ++l) {
      if (res.fallbacks[static_cast<size_t>(l)]) {
        ++report.fallbacks_per_level[static_cast<size_t>(l)];
      }
    }
    ++report.n_generated;
  }
  return report;
}

}  // namespace hidvae
