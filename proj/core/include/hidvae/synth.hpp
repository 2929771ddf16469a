#pragma once

#include <string>
#include <vector>

#include "hidvae/data_model.hpp"

namespace hidvae {

struct SynthConfig {
  int levels = 3;
  std::vector<int> branching = {4, 4, 4};  // category counts per level
  int items_per_leaf = 5;
  int n_users = 400;
  int seq_min = 16;
  int seq_max = 24;
  double sigma = 0.05;       // intra-category feature noise
  double alpha = 0.3;        // Dirichlet preference concentration over leaves
  double stickiness = 0.8;   // probability the next item stays in the same leaf
  int d_feat = 32;
  int core_threshold = 5;    // minimum per-item interaction count, enforced
  std::uint64_t seed = 42;

  int leaf_count() const;
  void validate() const;

  std::string to_json() const;
  static SynthConfig from_json(const std::string& text);
};

// Hierarchical Gaussian catalog: each leaf category is a cluster whose
// center follows the branching tree; items are center + N(0, sigma^2).
// Tag-text embeddings are the category centers, so retrieval against them
// is meaningful. Tag vocab entries are full path strings, unique per level.
std::pair<Catalog, TagHierarchy> gen_catalog(const SynthConfig& cfg);

// Dirichlet user preferences over leaves plus Markov category stickiness.
// A repair pass appends interactions until every item has at least
// core_threshold occurrences, so the log survives five_core_filter intact.
InteractionLog gen_interactions(const Catalog& catalog, const TagHierarchy& hierarchy,
                                const SynthConfig& cfg);

}  // namespace hidvae
