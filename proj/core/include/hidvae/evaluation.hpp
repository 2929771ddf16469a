#pragma once

#include <map>
#include <string>
#include <vector>

#include "hidvae/data_model.hpp"
#include "hidvae/recommender.hpp"
#include "hidvae/tokenizer.hpp"

namespace hidvae {

struct LayerAccuracy {
  int level = 0;
  double accuracy = 0.0;
  int n_classes_effective = 0;
  int n_evaluated = 0;
};

struct MetricReport {
  std::map<int, double> recall;  // K -> value
  std::map<int, double> ndcg;
  int n_users = 0;
  double collision_rate = 0.0;
  std::vector<LayerAccuracy> per_layer_accuracy;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
};

// 1 iff target sits in the first k entries. Duplicates in `ranked` are a
// caller bug and rejected.
int recall_at_k(const std::vector<std::string>& ranked, const std::string& target,
                int k);

// Single-relevant-item NDCG: 1/log2(rank+1) with rank 1-based, IDCG = 1.
double ndcg_at_k(const std::vector<std::string>& ranked, const std::string& target,
                 int k);

// Share of items whose code tuple (suffix ignored) is shared by >= 2 items.
double collision_rate(const std::map<std::string, SemanticID>& ids);

// Classifier argmax vs ground truth per level, restricted to items whose true
// class has at least `min_class_count` members in the catalog.
std::vector<LayerAccuracy> per_layer_tag_accuracy(const TokenizerModel& model,
                                                  const Catalog& catalog,
                                                  int min_class_count = 30);

// TSV rows of item_id, z0 components, code tuple; parses back to 1e-6.
void export_latents(const TokenizerModel& model, const Catalog& catalog,
                    const std::string& path);

// Full leave-one-out evaluation: trie-constrained generation per user with
// history = train + valid, scored against the held-out test item.
MetricReport evaluate_model(const RecModel& model,
                            const std::map<std::string, SemanticID>& ids,
                            const InteractionLog& log, const PrefixTrie& trie,
                            const std::vector<int>& ks);

}  // namespace hidvae
