#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hidvae/common.hpp"

namespace hidvae {

struct Item {
  std::string item_id;
  std::string text;
  Vec feature;                      // size 0 until computed or loaded
  std::vector<int> tags;            // empty when unlabeled; else L coarse-to-fine indices
};

struct TagHierarchy {
  int levels = 0;
  std::vector<std::vector<std::string>> vocab;  // per level, ordered
  std::vector<Mat> tag_embed;                   // per level, rows match vocab

  int vocab_size(int level) const { return static_cast<int>(vocab[static_cast<size_t>(level)].size()); }
  int index_of(int level, const std::string& tag) const;  // -1 when absent
  void validate() const;
};

// Catalog keyed by item_id; iteration order is the deterministic key order.
using Catalog = std::map<std::string, Item>;

struct UserSplit {
  int n_train = 0;  // first n_train items train; then valid, then test
};

struct InteractionLog {
  std::vector<std::string> users;                      // sorted
  std::map<std::string, std::vector<std::string>> seq; // chronological item ids
  std::map<std::string, UserSplit> split;              // empty until split

  bool has_split() const { return !split.empty(); }
  size_t total_interactions() const;
};

struct DatasetConfig {
  int d_in = 768;
  int levels = 3;
  std::vector<int> codebook_sizes = {256, 256, 256};
  int core_threshold = 5;

  void validate() const;
};

// items.jsonl: {"item_id": str, "text": str, "feature": [float]?, "tags": [int]?}
Catalog load_items(const std::string& path);
void save_items(const Catalog& catalog, const std::string& path);

// interactions.jsonl: {"user_id": str, "items": [str], "timestamps": [int]?}
// Items are re-sorted by timestamp when timestamps are present (stable).
InteractionLog load_interactions(const std::string& path);
void save_interactions(const InteractionLog& log, const std::string& path);

// tags.json: {"levels": L, "vocab": [[str]], "embeddings_path": str?}
// Embeddings file is TSV rows of "level<TAB>tag_index<TAB>v0..v_{d-1}".
TagHierarchy load_tag_hierarchy(const std::string& path);
void save_tag_hierarchy(const TagHierarchy& h, const std::string& json_path,
                        const std::string& embeddings_path);

// Iterative removal of users and items below `threshold` interactions until
// a fixed point. Throws when the result is empty.
std::pair<InteractionLog, Catalog> five_core_filter(const InteractionLog& log,
                                                    const Catalog& catalog,
                                                    int threshold);

// Per user: last item is test, second-to-last is validation, prefix trains.
// Throws naming the first user whose sequence is shorter than 3.
InteractionLog leave_one_out_split(const InteractionLog& log);

}  // namespace hidvae
