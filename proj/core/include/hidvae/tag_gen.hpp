#pragma once

#include <memory>
#include <string>
#include <vector>

#include "hidvae/data_model.hpp"
#include "hidvae/embedder.hpp"

namespace hidvae {

// Chooses one tag out of a retrieved candidate list. Implementations must be
// deterministic for CI use; a networked adapter would satisfy the same
// contract. The caller re-checks that the returned string is a candidate.
class TagClassifierInterface {
 public:
  virtual ~TagClassifierInterface() = default;
  virtual std::string classify(const std::string& item_text,
                               const std::vector<std::string>& prior_tags,
                               const std::vector<std::string>& candidates) const = 0;
  virtual std::string name() const = 0;
};

// Deterministic stand-in: candidates arrive sorted by similarity to the item
// embedding, so the nearest tag is simply the first one.
class MockTagClassifier : public TagClassifierInterface {
 public:
  std::string classify(const std::string& item_text,
                       const std::vector<std::string>& prior_tags,
                       const std::vector<std::string>& candidates) const override;
  std::string name() const override { return "mock"; }
};

std::unique_ptr<TagClassifierInterface> make_tag_classifier(const std::string& name);

struct CandidateSet {
  int level = 0;
  std::vector<std::pair<std::string, double>> tags;  // similarity-descending
};

// Top-k tags by cosine similarity against level `level` of the hierarchy;
// ties break toward the lower vocab index.
CandidateSet retrieve_candidates(const Vec& item_vec, const TagHierarchy& hierarchy,
                                 int level, int k);

struct LevelChoice {
  std::string tag;
  int index = -1;
  bool fallback = false;  // classifier answered outside the candidate set
};

// Asks the classifier and enforces membership in the candidate set; on an
// out-of-set answer the top-similarity candidate wins and the choice is
// flagged.
LevelChoice classify_level(const Item& item, const std::vector<std::string>& prior,
                           const CandidateSet& cands, const TagHierarchy& hierarchy,
                           const TagClassifierInterface& clf);

struct HierarchyResult {
  std::vector<int> tags;          // one index per level
  std::vector<bool> fallbacks;    // per level
};

HierarchyResult generate_hierarchy(const Item& item, const TagHierarchy& hierarchy,
                                   int k, const TagClassifierInterface& clf);

// Renders the classification prompt; byte-stable for fixed inputs.
std::string build_prompt(const std::string& item_text,
                         const std::vector<std::string>& prior_tags,
                         const std::vector<std::string>& candidates);

struct TagGenReport {
  size_t n_items = 0;
  size_t n_generated = 0;
  size_t n_skipped = 0;                 // ground-truth tags already present
  std::vector<size_t> fallbacks_per_level;

  std::string to_json() const;
};

// Fills tags for every item that lacks them. Items without features are
// embedded with `embedder` first (also used for retrieval in that case).
TagGenReport generate_tags_for_catalog(Catalog& catalog, const TagHierarchy& hierarchy,
                                       int k, const TagClassifierInterface& clf,
                                       const EmbedderInterface& embedder);

}  // namespace hidvae
