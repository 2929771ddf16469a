#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hidvae/data_model.hpp"
#include "hidvae/nn/layers.hpp"

namespace hidvae {

struct TokenizerConfig {
  int d_in = 768;
  int d = 32;          // latent width
  int hidden = 256;    // encoder/decoder MLP width
  int levels = 3;
  std::vector<int> codebook_sizes = {256, 256, 256};
  double beta_commit = 0.25;
  double beta_sup = 1.0;
  double beta_unique = 2.0;
  double tau = 0.07;          // alignment temperature
  double margin = 0.9;        // uniqueness margin
  double focal_gamma = 2.0;   // 0 disables focal weighting
  double lr = 3e-4;
  double weight_decay = 0.01;
  int batch = 128;
  int epochs = 20;
  int kmeans_iters = 25;
  double dropout_base = 0.1;  // classifier dropout at level 1
  double dropout_step = 0.05; // added per level
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static TokenizerConfig from_json(const std::string& text);
};

struct SemanticID {
  std::vector<int> codes;  // one index per level
  int suffix = 0;          // disambiguation counter; 0 unless tiger-append

  bool same_codes(const SemanticID& o) const { return codes == o.codes; }
};

enum class CollisionMode { kReport, kTigerAppend };

CollisionMode collision_mode_from_string(const std::string& s);
std::string to_string(CollisionMode m);

// Everything the residual chain produces for one latent.
struct QuantizationTrace {
  Vec z0;
  std::vector<int> codes;
  std::vector<Vec> codewords;  // e[l]
  std::vector<Vec> residuals;  // r[l] = r[l-1] - e[l], r[0] = z0
  std::vector<Vec> zq_sum;     // cumulative sums of codewords
  std::vector<Vec> zq_cat;     // concatenation of codewords 1..l
};

// Nearest codeword by L2; ties resolve to the lowest index.
std::pair<int, Vec> quantize_nearest(const Vec& r, const Mat& codebook);

QuantizationTrace quantize_residual_chain(const Vec& z0,
                                          const std::vector<Mat>& codebooks);

// ---- value-level loss terms (oracle-friendly, no gradients) ----

// Mean over batch of squared L2 reconstruction error.
double recon_loss(const Mat& x, const Mat& x_hat);

// Sum over stages of the batch-mean squared distance between the stage's
// residual input and its chosen codeword.
double commitment_loss(const std::vector<Mat>& residual_in,
                       const std::vector<Mat>& codeword);

// InfoNCE over the batch: rows of projected_tags must be the already
// projected (and normalized) per-item tag vectors for one level.
double tag_alignment_loss(const Mat& zq, const Mat& projected_tags, double tau);

// Projector application: L2-normalized rows of tag_embed * W.
Mat project_tags(const Mat& tag_embed_rows, const Mat& projector_w);

// Cross-entropy of logits vs labels, optionally focal-weighted.
double tag_prediction_loss(const Mat& logits, const std::vector<int>& labels,
                           double focal_gamma);

// Margin-hinged cosine penalty over pairs of batch items with identical
// full code tuples.
double uniqueness_loss(const Mat& z0, const std::vector<SemanticID>& codes,
                       double margin);

std::vector<std::pair<int, int>> colliding_pairs(const std::vector<SemanticID>& codes);

// K-Means init for the residual chain: level 1 clusters the latents, level l
// clusters the residuals left by levels 1..l-1. If the batch is smaller than
// K the batch is padded by jittered resampling and `padded` is flagged.
std::vector<Mat> init_codebooks_kmeans(const Mat& latents, const std::vector<int>& K,
                                       Rng& rng, int iters, bool* padded = nullptr);

struct LossBreakdown {
  double recon = 0.0;
  double commit = 0.0;
  double codebook = 0.0;
  double unique = 0.0;
  double total = 0.0;
  std::vector<double> align;  // per level
  std::vector<double> pred;   // per level
  int collision_pairs = 0;
};

enum class LossMode {
  kTraining,  // straight-through wiring, dropout active, codes from argmin
  kSmooth     // frozen codes, fully differentiable wiring, dropout off
};

enum class LossTerm { kRecon, kCommit, kCodebook, kAlign, kPred, kUnique, kTotal };

class TokenizerModel {
 public:
  TokenizerModel(TokenizerConfig cfg, std::vector<int> tag_vocab_sizes, int d_tag);

  const TokenizerConfig& config() const { return cfg_; }
  const std::vector<int>& tag_vocab_sizes() const { return tag_vocab_sizes_; }
  int d_tag() const { return d_tag_; }

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  std::vector<int> param_indices_with_prefix(const std::string& prefix) const;

  bool codebooks_ready() const { return codebooks_ready_; }
  void set_codebooks(const std::vector<Mat>& codebooks);
  std::vector<Mat> codebooks() const;

  // Builds the composite loss (or one term) on the tape. `tags` is B rows of
  // per-level vocab indices. In kSmooth mode `frozen_codes` supplies the code
  // assignment (B rows of L indices); in kTraining mode codes come from the
  // chain and are written to `out_codes` when given.
  nn::Var build_loss(nn::Tape& t, const std::vector<nn::Var>& pv, const Mat& x,
                     const std::vector<std::vector<int>>& tags,
                     const TagHierarchy& hierarchy, LossMode mode,
                     LossTerm term = LossTerm::kTotal,
                     const std::vector<std::vector<int>>* frozen_codes = nullptr,
                     Rng* dropout_rng = nullptr, LossBreakdown* breakdown = nullptr,
                     std::vector<std::vector<int>>* out_codes = nullptr) const;

  // ---- value-level forward passes ----
  Mat encode_values(const Mat& x) const;
  Mat decode_values(const Mat& zq) const;
  QuantizationTrace trace_for(const Vec& x) const;  // encode + chain
  Mat classifier_logits_values(int level, const Mat& zq_cat) const;

 private:
  struct ResBlock {
    nn::Linear a;
    nn::LayerNormParams ln;
    nn::Linear b;
  };
  struct LevelClassifier {
    nn::Linear att;
    nn::Linear feat;
    nn::LayerNormParams feat_ln;
    ResBlock r1, r2;
    nn::Linear head1;
    nn::LayerNormParams head_ln;
    nn::Linear head2;
    int in_dim = 0;
    int hidden = 0;
    int n_classes = 0;
    double drop = 0.0;
  };

  nn::Var classifier_forward(nn::Tape& t, const std::vector<nn::Var>& pv,
                             const LevelClassifier& c, nn::Var x, Rng* dropout_rng,
                             bool train) const;

  TokenizerConfig cfg_;
  std::vector<int> tag_vocab_sizes_;
  int d_tag_ = 0;
  nn::ParamStore params_;
  nn::Mlp3 enc_;
  nn::Mlp3 dec_;
  std::vector<int> codebook_params_;   // param index per level
  std::vector<nn::Linear> projectors_; // d_tag -> d, no bias
  std::vector<LevelClassifier> classifiers_;
  bool codebooks_ready_ = false;
};

struct EpochLog {
  int epoch = 0;
  LossBreakdown mean;
  double collision_rate = 0.0;
  std::vector<int> codebook_usage;  // distinct codes used per level
};

struct TrainStage1Result {
  bool aborted = false;
  int epochs_run = 0;
  bool kmeans_padded = false;
  std::vector<EpochLog> log;
};

// Runs minibatch AdamW over the composite loss. Every item must carry L
// tags. Writes per-epoch checkpoints and training_log.jsonl when out_dir is
// nonempty. A non-finite loss aborts and restores the last epoch's weights.
TrainStage1Result train_stage1(TokenizerModel& model, const Catalog& catalog,
                               const TagHierarchy& hierarchy,
                               const std::string& out_dir);

struct CollisionGroup {
  std::vector<int> codes;
  std::vector<std::string> items;  // ascending item_id
};

struct AssignResult {
  std::map<std::string, SemanticID> ids;
  std::vector<CollisionGroup> groups;  // only groups of two or more
  double collision_rate = 0.0;         // share of items in such groups
};

AssignResult assign_ids(const TokenizerModel& model, const Catalog& catalog,
                        CollisionMode mode);

void save_ids_tsv(const AssignResult& result, int levels, const std::string& path);
std::map<std::string, SemanticID> load_ids_tsv(const std::string& path);

void save_checkpoint(const TokenizerModel& model, const std::string& dir);
TokenizerModel load_checkpoint(const std::string& dir);

}  // namespace hidvae
