#pragma once

#include <map>
#include <string>
#include <vector>

#include "hidvae/data_model.hpp"
#include "hidvae/nn/layers.hpp"
#include "hidvae/tokenizer.hpp"

namespace hidvae {

struct RecConfig {
  int layers = 6;
  int heads = 8;
  int hidden = 512;
  int id_embed = 64;
  int type_embed = 16;
  int ffn_mult = 4;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double dropout = 0.1;
  int batch = 256;
  int epochs = 3;
  int warmup_steps = 1000;
  int max_history = 20;
  int beam_width = 0;  // 0 picks 2*k at generation time
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static RecConfig from_json(const std::string& text);
};

// Flat token space: [PAD, BOS, EOS, level-1 codes, ..., level-L codes,
// suffix tokens when tiger-append produced any]. Round-trip between flat
// index and (level, code) is exact.
struct TokenVocab {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSpecials = 3;

  int levels = 0;
  std::vector<int> K;
  int suffix_count = 0;

  static TokenVocab from_ids(const std::map<std::string, SemanticID>& ids,
                             bool with_suffix);

  int level_offset(int level) const;  // level == levels addresses the suffix block
  int flat(int level, int code) const;
  std::pair<int, int> unflat(int flat_token) const;
  int size() const;
  int positions() const { return levels + (suffix_count > 0 ? 1 : 0); }
  std::pair<int, int> position_range(int pos) const;  // [from, to) in flat space
  // Type row per token: level for codes, levels for suffix, levels+1 specials.
  int type_of(int flat_token) const;
  int type_rows() const { return levels + 2; }
};

class PrefixTrie {
 public:
  struct Node {
    std::map<int, int> children;     // code -> node index
    std::vector<std::string> items;  // leaf payload, ascending item_id
  };

  static PrefixTrie build(const std::map<std::string, SemanticID>& ids,
                          bool with_suffix);

  int root() const { return 0; }
  const Node& node(int idx) const { return nodes_[static_cast<size_t>(idx)]; }
  // -1 when the code does not extend the prefix.
  int child(int idx, int code) const;
  // Resolves a code prefix from the root; throws on an invalid prefix.
  int resolve(const std::vector<int>& prefix) const;
  std::vector<int> allowed(int idx) const;  // sorted child codes
  size_t node_count() const { return nodes_.size(); }
  int depth() const { return depth_; }
  size_t item_count() const { return item_count_; }

 private:
  std::vector<Node> nodes_{1, Node{}};
  int depth_ = 0;
  size_t item_count_ = 0;
};

// Sets every token that does not extend `prefix` to a -inf surrogate.
// The level masked is the one `prefix.size()` addresses.
Eigen::RowVectorXd mask_logits(const Eigen::RowVectorXd& logits,
                               const PrefixTrie& trie, const std::vector<int>& prefix,
                               const TokenVocab& vocab);

// Per-level majority vote from assigned codes to ground-truth tags; -1 for
// codes never seen in the catalog.
std::vector<std::vector<int>> build_code_tag_map(
    const std::map<std::string, SemanticID>& ids, const Catalog& catalog,
    const TokenVocab& vocab);

struct GenerationResult {
  std::string item_id;
  double logprob = 0.0;
  std::string tag_path;
};

class RecModel {
 public:
  RecModel(RecConfig cfg, TokenVocab vocab, Mat tag_text,
           std::vector<std::vector<int>> code_tag_map,
           std::vector<std::vector<std::string>> tag_names);

  const RecConfig& config() const { return cfg_; }
  const TokenVocab& vocab() const { return vocab_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const Mat& tag_text() const { return tag_text_; }
  const std::vector<std::vector<int>>& code_tag_map() const { return code_tag_map_; }

  // Flat tokens for one item: L codes (+ suffix token in tiger mode).
  std::vector<int> item_tokens(const SemanticID& id) const;
  // [BOS] + tokens of the last max_history items + [EOS].
  std::vector<int> encoder_tokens(const std::vector<SemanticID>& history) const;

  // Token embedding sequence for a history (rows = tokens, cols = hidden).
  Mat embed_history_values(const std::vector<SemanticID>& history) const;

  // Teacher-forced mean CE over target positions for a batch of samples.
  nn::Var build_batch_loss(nn::Tape& t, const std::vector<nn::Var>& pv,
                           const std::vector<std::vector<int>>& enc_tokens,
                           const std::vector<std::vector<int>>& targets,
                           Rng* dropout_rng, bool train) const;

  // Trie-constrained beam search; every returned id exists in the trie.
  std::vector<GenerationResult> generate(const std::vector<SemanticID>& history,
                                         const PrefixTrie& trie, int k,
                                         int beam_width = 0) const;

  std::string tag_path_of(const std::vector<int>& codes) const;

  int max_enc_positions() const { return max_enc_pos_; }

 private:
  struct EncLayer {
    nn::LayerNormParams ln1;
    nn::Linear wq, wk, wv, wo;
    nn::LayerNormParams ln2;
    nn::Linear ffn1, ffn2;
  };
  struct DecLayer {
    nn::LayerNormParams ln1;
    nn::Linear sq, sk, sv, so;  // causal self-attention
    nn::LayerNormParams ln2;
    nn::Linear cq, ck, cv, co;  // cross-attention
    nn::LayerNormParams ln3;
    nn::Linear ffn1, ffn2;
  };

  nn::Var embed_tokens(nn::Tape& t, const std::vector<nn::Var>& pv,
                       const std::vector<int>& tokens, int pos_table,
                       int pos_offset) const;
  nn::Var multihead(nn::Tape& t, const std::vector<nn::Var>& pv, nn::Var q_in,
                    nn::Var kv_in, const nn::Linear& wq, const nn::Linear& wk,
                    const nn::Linear& wv, const nn::Linear& wo, int batch, int tq,
                    int tkv, const std::vector<int>& q_len,
                    const std::vector<int>& kv_len, bool causal) const;
  nn::Var encode_batch(nn::Tape& t, const std::vector<nn::Var>& pv,
                       const std::vector<std::vector<int>>& enc_tokens, int* t_enc,
                       std::vector<int>* enc_len, Rng* dropout_rng, bool train) const;
  nn::Var decode_batch(nn::Tape& t, const std::vector<nn::Var>& pv, nn::Var memory,
                       int t_enc, const std::vector<int>& enc_len,
                       const std::vector<std::vector<int>>& dec_tokens,
                       Rng* dropout_rng, bool train) const;

  RecConfig cfg_;
  TokenVocab vocab_;
  Mat tag_text_;  // frozen, rows per flat token
  std::vector<std::vector<int>> code_tag_map_;
  std::vector<std::vector<std::string>> tag_names_;
  nn::ParamStore params_;
  int id_table_ = -1;
  int type_table_ = -1;
  nn::Linear fusion_;
  int pos_enc_ = -1;
  int pos_dec_ = -1;
  std::vector<EncLayer> enc_layers_;
  std::vector<DecLayer> dec_layers_;
  nn::LayerNormParams enc_final_ln_;
  nn::LayerNormParams dec_final_ln_;
  nn::Linear head_;
  int max_enc_pos_ = 0;

  friend void save_rec_model(const RecModel&, const std::string&);
};

struct Stage2Sample {
  std::vector<std::string> history;  // item ids, chronological
  std::string target;
};

// Training samples: every train-split prefix of length >= 1 predicts the
// next train item. Validation pairs use the full train prefix.
std::vector<Stage2Sample> make_training_samples(const InteractionLog& log);
std::vector<Stage2Sample> make_validation_samples(const InteractionLog& log);
// Test-time history is train + valid, target is the held-out last item.
std::vector<Stage2Sample> make_test_samples(const InteractionLog& log);

struct Stage2EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
};

struct TrainStage2Result {
  bool aborted = false;
  int epochs_run = 0;
  std::vector<Stage2EpochLog> log;
};

TrainStage2Result train_stage2(RecModel& model,
                               const std::map<std::string, SemanticID>& ids,
                               const InteractionLog& log, const std::string& out_dir);

// Top-k most frequent items across train prefixes; ties ascend by item_id.
std::vector<std::string> popularity_baseline(const InteractionLog& log, int k);

void save_rec_model(const RecModel& model, const std::string& dir);
RecModel load_rec_model(const std::string& dir);

}  // namespace hidvae
