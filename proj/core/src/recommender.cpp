#include "hidvae/recommender.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace hidvae {

using nlohmann::json;
using nn::Tape;
using nn::Var;

namespace {
constexpr double kNegInf = -1e30;
}

void RecConfig::validate() const {
  if (layers < 1 || heads < 1 || hidden < 1) {
    throw std::runtime_error("rec config: bad transformer dimensions");
  }
  if (hidden % heads != 0) {
    throw std::runtime_error("rec config: hidden must be divisible by heads");
  }
  if (max_history < 1) throw std::runtime_error("rec config: max_history must be >= 1");
  if (batch < 1 || epochs < 0) throw std::runtime_error("rec config: bad batch/epochs");
}

std::string RecConfig::to_json() const {
  nlohmann::ordered_json j;
  j["layers"] = layers;
  j["heads"] = heads;
  j["hidden"] = hidden;
  j["id_embed"] = id_embed;
  j["type_embed"] = type_embed;
  j["ffn_mult"] = ffn_mult;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["dropout"] = dropout;
  j["batch"] = batch;
  j["epochs"] = epochs;
  j["warmup_steps"] = warmup_steps;
  j["max_history"] = max_history;
  j["beam_width"] = beam_width;
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

RecConfig RecConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  RecConfig c;
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j[k].get<std::decay_t<decltype(field)>>();
  };
  get("layers", c.layers);
  get("heads", c.heads);
  get("hidden", c.hidden);
  get("id_embed", c.id_embed);
  get("type_embed", c.type_embed);
  get("ffn_mult", c.ffn_mult);
  get("lr", c.lr);
  get("weight_decay", c.weight_decay);
  get("dropout", c.dropout);
  get("batch", c.batch);
  get("epochs", c.epochs);
  get("warmup_steps", c.warmup_steps);
  get("max_history", c.max_history);
  get("beam_width", c.beam_width);
  get("seed", c.seed);
  c.validate();
  return c;
}

TokenVocab TokenVocab::from_ids(const std::map<std::string, SemanticID>& ids,
                                bool with_suffix) {
  if (ids.empty()) throw std::runtime_error("token vocab: empty id map");
  TokenVocab v;
  v.levels = static_cast<int>(ids.begin()->second.codes.size());
  v.K.assign(static_cast<size_t>(v.levels), 1);
  int max_suffix = 0;
  for (const auto& [id, sid] : ids) {
    if (static_cast<int>(sid.codes.size()) != v.levels) {
      throw std::runtime_error("token vocab: ragged code lengths");
    }
    for (int l = 0; l < v.levels; ++l) {
      v.K[static_cast<size_t>(l)] =
          std::max(v.K[static_cast<size_t>(l)], sid.codes[static_cast<size_t>(l)] + 1);
    }
    max_suffix = std::max(max_suffix, sid.suffix);
  }
  v.suffix_count = with_suffix ? max_suffix + 1 : 0;
  return v;
}

int TokenVocab::level_offset(int level) const {
  int off = kSpecials;
  for (int l = 0; l < level; ++l) off += K[static_cast<size_t>(l)];
  return off;
}

int TokenVocab::flat(int level, int code) const {
  if (level < 0 || level > levels || (level == levels && suffix_count == 0)) {
    throw std::out_of_range("token vocab: bad level");
  }
  const int width = level == levels ? suffix_count : K[static_cast<size_t>(level)];
  if (code < 0 || code >= width) throw std::out_of_range("token vocab: bad code");
  return level_offset(level) + code;
}

std::pair<int, int> TokenVocab::unflat(int flat_token) const {
  if (flat_token < kSpecials || flat_token >= size()) {
    throw std::out_of_range("token vocab: flat token outside code space");
  }
  int off = kSpecials;
  for (int l = 0; l < levels; ++l) {
    if (flat_token < off + K[static_cast<size_t>(l)]) return {l, flat_token - off};
    off += K[static_cast<size_t>(l)];
  }
  return {levels, flat_token - off};
}

int TokenVocab::size() const { return level_offset(levels) + suffix_count; }

std::pair<int, int> TokenVocab::position_range(int pos) const {
  if (pos < 0 || pos >= positions()) throw std::out_of_range("token vocab: bad position");
  const int from = level_offset(pos);
  const int width = pos == levels ? suffix_count : K[static_cast<size_t>(pos)];
  return {from, from + width};
}

int TokenVocab::type_of(int flat_token) const {
  if (flat_token < kSpecials) return levels + 1;
  return unflat(flat_token).first;
}

PrefixTrie PrefixTrie::build(const std::map<std::string, SemanticID>& ids,
                             bool with_suffix) {
  if (ids.empty()) throw std::runtime_error("trie: empty id map");
  PrefixTrie trie;
  for (const auto& [id, sid] : ids) {
    std::vector<int> path = sid.codes;
    if (with_suffix) path.push_back(sid.suffix);
    trie.depth_ = static_cast<int>(path.size());
    int cur = 0;
    for (int code : path) {
      auto it = trie.nodes_[static_cast<size_t>(cur)].children.find(code);
      if (it == trie.nodes_[static_cast<size_t>(cur)].children.end()) {
        trie.nodes_.push_back(Node{});
        const int next = static_cast<int>(trie.nodes_.size()) - 1;
        trie.nodes_[static_cast<size_t>(cur)].children.emplace(code, next);
        cur = next;
      } else {
        cur = it->second;
      }
    }
    trie.nodes_[static_cast<size_t>(cur)].items.push_back(id);
    ++trie.item_count_;
  }
  return trie;
}

int PrefixTrie::child(int idx, int code) const {
  const auto& ch = nodes_[static_cast<size_t>(idx)].children;
  auto it = ch.find(code);
  return it == ch.end() ? -1 : it->second;
}

int PrefixTrie::resolve(const std::vector<int>& prefix) const {
  int cur = 0;
  for (int code : prefix) {
    cur = child(cur, code);
    if (cur < 0) {
      throw std::runtime_error("trie: prefix is not a valid node (generation bug)");
    }
  }
  return cur;
}

std::vector<int> PrefixTrie::allowed(int idx) const {
  std::vector<int> codes;
  for (const auto& [code, next] : nodes_[static_cast<size_t>(idx)].children) {
    codes.push_back(code);
  }
  return codes;
}

Eigen::RowVectorXd mask_logits(const Eigen::RowVectorXd& logits,
                               const PrefixTrie& trie, const std::vector<int>& prefix,
                               const TokenVocab& vocab) {
  const int node = trie.resolve(prefix);
  const std::vector<int> codes = trie.allowed(node);
  if (codes.empty()) {
    throw std::runtime_error("mask_logits: prefix has no continuations");
  }
  const int level = static_cast<int>(prefix.size());
  Eigen::RowVectorXd masked = Eigen::RowVectorXd::Constant(logits.cols(), kNegInf);
  for (int code : codes) {
    const int f = vocab.flat(level, code);
    masked(f) = logits(f);
  }
  return masked;
}

std::vector<std::vector<int>> build_code_tag_map(
    const std::map<std::string, SemanticID>& ids, const Catalog& catalog,
    const TokenVocab& vocab) {
  std::vector<std::vector<int>> map(static_cast<size_t>(vocab.levels));
  for (int l = 0; l < vocab.levels; ++l) {
    map[static_cast<size_t>(l)].assign(static_cast<size_t>(vocab.K[static_cast<size_t>(l)]), -1);
  }
  // counts[l][code][tag] -> votes
  std::vector<std::map<int, std::map<int, int>>> counts(static_cast<size_t>(vocab.levels));
  for (const auto& [id, sid] : ids) {
    auto it = catalog.find(id);
    if (it == catalog.end() || static_cast<int>(it->second.tags.size()) != vocab.levels) {
      continue;
    }
    for (int l = 0; l < vocab.levels; ++l) {
      ++counts[static_cast<size_t>(l)][sid.codes[static_cast<size_t>(l)]]
              [it->second.tags[static_cast<size_t>(l)]];
    }
  }
  for (int l = 0; l < vocab.levels; ++l) {
    for (const auto& [code, votes] : counts[static_cast<size_t>(l)]) {
      int best_tag = -1, best_n = 0;
      for (const auto& [tag, n] : votes) {
        if (n > best_n) {  // map iteration is tag-ascending, so ties keep the lowest
          best_n = n;
          best_tag = tag;
        }
      }
      map[static_cast<size_t>(l)][static_cast<size_t>(code)] = best_tag;
    }
  }
  return map;
}

RecModel::RecModel(RecConfig cfg, TokenVocab vocab, Mat tag_text,
                   std::vector<std::vector<int>> code_tag_map,
                   std::vector<std::vector<std::string>> tag_names)
    : cfg_(std::move(cfg)),
      vocab_(std::move(vocab)),
      tag_text_(std::move(tag_text)),
      code_tag_map_(std::move(code_tag_map)),
      tag_names_(std::move(tag_names)) {
  cfg_.validate();
  if (tag_text_.rows() != vocab_.size()) {
    throw std::runtime_error("rec model: tag_text rows must match vocab size");
  }
  Rng rng(cfg_.seed);
  const int V = vocab_.size();
  const int fused_in = cfg_.id_embed + cfg_.type_embed + static_cast<int>(tag_text_.cols());
  max_enc_pos_ = cfg_.max_history * vocab_.positions() + 2;

  id_table_ = params_.add("embed.id", 0.02 * nn::glorot(V, cfg_.id_embed, rng), false);
  type_table_ =
      params_.add("embed.type", 0.02 * nn::glorot(vocab_.type_rows(), cfg_.type_embed, rng), false);
  fusion_ = nn::Linear::create(params_, "embed.fusion", fused_in, cfg_.hidden, rng);
  pos_enc_ = params_.add("embed.pos_enc", 0.02 * nn::glorot(max_enc_pos_, cfg_.hidden, rng), false);
  pos_dec_ = params_.add("embed.pos_dec",
                         0.02 * nn::glorot(vocab_.positions() + 1, cfg_.hidden, rng), false);

  const int ffn = cfg_.ffn_mult * cfg_.hidden;
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string base = "enc." + std::to_string(l);
    EncLayer e;
    e.ln1 = nn::LayerNormParams::create(params_, base + ".ln1", cfg_.hidden);
    e.wq = nn::Linear::create(params_, base + ".wq", cfg_.hidden, cfg_.hidden, rng);
    e.wk = nn::Linear::create(params_, base + ".wk", cfg_.hidden, cfg_.hidden, rng);
    e.wv = nn::Linear::create(params_, base + ".wv", cfg_.hidden, cfg_.hidden, rng);
    e.wo = nn::Linear::create(params_, base + ".wo", cfg_.hidden, cfg_.hidden, rng);
    e.ln2 = nn::LayerNormParams::create(params_, base + ".ln2", cfg_.hidden);
    e.ffn1 = nn::Linear::create(params_, base + ".ffn1", cfg_.hidden, ffn, rng);
    e.ffn2 = nn::Linear::create(params_, base + ".ffn2", ffn, cfg_.hidden, rng);
    enc_layers_.push_back(e);

    const std::string dbase = "dec." + std::to_string(l);
    DecLayer d;
    d.ln1 = nn::LayerNormParams::create(params_, dbase + ".ln1", cfg_.hidden);
    d.sq = nn::Linear::create(params_, dbase + ".sq", cfg_.hidden, cfg_.hidden, rng);
    d.sk = nn::Linear::create(params_, dbase + ".sk", cfg_.hidden, cfg_.hidden, rng);
    d.sv = nn::Linear::create(params_, dbase + ".sv", cfg_.hidden, cfg_.hidden, rng);
    d.so = nn::Linear::create(params_, dbase + ".so", cfg_.hidden, cfg_.hidden, rng);
    d.ln2 = nn::LayerNormParams::create(params_, dbase + ".ln2", cfg_.hidden);
    d.cq = nn::Linear::create(params_, dbase + ".cq", cfg_.hidden, cfg_.hidden, rng);
    d.ck = nn::Linear::create(params_, dbase + ".ck", cfg_.hidden, cfg_.hidden, rng);
    d.cv = nn::Linear::create(params_, dbase + ".cv", cfg_.hidden, cfg_.hidden, rng);
    d.co = nn::Linear::create(params_, dbase + ".co", cfg_.hidden, cfg_.hidden, rng);
    d.ln3 = nn::LayerNormParams::create(params_, dbase + ".ln3", cfg_.hidden);
    d.ffn1 = nn::Linear::create(params_, dbase + ".ffn1", cfg_.hidden, ffn, rng);
    d.ffn2 = nn::Linear::create(params_, dbase + ".ffn2", ffn, cfg_.hidden, rng);
    dec_layers_.push_back(d);
  }
  enc_final_ln_ = nn::LayerNormParams::create(params_, "enc.final_ln", cfg_.hidden);
  dec_final_ln_ = nn::LayerNormParams::create(params_, "dec.final_ln", cfg_.hidden);
  head_ = nn::Linear::create(params_, "head", cfg_.hidden, V, rng);
}

std::vector<int> RecModel::item_tokens(const SemanticID& id) const {
  std::vector<int> toks;
  for (int l = 0; l < vocab_.levels; ++l) {
    toks.push_back(vocab_.flat(l, id.codes[static_cast<size_t>(l)]));
  }
  if (vocab_.suffix_count > 0) toks.push_back(vocab_.flat(vocab_.levels, id.suffix));
  return toks;
}

std::vector<int> RecModel::encoder_tokens(const std::vector<SemanticID>& history) const {
  std::vector<int> toks{TokenVocab::kBos};
  const size_t start = history.size() > static_cast<size_t>(cfg_.max_history)
                           ? history.size() - static_cast<size_t>(cfg_.max_history)
                           : 0;
  for (size_t i = start; i < history.size(); ++i) {
    for (int tk : item_tokens(history[i])) toks.push_back(tk);
  }
  toks.push_back(TokenVocab::kEos);
  return toks;
}

nn::Var RecModel::embed_tokens(Tape& t, const std::vector<Var>& pv,
                               const std::vector<int>& tokens, int pos_table,
                               int pos_offset) const {
  std::vector<int> types, positions;
  types.reserve(tokens.size());
  positions.reserve(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    types.push_back(vocab_.type_of(tokens[i]));
    positions.push_back(pos_offset + static_cast<int>(i));
  }
  Var ide = t.gather_rows(pv[static_cast<size_t>(id_table_)], tokens);
  Var tye = t.gather_rows(pv[static_cast<size_t>(type_table_)], types);
  Var tag = t.gather_rows(t.constant(tag_text_), tokens);
  Var fused = fusion_.apply(t, pv, t.concat_cols(t.concat_cols(ide, tye), tag));
  Var pos = t.gather_rows(pv[static_cast<size_t>(pos_table)], positions);
  return t.add(fused, pos);
}

nn::Var RecModel::multihead(Tape& t, const std::vector<Var>& pv, Var q_in, Var kv_in,
                            const nn::Linear& wq, const nn::Linear& wk,
                            const nn::Linear& wv, const nn::Linear& wo, int batch,
                            int tq, int tkv, const std::vector<int>& q_len,
                            const std::vector<int>& kv_len, bool causal) const {
  Var q = wq.apply(t, pv, q_in);
  Var k = wk.apply(t, pv, kv_in);
  Var v = wv.apply(t, pv, kv_in);
  const int dh = cfg_.hidden / cfg_.heads;
  Var merged;
  for (int h = 0; h < cfg_.heads; ++h) {
    Var qh = t.slice_cols(q, h * dh, dh);
    Var kh = t.slice_cols(k, h * dh, dh);
    Var vh = t.slice_cols(v, h * dh, dh);
    Var oh = t.attention(qh, kh, vh, batch, tq, tkv, q_len, kv_len, causal);
    merged = h == 0 ? oh : t.concat_cols(merged, oh);
  }
  return wo.apply(t, pv, merged);
}

nn::Var RecModel::encode_batch(Tape& t, const std::vector<Var>& pv,
                               const std::vector<std::vector<int>>& enc_tokens,
                               int* t_enc, std::vector<int>* enc_len, Rng* dropout_rng,
                               bool train) const {
  const int B = static_cast<int>(enc_tokens.size());
  int T = 0;
  for (const auto& s : enc_tokens) T = std::max(T, static_cast<int>(s.size()));
  std::vector<int> flat;
  flat.reserve(static_cast<size_t>(B) * static_cast<size_t>(T));
  std::vector<int> lens;
  for (const auto& s : enc_tokens) {
    lens.push_back(static_cast<int>(s.size()));
    for (size_t i = 0; i < static_cast<size_t>(T); ++i) {
      flat.push_back(i < s.size() ? s[i] : TokenVocab::kPad);
    }
  }
  // Positions restart per sequence: embed row (b, i) gets position i.
  Var x;
  {
    std::vector<int> types, positions;
    types.reserve(flat.size());
    positions.reserve(flat.size());
    for (int b = 0; b < B; ++b) {
      for (int i = 0; i < T; ++i) {
        types.push_back(vocab_.type_of(flat[static_cast<size_t>(b * T + i)]));
        positions.push_back(i);
      }
    }
    Var ide = t.gather_rows(pv[static_cast<size_t>(id_table_)], flat);
    Var tye = t.gather_rows(pv[static_cast<size_t>(type_table_)], types);
    Var tag = t.gather_rows(t.constant(tag_text_), flat);
    Var fused = fusion_.apply(t, pv, t.concat_cols(t.concat_cols(ide, tye), tag));
    Var pos = t.gather_rows(pv[static_cast<size_t>(pos_enc_)], positions);
    x = t.add(fused, pos);
  }
  static Rng dummy(0);
  Rng& drng = dropout_rng ? *dropout_rng : dummy;
  const bool drop_on = train && dropout_rng != nullptr;
  x = t.dropout(x, cfg_.dropout, drng, drop_on);
  std::vector<int> full(static_cast<size_t>(B), T);
  for (const EncLayer& layer : enc_layers_) {
    Var h = layer.ln1.apply(t, pv, x);
    Var att = multihead(t, pv, h, h, layer.wq, layer.wk, layer.wv, layer.wo, B, T, T,
                        lens, lens, false);
    att = t.dropout(att, cfg_.dropout, drng, drop_on);
    x = t.add(x, att);
    Var f = layer.ln2.apply(t, pv, x);
    f = layer.ffn2.apply(t, pv, t.gelu(layer.ffn1.apply(t, pv, f)));
    f = t.dropout(f, cfg_.dropout, drng, drop_on);
    x = t.add(x, f);
  }
  x = enc_final_ln_.apply(t, pv, x);
  *t_enc = T;
  *enc_len = lens;
  return x;
}

nn::Var RecModel::decode_batch(Tape& t, const std::vector<Var>& pv, Var memory,
                               int t_enc, const std::vector<int>& enc_len,
                               const std::vector<std::vector<int>>& dec_tokens,
                               Rng* dropout_rng, bool train) const {
  const int B = static_cast<int>(dec_tokens.size());
  const int P = static_cast<int>(dec_tokens[0].size());
  std::vector<int> flat;
  flat.reserve(static_cast<size_t>(B * P));
  for (const auto& s : dec_tokens) {
    if (static_cast<int>(s.size()) != P) {
      throw std::invalid_argument("decode_batch: ragged decoder inputs");
    }
    for (int tk : s) flat.push_back(tk);
  }
  Var x;
  {
    std::vector<int> types, positions;
    for (int b = 0; b < B; ++b) {
      for (int i = 0; i < P; ++i) {
        types.push_back(vocab_.type_of(flat[static_cast<size_t>(b * P + i)]));
        positions.push_back(i);
      }
    }
    Var ide = t.gather_rows(pv[static_cast<size_t>(id_table_)], flat);
    Var tye = t.gather_rows(pv[static_cast<size_t>(type_table_)], types);
    Var tag = t.gather_rows(t.constant(tag_text_), flat);
    Var fused = fusion_.apply(t, pv, t.concat_cols(t.concat_cols(ide, tye), tag));
    Var pos = t.gather_rows(pv[static_cast<size_t>(pos_dec_)], positions);
    x = t.add(fused, pos);
  }
  static Rng dummy(0);
  Rng& drng = dropout_rng ? *dropout_rng : dummy;
  const bool drop_on = train && dropout_rng != nullptr;
  x = t.dropout(x, cfg_.dropout, drng, drop_on);
  std::vector<int> plen(static_cast<size_t>(B), P);
  for (const DecLayer& layer : dec_layers_) {
    Var h = layer.ln1.apply(t, pv, x);
    Var att = multihead(t, pv, h, h, layer.sq, layer.sk, layer.sv, layer.so, B, P, P,
                        plen, plen, true);
    att = t.dropout(att, cfg_.dropout, drng, drop_on);
    x = t.add(x, att);
    Var c = layer.ln2.apply(t, pv, x);
    Var cross = multihead(t, pv, c, memory, layer.cq, layer.ck, layer.cv, layer.co, B,
                          P, t_enc, plen, enc_len, false);
    cross = t.dropout(cross, cfg_.dropout, drng, drop_on);
    x = t.add(x, cross);
    Var f = layer.ln3.apply(t, pv, x);
    f = layer.ffn2.apply(t, pv, t.gelu(layer.ffn1.apply(t, pv, f)));
    f = t.dropout(f, cfg_.dropout, drng, drop_on);
    x = t.add(x, f);
  }
  x = dec_final_ln_.apply(t, pv, x);
  return head_.apply(t, pv, x);
}

Mat RecModel::embed_history_values(const std::vector<SemanticID>& history) const {
  Tape t;
  auto pv = params_.feed(t, false);
  return t.val(embed_tokens(t, pv, encoder_tokens(history), pos_enc_, 0));
}

nn::Var RecModel::build_batch_loss(Tape& t, const std::vector<Var>& pv,
                                   const std::vector<std::vector<int>>& enc_tokens,
                                   const std::vector<std::vector<int>>& targets,
                                   Rng* dropout_rng, bool train) const {
  const int B = static_cast<int>(enc_tokens.size());
  const int P = vocab_.positions();
  int t_enc = 0;
  std::vector<int> enc_len;
  Var memory = encode_batch(t, pv, enc_tokens, &t_enc, &enc_len, dropout_rng, train);

  std::vector<std::vector<int>> dec_in(static_cast<size_t>(B));
  std::vector<int> labels;
  std::vector<std::pair<int, int>> ranges;
  for (int b = 0; b < B; ++b) {
    const auto& tgt = targets[static_cast<size_t>(b)];
    if (static_cast<int>(tgt.size()) != P) {
      throw std::invalid_argument("build_batch_loss: target length mismatch");
    }
    auto& di = dec_in[static_cast<size_t>(b)];
    di.push_back(TokenVocab::kBos);
    for (int p = 0; p + 1 < P; ++p) di.push_back(tgt[static_cast<size_t>(p)]);
    for (int p = 0; p < P; ++p) {
      labels.push_back(tgt[static_cast<size_t>(p)]);
      ranges.push_back(vocab_.position_range(p));
    }
  }
  Var logits = decode_batch(t, pv, memory, t_enc, enc_len, dec_in, dropout_rng, train);
  return t.mean_all(t.softmax_cross_entropy_rows(logits, labels, 0.0, ranges));
}

std::vector<GenerationResult> RecModel::generate(const std::vector<SemanticID>& history,
                                                 const PrefixTrie& trie, int k,
                                                 int beam_width) const {
  if (k < 1) throw std::invalid_argument("generate: k must be >= 1");
  if (trie.node_count() <= 1) throw std::runtime_error("generate: empty trie");
  int width = beam_width > 0 ? beam_width : (cfg_.beam_width > 0 ? cfg_.beam_width : 2 * k);
  width = std::max(width, k);
  const int P = vocab_.positions();
  if (trie.depth() != P) {
    throw std::runtime_error("generate: trie depth does not match vocab positions");
  }

  // Encoder memory once; beams share it by row replication.
  Mat memory_vals;
  std::vector<int> enc_len1;
  int t_enc = 0;
  {
    Tape t;
    auto pv = params_.feed(t, false);
    std::vector<int> lens;
    Var mem = encode_batch(t, pv, {encoder_tokens(history)}, &t_enc, &lens, nullptr, false);
    memory_vals = t.val(mem);
    enc_len1 = lens;
  }

  struct Beam {
    std::vector<int> codes;  // trie path so far
    int node = 0;
    double logprob = 0.0;
  };
  std::vector<Beam> beams{Beam{}};

  for (int p = 0; p < P; ++p) {
    const int B = static_cast<int>(beams.size());
    std::vector<std::vector<int>> dec_in(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      auto& di = dec_in[static_cast<size_t>(b)];
      di.push_back(TokenVocab::kBos);
      for (int q = 0; q < p; ++q) {
        di.push_back(vocab_.flat(q, beams[static_cast<size_t>(b)].codes[static_cast<size_t>(q)]));
      }
    }
    Mat mem_rep(static_cast<Eigen::Index>(B) * t_enc, memory_vals.cols());
    std::vector<int> enc_len(static_cast<size_t>(B), enc_len1[0]);
    for (int b = 0; b < B; ++b) {
      mem_rep.middleRows(static_cast<Eigen::Index>(b) * t_enc, t_enc) = memory_vals;
    }
    Tape t;
    auto pv = params_.feed(t, false);
    Var logits = decode_batch(t, pv, t.constant(mem_rep), t_enc, enc_len, dec_in,
                              nullptr, false);
    const Mat& lv = t.val(logits);

    struct Cand {
      double score;
      int flat_token;
      int beam;
      int code;
      int node;
    };
    std::vector<Cand> cands;
    for (int b = 0; b < B; ++b) {
      const Beam& beam = beams[static_cast<size_t>(b)];
      const Eigen::RowVectorXd row = lv.row(static_cast<Eigen::Index>(b) * (p + 1) + p);
      const std::vector<int> codes = trie.allowed(beam.node);
      // Log-softmax over the trie-allowed tokens only.
      double m = kNegInf;
      for (int code : codes) m = std::max(m, row(vocab_.flat(p, code)));
      double denom = 0.0;
      for (int code : codes) denom += std::exp(row(vocab_.flat(p, code)) - m);
      const double lse = m + std::log(denom);
      for (int code : codes) {
        const int f = vocab_.flat(p, code);
        cands.push_back(Cand{beam.logprob + row(f) - lse, f, b, code,
                             trie.child(beam.node, code)});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.flat_token != b.flat_token) return a.flat_token < b.flat_token;
      return a.beam < b.beam;
    });
    std::vector<Beam> next;
    for (const Cand& c : cands) {
      if (static_cast<int>(next.size()) >= width) break;
      Beam nb = beams[static_cast<size_t>(c.beam)];
      nb.codes.push_back(c.code);
      nb.node = c.node;
      nb.logprob = c.score;
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }

  std::vector<GenerationResult> out;
  for (const Beam& beam : beams) {
    const auto& leaf = trie.node(beam.node);
    for (const std::string& id : leaf.items) {
      if (static_cast<int>(out.size()) >= k) return out;
      GenerationResult r;
      r.item_id = id;
      r.logprob = beam.logprob;
      std::vector<int> code_part(beam.codes.begin(),
                                 beam.codes.begin() + vocab_.levels);
      r.tag_path = tag_path_of(code_part);
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::string RecModel::tag_path_of(const std::vector<int>& codes) const {
  std::string path;
  for (int l = 0; l < vocab_.levels && l < static_cast<int>(codes.size()); ++l) {
    if (l) path += " -> ";
    const int tag = code_tag_map_[static_cast<size_t>(l)][static_cast<size_t>(codes[static_cast<size_t>(l)])];
    path += tag >= 0 ? tag_names_[static_cast<size_t>(l)][static_cast<size_t>(tag)] : "?";
  }
  return path;
}

std::vector<Stage2Sample> make_training_samples(const InteractionLog& log) {
  if (!log.has_split()) throw std::runtime_error("stage2: log has no split");
  std::vector<Stage2Sample> samples;
  for (const std::string& u : log.users) {
    const auto& s = log.seq.at(u);
    const int n_train = log.split.at(u).n_train;
    for (int t = 1; t < n_train; ++t) {
      Stage2Sample sm;
      sm.history.assign(s.begin(), s.begin() + t);
      sm.target = s[static_cast<size_t>(t)];
      samples.push_back(std::move(sm));
    }
  }
  return samples;
}

std::vector<Stage2Sample> make_validation_samples(const InteractionLog& log) {
  if (!log.has_split()) throw std::runtime_error("stage2: log has no split");
  std::vector<Stage2Sample> samples;
  for (const std::string& u : log.users) {
    const auto& s = log.seq.at(u);
    const int n_train = log.split.at(u).n_train;
    Stage2Sample sm;
    sm.history.assign(s.begin(), s.begin() + n_train);
    sm.target = s[static_cast<size_t>(n_train)];
    samples.push_back(std::move(sm));
  }
  return samples;
}

std::vector<Stage2Sample> make_test_samples(const InteractionLog& log) {
  if (!log.has_split()) throw std::runtime_error("stage2: log has no split");
  std::vector<Stage2Sample> samples;
  for (const std::string& u : log.users) {
    const auto& s = log.seq.at(u);
    const int n_train = log.split.at(u).n_train;
    Stage2Sample sm;
    // Validation item joins the history when predicting the test item.
    sm.history.assign(s.begin(), s.begin() + n_train + 1);
    sm.target = s.back();
    samples.push_back(std::move(sm));
  }
  return samples;
}

namespace {

std::vector<SemanticID> to_ids(const std::vector<std::string>& items,
                               const std::map<std::string, SemanticID>& ids) {
  std::vector<SemanticID> out;
  out.reserve(items.size());
  for (const std::string& id : items) {
    auto it = ids.find(id);
    if (it == ids.end()) throw std::runtime_error("stage2: item '" + id + "' has no semantic id");
    out.push_back(it->second);
  }
  return out;
}

double run_batches(RecModel& model, const std::vector<Stage2Sample>& samples,
                   const std::map<std::string, SemanticID>& ids, int batch,
                   bool train, Rng* dropout_rng, double lr_base, int warmup,
                   long* step, bool* nan_hit) {
  double loss_sum = 0.0;
  size_t count = 0;
  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch)) {
    const size_t bsz = std::min(static_cast<size_t>(batch), samples.size() - start);
    std::vector<std::vector<int>> enc_tokens(bsz), targets(bsz);
    for (size_t i = 0; i < bsz; ++i) {
      const Stage2Sample& sm = samples[start + i];
      enc_tokens[i] = model.encoder_tokens(to_ids(sm.history, ids));
      targets[i] = model.item_tokens(ids.at(sm.target));
    }
    Tape t;
    auto pv = model.params().feed(t, train);
    Var loss = model.build_batch_loss(t, pv, enc_tokens, targets, dropout_rng, train);
    const double lv = t.val(loss)(0, 0);
    if (!std::isfinite(lv)) {
      if (nan_hit) *nan_hit = true;
      return loss_sum / std::max<size_t>(count, 1);
    }
    loss_sum += lv * static_cast<double>(bsz);
    count += bsz;
    if (train) {
      t.backward(loss);
      ++*step;
      const double warm = warmup > 0 ? std::min(1.0, static_cast<double>(*step) /
                                                         static_cast<double>(warmup))
                                     : 1.0;
      model.params().adamw_step(t, pv, lr_base * warm, 0.9, 0.999, 1e-8,
                                model.config().weight_decay, *step);
    }
  }
  return loss_sum / static_cast<double>(std::max<size_t>(count, 1));
}

}  // namespace

TrainStage2Result train_stage2(RecModel& model,
                               const std::map<std::string, SemanticID>& ids,
                               const InteractionLog& log, const std::string& out_dir) {
  const RecConfig& cfg = model.config();
  std::vector<Stage2Sample> train_samples = make_training_samples(log);
  std::vector<Stage2Sample> valid_samples = make_validation_samples(log);
  if (train_samples.empty()) throw std::runtime_error("stage2: no training samples");

  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  std::ofstream log_out;
  if (!out_dir.empty()) log_out.open(out_dir + "/training_log.jsonl", std::ios::trunc);

  Rng shuffle_rng = Rng(cfg.seed).fork(21);
  Rng dropout_rng = Rng(cfg.seed).fork(22);

  auto snapshot = [&]() {
    std::vector<Mat> vals;
    for (int i = 0; i < model.params().count(); ++i) vals.push_back(model.params().at(i).value);
    return vals;
  };
  auto restore = [&](const std::vector<Mat>& vals) {
    for (int i = 0; i < model.params().count(); ++i) model.params().at(i).value = vals[static_cast<size_t>(i)];
  };
  std::vector<Mat> last_good = snapshot();

  TrainStage2Result result;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(train_samples);
    bool nan_hit = false;
    const double train_loss =
        run_batches(model, train_samples, ids, cfg.batch, true, &dropout_rng, cfg.lr,
                    cfg.warmup_steps, &step, &nan_hit);
    if (nan_hit) {
      restore(last_good);
      result.aborted = true;
      break;
    }
    long dummy_step = 0;
    const double valid_loss = run_batches(model, valid_samples, ids, cfg.batch, false,
                                          nullptr, 0.0, 0, &dummy_step, nullptr);
    Stage2EpochLog el;
    el.epoch = epoch;
    el.train_loss = train_loss;
    el.valid_loss = valid_loss;
    result.log.push_back(el);
    result.epochs_run = epoch + 1;
    last_good = snapshot();
    if (log_out.is_open()) {
      nlohmann::ordered_json j;
      j["epoch"] = epoch;
      j["train_loss"] = train_loss;
      j["valid_loss"] = valid_loss;
      log_out << j.dump() << "\n";
      log_out.flush();
    }
  }
  if (!out_dir.empty()) save_rec_model(model, out_dir + "/final");
  return result;
}

std::vector<std::string> popularity_baseline(const InteractionLog& log, int k) {
  if (!log.has_split()) throw std::runtime_error("popularity_baseline: log has no split");
  std::map<std::string, int> counts;
  for (const std::string& u : log.users) {
    const auto& s = log.seq.at(u);
    const int n_train = log.split.at(u).n_train;
    for (int t = 0; t < n_train; ++t) ++counts[s[static_cast<size_t>(t)]];
  }
  if (counts.empty()) throw std::runtime_error("popularity_baseline: empty training split");
  std::vector<std::pair<std::string, int>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> out;
  for (const auto& [id, n] : ranked) {
    if (static_cast<int>(out.size()) >= k) break;
    out.push_back(id);
  }
  return out;
}

void save_rec_model(const RecModel& model, const std::string& dir) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["config"] = json::parse(model.config().to_json());
  meta["vocab"]["levels"] = model.vocab().levels;
  meta["vocab"]["K"] = model.vocab().K;
  meta["vocab"]["suffix_count"] = model.vocab().suffix_count;
  meta["code_tag_map"] = model.code_tag_map();
  meta["tag_names"] = model.tag_names_;
  write_text_file(dir + "/config.json", meta.dump(2) + "\n");
  nn::save_params_binary(model.params(), nullptr, dir + "/weights.bin",
                         dir + "/weights_manifest.json");
  // Frozen tag-text vectors ride along as their own blob.
  nn::ParamStore frozen;
  frozen.add("tag_text", model.tag_text(), false);
  nn::save_params_binary(frozen, nullptr, dir + "/tag_text.bin",
                         dir + "/tag_text_manifest.json");
}

RecModel load_rec_model(const std::string& dir) {
  json meta = json::parse(read_text_file(dir + "/config.json"));
  RecConfig cfg = RecConfig::from_json(meta["config"].dump());
  TokenVocab vocab;
  vocab.levels = meta["vocab"]["levels"].get<int>();
  vocab.K = meta["vocab"]["K"].get<std::vector<int>>();
  vocab.suffix_count = meta["vocab"]["suffix_count"].get<int>();
  nn::ParamStore frozen;
  json tt_manifest = json::parse(read_text_file(dir + "/tag_text_manifest.json"));
  frozen.add("tag_text",
             Mat::Zero(tt_manifest[0]["rows"].get<Eigen::Index>(),
                       tt_manifest[0]["cols"].get<Eigen::Index>()),
             false);
  nn::load_params_binary(frozen, dir + "/tag_text.bin", dir + "/tag_text_manifest.json");
  RecModel model(cfg, vocab, frozen.at(0).value,
                 meta["code_tag_map"].get<std::vector<std::vector<int>>>(),
                 meta["tag_names"].get<std::vector<std::vector<std::string>>>());
  nn::load_params_binary(model.params(), dir + "/weights.bin",
                         dir + "/weights_manifest.json");
  return model;
}

}  // namespace hidvae
