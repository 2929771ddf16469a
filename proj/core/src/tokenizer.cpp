#include "hidvae/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

namespace hidvae {

using nlohmann::json;
using nn::Tape;
using nn::Var;

void TokenizerConfig::validate() const {
  if (levels < 2) throw std::runtime_error("tokenizer config: levels must be >= 2");
  if (static_cast<int>(codebook_sizes.size()) != levels) {
    throw std::runtime_error("tokenizer config: K list length must equal levels");
  }
  for (int k : codebook_sizes) {
    if (k < 2) throw std::runtime_error("tokenizer config: all K must be >= 2");
  }
  if (tau <= 0.0) throw std::runtime_error("tokenizer config: tau must be positive");
  if (margin < 0.0 || margin > 1.0) {
    throw std::runtime_error("tokenizer config: margin must be in [0, 1]");
  }
  if (beta_commit < 0.0 || beta_sup < 0.0 || beta_unique < 0.0) {
    throw std::runtime_error("tokenizer config: beta weights must be non-negative");
  }
  if (d_in < 1 || d < 1 || hidden < 1 || batch < 1 || epochs < 0) {
    throw std::runtime_error("tokenizer config: bad dimensions");
  }
}

std::string TokenizerConfig::to_json() const {
  nlohmann::ordered_json j;
  j["d_in"] = d_in;
  j["d"] = d;
  j["hidden"] = hidden;
  j["levels"] = levels;
  j["codebook_sizes"] = codebook_sizes;
  j["beta_commit"] = beta_commit;
  j["beta_sup"] = beta_sup;
  j["beta_unique"] = beta_unique;
  j["tau"] = tau;
  j["margin"] = margin;
  j["focal_gamma"] = focal_gamma;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["batch"] = batch;
  j["epochs"] = epochs;
  j["kmeans_iters"] = kmeans_iters;
  j["dropout_base"] = dropout_base;
  j["dropout_step"] = dropout_step;
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

TokenizerConfig TokenizerConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  TokenizerConfig c;
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j[k].get<std::decay_t<decltype(field)>>();
  };
  get("d_in", c.d_in);
  get("d", c.d);
  get("hidden", c.hidden);
  get("levels", c.levels);
  get("codebook_sizes", c.codebook_sizes);
  get("beta_commit", c.beta_commit);
  get("beta_sup", c.beta_sup);
  get("beta_unique", c.beta_unique);
  get("tau", c.tau);
  get("margin", c.margin);
  get("focal_gamma", c.focal_gamma);
  get("lr", c.lr);
  get("weight_decay", c.weight_decay);
  get("batch", c.batch);
  get("epochs", c.epochs);
  get("kmeans_iters", c.kmeans_iters);
  get("dropout_base", c.dropout_base);
  get("dropout_step", c.dropout_step);
  get("seed", c.seed);
  c.validate();
  return c;
}

CollisionMode collision_mode_from_string(const std::string& s) {
  if (s == "report") return CollisionMode::kReport;
  if (s == "tiger-append") return CollisionMode::kTigerAppend;
  throw std::invalid_argument("unknown collision mode: " + s);
}

std::string to_string(CollisionMode m) {
  return m == CollisionMode::kReport ? "report" : "tiger-append";
}

std::pair<int, Vec> quantize_nearest(const Vec& r, const Mat& codebook) {
  if (codebook.rows() == 0) throw std::runtime_error("quantize: empty codebook");
  if (r.size() != codebook.cols()) {
    throw std::invalid_argument("quantize: dimension mismatch");
  }
  int best = 0;
  double best_d = (codebook.row(0).transpose() - r).squaredNorm();
  for (Eigen::Index j = 1; j < codebook.rows(); ++j) {
    const double dist = (codebook.row(j).transpose() - r).squaredNorm();
    if (dist < best_d) {  // strict: ties keep the lowest index
      best_d = dist;
      best = static_cast<int>(j);
    }
  }
  return {best, codebook.row(best).transpose()};
}

QuantizationTrace quantize_residual_chain(const Vec& z0,
                                          const std::vector<Mat>& codebooks) {
  QuantizationTrace tr;
  tr.z0 = z0;
  Vec r = z0;
  Vec sum = Vec::Zero(z0.size());
  Eigen::VectorXd cat(0);
  for (const Mat& cb : codebooks) {
    auto [idx, e] = quantize_nearest(r, cb);
    tr.codes.push_back(idx);
    tr.codewords.push_back(e);
    r = r - e;
    tr.residuals.push_back(r);
    sum += e;
    tr.zq_sum.push_back(sum);
    Vec next_cat(cat.size() + e.size());
    next_cat << cat, e;
    cat = next_cat;
    tr.zq_cat.push_back(cat);
  }
  return tr;
}

double recon_loss(const Mat& x, const Mat& x_hat) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) {
    throw std::invalid_argument("recon_loss: shape mismatch");
  }
  return (x - x_hat).rowwise().squaredNorm().mean();
}

double commitment_loss(const std::vector<Mat>& residual_in,
                       const std::vector<Mat>& codeword) {
  if (residual_in.size() != codeword.size()) {
    throw std::invalid_argument("commitment_loss: stage count mismatch");
  }
  double total = 0.0;
  for (size_t l = 0; l < residual_in.size(); ++l) {
    total += (residual_in[l] - codeword[l]).rowwise().squaredNorm().mean();
  }
  return total;
}

namespace {

double cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  return a.dot(b) / std::max(a.norm() * b.norm(), 1e-8);
}

}  // namespace

Mat project_tags(const Mat& tag_embed_rows, const Mat& projector_w) {
  Mat p = tag_embed_rows * projector_w;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    p.row(i) /= std::max(p.row(i).norm(), 1e-8);
  }
  return p;
}

double tag_alignment_loss(const Mat& zq, const Mat& projected_tags, double tau) {
  if (zq.rows() != projected_tags.rows()) {
    throw std::invalid_argument("tag_alignment_loss: batch mismatch");
  }
  const Eigen::Index B = zq.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    Eigen::VectorXd sims(B);
    for (Eigen::Index j = 0; j < B; ++j) {
      sims(j) = cosine(zq.row(i), projected_tags.row(j)) / tau;
    }
    const double m = sims.maxCoeff();
    const double lse = m + std::log((sims.array() - m).exp().sum());
    total += -(sims(i) - lse);
  }
  return total / static_cast<double>(B);
}

double tag_prediction_loss(const Mat& logits, const std::vector<int>& labels,
                           double focal_gamma) {
  if (logits.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw std::invalid_argument("tag_prediction_loss: batch mismatch");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int label = labels[static_cast<size_t>(i)];
    if (label < 0 || label >= logits.cols()) {
      throw std::out_of_range("tag_prediction_loss: label out of range");
    }
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    const double ce = -(logits(i, label) - lse);
    if (focal_gamma > 0.0) {
      const double pt = std::exp(logits(i, label) - lse);
      total += std::pow(1.0 - pt, focal_gamma) * ce;
    } else {
      total += ce;
    }
  }
  return total / static_cast<double>(logits.rows());
}

std::vector<std::pair<int, int>> colliding_pairs(const std::vector<SemanticID>& codes) {
  std::map<std::vector<int>, std::vector<int>> groups;
  for (size_t i = 0; i < codes.size(); ++i) {
    groups[codes[i].codes].push_back(static_cast<int>(i));
  }
  std::vector<std::pair<int, int>> pairs;
  for (const auto& [code, members] : groups) {
    for (size_t a = 0; a + 1 < members.size(); ++a) {
      for (size_t b = a + 1; b < members.size(); ++b) {
        pairs.push_back({members[a], members[b]});
      }
    }
  }
  return pairs;
}

double uniqueness_loss(const Mat& z0, const std::vector<SemanticID>& codes,
                       double margin) {
  if (z0.rows() != static_cast<Eigen::Index>(codes.size())) {
    throw std::invalid_argument("uniqueness_loss: batch mismatch");
  }
  const auto pairs = colliding_pairs(codes);
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [i, j] : pairs) {
    total += std::max(0.0, cosine(z0.row(i), z0.row(j)) - margin);
  }
  return total / static_cast<double>(pairs.size());
}

namespace {

// Lloyd iterations with greedy farthest-point seeding; deterministic under
// the supplied rng. Empty clusters steal the point farthest from its center.
Mat kmeans(const Mat& points, int k, Rng& rng, int iters) {
  const Eigen::Index n = points.rows();
  Mat centroids(k, points.cols());
  // Seed: random first center, then farthest-point.
  std::vector<int> chosen;
  chosen.push_back(rng.uniform_int(static_cast<int>(n)));
  Vec dist = (points.rowwise() - points.row(chosen[0])).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    int far = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (dist(i) > best) {
        best = dist(i);
        far = static_cast<int>(i);
      }
    }
    chosen.push_back(far);
    Vec nd = (points.rowwise() - points.row(far)).rowwise().squaredNorm();
    dist = dist.cwiseMin(nd);
  }
  for (int c = 0; c < k; ++c) centroids.row(c) = points.row(chosen[static_cast<size_t>(c)]);

  std::vector<int> assign(static_cast<size_t>(n), 0);
  for (int it = 0; it < iters; ++it) {
    bool moved = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = (centroids.row(0) - points.row(i)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        const double dd = (centroids.row(c) - points.row(i)).squaredNorm();
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      if (assign[static_cast<size_t>(i)] != best) {
        assign[static_cast<size_t>(i)] = best;
        moved = true;
      }
    }
    Mat sums = Mat::Zero(k, points.cols());
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<size_t>(i)]) += points.row(i);
      ++counts[static_cast<size_t>(assign[static_cast<size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        centroids.row(c) = sums.row(c) / counts[static_cast<size_t>(c)];
      } else {
        // Steal the point farthest from its assigned centroid.
        double best = -1.0;
        int far = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double dd =
              (points.row(i) - centroids.row(assign[static_cast<size_t>(i)])).squaredNorm();
          if (dd > best) {
            best = dd;
            far = static_cast<int>(i);
          }
        }
        centroids.row(c) = points.row(far);
        assign[static_cast<size_t>(far)] = c;
        moved = true;
      }
    }
    if (!moved && it > 0) break;
  }
  return centroids;
}

}  // namespace

std::vector<Mat> init_codebooks_kmeans(const Mat& latents, const std::vector<int>& K,
                                       Rng& rng, int iters, bool* padded) {
  if (padded) *padded = false;
  Mat z = latents;
  const int max_k = *std::max_element(K.begin(), K.end());
  if (z.rows() < max_k) {
    // Pad by resampling rows with a small jitter so seeding stays sane.
    Mat padded_z(max_k, z.cols());
    padded_z.topRows(z.rows()) = z;
    const double jitter = 1e-3;
    for (Eigen::Index i = z.rows(); i < max_k; ++i) {
      const int src = rng.uniform_int(static_cast<int>(z.rows()));
      for (Eigen::Index c = 0; c < z.cols(); ++c) {
        padded_z(i, c) = z(src, c) + jitter * rng.normal();
      }
    }
    z = std::move(padded_z);
    if (padded) *padded = true;
  }
  std::vector<Mat> codebooks;
  for (int k : K) {
    Mat cb = kmeans(z, k, rng, iters);
    codebooks.push_back(cb);
    // Next level clusters the residuals this level leaves behind.
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      auto [idx, e] = quantize_nearest(z.row(i).transpose(), cb);
      z.row(i) -= e.transpose();
    }
  }
  return codebooks;
}

TokenizerModel::TokenizerModel(TokenizerConfig cfg, std::vector<int> tag_vocab_sizes,
                               int d_tag)
    : cfg_(std::move(cfg)), tag_vocab_sizes_(std::move(tag_vocab_sizes)), d_tag_(d_tag) {
  cfg_.validate();
  if (static_cast<int>(tag_vocab_sizes_.size()) != cfg_.levels) {
    throw std::runtime_error("tokenizer model: tag vocab sizes must match levels");
  }
  Rng rng(cfg_.seed);
  enc_ = nn::Mlp3::create(params_, "enc", cfg_.d_in, cfg_.hidden, cfg_.d, rng);
  dec_ = nn::Mlp3::create(params_, "dec", cfg_.d, cfg_.hidden, cfg_.d_in, rng);
  for (int l = 0; l < cfg_.levels; ++l) {
    Mat cb(cfg_.codebook_sizes[static_cast<size_t>(l)], cfg_.d);
    for (Eigen::Index i = 0; i < cb.rows(); ++i) {
      for (Eigen::Index j = 0; j < cb.cols(); ++j) cb(i, j) = 0.01 * rng.normal();
    }
    codebook_params_.push_back(
        params_.add("codebook." + std::to_string(l), std::move(cb), false));
    projectors_.push_back(nn::Linear::create(params_, "proj." + std::to_string(l),
                                             d_tag_, cfg_.d, rng, /*bias=*/false));
  }
  for (int l = 1; l <= cfg_.levels; ++l) {
    LevelClassifier c;
    c.in_dim = l * cfg_.d;
    c.hidden = 2 * cfg_.d * (l + 1);
    c.n_classes = tag_vocab_sizes_[static_cast<size_t>(l - 1)];
    c.drop = cfg_.dropout_base + cfg_.dropout_step * (l - 1);
    const std::string base = "clf." + std::to_string(l - 1);
    c.att = nn::Linear::create(params_, base + ".att", c.in_dim, c.in_dim, rng);
    c.feat = nn::Linear::create(params_, base + ".feat", c.in_dim, c.hidden, rng);
    c.feat_ln = nn::LayerNormParams::create(params_, base + ".feat_ln", c.hidden);
    c.r1.a = nn::Linear::create(params_, base + ".r1a", c.hidden, c.hidden, rng);
    c.r1.ln = nn::LayerNormParams::create(params_, base + ".r1ln", c.hidden);
    c.r1.b = nn::Linear::create(params_, base + ".r1b", c.hidden, c.hidden, rng);
    c.r2.a = nn::Linear::create(params_, base + ".r2a", c.hidden, c.hidden, rng);
    c.r2.ln = nn::LayerNormParams::create(params_, base + ".r2ln", c.hidden);
    c.r2.b = nn::Linear::create(params_, base + ".r2b", c.hidden, c.hidden, rng);
    c.head1 = nn::Linear::create(params_, base + ".head1", c.hidden, c.hidden, rng);
    c.head_ln = nn::LayerNormParams::create(params_, base + ".head_ln", c.hidden);
    c.head2 = nn::Linear::create(params_, base + ".head2", c.hidden, c.n_classes, rng);
    classifiers_.push_back(c);
  }
}

std::vector<int> TokenizerModel::param_indices_with_prefix(const std::string& prefix) const {
  std::vector<int> out;
  for (int i = 0; i < params_.count(); ++i) {
    if (params_.at(i).name.rfind(prefix, 0) == 0) out.push_back(i);
  }
  return out;
}

void TokenizerModel::set_codebooks(const std::vector<Mat>& codebooks) {
  if (static_cast<int>(codebooks.size()) != cfg_.levels) {
    throw std::invalid_argument("set_codebooks: level count mismatch");
  }
  for (int l = 0; l < cfg_.levels; ++l) {
    nn::Param& p = params_.at(codebook_params_[static_cast<size_t>(l)]);
    if (codebooks[static_cast<size_t>(l)].rows() != p.value.rows() ||
        codebooks[static_cast<size_t>(l)].cols() != p.value.cols()) {
      throw std::invalid_argument("set_codebooks: shape mismatch at level " +
                                  std::to_string(l));
    }
    p.value = codebooks[static_cast<size_t>(l)];
    p.m.setZero();
    p.v.setZero();
  }
  codebooks_ready_ = true;
}

std::vector<Mat> TokenizerModel::codebooks() const {
  std::vector<Mat> out;
  for (int idx : codebook_params_) out.push_back(params_.at(idx).value);
  return out;
}

nn::Var TokenizerModel::classifier_forward(Tape& t, const std::vector<Var>& pv,
                                           const LevelClassifier& c, Var x,
                                           Rng* dropout_rng, bool train) const {
  const bool drop_on = train && dropout_rng != nullptr;
  static Rng dummy(0);
  Rng& drng = dropout_rng ? *dropout_rng : dummy;
  // Feature weighting: softmax attention over the input dimensions.
  Var w = t.row_softmax(c.att.apply(t, pv, x));
  Var h = t.mul(x, w);
  h = c.feat.apply(t, pv, h);
  h = c.feat_ln.apply(t, pv, h);
  h = t.relu(h);
  h = t.dropout(h, c.drop, drng, drop_on);
  for (const ResBlock* rb : {&c.r1, &c.r2}) {
    Var z = rb->a.apply(t, pv, h);
    z = rb->ln.apply(t, pv, z);
    z = t.relu(z);
    z = t.dropout(z, c.drop, drng, drop_on);
    z = rb->b.apply(t, pv, z);
    h = t.add(h, z);
  }
  Var z = c.head1.apply(t, pv, h);
  z = c.head_ln.apply(t, pv, z);
  z = t.relu(z);
  z = t.dropout(z, c.drop * 0.5, drng, drop_on);
  return c.head2.apply(t, pv, z);
}

nn::Var TokenizerModel::build_loss(Tape& t, const std::vector<Var>& pv, const Mat& x,
                                   const std::vector<std::vector<int>>& tags,
                                   const TagHierarchy& hierarchy, LossMode mode,
                                   LossTerm term,
                                   const std::vector<std::vector<int>>* frozen_codes,
                                   Rng* dropout_rng, LossBreakdown* breakdown,
                                   std::vector<std::vector<int>>* out_codes) const {
  const Eigen::Index B = x.rows();
  const int L = cfg_.levels;
  if (static_cast<Eigen::Index>(tags.size()) != B) {
    throw std::invalid_argument("build_loss: tag batch mismatch");
  }
  if (mode == LossMode::kSmooth && frozen_codes == nullptr) {
    throw std::invalid_argument("build_loss: smooth mode needs frozen codes");
  }
  const bool training = mode == LossMode::kTraining;

  Var xin = t.constant(x);
  Var z0 = enc_.apply(t, pv, xin);

  // Residual chain. Codes come from the live argmin in training mode and
  // from the frozen assignment in smooth mode.
  std::vector<std::vector<int>> codes(static_cast<size_t>(B), std::vector<int>(L));
  std::vector<Var> e_vars, r_vars, zq_sum_vars, commit_terms, cbloss_terms;
  Var r_prev = z0;
  Var zq_sum;
  for (int l = 0; l < L; ++l) {
    const Mat& cb = params_.at(codebook_params_[static_cast<size_t>(l)]).value;
    std::vector<int> level_codes(static_cast<size_t>(B));
    if (training) {
      const Mat& rv = t.val(r_prev);
      for (Eigen::Index b = 0; b < B; ++b) {
        level_codes[static_cast<size_t>(b)] =
            quantize_nearest(rv.row(b).transpose(), cb).first;
      }
    } else {
      for (Eigen::Index b = 0; b < B; ++b) {
        level_codes[static_cast<size_t>(b)] =
            (*frozen_codes)[static_cast<size_t>(b)][static_cast<size_t>(l)];
      }
    }
    for (Eigen::Index b = 0; b < B; ++b) {
      codes[static_cast<size_t>(b)][static_cast<size_t>(l)] =
          level_codes[static_cast<size_t>(b)];
    }
    Var e = t.gather_rows(pv[static_cast<size_t>(codebook_params_[static_cast<size_t>(l)])],
                          level_codes);
    // Encoder-side commitment; stop-gradient shields the codeword.
    Var diff_commit = t.sub(r_prev, t.stop_gradient(e));
    commit_terms.push_back(t.mean_all(t.sum_sq_rows(diff_commit)));
    // Codebook-side companion term; stop-gradient shields the encoder.
    Var diff_cb = t.sub(t.stop_gradient(r_prev), e);
    cbloss_terms.push_back(t.mean_all(t.sum_sq_rows(diff_cb)));

    e_vars.push_back(e);
    r_vars.push_back(r_prev);
    zq_sum = l == 0 ? e : t.add(zq_sum, e);
    zq_sum_vars.push_back(zq_sum);
    // The chain carrier detaches the codeword so deeper commitment terms
    // reach the encoder only.
    r_prev = training ? diff_commit : t.sub(r_prev, e);
  }
  if (out_codes) *out_codes = codes;

  // Reconstruction.
  Var dec_in = training ? t.straight_through(zq_sum_vars.back(), z0)
                        : zq_sum_vars.back();
  Var x_hat = dec_.apply(t, pv, dec_in);
  Var recon = t.mean_all(t.sum_sq_rows(t.sub(xin, x_hat)));

  // Per-level supervision.
  std::vector<Var> align_terms, pred_terms;
  Var zq_cat;
  for (int l = 0; l < L; ++l) {
    Var zq_sup = training ? t.straight_through(zq_sum_vars[static_cast<size_t>(l)], z0)
                          : zq_sum_vars[static_cast<size_t>(l)];
    Var e_sup = training
                    ? t.straight_through(e_vars[static_cast<size_t>(l)],
                                         r_vars[static_cast<size_t>(l)])
                    : e_vars[static_cast<size_t>(l)];
    zq_cat = l == 0 ? e_sup : t.concat_cols(zq_cat, e_sup);

    // Alignment: InfoNCE between zq and the batch's projected tag vectors.
    std::vector<int> tag_rows(static_cast<size_t>(B));
    for (Eigen::Index b = 0; b < B; ++b) {
      const int tag = tags[static_cast<size_t>(b)][static_cast<size_t>(l)];
      if (tag < 0 || tag >= hierarchy.vocab_size(l)) {
        throw std::runtime_error("build_loss: tag out of range at level " +
                                 std::to_string(l + 1));
      }
      tag_rows[static_cast<size_t>(b)] = tag;
    }
    Var t_rows = t.gather_rows(
        t.constant(hierarchy.tag_embed[static_cast<size_t>(l)]), tag_rows);
    Var proj = t.l2_normalize_rows(
        projectors_[static_cast<size_t>(l)].apply(t, pv, t_rows));
    Var zn = t.l2_normalize_rows(zq_sup);
    Var sims = t.scale(t.matmul_nt(zn, proj), 1.0 / cfg_.tau);
    std::vector<int> diag(static_cast<size_t>(B));
    for (Eigen::Index b = 0; b < B; ++b) diag[static_cast<size_t>(b)] = static_cast<int>(b);
    align_terms.push_back(t.mean_all(t.softmax_cross_entropy_rows(sims, diag)));

    // Prediction: level classifier over the concatenated codewords.
    Var logits = classifier_forward(t, pv, classifiers_[static_cast<size_t>(l)],
                                    zq_cat, dropout_rng, training);
    pred_terms.push_back(t.mean_all(
        t.softmax_cross_entropy_rows(logits, tag_rows, cfg_.focal_gamma)));
  }

  // Uniqueness over colliding pairs of this batch's full code tuples.
  std::vector<SemanticID> sids(static_cast<size_t>(B));
  for (Eigen::Index b = 0; b < B; ++b) sids[static_cast<size_t>(b)].codes = codes[static_cast<size_t>(b)];
  const auto pairs = colliding_pairs(sids);
  Var z0n = t.l2_normalize_rows(z0);
  Var unique = t.pair_dot_hinge(z0n, pairs, cfg_.margin);

  Var commit = commit_terms[0];
  for (size_t l = 1; l < commit_terms.size(); ++l) commit = t.add(commit, commit_terms[l]);
  Var cbloss = cbloss_terms[0];
  for (size_t l = 1; l < cbloss_terms.size(); ++l) cbloss = t.add(cbloss, cbloss_terms[l]);
  Var sup = t.add(align_terms[0], pred_terms[0]);
  for (int l = 1; l < L; ++l) {
    sup = t.add(sup, t.add(align_terms[static_cast<size_t>(l)],
                           pred_terms[static_cast<size_t>(l)]));
  }

  Var total = t.add(
      t.add(recon, t.scale(commit, cfg_.beta_commit)),
      t.add(t.add(cbloss, t.scale(sup, cfg_.beta_sup)), t.scale(unique, cfg_.beta_unique)));

  if (breakdown) {
    breakdown->recon = t.val(recon)(0, 0);
    breakdown->commit = t.val(commit)(0, 0);
    breakdown->codebook = t.val(cbloss)(0, 0);
    breakdown->unique = t.val(unique)(0, 0);
    breakdown->align.clear();
    breakdown->pred.clear();
    for (int l = 0; l < L; ++l) {
      breakdown->align.push_back(t.val(align_terms[static_cast<size_t>(l)])(0, 0));
      breakdown->pred.push_back(t.val(pred_terms[static_cast<size_t>(l)])(0, 0));
    }
    breakdown->total = t.val(total)(0, 0);
    breakdown->collision_pairs = static_cast<int>(pairs.size());
  }

  switch (term) {
    case LossTerm::kRecon:
      return recon;
    case LossTerm::kCommit:
      return commit;
    case LossTerm::kCodebook:
      return cbloss;
    case LossTerm::kAlign: {
      Var a = align_terms[0];
      for (int l = 1; l < L; ++l) a = t.add(a, align_terms[static_cast<size_t>(l)]);
      return a;
    }
    case LossTerm::kPred: {
      Var p = pred_terms[0];
      for (int l = 1; l < L; ++l) p = t.add(p, pred_terms[static_cast<size_t>(l)]);
      return p;
    }
    case LossTerm::kUnique:
      return unique;
    case LossTerm::kTotal:
      return total;
  }
  throw std::logic_error("build_loss: unreachable");
}

Mat TokenizerModel::encode_values(const Mat& x) const {
  if (x.cols() != cfg_.d_in) throw std::invalid_argument("encode: dimension mismatch");
  Tape t;
  auto pv = params_.feed(t, false);
  return t.val(enc_.apply(t, pv, t.constant(x)));
}

Mat TokenizerModel::decode_values(const Mat& zq) const {
  Tape t;
  auto pv = params_.feed(t, false);
  return t.val(dec_.apply(t, pv, t.constant(zq)));
}

QuantizationTrace TokenizerModel::trace_for(const Vec& x) const {
  const Mat z0 = encode_values(x.transpose());
  return quantize_residual_chain(z0.row(0).transpose(), codebooks());
}

Mat TokenizerModel::classifier_logits_values(int level, const Mat& zq_cat) const {
  Tape t;
  auto pv = params_.feed(t, false);
  return t.val(classifier_forward(t, pv, classifiers_[static_cast<size_t>(level)],
                                  t.constant(zq_cat), nullptr, false));
}

namespace {

json breakdown_to_json(const LossBreakdown& b) {
  nlohmann::ordered_json j;
  j["total"] = b.total;
  j["recon"] = b.recon;
  j["commit"] = b.commit;
  j["codebook"] = b.codebook;
  j["unique"] = b.unique;
  j["align"] = b.align;
  j["pred"] = b.pred;
  j["collision_pairs"] = b.collision_pairs;
  return j;
}

}  // namespace

TrainStage1Result train_stage1(TokenizerModel& model, const Catalog& catalog,
                               const TagHierarchy& hierarchy,
                               const std::string& out_dir) {
  const TokenizerConfig& cfg = model.config();
  const int L = cfg.levels;

  std::vector<const Item*> items;
  items.reserve(catalog.size());
  for (const auto& [id, item] : catalog) {
    if (static_cast<int>(item.tags.size()) != L) {
      throw std::runtime_error("train_stage1: item '" + id + "' is missing tags");
    }
    if (item.feature.size() != cfg.d_in) {
      throw std::runtime_error("train_stage1: item '" + id + "' feature dim " +
                               std::to_string(item.feature.size()) + " != d_in " +
                               std::to_string(cfg.d_in));
    }
    items.push_back(&item);
  }
  const int N = static_cast<int>(items.size());
  if (N == 0) throw std::runtime_error("train_stage1: empty catalog");

  Mat X(N, cfg.d_in);
  std::vector<std::vector<int>> all_tags(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) {
    X.row(i) = items[static_cast<size_t>(i)]->feature.transpose();
    all_tags[static_cast<size_t>(i)] = items[static_cast<size_t>(i)]->tags;
  }

  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  std::ofstream log_out;
  if (!out_dir.empty()) {
    log_out.open(out_dir + "/training_log.jsonl", std::ios::trunc);
  }

  Rng shuffle_rng = Rng(cfg.seed).fork(11);
  Rng dropout_rng = Rng(cfg.seed).fork(12);
  Rng kmeans_rng = Rng(cfg.seed).fork(13);

  TrainStage1Result result;
  std::vector<int> order(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) order[static_cast<size_t>(i)] = i;

  // Snapshot for NaN recovery.
  auto snapshot = [&]() {
    std::vector<Mat> vals;
    for (int i = 0; i < model.params().count(); ++i) vals.push_back(model.params().at(i).value);
    return vals;
  };
  auto restore = [&](const std::vector<Mat>& vals) {
    for (int i = 0; i < model.params().count(); ++i) model.params().at(i).value = vals[static_cast<size_t>(i)];
  };
  std::vector<Mat> last_good = snapshot();

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);

    if (epoch == 0 && !model.codebooks_ready()) {
      const int first = std::min(cfg.batch, N);
      Mat xb(first, cfg.d_in);
      for (int i = 0; i < first; ++i) xb.row(i) = X.row(order[static_cast<size_t>(i)]);
      bool padded = false;
      model.set_codebooks(init_codebooks_kmeans(model.encode_values(xb),
                                                cfg.codebook_sizes, kmeans_rng,
                                                cfg.kmeans_iters, &padded));
      result.kmeans_padded = padded;
    }

    LossBreakdown epoch_mean;
    epoch_mean.align.assign(static_cast<size_t>(L), 0.0);
    epoch_mean.pred.assign(static_cast<size_t>(L), 0.0);
    double weight_total = 0.0;
    std::vector<std::set<int>> usage(static_cast<size_t>(L));
    std::map<std::vector<int>, int> epoch_code_counts;
    bool nan_hit = false;

    for (int start = 0; start < N; start += cfg.batch) {
      const int bsz = std::min(cfg.batch, N - start);
      Mat xb(bsz, cfg.d_in);
      std::vector<std::vector<int>> tb(static_cast<size_t>(bsz));
      for (int i = 0; i < bsz; ++i) {
        const int idx = order[static_cast<size_t>(start + i)];
        xb.row(i) = X.row(idx);
        tb[static_cast<size_t>(i)] = all_tags[static_cast<size_t>(idx)];
      }
      Tape t;
      auto pv = model.params().feed(t, true);
      LossBreakdown bd;
      std::vector<std::vector<int>> batch_codes;
      Var loss = model.build_loss(t, pv, xb, tb, hierarchy, LossMode::kTraining,
                                  LossTerm::kTotal, nullptr, &dropout_rng, &bd,
                                  &batch_codes);
      if (!std::isfinite(bd.total)) {
        nan_hit = true;
        break;
      }
      t.backward(loss);
      model.params().adamw_step(t, pv, cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay,
                                ++step);

      const double w = static_cast<double>(bsz);
      weight_total += w;
      epoch_mean.recon += w * bd.recon;
      epoch_mean.commit += w * bd.commit;
      epoch_mean.codebook += w * bd.codebook;
      epoch_mean.unique += w * bd.unique;
      epoch_mean.total += w * bd.total;
      epoch_mean.collision_pairs += bd.collision_pairs;
      for (int l = 0; l < L; ++l) {
        epoch_mean.align[static_cast<size_t>(l)] += w * bd.align[static_cast<size_t>(l)];
        epoch_mean.pred[static_cast<size_t>(l)] += w * bd.pred[static_cast<size_t>(l)];
      }
      for (const auto& c : batch_codes) {
        for (int l = 0; l < L; ++l) usage[static_cast<size_t>(l)].insert(c[static_cast<size_t>(l)]);
        ++epoch_code_counts[c];
      }
    }

    if (nan_hit) {
      restore(last_good);
      result.aborted = true;
      break;
    }

    epoch_mean.recon /= weight_total;
    epoch_mean.commit /= weight_total;
    epoch_mean.codebook /= weight_total;
    epoch_mean.unique /= weight_total;
    epoch_mean.total /= weight_total;
    for (int l = 0; l < L; ++l) {
      epoch_mean.align[static_cast<size_t>(l)] /= weight_total;
      epoch_mean.pred[static_cast<size_t>(l)] /= weight_total;
    }

    int collided = 0;
    for (const auto& [c, n] : epoch_code_counts) {
      if (n >= 2) collided += n;
    }

    EpochLog el;
    el.epoch = epoch;
    el.mean = epoch_mean;
    el.collision_rate = static_cast<double>(collided) / static_cast<double>(N);
    for (int l = 0; l < L; ++l) {
      el.codebook_usage.push_back(static_cast<int>(usage[static_cast<size_t>(l)].size()));
    }
    result.log.push_back(el);
    result.epochs_run = epoch + 1;
    last_good = snapshot();

    if (log_out.is_open()) {
      nlohmann::ordered_json j;
      j["epoch"] = epoch;
      j["losses"] = breakdown_to_json(epoch_mean);
      j["collision_rate"] = el.collision_rate;
      j["codebook_usage"] = el.codebook_usage;
      log_out << j.dump() << "\n";
      log_out.flush();
    }
    if (!out_dir.empty()) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "/epochs/e%04d", epoch);
      save_checkpoint(model, out_dir + buf);
    }
  }

  if (!out_dir.empty()) save_checkpoint(model, out_dir + "/final");
  return result;
}

AssignResult assign_ids(const TokenizerModel& model, const Catalog& catalog,
                        CollisionMode mode) {
  AssignResult res;
  const auto cbs = model.codebooks();
  const int N = static_cast<int>(catalog.size());
  if (N == 0) return res;

  Mat X(N, model.config().d_in);
  std::vector<const std::string*> ids_in_order;
  ids_in_order.reserve(static_cast<size_t>(N));
  int row = 0;
  for (const auto& [id, item] : catalog) {
    if (item.feature.size() != model.config().d_in) {
      throw std::runtime_error("assign_ids: item '" + id + "' feature dim mismatch");
    }
    X.row(row++) = item.feature.transpose();
    ids_in_order.push_back(&id);
  }
  const Mat Z = model.encode_values(X);

  std::map<std::vector<int>, std::vector<std::string>> groups;
  for (int i = 0; i < N; ++i) {
    QuantizationTrace tr = quantize_residual_chain(Z.row(i).transpose(), cbs);
    SemanticID sid;
    sid.codes = tr.codes;
    groups[tr.codes].push_back(*ids_in_order[static_cast<size_t>(i)]);
    res.ids.emplace(*ids_in_order[static_cast<size_t>(i)], std::move(sid));
  }

  int collided = 0;
  for (const auto& [codes, members] : groups) {
    if (members.size() < 2) continue;
    collided += static_cast<int>(members.size());
    CollisionGroup g;
    g.codes = codes;
    g.items = members;  // catalog order is ascending item_id already
    res.groups.push_back(std::move(g));
    if (mode == CollisionMode::kTigerAppend) {
      int suffix = 0;
      for (const std::string& id : members) res.ids.at(id).suffix = suffix++;
    }
  }
  res.collision_rate = static_cast<double>(collided) / static_cast<double>(N);
  return res;
}

void save_ids_tsv(const AssignResult& result, int levels, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write ids file: " + path);
  out << "item_id";
  for (int l = 1; l <= levels; ++l) out << "\tcode_" << l;
  out << "\tsuffix\n";
  for (const auto& [id, sid] : result.ids) {
    out << id;
    for (int c : sid.codes) out << "\t" << c;
    out << "\t" << sid.suffix << "\n";
  }
}

std::map<std::string, SemanticID> load_ids_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open ids file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("ids file is empty: " + path);
  std::map<std::string, SemanticID> ids;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() < 3) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed row");
    }
    SemanticID sid;
    for (size_t i = 1; i + 1 < fields.size(); ++i) sid.codes.push_back(std::stoi(fields[i]));
    sid.suffix = std::stoi(fields.back());
    ids.emplace(fields[0], std::move(sid));
  }
  return ids;
}

void save_checkpoint(const TokenizerModel& model, const std::string& dir) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["config"] = json::parse(model.config().to_json());
  meta["tag_vocab_sizes"] = model.tag_vocab_sizes();
  meta["d_tag"] = model.d_tag();
  meta["codebooks_ready"] = model.codebooks_ready();
  write_text_file(dir + "/config.json", meta.dump(2) + "\n");
  auto is_cb = [](const std::string& n) { return n.rfind("codebook.", 0) == 0; };
  nn::save_params_binary(model.params(), [&](const std::string& n) { return !is_cb(n); },
                         dir + "/weights.bin", dir + "/weights_manifest.json");
  nn::save_params_binary(model.params(), is_cb, dir + "/codebooks.bin",
                         dir + "/codebooks_manifest.json");
}

TokenizerModel load_checkpoint(const std::string& dir) {
  json meta = json::parse(read_text_file(dir + "/config.json"));
  TokenizerConfig cfg = TokenizerConfig::from_json(meta["config"].dump());
  TokenizerModel model(cfg, meta["tag_vocab_sizes"].get<std::vector<int>>(),
                       meta["d_tag"].get<int>());
  nn::load_params_binary(model.params(), dir + "/weights.bin",
                         dir + "/weights_manifest.json");
  nn::load_params_binary(model.params(), dir + "/codebooks.bin",
                         dir + "/codebooks_manifest.json");
  if (meta.value("codebooks_ready", false)) {
    model.set_codebooks(model.codebooks());  // mark ready, clears moments
  }
  return model;
}

}  // namespace hidvae
