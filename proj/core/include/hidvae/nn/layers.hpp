#pragma once

#include <string>
#include <vector>

#include "hidvae/nn/tape.hpp"

namespace hidvae::nn {

// Named trainable tensor plus Adam moments. `decay` marks tensors subject
// to decoupled weight decay (weight matrices only; not biases, norms,
// embeddings or codebooks).
struct Param {
  std::string name;
  Mat value;
  Mat m;
  Mat v;
  bool decay = false;
};

class ParamStore {
 public:
  int add(std::string name, Mat init, bool decay = false);

  Param& at(int i) { return params_[static_cast<size_t>(i)]; }
  const Param& at(int i) const { return params_[static_cast<size_t>(i)]; }
  int count() const { return static_cast<int>(params_.size()); }

  // Registers every parameter on the tape; vars[i] corresponds to param i.
  std::vector<Var> feed(Tape& tape, bool needs_grad = true) const;

  // Decoupled weight decay update. `step` is 1-based.
  void adamw_step(const Tape& tape, const std::vector<Var>& vars, double lr,
                  double beta1, double beta2, double eps, double weight_decay,
                  long step);

  int find(const std::string& name) const;  // -1 when absent

  std::vector<Param>& raw() { return params_; }
  const std::vector<Param>& raw() const { return params_; }

 private:
  std::vector<Param> params_;
};

// Glorot-uniform matrix.
Mat glorot(int rows, int cols, Rng& rng);

struct Linear {
  int w = -1;
  int b = -1;  // -1 when the layer has no bias

  static Linear create(ParamStore& ps, const std::string& name, int in, int out,
                       Rng& rng, bool bias = true, bool decay_w = true);
  Var apply(Tape& t, const std::vector<Var>& pv, Var x) const;
};

struct LayerNormParams {
  int gain = -1;
  int bias = -1;

  static LayerNormParams create(ParamStore& ps, const std::string& name, int dim);
  Var apply(Tape& t, const std::vector<Var>& pv, Var x) const;
};

// Three affine layers with GELU between them.
struct Mlp3 {
  Linear l1, l2, l3;

  static Mlp3 create(ParamStore& ps, const std::string& name, int in, int hidden,
                     int out, Rng& rng);
  Var apply(Tape& t, const std::vector<Var>& pv, Var x) const;
};

// Raw little-endian double blob plus a JSON manifest of name/rows/cols/offset.
// `select` filters by parameter name; loading matches names against the
// already-constructed store and validates shapes.
void save_params_binary(const ParamStore& ps,
                        const std::function<bool(const std::string&)>& select,
                        const std::string& bin_path, const std::string& manifest_path);
void load_params_binary(ParamStore& ps, const std::string& bin_path,
                        const std::string& manifest_path);

}  // namespace hidvae::nn
