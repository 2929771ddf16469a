#include "hidvae/nn/layers.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace hidvae::nn {

int ParamStore::add(std::string name, Mat init, bool decay) {
  Param p;
  p.name = std::move(name);
  p.m = Mat::Zero(init.rows(), init.cols());
  p.v = Mat::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  p.decay = decay;
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

std::vector<Var> ParamStore::feed(Tape& tape, bool needs_grad) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (const Param& p : params_) {
    vars.push_back(tape.input(p.value, needs_grad));
  }
  return vars;
}

void ParamStore::adamw_step(const Tape& tape, const std::vector<Var>& vars,
                            double lr, double beta1, double beta2, double eps,
                            double weight_decay, long step) {
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (size_t i = 0; i < params_.size(); ++i) {
    Param& p = params_[i];
    const Mat& g = tape.grad(vars[i]);
    if (g.size() == 0) continue;
    p.m = beta1 * p.m + (1.0 - beta1) * g;
    p.v = (beta2 * p.v.array() + (1.0 - beta2) * g.array().square()).matrix();
    const Mat mhat = p.m / bc1;
    const Mat vhat = p.v / bc2;
    p.value -= lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
    if (p.decay && weight_decay > 0.0) {
      p.value -= lr * weight_decay * p.value;
    }
  }
}

int ParamStore::find(const std::string& name) const {
  for (size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

Mat glorot(int rows, int cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      m(i, j) = rng.uniform(-bound, bound);
    }
  }
  return m;
}

Linear Linear::create(ParamStore& ps, const std::string& name, int in, int out,
                      Rng& rng, bool bias, bool decay_w) {
  Linear l;
  l.w = ps.add(name + ".w", glorot(in, out, rng), decay_w);
  if (bias) l.b = ps.add(name + ".b", Mat::Zero(1, out), false);
  return l;
}

Var Linear::apply(Tape& t, const std::vector<Var>& pv, Var x) const {
  Var y = t.matmul(x, pv[static_cast<size_t>(w)]);
  if (b >= 0) y = t.add_rowvec(y, pv[static_cast<size_t>(b)]);
  return y;
}

LayerNormParams LayerNormParams::create(ParamStore& ps, const std::string& name,
                                        int dim) {
  LayerNormParams ln;
  ln.gain = ps.add(name + ".gain", Mat::Ones(1, dim), false);
  ln.bias = ps.add(name + ".bias", Mat::Zero(1, dim), false);
  return ln;
}

Var LayerNormParams::apply(Tape& t, const std::vector<Var>& pv, Var x) const {
  return t.layer_norm(x, pv[static_cast<size_t>(gain)], pv[static_cast<size_t>(bias)]);
}

Mlp3 Mlp3::create(ParamStore& ps, const std::string& name, int in, int hidden,
                  int out, Rng& rng) {
  Mlp3 m;
  m.l1 = Linear::create(ps, name + ".l1", in, hidden, rng);
  m.l2 = Linear::create(ps, name + ".l2", hidden, hidden, rng);
  m.l3 = Linear::create(ps, name + ".l3", hidden, out, rng);
  return m;
}

Var Mlp3::apply(Tape& t, const std::vector<Var>& pv, Var x) const {
  Var h = t.gelu(l1.apply(t, pv, x));
  h = t.gelu(l2.apply(t, pv, h));
  return l3.apply(t, pv, h);
}

void save_params_binary(const ParamStore& ps,
                        const std::function<bool(const std::string&)>& select,
                        const std::string& bin_path, const std::string& manifest_path) {
  nlohmann::json manifest = nlohmann::json::array();
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write " + bin_path);
  size_t offset = 0;
  for (int i = 0; i < ps.count(); ++i) {
    const Param& p = ps.at(i);
    if (select && !select(p.name)) continue;
    nlohmann::json entry;
    entry["name"] = p.name;
    entry["rows"] = p.value.rows();
    entry["cols"] = p.value.cols();
    entry["offset"] = offset;
    manifest.push_back(entry);
    std::vector<double> row_major;
    row_major.reserve(static_cast<size_t>(p.value.size()));
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) row_major.push_back(p.value(r, c));
    }
    bin.write(reinterpret_cast<const char*>(row_major.data()),
              static_cast<std::streamsize>(row_major.size() * sizeof(double)));
    offset += row_major.size();
  }
  if (!bin) throw std::runtime_error("write failed: " + bin_path);
  write_text_file(manifest_path, manifest.dump(2) + "\n");
}

void load_params_binary(ParamStore& ps, const std::string& bin_path,
                        const std::string& manifest_path) {
  nlohmann::json manifest = nlohmann::json::parse(read_text_file(manifest_path));
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + bin_path);
  for (const auto& entry : manifest) {
    const std::string name = entry["name"].get<std::string>();
    const Eigen::Index rows = entry["rows"].get<Eigen::Index>();
    const Eigen::Index cols = entry["cols"].get<Eigen::Index>();
    const int idx = ps.find(name);
    if (idx < 0) throw std::runtime_error("weights blob names unknown param: " + name);
    Param& p = ps.at(idx);
    if (p.value.rows() != rows || p.value.cols() != cols) {
      throw std::runtime_error("weights blob shape mismatch for " + name);
    }
    bin.seekg(static_cast<std::streamoff>(entry["offset"].get<size_t>() * sizeof(double)));
    std::vector<double> row_major(static_cast<size_t>(rows * cols));
    bin.read(reinterpret_cast<char*>(row_major.data()),
             static_cast<std::streamsize>(row_major.size() * sizeof(double)));
    if (!bin) throw std::runtime_error("truncated weights blob: " + bin_path);
    size_t k = 0;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) p.value(r, c) = row_major[k++];
    }
    p.m.setZero();
    p.v.setZero();
  }
}

}  // namespace hidvae::nn
