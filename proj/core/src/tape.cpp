#include "hidvae/nn/tape.hpp"

#include <algorithm>
#include <cmath>

namespace hidvae::nn {

namespace {
constexpr double kNegInf = -1e30;
}

Var Tape::push(Mat val, bool needs_grad, std::function<void(Tape&)> back) {
  Node n;
  n.val = std::move(val);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Mat& Tape::grad_ref(int i) {
  Node& n = nodes_[static_cast<size_t>(i)];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
  return n.grad;
}

void Tape::accum(int i, const Mat& g) {
  if (!nodes_[static_cast<size_t>(i)].needs_grad) return;
  grad_ref(i) += g;
}

const Mat& Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<size_t>(v.i)];
  if (n.grad.size() == 0) {
    static const Mat empty;
    return empty;
  }
  return n.grad;
}

Var Tape::input(Mat v, bool needs_grad) {
  return push(std::move(v), needs_grad, nullptr);
}

Var Tape::scalar(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var Tape::add(Var a, Var b) {
  const int ai = a.i, bi = b.i;
  Mat out = val(a) + val(b);
  bool ng = needs_grad(a) || needs_grad(b);
  Var r = push(std::move(out), ng, nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, bi, ri](Tape& t) {
    const Mat& g = t.grad_ref(ri);
    t.accum(ai, g);
    t.accum(bi, g);
  };
  return r;
}

Var Tape::sub(Var a, Var b) {
  const int ai = a.i, bi = b.i;
  Mat out = val(a) - val(b);
  bool ng = needs_grad(a) || needs_grad(b);
  Var r = push(std::move(out), ng, nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, bi, ri](Tape& t) {
    const Mat& g = t.grad_ref(ri);
    t.accum(ai, g);
    if (t.nodes_[static_cast<size_t>(bi)].needs_grad) t.grad_ref(bi) -= g;
  };
  return r;
}

Var Tape::mul(Var a, Var b) {
  const int ai = a.i, bi = b.i;
  Mat out = val(a).cwiseProduct(val(b));
  bool ng = needs_grad(a) || needs_grad(b);
  Var r = push(std::move(out), ng, nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, bi, ri](Tape& t) {
    const Mat& g = t.grad_ref(ri);
    t.accum(ai, g.cwiseProduct(t.nodes_[static_cast<size_t>(bi)].val));
    t.accum(bi, g.cwiseProduct(t.nodes_[static_cast<size_t>(ai)].val));
  };
  return r;
}

Var Tape::scale(Var a, double s) {
  const int ai = a.i;
  Var r = push(val(a) * s, needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri, s](Tape& t) {
    t.accum(ai, t.grad_ref(ri) * s);
  };
  return r;
}

Var Tape::matmul(Var a, Var b) {
  const int ai = a.i, bi = b.i;
  Mat out = val(a) * val(b);
  bool ng = needs_grad(a) || needs_grad(b);
  Var r = push(std::move(out), ng, nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, bi, ri](Tape& t) {
    const Mat& g = t.grad_ref(ri);
    t.accum(ai, g * t.nodes_[static_cast<size_t>(bi)].val.transpose());
    t.accum(bi, t.nodes_[static_cast<size_t>(ai)].val.transpose() * g);
  };
  return r;
}

Var Tape::matmul_nt(Var a, Var b) {
  const int ai = a.i, bi = b.i;
  Mat out = val(a) * val(b).transpose();
  bool ng = needs_grad(a) || needs_grad(b);
  Var r = push(std::move(out), ng, nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, bi, ri](Tape& t) {
    const Mat& g = t.grad_ref(ri);
    t.accum(ai, g * t.nodes_[static_cast<size_t>(bi)].val);
    t.accum(bi, g.transpose() * t.nodes_[static_cast<size_t>(ai)].val);
  };
  return r;
}

Var Tape::add_rowvec(Var a, Var bias) {
  const int ai = a.i, bi = bias.i;
  if (val(bias).rows() != 1 || val(bias).cols() != val(a).cols()) {
    throw std::invalid_argument("add_rowvec: bias must be 1 x cols(a)");
  }
  Mat out = val(a).rowwise() + val(bias).row(0);
  bool ng = needs_grad(a) || needs_grad(bias);
  Var r = push(std::move(out), ng, nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, bi, ri](Tape& t) {
    const Mat& g = t.grad_ref(ri);
    t.accum(ai, g);
    if (t.nodes_[static_cast<size_t>(bi)].needs_grad) {
      t.grad_ref(bi) += g.colwise().sum();
    }
  };
  return r;
}

Var Tape::relu(Var a) {
  const int ai = a.i;
  Var r = push(val(a).cwiseMax(0.0), needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri](Tape& t) {
    const Mat& x = t.nodes_[static_cast<size_t>(ai)].val;
    const Mat& g = t.grad_ref(ri);
    t.accum(ai, (x.array() > 0.0).cast<double>().matrix().cwiseProduct(g));
  };
  return r;
}

Var Tape::gelu(Var a) {
  const int ai = a.i;
  const Mat& x = val(a);
  Mat out = x.unaryExpr(
      [](double v) { return 0.5 * v * (1.0 + std::erf(v / M_SQRT2)); });
  Var r = push(std::move(out), needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri](Tape& t) {
    const Mat& x = t.nodes_[static_cast<size_t>(ai)].val;
    const Mat& g = t.grad_ref(ri);
    Mat d = x.unaryExpr([](double v) {
      return 0.5 * (1.0 + std::erf(v / M_SQRT2)) +
             v * std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
    });
    t.accum(ai, d.cwiseProduct(g));
  };
  return r;
}

Var Tape::tanh(Var a) {
  const int ai = a.i;
  Var r = push(val(a).array().tanh().matrix(), needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri](Tape& t) {
    const Mat& y = t.nodes_[static_cast<size_t>(ri)].val;
    const Mat& g = t.grad_ref(ri);
    t.accum(ai, ((1.0 - y.array().square()) * g.array()).matrix());
  };
  return r;
}

Var Tape::row_softmax(Var a) {
  const Mat& x = val(a);
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    Eigen::ArrayXd e = (x.row(i).array() - m).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  const int ai = a.i;
  Var r = push(std::move(out), needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri](Tape& t) {
    const Mat& y = t.nodes_[static_cast<size_t>(ri)].val;
    const Mat& g = t.grad_ref(ri);
    Mat dx(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double dot = y.row(i).dot(g.row(i));
      dx.row(i) = y.row(i).cwiseProduct(g.row(i) - Mat::Constant(1, y.cols(), dot));
    }
    t.accum(ai, dx);
  };
  return r;
}

Var Tape::layer_norm(Var a, Var gain, Var bias, double eps) {
  const Mat& x = val(a);
  const Eigen::Index C = x.cols();
  if (val(gain).cols() != C || val(bias).cols() != C) {
    throw std::invalid_argument("layer_norm: gain/bias must be 1 x cols(a)");
  }
  Mat xhat(x.rows(), C);
  Vec inv_sigma(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(i) = is;
    xhat.row(i) = ((x.row(i).array() - mu) * is).matrix();
  }
  Mat out(x.rows(), C);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out.row(i) = (xhat.row(i).array() * val(gain).row(0).array() +
                  val(bias).row(0).array())
                     .matrix();
  }
  const int ai = a.i, gi = gain.i, bi = bias.i;
  bool ng = needs_grad(a) || needs_grad(gain) || needs_grad(bias);
  Var r = push(std::move(out), ng, nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, gi, bi, ri, xhat, inv_sigma](Tape& t) {
    const Mat& g = t.grad_ref(ri);
    const Mat& gainv = t.nodes_[static_cast<size_t>(gi)].val;
    if (t.nodes_[static_cast<size_t>(gi)].needs_grad) {
      t.grad_ref(gi) += g.cwiseProduct(xhat).colwise().sum();
    }
    if (t.nodes_[static_cast<size_t>(bi)].needs_grad) {
      t.grad_ref(bi) += g.colwise().sum();
    }
    if (t.nodes_[static_cast<size_t>(ai)].needs_grad) {
      const Eigen::Index C = xhat.cols();
      Mat dx(xhat.rows(), C);
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        Eigen::RowVectorXd dxhat =
            (g.row(i).array() * gainv.row(0).array()).matrix();
        const double m1 = dxhat.mean();
        const double m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
        dx.row(i) = (inv_sigma(i) *
                     (dxhat.array() - m1 - xhat.row(i).array() * m2))
                        .matrix();
      }
      t.grad_ref(ai) += dx;
    }
  };
  return r;
}

Var Tape::l2_normalize_rows(Var a, double eps) {
  const Mat& x = val(a);
  Mat out(x.rows(), x.cols());
  Vec denom(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = std::max(x.row(i).norm(), eps);
    denom(i) = n;
    out.row(i) = x.row(i) / n;
  }
  const int ai = a.i;
  Var r = push(std::move(out), needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri, denom, eps](Tape& t) {
    const Mat& x = t.nodes_[static_cast<size_t>(ai)].val;
    const Mat& y = t.nodes_[static_cast<size_t>(ri)].val;
    const Mat& g = t.grad_ref(ri);
    Mat dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (x.row(i).norm() <= eps) {
        dx.row(i) = g.row(i) / denom(i);  // clamped: constant denominator
      } else {
        const double dot = y.row(i).dot(g.row(i));
        dx.row(i) = (g.row(i) - y.row(i) * dot) / denom(i);
      }
    }
    t.accum(ai, dx);
  };
  return r;
}

Var Tape::gather_rows(Var table, std::vector<int> rows) {
  const Mat& tab = val(table);
  Mat out(static_cast<Eigen::Index>(rows.size()), tab.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tab.rows()) {
      throw std::out_of_range("gather_rows: index out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = tab.row(rows[i]);
  }
  const int ti = table.i;
  Var r = push(std::move(out), needs_grad(table), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ti, ri, rows = std::move(rows)](Tape& t) {
    if (!t.nodes_[static_cast<size_t>(ti)].needs_grad) return;
    const Mat& g = t.grad_ref(ri);
    Mat& tg = t.grad_ref(ti);
    for (size_t i = 0; i < rows.size(); ++i) {
      tg.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    }
  };
  return r;
}

Var Tape::concat_cols(Var a, Var b) {
  const Mat& xa = val(a);
  const Mat& xb = val(b);
  if (xa.rows() != xb.rows()) {
    throw std::invalid_argument("concat_cols: row mismatch");
  }
  Mat out(xa.rows(), xa.cols() + xb.cols());
  out.leftCols(xa.cols()) = xa;
  out.rightCols(xb.cols()) = xb;
  const int ai = a.i, bi = b.i;
  const Eigen::Index ca = xa.cols(), cb = xb.cols();
  Var r = push(std::move(out), needs_grad(a) || needs_grad(b), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, bi, ri, ca, cb](Tape& t) {
    const Mat& g = t.grad_ref(ri);
    t.accum(ai, g.leftCols(ca));
    t.accum(bi, g.rightCols(cb));
  };
  return r;
}

Var Tape::slice_cols(Var a, int from, int n) {
  const Mat& x = val(a);
  if (from < 0 || n < 0 || from + n > x.cols()) {
    throw std::out_of_range("slice_cols: bad range");
  }
  const int ai = a.i;
  Var r = push(x.middleCols(from, n), needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri, from, n](Tape& t) {
    if (!t.nodes_[static_cast<size_t>(ai)].needs_grad) return;
    t.grad_ref(ai).middleCols(from, n) += t.grad_ref(ri);
  };
  return r;
}

Var Tape::sum_sq_rows(Var a) {
  const Mat& x = val(a);
  Mat out = x.rowwise().squaredNorm();
  const int ai = a.i;
  Var r = push(std::move(out), needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri](Tape& t) {
    const Mat& x = t.nodes_[static_cast<size_t>(ai)].val;
    const Mat& g = t.grad_ref(ri);
    t.accum(ai, 2.0 * (x.array().colwise() * g.col(0).array()).matrix());
  };
  return r;
}

Var Tape::mean_all(Var a) {
  const Mat& x = val(a);
  Mat out(1, 1);
  out(0, 0) = x.mean();
  const int ai = a.i;
  const double inv = 1.0 / static_cast<double>(x.size());
  Var r = push(std::move(out), needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri, inv](Tape& t) {
    const Mat& x = t.nodes_[static_cast<size_t>(ai)].val;
    t.accum(ai, Mat::Constant(x.rows(), x.cols(), t.grad_ref(ri)(0, 0) * inv));
  };
  return r;
}

Var Tape::sum_all(Var a) {
  const Mat& x = val(a);
  Mat out(1, 1);
  out(0, 0) = x.sum();
  const int ai = a.i;
  Var r = push(std::move(out), needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri](Tape& t) {
    const Mat& x = t.nodes_[static_cast<size_t>(ai)].val;
    t.accum(ai, Mat::Constant(x.rows(), x.cols(), t.grad_ref(ri)(0, 0)));
  };
  return r;
}

Var Tape::stop_gradient(Var a) { return push(val(a), false, nullptr); }

Var Tape::straight_through(Var value, Var carrier) {
  if (val(value).rows() != val(carrier).rows() ||
      val(value).cols() != val(carrier).cols()) {
    throw std::invalid_argument("straight_through: shape mismatch");
  }
  const int ci = carrier.i;
  Var r = push(val(value), needs_grad(carrier), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ci, ri](Tape& t) {
    t.accum(ci, t.grad_ref(ri));
  };
  return r;
}

Var Tape::dropout(Var a, double rate, Rng& rng, bool active) {
  if (!active || rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  const Mat& x = val(a);
  Mat mask(x.rows(), x.cols());
  const double keep = 1.0 - rate;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      mask(i, j) = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    }
  }
  const int ai = a.i;
  Var r = push(x.cwiseProduct(mask), needs_grad(a), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [ai, ri, mask = std::move(mask)](Tape& t) {
    t.accum(ai, t.grad_ref(ri).cwiseProduct(mask));
  };
  return r;
}

Var Tape::softmax_cross_entropy_rows(Var logits, std::vector<int> labels,
                                     double focal_gamma,
                                     std::vector<std::pair<int, int>> ranges) {
  const Mat& z = val(logits);
  const Eigen::Index B = z.rows(), C = z.cols();
  if (static_cast<Eigen::Index>(labels.size()) != B) {
    throw std::invalid_argument("softmax_cross_entropy_rows: label count mismatch");
  }
  if (!ranges.empty() && static_cast<Eigen::Index>(ranges.size()) != B) {
    throw std::invalid_argument("softmax_cross_entropy_rows: range count mismatch");
  }
  // Per-row softmax over the allowed range; p stored for backward.
  Mat p = Mat::Zero(B, C);
  Mat out = Mat::Zero(B, 1);
  for (Eigen::Index i = 0; i < B; ++i) {
    if (labels[static_cast<size_t>(i)] < 0) continue;
    int from = 0, to = static_cast<int>(C);
    if (!ranges.empty()) {
      from = ranges[static_cast<size_t>(i)].first;
      to = ranges[static_cast<size_t>(i)].second;
    }
    const int label = labels[static_cast<size_t>(i)];
    if (from < 0 || to > C || from >= to) {
      throw std::out_of_range("softmax_cross_entropy_rows: bad range");
    }
    if (label < from || label >= to) {
      throw std::out_of_range("softmax_cross_entropy_rows: label outside range");
    }
    const auto row = z.row(i).segment(from, to - from);
    const double m = row.maxCoeff();
    Eigen::ArrayXd e = (row.array() - m).exp();
    const double s = e.sum();
    p.row(i).segment(from, to - from) = (e / s).matrix();
    const double pt = p(i, label);
    const double ce = -(z(i, label) - m - std::log(s));
    out(i, 0) = focal_gamma > 0.0 ? std::pow(1.0 - pt, focal_gamma) * ce : ce;
  }
  const int zi = logits.i;
  Var r = push(std::move(out), needs_grad(logits), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back =
      [zi, ri, focal_gamma, p = std::move(p), labels = std::move(labels),
       ranges = std::move(ranges)](Tape& t) {
        if (!t.nodes_[static_cast<size_t>(zi)].needs_grad) return;
        const Mat& g = t.grad_ref(ri);
        Mat& zg = t.grad_ref(zi);
        const Eigen::Index B = p.rows(), C = p.cols();
        for (Eigen::Index i = 0; i < B; ++i) {
          const int label = labels[static_cast<size_t>(i)];
          if (label < 0) continue;
          int from = 0, to = static_cast<int>(C);
          if (!ranges.empty()) {
            from = ranges[static_cast<size_t>(i)].first;
            to = ranges[static_cast<size_t>(i)].second;
          }
          const double pt = p(i, label);
          // d/dp_t of (1-p)^g * (-ln p); g=0 reduces to -1/p.
          double fprime;
          if (focal_gamma > 0.0) {
            fprime = focal_gamma * std::pow(1.0 - pt, focal_gamma - 1.0) *
                         std::log(std::max(pt, 1e-300)) -
                     std::pow(1.0 - pt, focal_gamma) / std::max(pt, 1e-300);
          } else {
            fprime = -1.0 / std::max(pt, 1e-300);
          }
          const double gi = g(i, 0) * fprime * pt;
          for (int j = from; j < to; ++j) {
            zg(i, j) += gi * ((j == label ? 1.0 : 0.0) - p(i, j));
          }
        }
      };
  return r;
}

Var Tape::pair_dot_hinge(Var unit_rows, std::vector<std::pair<int, int>> pairs,
                         double margin) {
  const Mat& u = val(unit_rows);
  Mat out = Mat::Zero(1, 1);
  if (pairs.empty()) return constant(std::move(out));
  double acc = 0.0;
  for (const auto& [i, j] : pairs) {
    acc += std::max(0.0, u.row(i).dot(u.row(j)) - margin);
  }
  out(0, 0) = acc / static_cast<double>(pairs.size());
  const int ui = unit_rows.i;
  Var r = push(std::move(out), needs_grad(unit_rows), nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back =
      [ui, ri, margin, pairs = std::move(pairs)](Tape& t) {
        if (!t.nodes_[static_cast<size_t>(ui)].needs_grad) return;
        const Mat& u = t.nodes_[static_cast<size_t>(ui)].val;
        Mat& ug = t.grad_ref(ui);
        const double w = t.grad_ref(ri)(0, 0) / static_cast<double>(pairs.size());
        for (const auto& [i, j] : pairs) {
          if (u.row(i).dot(u.row(j)) - margin > 0.0) {
            ug.row(i) += w * u.row(j);
            ug.row(j) += w * u.row(i);
          }
        }
      };
  return r;
}

Var Tape::attention(Var q, Var k, Var v, int batch, int tq, int tkv,
                    std::vector<int> q_len, std::vector<int> kv_len,
                    bool causal) {
  const Mat& Q = val(q);
  const Mat& K = val(k);
  const Mat& V = val(v);
  const Eigen::Index dh = Q.cols();
  if (Q.rows() != static_cast<Eigen::Index>(batch) * tq ||
      K.rows() != static_cast<Eigen::Index>(batch) * tkv ||
      V.rows() != static_cast<Eigen::Index>(batch) * tkv || K.cols() != dh) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  if (causal && tq != tkv) {
    throw std::invalid_argument("attention: causal requires tq == tkv");
  }
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  // A holds the per-sequence softmax weights, stacked like Q.
  Mat A = Mat::Zero(Q.rows(), tkv);
  Mat out = Mat::Zero(Q.rows(), dh);
  for (int b = 0; b < batch; ++b) {
    const auto Qb = Q.middleRows(static_cast<Eigen::Index>(b) * tq, tq);
    const auto Kb = K.middleRows(static_cast<Eigen::Index>(b) * tkv, tkv);
    const auto Vb = V.middleRows(static_cast<Eigen::Index>(b) * tkv, tkv);
    const int ql = q_len[static_cast<size_t>(b)];
    const int kl = kv_len[static_cast<size_t>(b)];
    Mat S = scl * (Qb * Kb.transpose());
    for (int i = 0; i < ql; ++i) {
      const int limit = causal ? std::min(kl, i + 1) : kl;
      auto srow = S.row(i);
      double m = kNegInf;
      for (int j = 0; j < limit; ++j) m = std::max(m, srow(j));
      double denom = 0.0;
      for (int j = 0; j < limit; ++j) denom += std::exp(srow(j) - m);
      for (int j = 0; j < limit; ++j) {
        A(static_cast<Eigen::Index>(b) * tq + i, j) = std::exp(srow(j) - m) / denom;
      }
    }
    out.middleRows(static_cast<Eigen::Index>(b) * tq, tq) =
        A.middleRows(static_cast<Eigen::Index>(b) * tq, tq) * Vb;
  }
  const int qi = q.i, ki = k.i, vi = v.i;
  bool ng = needs_grad(q) || needs_grad(k) || needs_grad(v);
  Var r = push(std::move(out), ng, nullptr);
  const int ri = r.i;
  nodes_[static_cast<size_t>(ri)].back = [qi, ki, vi, ri, batch, tq, tkv, scl,
                                          A = std::move(A)](Tape& t) {
    const Mat& Q = t.nodes_[static_cast<size_t>(qi)].val;
    const Mat& K = t.nodes_[static_cast<size_t>(ki)].val;
    const Mat& V = t.nodes_[static_cast<size_t>(vi)].val;
    const Mat& g = t.grad_ref(ri);
    Mat dQ = Mat::Zero(Q.rows(), Q.cols());
    Mat dK = Mat::Zero(K.rows(), K.cols());
    Mat dV = Mat::Zero(V.rows(), V.cols());
    for (int b = 0; b < batch; ++b) {
      const auto Ab = A.middleRows(static_cast<Eigen::Index>(b) * tq, tq);
      const auto gb = g.middleRows(static_cast<Eigen::Index>(b) * tq, tq);
      const auto Qb = Q.middleRows(static_cast<Eigen::Index>(b) * tq, tq);
      const auto Kb = K.middleRows(static_cast<Eigen::Index>(b) * tkv, tkv);
      const auto Vb = V.middleRows(static_cast<Eigen::Index>(b) * tkv, tkv);
      dV.middleRows(static_cast<Eigen::Index>(b) * tkv, tkv) += Ab.transpose() * gb;
      Mat dA = gb * Vb.transpose();
      Mat dS(tq, tkv);
      for (int i = 0; i < tq; ++i) {
        const double dot = dA.row(i).dot(Ab.row(i));
        dS.row(i) = Ab.row(i).cwiseProduct(dA.row(i) - Mat::Constant(1, tkv, dot));
      }
      dQ.middleRows(static_cast<Eigen::Index>(b) * tq, tq) += scl * (dS * Kb);
      dK.middleRows(static_cast<Eigen::Index>(b) * tkv, tkv) +=
          scl * (dS.transpose() * Qb);
    }
    t.accum(qi, dQ);
    t.accum(ki, dK);
    t.accum(vi, dV);
  };
  return r;
}

void Tape::backward(Var loss) {
  Node& root = nodes_[static_cast<size_t>(loss.i)];
  if (root.val.rows() != 1 || root.val.cols() != 1) {
    throw std::invalid_argument("backward: loss must be 1x1");
  }
  grad_ref(loss.i)(0, 0) = 1.0;
  for (int i = loss.i; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0 || !n.back) continue;
    n.back(*this);
  }
}

}  // namespace hidvae::nn
