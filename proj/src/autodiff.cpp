#include "sqat/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace sqat::ad {

namespace {
constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

int Tape::leaf(Mat value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::make(Mat value, bool requires_grad,
               std::function<void(Tape&, int)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Mat& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.touched) {
    n.adjoint.setZero(n.value.rows(), n.value.cols());
    n.touched = true;
  }
  return n.adjoint;
}

void Tape::accumulate(int id, const Mat& g) { grad_buffer(id) += g; }

void Tape::backward(int output) {
  backward_seed(output, Mat::Ones(1, 1));
}

void Tape::backward_seed(int output, const Mat& seed) {
  for (Node& n : nodes_) n.touched = false;
  grad_buffer(output) = seed;
  for (int id = output; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.touched || !n.back) continue;
    n.back(*this, id);
  }
}

int Tape::affine(int a, double scale, double shift) {
  Mat v = value(a) * scale;
  v.array() += shift;
  return make(std::move(v), needs(a), [a, scale](Tape& t, int self) {
    t.accumulate(a, scale * t.adjoint(self));
  });
}

int Tape::add(int a, int b) {
  return make(value(a) + value(b), needs(a) || needs(b),
              [a, b](Tape& t, int self) {
                if (t.needs(a)) t.accumulate(a, t.adjoint(self));
                if (t.needs(b)) t.accumulate(b, t.adjoint(self));
              });
}

int Tape::add_row_broadcast(int a, int row) {
  Mat v = value(a);
  v.rowwise() += value(row).row(0);
  return make(std::move(v), needs(a) || needs(row),
              [a, row](Tape& t, int self) {
                if (t.needs(a)) t.accumulate(a, t.adjoint(self));
                if (t.needs(row)) t.accumulate(row, t.adjoint(self).colwise().sum());
              });
}

int Tape::matmul(int a, int b) {
  return make(value(a) * value(b), needs(a) || needs(b),
              [a, b](Tape& t, int self) {
                const Mat& g = t.adjoint(self);
                if (t.needs(a)) t.accumulate(a, g * t.value(b).transpose());
                if (t.needs(b)) t.accumulate(b, t.value(a).transpose() * g);
              });
}

int Tape::matmul_nt(int a, int b) {
  return make(value(a) * value(b).transpose(), needs(a) || needs(b),
              [a, b](Tape& t, int self) {
                const Mat& g = t.adjoint(self);
                if (t.needs(a)) t.accumulate(a, g * t.value(b));
                if (t.needs(b)) t.accumulate(b, g.transpose() * t.value(a));
              });
}

int Tape::slice_cols(int a, int start, int len) {
  return make(value(a).middleCols(start, len), needs(a),
              [a, start, len](Tape& t, int self) {
                t.grad_buffer(a).middleCols(start, len) += t.adjoint(self);
              });
}

int Tape::concat_cols(const std::vector<int>& parts) {
  Eigen::Index rows = value(parts[0]).rows(), cols = 0;
  bool rg = false;
  for (int p : parts) {
    cols += value(p).cols();
    rg = rg || needs(p);
  }
  Mat v(rows, cols);
  Eigen::Index at = 0;
  for (int p : parts) {
    v.middleCols(at, value(p).cols()) = value(p);
    at += value(p).cols();
  }
  return make(std::move(v), rg, [parts](Tape& t, int self) {
    Eigen::Index at = 0;
    for (int p : parts) {
      const Eigen::Index w = t.value(p).cols();
      if (t.needs(p)) t.accumulate(p, t.adjoint(self).middleCols(at, w));
      at += w;
    }
  });
}

int Tape::layer_norm(int a, int gamma, int beta) {
  const Mat& x = value(a);
  const Eigen::Index n = x.cols();
  Mat xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLnEps);
    inv_std[r] = is;
    xhat.row(r) = (x.row(r).array() - mu) * is;
  }
  Mat v = xhat;
  v.array().rowwise() *= value(gamma).row(0).array();
  v.rowwise() += value(beta).row(0);
  return make(std::move(v), needs(a) || needs(gamma) || needs(beta),
              [a, gamma, beta, xhat, inv_std](Tape& t, int self) {
                const Mat& g = t.adjoint(self);
                if (t.needs(gamma))
                  t.accumulate(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
                if (t.needs(beta)) t.accumulate(beta, g.colwise().sum());
                if (!t.needs(a)) return;
                const Eigen::Index n = g.cols();
                Mat dx(g.rows(), n);
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                  Eigen::ArrayXd dxh =
                      g.row(r).array() * t.value(gamma).row(0).array();
                  const double m1 = dxh.mean();
                  const double m2 = (dxh * xhat.row(r).transpose().array()).mean();
                  dx.row(r) =
                      ((dxh - m1 - xhat.row(r).transpose().array() * m2) * inv_std[r])
                          .matrix();
                }
                t.accumulate(a, dx);
              });
}

int Tape::gelu(int a) {
  const Mat& x = value(a);
  Mat v = x.unaryExpr([](double t) {
    return 0.5 * t * (1.0 + std::erf(t * kInvSqrt2));
  });
  return make(std::move(v), needs(a), [a](Tape& t, int self) {
    const Mat& x = t.value(a);
    Mat d = x.unaryExpr([](double u) {
      return 0.5 * (1.0 + std::erf(u * kInvSqrt2)) +
             u * kInvSqrt2Pi * std::exp(-0.5 * u * u);
    });
    t.accumulate(a, d.cwiseProduct(t.adjoint(self)));
  });
}

namespace {

// Shared masked-softmax forward/backward; allowed(r) gives the exclusive
// upper bound on attended columns of row r.
template <typename AllowedFn>
Mat softmax_forward(const Mat& x, AllowedFn allowed) {
  Mat p = Mat::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Eigen::Index n = allowed(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) mx = std::max(mx, x(r, j));
    double sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      p(r, j) = std::exp(x(r, j) - mx);
      sum += p(r, j);
    }
    for (Eigen::Index j = 0; j < n; ++j) p(r, j) /= sum;
  }
  return p;
}

Mat softmax_backward(const Mat& p, const Mat& g) {
  Mat dx(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double dot = p.row(r).dot(g.row(r));
    dx.row(r) = p.row(r).cwiseProduct(g.row(r).array().matrix() -
                                      Mat::Constant(1, p.cols(), dot));
  }
  return dx;
}

}  // namespace

int Tape::softmax_rows(int a) {
  const Mat& x = value(a);
  Mat p = softmax_forward(x, [&](Eigen::Index) { return x.cols(); });
  Mat stored = p;
  return make(std::move(p), needs(a), [a, stored](Tape& t, int self) {
    t.accumulate(a, softmax_backward(stored, t.adjoint(self)));
  });
}

int Tape::softmax_causal(int a) {
  const Mat& x = value(a);
  Mat p = softmax_forward(x, [&](Eigen::Index r) { return r + 1; });
  Mat stored = p;
  return make(std::move(p), needs(a), [a, stored](Tape& t, int self) {
    // masked entries have p = 0, so the dense backward leaves them at 0
    t.accumulate(a, softmax_backward(stored, t.adjoint(self)));
  });
}

int Tape::rows_from_table(int table, std::vector<int> ids) {
  const Mat& tab = value(table);
  Mat v(static_cast<Eigen::Index>(ids.size()), tab.cols());
  for (size_t r = 0; r < ids.size(); ++r) {
    v.row(static_cast<Eigen::Index>(r)) = tab.row(ids[r]);
  }
  return make(std::move(v), needs(table),
              [table, ids = std::move(ids)](Tape& t, int self) {
                Mat& g = t.grad_buffer(table);
                for (size_t r = 0; r < ids.size(); ++r) {
                  g.row(ids[r]) += t.adjoint(self).row(static_cast<Eigen::Index>(r));
                }
              });
}

int Tape::patchify(int image, int patch_w) {
  const Mat& x = value(image);
  const Eigen::Index h = x.rows();
  const Eigen::Index n_patches = x.cols() / patch_w;
  Mat v(n_patches, h * patch_w);
  for (Eigen::Index p = 0; p < n_patches; ++p) {
    for (Eigen::Index j = 0; j < patch_w; ++j) {
      v.block(p, j * h, 1, h) = x.col(p * patch_w + j).transpose();
    }
  }
  return make(std::move(v), needs(image),
              [image, patch_w, h](Tape& t, int self) {
                const Mat& g = t.adjoint(self);
                Mat& gi = t.grad_buffer(image);
                for (Eigen::Index p = 0; p < g.rows(); ++p) {
                  for (Eigen::Index j = 0; j < patch_w; ++j) {
                    gi.col(p * patch_w + j) +=
                        g.block(p, j * h, 1, h).transpose();
                  }
                }
              });
}

int Tape::pick_sum(int logits, std::vector<LogitPick> picks) {
  const Mat& l = value(logits);
  double s = 0.0;
  for (const auto& p : picks) {
    if (p.position < 0 || p.position >= l.rows() || p.cls < 0 ||
        p.cls >= l.cols()) {
      throw std::invalid_argument("pick_sum: position/class out of range");
    }
    s += p.coeff * l(p.position, p.cls);
  }
  return make(Mat::Constant(1, 1, s), needs(logits),
              [logits, picks = std::move(picks)](Tape& t, int self) {
                const double g = t.adjoint(self)(0, 0);
                Mat& gl = t.grad_buffer(logits);
                for (const auto& p : picks) gl(p.position, p.cls) += g * p.coeff;
              });
}

int Tape::ce_sum(int logits, std::vector<int> targets) {
  const Mat& l = value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != l.rows()) {
    throw std::invalid_argument("ce_sum: one target per logit row required");
  }
  Mat probs(l.rows(), l.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < l.rows(); ++r) {
    const double mx = l.row(r).maxCoeff();
    Eigen::ArrayXd e = (l.row(r).array() - mx).exp();
    const double z = e.sum();
    probs.row(r) = (e / z).matrix();
    loss += std::log(z) + mx - l(r, targets[static_cast<size_t>(r)]);
  }
  return make(Mat::Constant(1, 1, loss), needs(logits),
              [logits, probs, targets = std::move(targets)](Tape& t, int self) {
                const double g = t.adjoint(self)(0, 0);
                Mat d = probs;
                for (Eigen::Index r = 0; r < d.rows(); ++r) {
                  d(r, targets[static_cast<size_t>(r)]) -= 1.0;
                }
                t.accumulate(logits, g * d);
              });
}

}  // namespace sqat::ad
