#include "sqat/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "sqat/autodiff.hpp"
#include "sqat/metrics.hpp"
#include "sqat/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "model files are little-endian");

namespace sqat {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr double kLnEps = 1e-5;

RowVec ln_row(const RowVec& x, const Model::LayerNormWeights& ln) {
  const double mu = x.mean();
  const double var = (x.array() - mu).square().mean();
  const double inv = 1.0 / std::sqrt(var + kLnEps);
  return (((x.array() - mu) * inv) * ln.gamma.row(0).array() +
          ln.beta.row(0).array())
      .matrix();
}

Mat ln_rows(const Mat& x, const Model::LayerNormWeights& ln) {
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    y.row(r) = ln_row(x.row(r), ln);
  }
  return y;
}

double gelu_scalar(double t) {
  return 0.5 * t * (1.0 + std::erf(t * 0.70710678118654752440));
}

Mat patchify(const Mat& x, int patch_w) {
  const Eigen::Index h = x.rows();
  const Eigen::Index n_patches = x.cols() / patch_w;
  Mat p(n_patches, h * patch_w);
  for (Eigen::Index i = 0; i < n_patches; ++i) {
    for (Eigen::Index j = 0; j < patch_w; ++j) {
      p.block(i, j * h, 1, h) = x.col(i * patch_w + j).transpose();
    }
  }
  return p;
}

// Full (unmasked) multi-head attention over row vectors, used by the
// encoder. Key/query accumulation order matches the incremental decoder so
// both inference entry points share one arithmetic path.
Mat mha_full(const Mat& a, const Model::AttnWeights& w, int heads) {
  const Eigen::Index d = a.cols();
  const Eigen::Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat q = a * w.wq.transpose();
  q.rowwise() += w.bq.row(0);
  Mat k = a * w.wk.transpose();
  k.rowwise() += w.bk.row(0);
  Mat v = a * w.wv.transpose();
  v.rowwise() += w.bv.row(0);
  Mat ctx(a.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = k.middleCols(h * dh, dh);
    const auto vh = v.middleCols(h * dh, dh);
    Mat s = qh * kh.transpose() * scale;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const double mx = s.row(r).maxCoeff();
      Eigen::ArrayXd e = (s.row(r).transpose().array() - mx).exp();
      const double z = e.sum();
      ctx.block(r, h * dh, 1, dh) = (e / z).matrix().transpose() * vh;
    }
  }
  Mat out = ctx * w.wo.transpose();
  out.rowwise() += w.bo.row(0);
  return out;
}

Mat mlp_rows(const Mat& a, const Model::MlpWeights& w) {
  Mat h = a * w.w1.transpose();
  h.rowwise() += w.b1.row(0);
  h = h.unaryExpr(&gelu_scalar);
  Mat out = h * w.w2.transpose();
  out.rowwise() += w.b2.row(0);
  return out;
}

}  // namespace

Eigen::MatrixXd Model::positional(int rows) const {
  const int d = cfg_.embed_dim;
  Mat pe(rows, d);
  for (int pos = 0; pos < rows; ++pos) {
    for (int i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(d));
      pe(pos, 2 * i) = std::sin(pos * freq);
      pe(pos, 2 * i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

Eigen::MatrixXd Model::preprocess(const Image& x) {
  if (!has_image_shape(x)) {
    throw std::invalid_argument("preprocess: expected 32x256 image");
  }
  return (x.array() - 0.5).matrix() / 0.5;
}

Eigen::MatrixXd Model::encode_image(const Image& x) const {
  Mat h = patchify(preprocess(x), cfg_.patch_width) * patch_w_.transpose();
  h.rowwise() += patch_b_.row(0);
  h += positional(static_cast<int>(h.rows()));
  for (const EncLayer& layer : enc_) {
    h += mha_full(ln_rows(h, layer.ln1), layer.attn, cfg_.heads);
    h += mlp_rows(ln_rows(h, layer.ln2), layer.mlp);
  }
  return ln_rows(h, enc_final_);
}

// Incremental decoder with per-layer key/value caches. decode() and
// forced_logits() both step through this class, which is what makes greedy
// logits and teacher-forced logits of the same sequence exactly equal.
class DecoderState {
 public:
  DecoderState(const Model& m, const Mat& enc_out)
      : m_(m), enc_rows_(enc_out.rows()) {
    const int L = static_cast<int>(m.dec_.size());
    const int d = m.cfg_.embed_dim;
    k_self_.resize(L);
    v_self_.resize(L);
    k_cross_.resize(L);
    v_cross_.resize(L);
    for (int l = 0; l < L; ++l) {
      k_self_[l].setZero(m.cfg_.max_len, d);
      v_self_[l].setZero(m.cfg_.max_len, d);
      const auto& w = m.dec_[static_cast<size_t>(l)].cross_attn;
      k_cross_[l] = enc_out * w.wk.transpose();
      k_cross_[l].rowwise() += w.bk.row(0);
      v_cross_[l] = enc_out * w.wv.transpose();
      v_cross_[l].rowwise() += w.bv.row(0);
    }
  }

  RowVec step(int token) {
    const int d = m_.cfg_.embed_dim;
    const int heads = m_.cfg_.heads;
    const int dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    RowVec h = m_.tok_embed_.row(token) + m_.pos_cache_row(t_);
    for (size_t l = 0; l < m_.dec_.size(); ++l) {
      const auto& layer = m_.dec_[l];
      {
        RowVec a = ln_row(h, layer.ln1);
        RowVec q = a * layer.self_attn.wq.transpose() + layer.self_attn.bq;
        k_self_[l].row(t_) =
            a * layer.self_attn.wk.transpose() + layer.self_attn.bk;
        v_self_[l].row(t_) =
            a * layer.self_attn.wv.transpose() + layer.self_attn.bv;
        h += attend(q, k_self_[l], v_self_[l], t_ + 1, heads, dh, scale) *
                 layer.self_attn.wo.transpose() +
             layer.self_attn.bo;
      }
      {
        RowVec b = ln_row(h, layer.ln2);
        RowVec q = b * layer.cross_attn.wq.transpose() + layer.cross_attn.bq;
        h += attend(q, k_cross_[l], v_cross_[l], enc_rows_, heads, dh, scale) *
                 layer.cross_attn.wo.transpose() +
             layer.cross_attn.bo;
      }
      {
        RowVec c = ln_row(h, layer.ln3);
        RowVec m = c * layer.mlp.w1.transpose() + layer.mlp.b1;
        m = m.unaryExpr(&gelu_scalar);
        h += m * layer.mlp.w2.transpose() + layer.mlp.b2;
      }
    }
    h = ln_row(h, m_.dec_final_);
    ++t_;
    return h * m_.head_w_.transpose() + m_.head_b_;
  }

 private:
  static RowVec attend(const RowVec& q, const Mat& keys, const Mat& values,
                       Eigen::Index n_keys, int heads, int dh, double scale) {
    RowVec ctx(q.size());
    Eigen::ArrayXd s(n_keys);
    for (int h = 0; h < heads; ++h) {
      const auto qh = q.segment(h * dh, dh);
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n_keys; ++j) {
        s[j] = qh.dot(keys.row(j).segment(h * dh, dh)) * scale;
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (Eigen::Index j = 0; j < n_keys; ++j) {
        s[j] = std::exp(s[j] - mx);
        z += s[j];
      }
      RowVec acc = RowVec::Zero(dh);
      for (Eigen::Index j = 0; j < n_keys; ++j) {
        acc += (s[j] / z) * values.row(j).segment(h * dh, dh);
      }
      ctx.segment(h * dh, dh) = acc;
    }
    return ctx;
  }

  const Model& m_;
  Eigen::Index enc_rows_;
  std::vector<Mat> k_self_, v_self_, k_cross_, v_cross_;
  int t_ = 0;
};

RowVec Model::pos_cache_row(int t) const { return positional_cache_.row(t); }

Decoded Model::decode(const Image& x) const {
  const Mat enc = encode_image(x);
  DecoderState state(*this, enc);
  std::vector<int> seq{charset_.bos()};
  std::vector<RowVec> rows;
  while (static_cast<int>(seq.size()) < cfg_.max_len) {
    rows.push_back(state.step(seq.back()));
    const int tok = argmax_lowest(rows.back().transpose());
    seq.push_back(tok);
    if (tok == charset_.eos()) break;
  }
  Decoded out;
  out.seq = std::move(seq);
  out.logits.resize(static_cast<Eigen::Index>(rows.size()), charset_.size());
  for (size_t r = 0; r < rows.size(); ++r) {
    out.logits.row(static_cast<Eigen::Index>(r)) = rows[r];
  }
  return out;
}

namespace {

// Forced sequences are looser than emitted ones: attack targets may place
// special tokens anywhere, so only framing, bounds, and length are checked.
void check_forced(const std::vector<int>& forced, const Charset& cs,
                  int max_len) {
  if (!starts_with_bos(forced, cs)) {
    throw std::invalid_argument("forced sequence must start with bos");
  }
  if (static_cast<int>(forced.size()) > max_len) {
    throw std::invalid_argument("forced sequence longer than max_len");
  }
  for (int t : forced) {
    if (t < 0 || t >= cs.size()) {
      throw std::invalid_argument("token index out of vocabulary");
    }
  }
}

}  // namespace

Eigen::MatrixXd Model::forced_logits(const Image& x,
                                     const std::vector<int>& forced) const {
  check_forced(forced, charset_, cfg_.max_len);
  std::vector<int> inputs = forced;
  if (ends_with_eos(inputs, charset_) && inputs.size() > 1) inputs.pop_back();
  const Mat enc = encode_image(x);
  DecoderState state(*this, enc);
  Mat logits(static_cast<Eigen::Index>(inputs.size()), charset_.size());
  for (size_t i = 0; i < inputs.size(); ++i) {
    logits.row(static_cast<Eigen::Index>(i)) = state.step(inputs[i]);
  }
  return logits;
}

// ---------------------------------------------------------------------------
// Differentiation path (tape-based; values may differ from the inference
// path in the last ulp, which no contract depends on).

struct TapeBuild {
  ad::Tape tape;
  int image = -1;
  int logits = -1;
  std::vector<int> param_ids;  // named_params() order

  static TapeBuild make(const Model& m, const Image& x,
                        const std::vector<int>& inputs, bool weights_grad) {
    TapeBuild tb;
    ad::Tape& t = tb.tape;
    std::unordered_map<const Mat*, int> id;
    for (const auto& [name, ptr] : m.named_params()) {
      const int node = weights_grad ? t.param(*ptr) : t.constant(*ptr);
      tb.param_ids.push_back(node);
      id[ptr] = node;
    }
    const auto P = [&](const Mat& w) { return id.at(&w); };
    const int heads = m.cfg_.heads;
    const int dh = m.cfg_.embed_dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const auto attention = [&](int q_in, int kv_in,
                               const Model::AttnWeights& w, bool causal) {
      const int q = t.add_row_broadcast(t.matmul_nt(q_in, P(w.wq)), P(w.bq));
      const int k = t.add_row_broadcast(t.matmul_nt(kv_in, P(w.wk)), P(w.bk));
      const int v = t.add_row_broadcast(t.matmul_nt(kv_in, P(w.wv)), P(w.bv));
      std::vector<int> ctx;
      for (int h = 0; h < heads; ++h) {
        const int qh = t.slice_cols(q, h * dh, dh);
        const int kh = t.slice_cols(k, h * dh, dh);
        const int vh = t.slice_cols(v, h * dh, dh);
        const int s = t.affine(t.matmul_nt(qh, kh), scale, 0.0);
        const int p = causal ? t.softmax_causal(s) : t.softmax_rows(s);
        ctx.push_back(t.matmul(p, vh));
      }
      return t.add_row_broadcast(t.matmul_nt(t.concat_cols(ctx), P(w.wo)),
                                 P(w.bo));
    };
    const auto mlp = [&](int in, const Model::MlpWeights& w) {
      const int h1 = t.gelu(t.add_row_broadcast(t.matmul_nt(in, P(w.w1)), P(w.b1)));
      return t.add_row_broadcast(t.matmul_nt(h1, P(w.w2)), P(w.b2));
    };

    tb.image = t.input(x);
    const int pre = t.affine(tb.image, 2.0, -1.0);
    int h = t.add_row_broadcast(
        t.matmul_nt(t.patchify(pre, m.cfg_.patch_width), P(m.patch_w_)),
        P(m.patch_b_));
    const int n_patches = static_cast<int>(t.value(h).rows());
    h = t.add(h, t.constant(m.positional(n_patches)));
    for (const auto& layer : m.enc_) {
      const int a = t.layer_norm(h, P(layer.ln1.gamma), P(layer.ln1.beta));
      h = t.add(h, attention(a, a, layer.attn, false));
      const int b = t.layer_norm(h, P(layer.ln2.gamma), P(layer.ln2.beta));
      h = t.add(h, mlp(b, layer.mlp));
    }
    h = t.layer_norm(h, P(m.enc_final_.gamma), P(m.enc_final_.beta));

    int d = t.rows_from_table(P(m.tok_embed_), inputs);
    Mat pos(inputs.size(), m.cfg_.embed_dim);
    for (size_t i = 0; i < inputs.size(); ++i) {
      pos.row(static_cast<Eigen::Index>(i)) =
          m.pos_cache_row(static_cast<int>(i));
    }
    d = t.add(d, t.constant(std::move(pos)));
    for (const auto& layer : m.dec_) {
      const int a = t.layer_norm(d, P(layer.ln1.gamma), P(layer.ln1.beta));
      d = t.add(d, attention(a, a, layer.self_attn, true));
      const int b = t.layer_norm(d, P(layer.ln2.gamma), P(layer.ln2.beta));
      // cross-attention: queries from the decoder, keys/values from the
      // encoder output
      {
        const auto& w = layer.cross_attn;
        const int q = t.add_row_broadcast(t.matmul_nt(b, P(w.wq)), P(w.bq));
        const int k = t.add_row_broadcast(t.matmul_nt(h, P(w.wk)), P(w.bk));
        const int v = t.add_row_broadcast(t.matmul_nt(h, P(w.wv)), P(w.bv));
        std::vector<int> ctx;
        for (int hd = 0; hd < heads; ++hd) {
          const int qh = t.slice_cols(q, hd * dh, dh);
          const int kh = t.slice_cols(k, hd * dh, dh);
          const int vh = t.slice_cols(v, hd * dh, dh);
          const int s = t.affine(t.matmul_nt(qh, kh), scale, 0.0);
          ctx.push_back(t.matmul(t.softmax_rows(s), vh));
        }
        d = t.add(d, t.add_row_broadcast(
                         t.matmul_nt(t.concat_cols(ctx), P(w.wo)), P(w.bo)));
      }
      const int c = t.layer_norm(d, P(layer.ln3.gamma), P(layer.ln3.beta));
      d = t.add(d, mlp(c, layer.mlp));
    }
    d = t.layer_norm(d, P(m.dec_final_.gamma), P(m.dec_final_.beta));
    tb.logits = t.add_row_broadcast(t.matmul_nt(d, P(m.head_w_)), P(m.head_b_));
    return tb;
  }
};

namespace {

std::vector<int> decoder_inputs(const std::vector<int>& forced,
                                const Charset& cs, int max_len) {
  check_forced(forced, cs, max_len);
  std::vector<int> inputs = forced;
  if (ends_with_eos(inputs, cs) && inputs.size() > 1) inputs.pop_back();
  return inputs;
}

Image grad_or_zero(const ad::Tape& tape, int node, const Image& like) {
  const Mat& g = tape.adjoint(node);
  if (g.size() == 0) return Image::Zero(like.rows(), like.cols());
  return g;
}

}  // namespace

Image Model::logit_gradient(const Image& x, const std::vector<int>& forced,
                            const std::vector<LogitPick>& picks,
                            Eigen::MatrixXd* logits_out) const {
  TapeBuild tb = TapeBuild::make(*this, x, decoder_inputs(forced, charset_, cfg_.max_len), false);
  if (logits_out) *logits_out = tb.tape.value(tb.logits);
  const int s = tb.tape.pick_sum(tb.logits, picks);
  tb.tape.backward(s);
  return grad_or_zero(tb.tape, tb.image, x);
}

std::vector<Image> Model::logit_gradients(
    const Image& x, const std::vector<int>& forced,
    const std::vector<std::vector<LogitPick>>& pick_sets,
    Eigen::MatrixXd* logits_out) const {
  TapeBuild tb = TapeBuild::make(*this, x, decoder_inputs(forced, charset_, cfg_.max_len), false);
  if (logits_out) *logits_out = tb.tape.value(tb.logits);
  std::vector<int> nodes;
  nodes.reserve(pick_sets.size());
  for (const auto& picks : pick_sets) {
    nodes.push_back(tb.tape.pick_sum(tb.logits, picks));
  }
  std::vector<Image> grads;
  grads.reserve(pick_sets.size());
  for (int node : nodes) {
    tb.tape.backward(node);
    grads.push_back(grad_or_zero(tb.tape, tb.image, x));
  }
  return grads;
}

Image Model::cross_entropy_gradient(const Image& x,
                                    const std::vector<int>& labels,
                                    double* loss_out) const {
  check_forced(labels, charset_, cfg_.max_len);
  if (labels.size() < 2) {
    throw std::invalid_argument("labels carry no target tokens");
  }
  std::vector<int> inputs(labels.begin(), labels.end() - 1);
  std::vector<int> targets(labels.begin() + 1, labels.end());
  TapeBuild tb = TapeBuild::make(*this, x, inputs, false);
  const int ce = tb.tape.ce_sum(tb.logits, targets);
  if (loss_out) *loss_out = tb.tape.scalar(ce);
  tb.tape.backward(ce);
  return grad_or_zero(tb.tape, tb.image, x);
}

Image Model::cross_entropy_gradient_positions(
    const Image& x, const std::vector<int>& labels,
    const std::vector<int>& positions, double* loss_out) const {
  if (labels.size() < 2) {
    throw std::invalid_argument("labels carry no target tokens");
  }
  std::vector<int> inputs(labels.begin(), labels.end() - 1);
  std::vector<int> all_targets(labels.begin() + 1, labels.end());
  TapeBuild tb = TapeBuild::make(*this, x, inputs, false);
  std::vector<int> targets;
  for (int p : positions) {
    if (p < 0 || p >= static_cast<int>(all_targets.size())) {
      throw std::invalid_argument("position out of range");
    }
    targets.push_back(all_targets[static_cast<size_t>(p)]);
  }
  const int rows = tb.tape.rows_from_table(tb.logits, positions);
  const int ce = tb.tape.ce_sum(rows, targets);
  if (loss_out) *loss_out = tb.tape.scalar(ce);
  tb.tape.backward(ce);
  return grad_or_zero(tb.tape, tb.image, x);
}

Image Model::input_gradient(const Image& x, const GradientRequest& request,
                            double* value_out) const {
  if (std::holds_alternative<GradientRequest::CrossEntropy>(request.objective)) {
    return cross_entropy_gradient(x, request.labels, value_out);
  }
  const auto& sl = std::get<GradientRequest::SingleLogit>(request.objective);
  Eigen::MatrixXd logits;
  Image g = logit_gradient(x, request.labels, {{sl.position, sl.cls, 1.0}},
                           value_out ? &logits : nullptr);
  if (value_out) *value_out = logits(sl.position, sl.cls);
  return g;
}

// ---------------------------------------------------------------------------
// Construction and serialization.

Model Model::init(std::uint64_t seed, const ModelConfig& cfg) {
  Model m;
  m.cfg_ = cfg;
  m.init_seed_ = seed;
  Rng rng(seed);
  const double sd = 0.05;
  const auto randn = [&](Eigen::Index r, Eigen::Index c) {
    Mat w(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) w(i, j) = sd * rng.normal();
    }
    return w;
  };
  const auto zeros = [](Eigen::Index r, Eigen::Index c) {
    return Mat::Zero(r, c).eval();
  };
  const int d = cfg.embed_dim;
  const auto init_ln = [&](LayerNormWeights& ln) {
    ln.gamma = Mat::Ones(1, d);
    ln.beta = zeros(1, d);
  };
  const auto init_attn = [&](AttnWeights& a) {
    a.wq = randn(d, d);
    a.wk = randn(d, d);
    a.wv = randn(d, d);
    a.wo = randn(d, d);
    a.bq = zeros(1, d);
    a.bk = zeros(1, d);
    a.bv = zeros(1, d);
    a.bo = zeros(1, d);
  };
  const auto init_mlp = [&](MlpWeights& w) {
    w.w1 = randn(cfg.mlp_hidden, d);
    w.b1 = zeros(1, cfg.mlp_hidden);
    w.w2 = randn(d, cfg.mlp_hidden);
    w.b2 = zeros(1, d);
  };

  m.patch_w_ = randn(d, kImageHeight * cfg.patch_width);
  m.patch_b_ = zeros(1, d);
  m.tok_embed_ = randn(m.charset_.size(), d);
  m.enc_.resize(static_cast<size_t>(cfg.enc_layers));
  for (auto& layer : m.enc_) {
    init_ln(layer.ln1);
    init_ln(layer.ln2);
    init_attn(layer.attn);
    init_mlp(layer.mlp);
  }
  init_ln(m.enc_final_);
  m.dec_.resize(static_cast<size_t>(cfg.dec_layers));
  for (auto& layer : m.dec_) {
    init_ln(layer.ln1);
    init_ln(layer.ln2);
    init_ln(layer.ln3);
    init_attn(layer.self_attn);
    init_attn(layer.cross_attn);
    init_mlp(layer.mlp);
  }
  init_ln(m.dec_final_);
  m.head_w_ = randn(m.charset_.size(), d);
  m.head_b_ = zeros(1, m.charset_.size());
  m.positional_cache_ = m.positional(cfg.max_len);
  return m;
}

std::vector<std::pair<std::string, Eigen::MatrixXd*>> Model::named_params() {
  std::vector<std::pair<std::string, Mat*>> out;
  const auto add = [&](const std::string& name, Mat& w) {
    out.emplace_back(name, &w);
  };
  const auto add_ln = [&](const std::string& p, LayerNormWeights& ln) {
    add(p + ".gamma", ln.gamma);
    add(p + ".beta", ln.beta);
  };
  const auto add_attn = [&](const std::string& p, AttnWeights& a) {
    add(p + ".wq", a.wq);
    add(p + ".wk", a.wk);
    add(p + ".wv", a.wv);
    add(p + ".wo", a.wo);
    add(p + ".bq", a.bq);
    add(p + ".bk", a.bk);
    add(p + ".bv", a.bv);
    add(p + ".bo", a.bo);
  };
  const auto add_mlp = [&](const std::string& p, MlpWeights& w) {
    add(p + ".w1", w.w1);
    add(p + ".b1", w.b1);
    add(p + ".w2", w.w2);
    add(p + ".b2", w.b2);
  };
  add("patch.w", patch_w_);
  add("patch.b", patch_b_);
  add("tok_embed", tok_embed_);
  for (size_t i = 0; i < enc_.size(); ++i) {
    const std::string p = "enc." + std::to_string(i);
    add_ln(p + ".ln1", enc_[i].ln1);
    add_attn(p + ".attn", enc_[i].attn);
    add_ln(p + ".ln2", enc_[i].ln2);
    add_mlp(p + ".mlp", enc_[i].mlp);
  }
  add_ln("enc.final_ln", enc_final_);
  for (size_t i = 0; i < dec_.size(); ++i) {
    const std::string p = "dec." + std::to_string(i);
    add_ln(p + ".ln1", dec_[i].ln1);
    add_attn(p + ".self_attn", dec_[i].self_attn);
    add_ln(p + ".ln2", dec_[i].ln2);
    add_attn(p + ".cross_attn", dec_[i].cross_attn);
    add_ln(p + ".ln3", dec_[i].ln3);
    add_mlp(p + ".mlp", dec_[i].mlp);
  }
  add_ln("dec.final_ln", dec_final_);
  add("head.w", head_w_);
  add("head.b", head_b_);
  return out;
}

std::vector<std::pair<std::string, const Eigen::MatrixXd*>> Model::named_params()
    const {
  std::vector<std::pair<std::string, const Mat*>> out;
  for (auto& [name, ptr] : const_cast<Model*>(this)->named_params()) {
    out.emplace_back(name, ptr);
  }
  return out;
}

namespace {

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

void write_tensor(std::ofstream& out, const std::string& name, const Mat& m) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(out, 2);
  write_u32(out, static_cast<std::uint32_t>(m.rows()));
  write_u32(out, static_cast<std::uint32_t>(m.cols()));
  std::vector<double> buf(static_cast<size_t>(m.size()));
  size_t at = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) buf[at++] = m(r, c);
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(double)));
}

Mat read_tensor(std::ifstream& in, std::string* name) {
  const std::uint32_t name_len = read_u32(in);
  name->resize(name_len);
  in.read(name->data(), name_len);
  const std::uint32_t rank = read_u32(in);
  if (rank != 2) throw std::runtime_error("model file: unsupported rank");
  const std::uint32_t rows = read_u32(in);
  const std::uint32_t cols = read_u32(in);
  std::vector<double> buf(static_cast<size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(double)));
  Mat m(rows, cols);
  size_t at = 0;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = buf[at++];
  }
  return m;
}

}  // namespace

void Model::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write("SQAT", 4);
  write_u32(out, kFormatVersion);
  write_u32(out, static_cast<std::uint32_t>(charset_.chars().size()));
  out.write(charset_.chars().data(),
            static_cast<std::streamsize>(charset_.chars().size()));
  const auto params = named_params();
  write_u32(out, static_cast<std::uint32_t>(params.size()) + 1);
  Mat config(1, 7);
  config << cfg_.embed_dim, cfg_.enc_layers, cfg_.dec_layers, cfg_.heads,
      cfg_.max_len, cfg_.mlp_hidden, cfg_.patch_width;
  write_tensor(out, "config", config);
  for (const auto& [name, ptr] : params) write_tensor(out, name, *ptr);
  if (!out) throw std::runtime_error("write failed: " + path);
}

Model Model::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SQAT", 4) != 0) {
    throw std::runtime_error("not a model file (bad magic): " + path);
  }
  if (read_u32(in) != kFormatVersion) {
    throw std::runtime_error("unsupported model format version");
  }
  const std::uint32_t n_chars = read_u32(in);
  std::string chars(n_chars, '\0');
  in.read(chars.data(), n_chars);

  const std::uint32_t n_tensors = read_u32(in);
  std::unordered_map<std::string, Mat> tensors;
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name;
    Mat m = read_tensor(in, &name);
    tensors.emplace(std::move(name), std::move(m));
  }
  if (!in) throw std::runtime_error("truncated model file: " + path);

  const auto cit = tensors.find("config");
  if (cit == tensors.end()) throw std::runtime_error("model file: missing config");
  const Mat& c = cit->second;
  ModelConfig cfg;
  cfg.embed_dim = static_cast<int>(c(0, 0));
  cfg.enc_layers = static_cast<int>(c(0, 1));
  cfg.dec_layers = static_cast<int>(c(0, 2));
  cfg.heads = static_cast<int>(c(0, 3));
  cfg.max_len = static_cast<int>(c(0, 4));
  cfg.mlp_hidden = static_cast<int>(c(0, 5));
  cfg.patch_width = static_cast<int>(c(0, 6));

  Model m = Model::init(0, cfg);
  if (chars != m.charset_.chars()) {
    throw std::runtime_error("model file charset mismatch");
  }
  for (auto& [name, ptr] : m.named_params()) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) {
      throw std::runtime_error("model file: missing tensor " + name);
    }
    if (it->second.rows() != ptr->rows() || it->second.cols() != ptr->cols()) {
      throw std::runtime_error("model file: shape mismatch for " + name);
    }
    *ptr = it->second;
  }
  return m;
}

bool Model::weights_equal(const Model& other) const {
  const auto a = named_params();
  const auto b = other.named_params();
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first) return false;
    const Mat& x = *a[i].second;
    const Mat& y = *b[i].second;
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(),
                    static_cast<size_t>(x.size()) * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Training.

namespace {

struct GradBuffer {
  std::vector<Mat> g;
  void init_like(const std::vector<std::pair<std::string, Mat*>>& params) {
    g.clear();
    for (const auto& [name, ptr] : params) {
      g.push_back(Mat::Zero(ptr->rows(), ptr->cols()));
    }
  }
  void add(const GradBuffer& other) {
    for (size_t i = 0; i < g.size(); ++i) g[i] += other.g[i];
  }
};

// Forward+backward for one sample, adding weight gradients into `acc`.
double sample_gradient(const Model& m, const TextSample& sample,
                       GradBuffer& acc) {
  const std::vector<int> labels = m.charset().encode(sample.text);
  std::vector<int> inputs(labels.begin(), labels.end() - 1);
  std::vector<int> targets(labels.begin() + 1, labels.end());
  TapeBuild tb = TapeBuild::make(m, sample.image, inputs, true);
  const int ce = tb.tape.ce_sum(tb.logits, targets);
  const double loss = tb.tape.scalar(ce);
  tb.tape.backward(ce);
  for (size_t i = 0; i < tb.param_ids.size(); ++i) {
    const Mat& g = tb.tape.adjoint(tb.param_ids[i]);
    if (g.size() != 0) acc.g[i] += g;
  }
  return loss;
}

}  // namespace

Model train(const Dataset& dataset, const TrainConfig& cfg,
            TrainReport* report) {
  if (dataset.train.empty()) {
    throw std::invalid_argument("train split is empty");
  }
  Model model = Model::init(cfg.seed);
  TrainReport local;
  if (cfg.epochs > 0) {
    auto params = model.named_params();
    const size_t n_params = params.size();
    std::vector<Mat> adam_m(n_params), adam_v(n_params);
    for (size_t i = 0; i < n_params; ++i) {
      adam_m[i] = Mat::Zero(params[i].second->rows(), params[i].second->cols());
      adam_v[i] = adam_m[i];
    }

    Rng shuffle_rng = Rng(cfg.seed).child(0xD472A1);
    std::vector<int> order(dataset.train.size());
    std::iota(order.begin(), order.end(), 0);

    const int n_threads = std::min<int>(
        {static_cast<int>(std::thread::hardware_concurrency()), cfg.batch_size, 4});
    int step = 0;
    double last_loss = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      // Fisher-Yates with the deterministic stream
      for (size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
      }
      for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
        const size_t end = std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
        const int bsz = static_cast<int>(end - at);

        // Per-thread partial sums over fixed sample slices keep the
        // reduction order independent of scheduling.
        std::vector<GradBuffer> partial(static_cast<size_t>(n_threads));
        std::vector<double> partial_loss(static_cast<size_t>(n_threads), 0.0);
        {
          std::vector<std::thread> workers;
          for (int w = 0; w < n_threads; ++w) {
            partial[static_cast<size_t>(w)].init_like(params);
            workers.emplace_back([&, w]() {
              for (size_t i = at + static_cast<size_t>(w); i < end;
                   i += static_cast<size_t>(n_threads)) {
                partial_loss[static_cast<size_t>(w)] += sample_gradient(
                    model, dataset.train[static_cast<size_t>(order[i])],
                    partial[static_cast<size_t>(w)]);
              }
            });
          }
          for (auto& t : workers) t.join();
        }
        GradBuffer grads = std::move(partial[0]);
        double loss = partial_loss[0];
        for (int w = 1; w < n_threads; ++w) {
          grads.add(partial[static_cast<size_t>(w)]);
          loss += partial_loss[static_cast<size_t>(w)];
        }
        loss /= bsz;
        last_loss = loss;
        if (!std::isfinite(loss)) {
          throw std::runtime_error(
              "training diverged: non-finite loss at step " +
              std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");
        }

        double sq = 0.0;
        for (auto& g : grads.g) sq += g.squaredNorm();
        double scale = 1.0 / bsz;
        const double gnorm = std::sqrt(sq) * scale;
        if (cfg.clip_norm > 0.0 && gnorm > cfg.clip_norm) {
          scale *= cfg.clip_norm / gnorm;
        }

        ++step;
        const double lr_t =
            cfg.lr * std::min(1.0, static_cast<double>(step) /
                                       std::max(1, cfg.warmup_steps));
        const double bc1 = 1.0 - std::pow(cfg.beta1, step);
        const double bc2 = 1.0 - std::pow(cfg.beta2, step);
        for (size_t i = 0; i < n_params; ++i) {
          Mat& p = *params[i].second;
          const Mat g = grads.g[i] * scale;
          adam_m[i] = cfg.beta1 * adam_m[i] + (1.0 - cfg.beta1) * g;
          adam_v[i] = cfg.beta2 * adam_v[i] +
                      (1.0 - cfg.beta2) * g.cwiseProduct(g);
          const Mat mhat = adam_m[i] / bc1;
          const Mat vhat = adam_v[i] / bc2;
          p -= lr_t * (mhat.array() / (vhat.array().sqrt() + cfg.adam_eps))
                   .matrix();
          if (cfg.weight_decay > 0.0) p *= 1.0 - lr_t * cfg.weight_decay;
        }
      }
    }
    local.steps = step;
    local.final_train_loss = last_loss;
  }
  local.train_cer = dataset_cer(model, dataset.train);
  local.test_cer = dataset_cer(model, dataset.test);
  if (report) *report = local;
  return model;
}

double dataset_cer(const Model& model, const std::vector<TextSample>& samples) {
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& s : samples) {
    const Decoded d = model.decode(s.image);
    sum += cer(s.text, model.charset().decode(d.seq));
  }
  return sum / static_cast<double>(samples.size());
}

}  // namespace sqat
