#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "sqat/charset.hpp"
#include "sqat/dataset.hpp"
#include "sqat/image.hpp"
#include "sqat/seq_model.hpp"

namespace sqat {

// Architecture constants. Fixed for this artifact; serialized and verified
// on load.
struct ModelConfig {
  int embed_dim = 64;
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 2;
  int max_len = 32;
  int mlp_hidden = 256;
  int patch_width = 8;
};

// Objective for input_gradient: either the training loss (summed per-token
// cross-entropy against `labels`) or one logit entry, teacher-forcing
// `labels` in both cases.
struct GradientRequest {
  struct CrossEntropy {};
  struct SingleLogit {
    int position = 0;  // 0-based logit row
    int cls = 0;
  };
  std::vector<int> labels;  // bos-framed sequence to teacher-force
  std::variant<CrossEntropy, SingleLogit> objective;

  static GradientRequest cross_entropy(std::vector<int> labels) {
    return {std::move(labels), CrossEntropy{}};
  }
  static GradientRequest single_logit(std::vector<int> labels, int position,
                                      int cls) {
    return {std::move(labels), SingleLogit{position, cls}};
  }
};

struct TrainConfig {
  int epochs = 14;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 0.01;  // decoupled
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  int warmup_steps = 200;
  std::uint64_t seed = 7;
};

struct TrainReport {
  double final_train_loss = 0.0;
  double train_cer = 0.0;
  double test_cer = 0.0;
  int steps = 0;
};

// Column-patch transformer encoder + causal decoder with cross-attention.
// Double precision throughout; immutable after training, so any number of
// concurrent readers may run forward/backward passes.
class Model : public SeqLogitModel {
 public:
  struct AttnWeights {
    Eigen::MatrixXd wq, wk, wv, wo;  // embed x embed
    Eigen::MatrixXd bq, bk, bv, bo;  // 1 x embed
  };
  struct MlpWeights {
    Eigen::MatrixXd w1, b1, w2, b2;  // hidden x embed, 1 x hidden, ...
  };
  struct LayerNormWeights {
    Eigen::MatrixXd gamma, beta;  // 1 x embed
  };
  struct EncLayer {
    LayerNormWeights ln1, ln2;
    AttnWeights attn;
    MlpWeights mlp;
  };
  struct DecLayer {
    LayerNormWeights ln1, ln2, ln3;
    AttnWeights self_attn, cross_attn;
    MlpWeights mlp;
  };

  // Freshly initialized weights (seeded, deterministic).
  static Model init(std::uint64_t seed, const ModelConfig& cfg = {});

  // --- SeqLogitModel ---
  const Charset& charset() const override { return charset_; }
  int max_len() const override { return cfg_.max_len; }
  Decoded decode(const Image& x) const override;
  Eigen::MatrixXd forced_logits(const Image& x,
                                const std::vector<int>& forced) const override;
  Image logit_gradient(const Image& x, const std::vector<int>& forced,
                       const std::vector<LogitPick>& picks,
                       Eigen::MatrixXd* logits_out) const override;
  Image cross_entropy_gradient(const Image& x, const std::vector<int>& labels,
                               double* loss_out) const override;

  // One forward, one backward sweep per pick set.
  std::vector<Image> logit_gradients(const Image& x,
                                     const std::vector<int>& forced,
                                     const std::vector<std::vector<LogitPick>>& pick_sets,
                                     Eigen::MatrixXd* logits_out) const;

  // Exact reverse-mode gradient of the requested scalar w.r.t. raw pixels.
  Image input_gradient(const Image& x, const GradientRequest& request,
                       double* value_out = nullptr) const;

  // Affine normalization (pixel - 0.5) / 0.5, Jacobian 2*Identity.
  static Eigen::MatrixXd preprocess(const Image& x);

  // Per-position cross-entropy gradient sum restricted to `positions`
  // (0-based logit rows); used to cross-check objective linearity.
  Image cross_entropy_gradient_positions(const Image& x,
                                         const std::vector<int>& labels,
                                         const std::vector<int>& positions,
                                         double* loss_out = nullptr) const;

  const ModelConfig& config() const { return cfg_; }

  // Named weight views, serialization order.
  std::vector<std::pair<std::string, Eigen::MatrixXd*>> named_params();
  std::vector<std::pair<std::string, const Eigen::MatrixXd*>> named_params() const;

  // Model file ("SQAT" magic, versioned, named f64 tensors). Round-trips
  // bit-exactly.
  void save(const std::string& path) const;
  static Model load(const std::string& path);

  bool weights_equal(const Model& other) const;

 private:
  friend struct TapeBuild;
  friend class DecoderState;
  Model() = default;

  Eigen::MatrixXd encode_image(const Image& x) const;
  Eigen::MatrixXd positional(int rows) const;
  Eigen::RowVectorXd pos_cache_row(int t) const;

  ModelConfig cfg_;
  Charset charset_;
  std::uint64_t init_seed_ = 0;

  Eigen::MatrixXd patch_w_, patch_b_;  // embed x (H*patch), 1 x embed
  Eigen::MatrixXd tok_embed_;          // v x embed
  std::vector<EncLayer> enc_;
  LayerNormWeights enc_final_;
  std::vector<DecLayer> dec_;
  LayerNormWeights dec_final_;
  Eigen::MatrixXd head_w_, head_b_;  // v x embed, 1 x v
  Eigen::MatrixXd positional_cache_;  // max_len x embed, derived
};

// Adam with decoupled weight decay over the full parameter set, teacher
// forcing [bos]+text+[eos], cross-entropy summed over positions.
// Deterministic for a fixed config; throws std::runtime_error with a
// diagnostic if the loss turns non-finite.
Model train(const Dataset& dataset, const TrainConfig& cfg,
            TrainReport* report = nullptr);

// Mean CER of greedy transcriptions against ground-truth texts.
double dataset_cer(const Model& model, const std::vector<TextSample>& samples);

}  // namespace sqat
