#pragma once

#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "osf/augment.hpp"
#include "osf/encoder.hpp"
#include "osf/epoch.hpp"
#include "osf/nn/tensor.hpp"
#include "osf/rng.hpp"

namespace osf {

enum class Objective { simclr, dino, mae, vqvae, ar, modality_contrastive };

std::string objective_name(Objective o);
Objective objective_from_name(const std::string& s);

struct PretrainConfig {
  Objective objective = Objective::dino;
  AugmentationSpec augmentation = AugmentationSpec::osf_default();

  double beta1 = 0.9, beta2 = 0.95;
  double weight_decay = 0.2;
  double base_lr = 5e-5;
  int batch_size = 16;
  double warmup_frac = 0.1;
  int max_epochs = 30;
  long max_steps = 0;    // 0: derived from max_epochs
  double grad_clip = 0;  // 0: disabled
  uint64_t seed = 0;

  double contrastive_temperature = 0.1;
  int projection_dim = 128;
  int dino_prototypes = 1024;
  double dino_tau_student = 0.1;
  double dino_tau_teacher = 0.04;
  double dino_ema_momentum = 0.996;
  double dino_center_momentum = 0.9;
  double mae_mask_ratio = 0.5;
  int decoder_depth = 2;  // reconstruction decoders run at encoder width / 2
  int vq_codebook_size = 512;
  double vq_commitment_beta = 0.25;

  double early_stop_delta = 1e-4;
  int early_stop_patience = 100;
  int loss_smoothing_window = 20;

  // per-objective batch/lr/decay/clip defaults
  static PretrainConfig defaults_for(Objective o);
};

void validate(const PretrainConfig& c);
void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

// Normalized-temperature cross entropy over 2B views. Anchor i's positive is
// its paired view; the other 2B-2 views are negatives. Mean over all 2B
// anchors.
template <class S>
nn::Tensor<S> ntxent_loss(nn::Tensor<S> z_a, nn::Tensor<S> z_b, double temperature) {
  const long b = z_a.val().rows();
  if (b < 2) throw std::invalid_argument("ntxent_loss: needs batch >= 2");
  if (z_b.val().rows() != b || z_a.val().cols() != z_b.val().cols())
    throw std::invalid_argument("ntxent_loss: view shape mismatch");
  auto z = nn::l2_normalize_rows(nn::concat_rows(z_a, z_b));
  auto sim = nn::scale(nn::matmul_nt(z, z), S(1.0 / temperature));
  nn::Mat<S> self_mask = nn::Mat<S>::Zero(2 * b, 2 * b);
  for (long i = 0; i < 2 * b; ++i) self_mask(i, i) = S(-1e9);
  auto logp = nn::log_softmax_rows(nn::add_const(sim, self_mask));
  std::vector<std::pair<int, int>> positives;
  positives.reserve(2 * b);
  for (long i = 0; i < b; ++i) positives.emplace_back(static_cast<int>(i), static_cast<int>(i + b));
  for (long i = 0; i < b; ++i) positives.emplace_back(static_cast<int>(i + b), static_cast<int>(i));
  return nn::scale(nn::sum_all(nn::gather_elements(logp, std::move(positives))),
                   S(-1.0 / (2 * b)));
}

// Mean ntxent over all unordered pairs of group embeddings.
template <class S>
nn::Tensor<S> modality_pairwise_loss(const std::vector<nn::Tensor<S>>& groups,
                                     double temperature) {
  const size_t g = groups.size();
  if (g < 2) throw std::invalid_argument("modality_pairwise_loss: needs >= 2 groups");
  nn::Tensor<S> total;
  int pairs = 0;
  for (size_t i = 0; i < g; ++i)
    for (size_t j = i + 1; j < g; ++j) {
      auto l = ntxent_loss(groups[i], groups[j], temperature);
      total = pairs == 0 ? l : nn::add(total, l);
      ++pairs;
    }
  return nn::scale(total, S(1.0 / pairs));
}

// Mean over cross-view pairs (i != j) of
// H(softmax((teacher_i - center)/tau_t), log_softmax(student_j/tau_s)).
// Teacher logits enter as plain values; no gradient reaches them.
template <class S>
nn::Tensor<S> dino_loss(nn::Tape<S>& tape, const std::vector<nn::Tensor<S>>& student_logits,
                        const std::vector<nn::Mat<S>>& teacher_logits, const nn::Mat<S>& center,
                        double tau_s, double tau_t) {
  if (!(tau_t > 0 && tau_s > tau_t))
    throw std::invalid_argument("dino_loss: requires 0 < tau_t < tau_s");
  if (student_logits.size() != teacher_logits.size() || student_logits.size() < 2)
    throw std::invalid_argument("dino_loss: needs >= 2 matched views");
  const size_t v = student_logits.size();
  nn::Tensor<S> total;
  int pairs = 0;
  for (size_t i = 0; i < v; ++i) {
    nn::Mat<S> t = teacher_logits[i];
    t.rowwise() -= Eigen::Matrix<S, 1, Eigen::Dynamic>(center.row(0));
    t /= S(tau_t);
    nn::Mat<S> p(t.rows(), t.cols());
    for (long r = 0; r < t.rows(); ++r) {
      Eigen::Matrix<S, 1, Eigen::Dynamic> e =
          (t.row(r).array() - t.row(r).maxCoeff()).exp().matrix();
      p.row(r) = e / e.sum();
    }
    for (size_t j = 0; j < v; ++j) {
      if (j == i) continue;
      auto logq = nn::log_softmax_rows(nn::scale(student_logits[j], S(1.0 / tau_s)));
      auto ce = nn::scale(nn::sum_all(nn::mul(tape.constant(p), logq)),
                          S(-1.0 / t.rows()));
      total = pairs == 0 ? ce : nn::add(total, ce);
      ++pairs;
    }
  }
  return nn::scale(total, S(1.0 / pairs));
}

// teacher <- m*teacher + (1-m)*student, matched by name.
template <class S>
void ema_update(std::map<std::string, nn::Param<S>>& teacher,
                const std::map<std::string, nn::Param<S>>& student, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("ema_update: momentum must be in [0,1]");
  for (auto& [name, tp] : teacher) {
    auto it = student.find(name);
    if (it == student.end()) throw std::invalid_argument("ema_update: missing student param " + name);
    tp.value = S(m) * tp.value + S(1.0 - m) * it->second.value;
  }
}

template <class S>
struct VqResult {
  std::vector<int> indices;
  nn::Tensor<S> z_q;              // quantized forward, identity backward
  nn::Tensor<S> codebook_loss;    // ||sg(z) - e||^2 mean
  nn::Tensor<S> commitment_loss;  // ||z - sg(e)||^2 mean
};

// Nearest codebook entry by squared Euclidean distance; ties go to the lowest
// index.
template <class S>
VqResult<S> vq_quantize(nn::Tensor<S> z, nn::Tensor<S> codebook) {
  const long k = codebook.val().rows();
  if (k == 0) throw std::invalid_argument("vq_quantize: empty codebook");
  if (!z.val().allFinite() || !codebook.val().allFinite())
    throw std::invalid_argument("vq_quantize: non-finite input");
  if (z.val().cols() != codebook.val().cols())
    throw std::invalid_argument("vq_quantize: dimension mismatch");
  const long n = z.val().rows();
  std::vector<int> idx(n);
  for (long i = 0; i < n; ++i) {
    S best = std::numeric_limits<S>::infinity();
    int bi = 0;
    for (long c = 0; c < k; ++c) {
      S d = (z.val().row(i) - codebook.val().row(c)).squaredNorm();
      if (d < best) {
        best = d;
        bi = static_cast<int>(c);
      }
    }
    idx[i] = bi;
  }
  auto e = nn::gather_rows(codebook, idx);
  VqResult<S> r;
  r.indices = std::move(idx);
  r.z_q = nn::straight_through(e.val(), z);
  r.codebook_loss = nn::mse_loss(e, nn::Mat<S>(z.val()));
  r.commitment_loss = nn::mse_loss(z, nn::Mat<S>(e.val()));
  return r;
}

// Mean squared error restricted to the given prediction rows.
template <class S>
nn::Tensor<S> masked_window_mse(nn::Tensor<S> pred, const nn::Mat<S>& target,
                                const std::vector<int>& masked_rows) {
  if (masked_rows.empty()) throw std::invalid_argument("masked_window_mse: empty mask");
  nn::Mat<S> w = nn::Mat<S>::Zero(target.rows(), target.cols());
  for (int r : masked_rows) w.row(r).setOnes();
  return nn::weighted_squared_error(pred, target, w,
                                    S(static_cast<double>(masked_rows.size()) * target.cols()));
}

// Per-step outputs the reconstruction objectives expose for inspection.
struct StepArtifacts {
  std::vector<int> masked_rows;  // batch-major window-grid rows the loss covers
  nn::Mat<float> predictions;
  nn::Mat<float> targets;
};

class ObjectiveRunner {
 public:
  virtual ~ObjectiveRunner() = default;
  // Builds the step graph and backpropagates; gradients accumulate into the
  // encoder weights and head_params(). Returns the loss value.
  virtual double compute(const std::vector<const Epoch*>& batch, Rng& rng) = 0;
  virtual std::vector<nn::Param<float>*> head_params() { return {}; }
  virtual void after_optimizer_step() {}
  virtual std::map<std::string, nn::Param<float>>* teacher_params() { return nullptr; }
  const StepArtifacts& artifacts() const { return artifacts_; }

 protected:
  StepArtifacts artifacts_;
};

std::unique_ptr<ObjectiveRunner> make_objective_runner(Encoder<float>& encoder,
                                                       const PretrainConfig& cfg);

struct PretrainResult {
  long steps = 0;
  double final_loss = 0;
  bool early_stopped = false;
  bool diverged = false;
  std::filesystem::path checkpoint_dir;
  std::filesystem::path log_path;
};

// Full training loop: seeded shard sampling, AdamW with warmup+cosine
// schedule, CSV step log, early stop on stalled smoothed loss, checkpoint on
// exit. A NaN loss aborts before the weight update so the saved checkpoint is
// the last good state.
PretrainResult pretrain(const std::filesystem::path& train_shard, const EncoderConfig& encoder_cfg,
                        const PretrainConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace osf
