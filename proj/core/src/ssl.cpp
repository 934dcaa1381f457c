#include "osf/ssl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>

#include "osf/nn/optim.hpp"
#include "osf/util.hpp"

namespace osf {

std::string objective_name(Objective o) {
  switch (o) {
    case Objective::simclr: return "simclr";
    case Objective::dino: return "dino";
    case Objective::mae: return "mae";
    case Objective::vqvae: return "vqvae";
    case Objective::ar: return "ar";
    case Objective::modality_contrastive: return "modality_contrastive";
  }
  throw std::logic_error("bad objective");
}

Objective objective_from_name(const std::string& s) {
  for (Objective o : {Objective::simclr, Objective::dino, Objective::mae, Objective::vqvae,
                      Objective::ar, Objective::modality_contrastive})
    if (objective_name(o) == s) return o;
  throw std::invalid_argument("unknown objective: " + s);
}

PretrainConfig PretrainConfig::defaults_for(Objective o) {
  PretrainConfig c;
  c.objective = o;
  switch (o) {
    case Objective::simclr:
      c.base_lr = 1e-4;
      c.augmentation = AugmentationSpec::time_only();
      c.augmentation.crop.enabled = true;
      break;
    case Objective::dino:
      c.base_lr = 5e-5;
      c.grad_clip = 3.0;
      c.augmentation = AugmentationSpec::osf_default();
      break;
    case Objective::mae:
      c.base_lr = 3e-4;
      c.augmentation = AugmentationSpec::none();
      break;
    case Objective::vqvae:
      c.base_lr = 1e-4;
      c.grad_clip = 3.0;
      c.augmentation = AugmentationSpec::none();
      break;
    case Objective::ar:
      c.base_lr = 1e-4;
      c.weight_decay = 0.05;
      c.augmentation = AugmentationSpec::none();
      break;
    case Objective::modality_contrastive:
      c.base_lr = 1e-4;
      c.augmentation = AugmentationSpec::none();
      break;
  }
  return c;
}

void validate(const PretrainConfig& c) {
  validate(c.augmentation);
  if (!(c.warmup_frac > 0 && c.warmup_frac < 1))
    throw std::invalid_argument("pretrain: warmup_frac must be in (0,1)");
  if (c.batch_size < 1) throw std::invalid_argument("pretrain: batch_size must be >= 1");
  bool contrastive = c.objective == Objective::simclr ||
                     c.objective == Objective::modality_contrastive;
  if (contrastive && c.batch_size < 2)
    throw std::invalid_argument("pretrain: contrastive objectives need batch_size >= 2");
  if (!(c.base_lr > 0)) throw std::invalid_argument("pretrain: base_lr must be > 0");
  if (c.max_epochs < 1 || c.max_epochs > 30)
    throw std::invalid_argument("pretrain: max_epochs must be in [1,30]");
  if (c.max_steps < 0) throw std::invalid_argument("pretrain: max_steps must be >= 0");
  if (c.weight_decay < 0) throw std::invalid_argument("pretrain: weight_decay must be >= 0");
  if (c.grad_clip < 0) throw std::invalid_argument("pretrain: grad_clip must be >= 0");
  if (!(c.contrastive_temperature > 0))
    throw std::invalid_argument("pretrain: temperature must be > 0");
  if (c.projection_dim < 1) throw std::invalid_argument("pretrain: projection_dim must be >= 1");
  if (c.dino_prototypes < 2) throw std::invalid_argument("pretrain: dino_prototypes must be >= 2");
  if (!(c.dino_tau_teacher > 0 && c.dino_tau_teacher < c.dino_tau_student))
    throw std::invalid_argument("pretrain: need 0 < teacher temperature < student temperature");
  if (!(c.dino_ema_momentum >= 0 && c.dino_ema_momentum <= 1))
    throw std::invalid_argument("pretrain: dino_ema_momentum must be in [0,1]");
  if (!(c.dino_center_momentum >= 0 && c.dino_center_momentum <= 1))
    throw std::invalid_argument("pretrain: dino_center_momentum must be in [0,1]");
  if (!(c.mae_mask_ratio > 0 && c.mae_mask_ratio < 1))
    throw std::invalid_argument("pretrain: mae_mask_ratio must be in (0,1)");
  if (c.decoder_depth < 1) throw std::invalid_argument("pretrain: decoder_depth must be >= 1");
  if (c.vq_codebook_size < 1) throw std::invalid_argument("pretrain: vq_codebook_size must be >= 1");
  if (c.vq_commitment_beta < 0)
    throw std::invalid_argument("pretrain: vq_commitment_beta must be >= 0");
  if (!(c.early_stop_delta > 0))
    throw std::invalid_argument("pretrain: early_stop_delta must be > 0");
  if (c.early_stop_patience < 1 || c.loss_smoothing_window < 1)
    throw std::invalid_argument("pretrain: early stop window/patience must be >= 1");
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"objective", objective_name(c.objective)},
                     {"augmentation", c.augmentation},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"weight_decay", c.weight_decay},
                     {"base_lr", c.base_lr},
                     {"batch_size", c.batch_size},
                     {"warmup_frac", c.warmup_frac},
                     {"max_epochs", c.max_epochs},
                     {"max_steps", c.max_steps},
                     {"grad_clip", c.grad_clip},
                     {"seed", c.seed},
                     {"contrastive_temperature", c.contrastive_temperature},
                     {"projection_dim", c.projection_dim},
                     {"dino_prototypes", c.dino_prototypes},
                     {"dino_tau_student", c.dino_tau_student},
                     {"dino_tau_teacher", c.dino_tau_teacher},
                     {"dino_ema_momentum", c.dino_ema_momentum},
                     {"dino_center_momentum", c.dino_center_momentum},
                     {"mae_mask_ratio", c.mae_mask_ratio},
                     {"decoder_depth", c.decoder_depth},
                     {"vq_codebook_size", c.vq_codebook_size},
                     {"vq_commitment_beta", c.vq_commitment_beta},
                     {"early_stop_delta", c.early_stop_delta},
                     {"early_stop_patience", c.early_stop_patience},
                     {"loss_smoothing_window", c.loss_smoothing_window}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  PretrainConfig base;
  if (j.contains("objective")) base = PretrainConfig::defaults_for(
      objective_from_name(j.at("objective").get<std::string>()));
  c = base;
  if (j.contains("augmentation")) j.at("augmentation").get_to(c.augmentation);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.contrastive_temperature = j.value("contrastive_temperature", c.contrastive_temperature);
  c.projection_dim = j.value("projection_dim", c.projection_dim);
  c.dino_prototypes = j.value("dino_prototypes", c.dino_prototypes);
  c.dino_tau_student = j.value("dino_tau_student", c.dino_tau_student);
  c.dino_tau_teacher = j.value("dino_tau_teacher", c.dino_tau_teacher);
  c.dino_ema_momentum = j.value("dino_ema_momentum", c.dino_ema_momentum);
  c.dino_center_momentum = j.value("dino_center_momentum", c.dino_center_momentum);
  c.mae_mask_ratio = j.value("mae_mask_ratio", c.mae_mask_ratio);
  c.decoder_depth = j.value("decoder_depth", c.decoder_depth);
  c.vq_codebook_size = j.value("vq_codebook_size", c.vq_codebook_size);
  c.vq_commitment_beta = j.value("vq_commitment_beta", c.vq_commitment_beta);
  c.early_stop_delta = j.value("early_stop_delta", c.early_stop_delta);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.loss_smoothing_window = j.value("loss_smoothing_window", c.loss_smoothing_window);
}

namespace {

using Mf = nn::Mat<float>;
using Tf = nn::Tensor<float>;
using Tape = nn::Tape<float>;
using Weights = EncoderWeights<float>;

Mf windows_of(const std::vector<Epoch>& eps, const EncoderConfig& c) {
  std::vector<const Epoch*> ptrs;
  ptrs.reserve(eps.size());
  for (const auto& e : eps) ptrs.push_back(&e);
  return epoch_windows<float>(ptrs, c);
}

auto leaves(Tape& t, Weights& w, bool trainable = true) {
  return [&t, &w, trainable](const std::string& n) -> Tf {
    return trainable ? t.leaf(w.at(n)) : t.constant(w.at(n).value);
  };
}

void add_projection_head(Weights& w, int d, int out, Rng& rng) {
  detail::add_param(w, "proj.w1", d, d, 0.02, rng);
  detail::add_param(w, "proj.b1", 1, d, 0.0, rng);
  detail::add_param(w, "proj.w2", d, out, 0.02, rng);
  detail::add_param(w, "proj.b2", 1, out, 0.0, rng);
}

template <class LeafFn>
Tf projection_head(Tf x, LeafFn&& lf) {
  auto h = nn::gelu(nn::linear(x, lf("proj.w1"), lf("proj.b1")));
  return nn::linear(h, lf("proj.w2"), lf("proj.b2"));
}

// shared decoder trunk for the reconstruction objectives: project token
// states to half width, add grid position embeddings, run a small block
// stack, read out raw 64-sample windows
void add_decoder_params(Weights& w, const EncoderConfig& ec, int depth, Rng& rng,
                        bool with_mask_token) {
  const int dd = std::max(2, ec.width / 2);
  detail::add_param(w, "dec.in.w", ec.width, dd, 0.02, rng);
  detail::add_param(w, "dec.in.b", 1, dd, 0.0, rng);
  if (with_mask_token) detail::add_param(w, "dec.mask", 1, dd, 0.02, rng);
  detail::add_param(w, "dec.emb.chan", kNumChannels, dd, 0.02, rng);
  detail::add_param(w, "dec.emb.time", ec.windows_per_channel(), dd, 0.02, rng);
  add_transformer_block_params(w, "dec.blk", depth, dd, 4 * dd, rng);
  detail::add_param(w, "dec.out.w", dd, ec.token_window, 0.02, rng);
  detail::add_param(w, "dec.out.b", 1, ec.token_window, 0.0, rng);
}

template <class LeafFn>
Tf decode_windows(Tf grid, const EncoderConfig& ec, int depth, int batch, LeafFn&& lf) {
  std::vector<std::pair<int, int>> ids;
  ids.reserve(static_cast<size_t>(batch) * ec.signal_tokens());
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < kNumChannels; ++ch)
      for (int wd = 0; wd < ec.windows_per_channel(); ++wd) ids.emplace_back(ch, wd);
  auto x = nn::add_grid_embeddings(grid, lf("dec.emb.chan"), lf("dec.emb.time"), ids);
  x = transformer_blocks(x, "dec.blk", depth, ec.heads, batch, ec.signal_tokens(),
                         /*causal=*/false, lf);
  return nn::linear(x, lf("dec.out.w"), lf("dec.out.b"));
}

class SimclrRunner : public ObjectiveRunner {
 public:
  SimclrRunner(Encoder<float>& enc, const PretrainConfig& cfg) : enc_(enc), cfg_(cfg) {
    Rng rng = Rng(cfg.seed).fork(101);
    add_projection_head(heads_, enc.cfg.width, cfg.projection_dim, rng);
  }

  double compute(const std::vector<const Epoch*>& batch, Rng& rng) override {
    if (batch.size() < 2) throw std::invalid_argument("simclr: batch must be >= 2");
    std::vector<Epoch> va, vb;
    va.reserve(batch.size());
    vb.reserve(batch.size());
    for (const Epoch* e : batch) {
      auto [a, b] = make_views(*e, cfg_.augmentation, rng);
      va.push_back(std::move(a));
      vb.push_back(std::move(b));
    }
    Tape t;
    const int b = static_cast<int>(batch.size());
    auto lf = leaves(t, heads_);
    auto za = projection_head(enc_.forward_cls(t, windows_of(va, enc_.cfg), b), lf);
    auto zb = projection_head(enc_.forward_cls(t, windows_of(vb, enc_.cfg), b), lf);
    auto loss = ntxent_loss(za, zb, cfg_.contrastive_temperature);
    t.backward(loss);
    return loss.val()(0, 0);
  }

  std::vector<nn::Param<float>*> head_params() override { return heads_.all(); }

 private:
  Encoder<float>& enc_;
  PretrainConfig cfg_;
  Weights heads_;
};

class DinoRunner : public ObjectiveRunner {
 public:
  DinoRunner(Encoder<float>& enc, const PretrainConfig& cfg) : enc_(enc), cfg_(cfg) {
    Rng rng = Rng(cfg.seed).fork(102);
    const int d = enc.cfg.width;
    detail::add_param(heads_, "head.w1", d, d, 0.02, rng);
    detail::add_param(heads_, "head.b1", 1, d, 0.0, rng);
    detail::add_param(heads_, "head.w2", d, cfg.dino_prototypes, 0.02, rng);
    detail::add_param(heads_, "head.b2", 1, cfg.dino_prototypes, 0.0, rng);
    // teacher starts as an exact copy of the student
    teacher_enc_ = enc;
    teacher_head_ = heads_;
    center_ = Mf::Zero(1, cfg.dino_prototypes);
  }

  double compute(const std::vector<const Epoch*>& batch, Rng& rng) override {
    std::vector<Epoch> va, vb;
    va.reserve(batch.size());
    vb.reserve(batch.size());
    for (const Epoch* e : batch) {
      auto [a, b] = make_views(*e, cfg_.augmentation, rng);
      va.push_back(std::move(a));
      vb.push_back(std::move(b));
    }
    const int b = static_cast<int>(batch.size());
    Mf wa = windows_of(va, enc_.cfg), wb = windows_of(vb, enc_.cfg);
    Tape t;
    auto lf_s = leaves(t, heads_);
    auto lf_t = leaves(t, teacher_head_, /*trainable=*/false);
    auto head = [](Tf x, auto&& lf) {
      return nn::linear(nn::gelu(nn::linear(x, lf("head.w1"), lf("head.b1"))), lf("head.w2"),
                        lf("head.b2"));
    };
    auto s1 = head(enc_.forward_cls(t, wa, b), lf_s);
    auto s2 = head(enc_.forward_cls(t, wb, b), lf_s);
    auto t1 = head(teacher_enc_.forward_cls(t, wa, b, /*trainable=*/false), lf_t);
    auto t2 = head(teacher_enc_.forward_cls(t, wb, b, /*trainable=*/false), lf_t);
    auto loss = dino_loss(t, {s1, s2}, {t1.val(), t2.val()}, center_, cfg_.dino_tau_student,
                          cfg_.dino_tau_teacher);
    t.backward(loss);
    pending_center_ = (t1.val().colwise().sum() + t2.val().colwise().sum()) / float(2 * b);
    have_pending_ = true;
    return loss.val()(0, 0);
  }

  std::vector<nn::Param<float>*> head_params() override { return heads_.all(); }

  void after_optimizer_step() override {
    ema_update(teacher_enc_.weights.params, enc_.weights.params, cfg_.dino_ema_momentum);
    ema_update(teacher_head_.params, heads_.params, cfg_.dino_ema_momentum);
    if (have_pending_) {
      const float c = static_cast<float>(cfg_.dino_center_momentum);
      center_ = c * center_ + (1.0f - c) * pending_center_;
      have_pending_ = false;
    }
  }

  std::map<std::string, nn::Param<float>>* teacher_params() override {
    return &teacher_enc_.weights.params;
  }

  const Mf& center() const { return center_; }

 private:
  Encoder<float>& enc_;
  PretrainConfig cfg_;
  Weights heads_, teacher_head_;
  Encoder<float> teacher_enc_;
  Mf center_, pending_center_;
  bool have_pending_ = false;
};

class MaeRunner : public ObjectiveRunner {
 public:
  MaeRunner(Encoder<float>& enc, const PretrainConfig& cfg) : enc_(enc), cfg_(cfg) {
    const int n_mask = static_cast<int>(enc.cfg.signal_tokens() * cfg.mae_mask_ratio);
    if (n_mask < 1 || n_mask >= enc.cfg.signal_tokens())
      throw std::invalid_argument("mae: mask ratio leaves no masked or no visible tokens");
    Rng rng = Rng(cfg.seed).fork(103);
    add_decoder_params(heads_, enc.cfg, cfg.decoder_depth, rng, /*with_mask_token=*/true);
  }

  double compute(const std::vector<const Epoch*>& batch, Rng& rng) override {
    const EncoderConfig& ec = enc_.cfg;
    const int per = ec.signal_tokens();
    const int wpc = ec.windows_per_channel();
    const int b = static_cast<int>(batch.size());
    const int n_mask = static_cast<int>(per * cfg_.mae_mask_ratio);
    const int n_vis = per - n_mask;
    Mf targets = epoch_windows<float>(batch, ec);

    std::vector<int> masked_rows, vis_dst, keep;
    std::vector<std::pair<int, int>> vis_ids;
    Mf vis_windows(static_cast<long>(b) * n_vis, ec.token_window);
    masked_rows.reserve(static_cast<size_t>(b) * n_mask);
    for (int e = 0; e < b; ++e) {
      std::vector<int> m = rng.sample_without_replacement(per, n_mask);
      std::vector<bool> is_masked(per, false);
      for (int tok : m) {
        is_masked[tok] = true;
        masked_rows.push_back(e * per + tok);
      }
      int vi = 0;
      for (int tok = 0; tok < per; ++tok) {
        if (is_masked[tok]) continue;
        long row = static_cast<long>(e) * n_vis + vi;
        vis_windows.row(row) = targets.row(e * per + tok);
        vis_ids.emplace_back(tok / wpc, tok % wpc);
        vis_dst.push_back(e * per + tok);
        keep.push_back(e * (n_vis + 1) + 1 + vi);  // skip the CLS row
        ++vi;
      }
    }

    Tape t;
    auto lf = leaves(t, heads_);
    auto tok = enc_.forward_tokens(t, vis_windows, b, vis_ids);
    auto h = nn::linear(tok, lf("dec.in.w"), lf("dec.in.b"));
    auto grid = nn::scatter_rows(nn::gather_rows(h, keep), vis_dst,
                                 static_cast<long>(b) * per, lf("dec.mask"));
    auto pred = decode_windows(grid, ec, cfg_.decoder_depth, b, lf);
    auto loss = masked_window_mse(pred, targets, masked_rows);
    t.backward(loss);
    artifacts_ = {masked_rows, pred.val(), targets};
    return loss.val()(0, 0);
  }

  std::vector<nn::Param<float>*> head_params() override { return heads_.all(); }

 private:
  Encoder<float>& enc_;
  PretrainConfig cfg_;
  Weights heads_;
};

class VqvaeRunner : public ObjectiveRunner {
 public:
  VqvaeRunner(Encoder<float>& enc, const PretrainConfig& cfg) : enc_(enc), cfg_(cfg) {
    Rng rng = Rng(cfg.seed).fork(104);
    detail::add_param(heads_, "codebook", cfg.vq_codebook_size, enc.cfg.width, 0.02, rng);
    add_decoder_params(heads_, enc.cfg, cfg.decoder_depth, rng, /*with_mask_token=*/false);
  }

  double compute(const std::vector<const Epoch*>& batch, Rng&) override {
    const EncoderConfig& ec = enc_.cfg;
    const int per = ec.signal_tokens();
    const int b = static_cast<int>(batch.size());
    Mf targets = epoch_windows<float>(batch, ec);
    Tape t;
    auto lf = leaves(t, heads_);
    auto tok = enc_.forward_tokens(t, targets, b);
    std::vector<int> sig_rows;
    sig_rows.reserve(static_cast<size_t>(b) * per);
    for (int e = 0; e < b; ++e)
      for (int i = 0; i < per; ++i) sig_rows.push_back(e * (per + 1) + 1 + i);
    auto z = nn::gather_rows(tok, sig_rows);
    auto q = vq_quantize(z, lf("codebook"));
    auto h = nn::linear(q.z_q, lf("dec.in.w"), lf("dec.in.b"));
    auto pred = decode_windows(h, ec, cfg_.decoder_depth, b, lf);
    auto recon = nn::mse_loss(pred, targets);
    auto loss = nn::add(recon, nn::add(q.codebook_loss,
                                       nn::scale(q.commitment_loss,
                                                 static_cast<float>(cfg_.vq_commitment_beta))));
    t.backward(loss);
    artifacts_ = {{}, pred.val(), targets};
    return loss.val()(0, 0);
  }

  std::vector<nn::Param<float>*> head_params() override { return heads_.all(); }

 private:
  Encoder<float>& enc_;
  PretrainConfig cfg_;
  Weights heads_;
};

class ArRunner : public ObjectiveRunner {
 public:
  ArRunner(Encoder<float>& enc, const PretrainConfig& cfg) : enc_(enc), cfg_(cfg) {
    Rng rng = Rng(cfg.seed).fork(105);
    // zero init: an untrained head predicts zero for every window
    detail::add_param(heads_, "head.w", enc.cfg.width, enc.cfg.token_window, 0.0, rng);
    detail::add_param(heads_, "head.b", 1, enc.cfg.token_window, 0.0, rng);
  }

  double compute(const std::vector<const Epoch*>& batch, Rng&) override {
    const EncoderConfig& ec = enc_.cfg;
    const int per = ec.signal_tokens();
    const int b = static_cast<int>(batch.size());
    Mf windows = epoch_windows<float>(batch, ec);
    Tape t;
    auto tok = enc_.forward_tokens(t, windows, b, /*causal=*/true);
    // state of token p (sequence position p+1 behind CLS) predicts window p+1
    std::vector<int> state_rows;
    Mf targets(static_cast<long>(b) * (per - 1), ec.token_window);
    for (int e = 0; e < b; ++e)
      for (int p = 0; p + 1 < per; ++p) {
        state_rows.push_back(e * (per + 1) + 1 + p);
        targets.row(static_cast<long>(e) * (per - 1) + p) = windows.row(e * per + p + 1);
      }
    auto lf = leaves(t, heads_);
    auto pred = nn::linear(nn::gather_rows(tok, state_rows), lf("head.w"), lf("head.b"));
    auto loss = nn::mse_loss(pred, targets);
    t.backward(loss);
    artifacts_ = {{}, pred.val(), targets};
    return loss.val()(0, 0);
  }

  std::vector<nn::Param<float>*> head_params() override { return heads_.all(); }

 private:
  Encoder<float>& enc_;
  PretrainConfig cfg_;
  Weights heads_;
};

class ModalityContrastiveRunner : public ObjectiveRunner {
 public:
  ModalityContrastiveRunner(Encoder<float>& enc, const PretrainConfig& cfg)
      : enc_(enc), cfg_(cfg) {
    Rng rng = Rng(cfg.seed).fork(106);
    add_projection_head(heads_, enc.cfg.width, cfg.projection_dim, rng);
  }

  double compute(const std::vector<const Epoch*>& batch, Rng&) override {
    if (batch.size() < 2)
      throw std::invalid_argument("modality_contrastive: batch must be >= 2");
    const int b = static_cast<int>(batch.size());
    auto montage = ChannelMontage::standard();
    Tape t;
    auto lf = leaves(t, heads_);
    std::vector<Tf> groups;
    for (ChannelGroup g : {ChannelGroup::Brain, ChannelGroup::Respiration, ChannelGroup::Cardiac,
                           ChannelGroup::Somatic}) {
      std::vector<Epoch> view;
      view.reserve(batch.size());
      for (const Epoch* e : batch) {
        Epoch v = *e;
        for (int ch = 0; ch < kNumChannels; ++ch)
          if (montage[ch].group != g) v.values.row(ch).setZero();
        view.push_back(std::move(v));
      }
      groups.push_back(projection_head(enc_.forward_cls(t, windows_of(view, enc_.cfg), b), lf));
    }
    auto loss = modality_pairwise_loss(groups, cfg_.contrastive_temperature);
    t.backward(loss);
    return loss.val()(0, 0);
  }

  std::vector<nn::Param<float>*> head_params() override { return heads_.all(); }

 private:
  Encoder<float>& enc_;
  PretrainConfig cfg_;
  Weights heads_;
};

}  // namespace

std::unique_ptr<ObjectiveRunner> make_objective_runner(Encoder<float>& encoder,
                                                       const PretrainConfig& cfg) {
  validate(cfg);
  switch (cfg.objective) {
    case Objective::simclr: return std::make_unique<SimclrRunner>(encoder, cfg);
    case Objective::dino: return std::make_unique<DinoRunner>(encoder, cfg);
    case Objective::mae: return std::make_unique<MaeRunner>(encoder, cfg);
    case Objective::vqvae: return std::make_unique<VqvaeRunner>(encoder, cfg);
    case Objective::ar: return std::make_unique<ArRunner>(encoder, cfg);
    case Objective::modality_contrastive:
      return std::make_unique<ModalityContrastiveRunner>(encoder, cfg);
  }
  throw std::logic_error("bad objective");
}

PretrainResult pretrain(const std::filesystem::path& train_shard, const EncoderConfig& encoder_cfg,
                        const PretrainConfig& cfg, const std::filesystem::path& out_dir) {
  validate(cfg);
  validate(encoder_cfg);
  ShardReader reader(train_shard);
  const size_t n = reader.size();
  if (n == 0) throw std::invalid_argument("pretrain: empty shard");
  std::filesystem::create_directories(out_dir);

  Encoder<float> enc = Encoder<float>::init(encoder_cfg, cfg.seed);
  auto runner = make_objective_runner(enc, cfg);
  auto params = enc.weights.all();
  for (auto* p : runner->head_params()) params.push_back(p);

  const long steps_per_epoch =
      (static_cast<long>(n) + cfg.batch_size - 1) / cfg.batch_size;
  const long total = cfg.max_steps > 0 ? cfg.max_steps : steps_per_epoch * cfg.max_epochs;

  nn::AdamW<float> opt(cfg.beta1, cfg.beta2, cfg.weight_decay);
  Rng order_rng = Rng(cfg.seed).fork(201);
  Rng step_rng = Rng(cfg.seed).fork(202);

  PretrainResult result;
  result.log_path = out_dir / "training_log.csv";
  std::ofstream log(result.log_path, std::ios::trunc);
  log << "step,lr,loss,wall_ms\n";

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  size_t pos = n;  // forces a shuffle before the first batch

  std::deque<double> recent;
  double best_smoothed = std::numeric_limits<double>::infinity();
  long best_step = 0;

  for (long step = 0; step < total; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<Epoch> storage;
    storage.reserve(cfg.batch_size);
    std::vector<const Epoch*> batch;
    for (int i = 0; i < cfg.batch_size; ++i) {
      if (pos >= n) {
        order_rng.shuffle(order);
        pos = 0;
      }
      storage.push_back(reader.read(order[pos++]));
    }
    for (const auto& e : storage) batch.push_back(&e);

    nn::zero_grads(params);
    double loss = runner->compute(batch, step_rng);
    if (!std::isfinite(loss)) {
      // abort before the update so the checkpoint holds the last good weights
      result.diverged = true;
      log << step << "," << nn::lr_at(step, total, cfg.base_lr, cfg.warmup_frac) << "," << loss
          << ",0\n";
      break;
    }
    double lr = nn::lr_at(step, total, cfg.base_lr, cfg.warmup_frac);
    opt.step(params, lr, cfg.grad_clip);
    runner->after_optimizer_step();

    double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log << step << "," << lr << "," << loss << "," << wall_ms << "\n";
    result.steps = step + 1;
    result.final_loss = loss;

    recent.push_back(loss);
    if (static_cast<int>(recent.size()) > cfg.loss_smoothing_window) recent.pop_front();
    if (static_cast<int>(recent.size()) == cfg.loss_smoothing_window) {
      double smoothed = std::accumulate(recent.begin(), recent.end(), 0.0) / recent.size();
      if (smoothed < best_smoothed - cfg.early_stop_delta) {
        best_smoothed = smoothed;
        best_step = step;
      } else if (step - best_step >= cfg.early_stop_patience) {
        result.early_stopped = true;
        break;
      }
    }
  }
  log.close();

  CheckpointMeta meta;
  meta.objective = objective_name(cfg.objective);
  meta.steps = result.steps;
  meta.seed = cfg.seed;
  meta.corpus_hash = hex64(fnv1a64(reader.manifest().dump()));
  result.checkpoint_dir = out_dir / "checkpoint";
  save_checkpoint(result.checkpoint_dir, encoder_cfg, enc.weights, meta);
  return result;
}

}  // namespace osf
