#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "osf/encoder.hpp"
#include "osf/eval.hpp"
#include "osf/nn/tensor.hpp"
#include "osf/rng.hpp"

namespace osf {

inline constexpr int kMaxNightEpochs = 1200;

// Fixed-length per-patient night of frozen-encoder embeddings. Rows beyond the
// night length are invalid and all-zero; aggregators must never read them.
struct EmbeddingSequence {
  uint32_t patient_id = 0;
  EmbeddingMatrix embeddings;  // kMaxNightEpochs x D
  std::vector<bool> valid;     // size kMaxNightEpochs
  std::array<bool, kNumDiseases> disease_labels{};

  int dim() const { return static_cast<int>(embeddings.cols()); }
  long valid_count() const;
  std::vector<long> valid_rows() const;            // ascending temporal order
  EmbeddingMatrix valid_block() const;             // valid_count x D
};

// One embedding row per epoch, in the given temporal order. Nights longer than
// kMaxNightEpochs are truncated from the end (a warning is printed and
// *truncated set when provided). Empty nights are rejected.
EmbeddingSequence embed_night(Encoder<float>& encoder, const std::vector<Epoch>& night,
                              const std::array<bool, kNumDiseases>& diseases, int batch = 64,
                              bool* truncated = nullptr);

enum class AggregatorKind { mean_pool, recurrent, mil, topk };

std::string aggregator_name(AggregatorKind k);
AggregatorKind aggregator_from_name(const std::string& s);

template <class S>
using NamedParams = EncoderWeights<S>;

// ---- parameter initializers -------------------------------------------------

template <class S>
NamedParams<S> init_recurrent_params(int d, uint64_t seed) {
  if (d < 1) throw std::invalid_argument("init_recurrent_params: d must be >= 1");
  NamedParams<S> p;
  Rng rng(seed);
  const double std_dev = 0.1;
  for (const char* gate : {"i", "f", "o", "c"}) {
    detail::add_param(p, std::string("rec.w") + gate, d, d, std_dev, rng);
    detail::add_param(p, std::string("rec.u") + gate, d, d, std_dev, rng);
    detail::add_param(p, std::string("rec.b") + gate, 1, d, 0.0, rng);
  }
  detail::add_param(p, "rec.proj.w", d, d, std_dev, rng);
  detail::add_param(p, "rec.proj.b", 1, d, 0.0, rng);
  return p;
}

template <class S>
NamedParams<S> init_mil_params(int d, int hidden, uint64_t seed) {
  if (d < 1 || hidden < 1) throw std::invalid_argument("init_mil_params: bad shape");
  NamedParams<S> p;
  Rng rng(seed);
  detail::add_param(p, "mil.v", d, hidden, 0.1, rng);
  detail::add_param(p, "mil.u", d, hidden, 0.1, rng);
  detail::add_param(p, "mil.w", hidden, 1, 0.1, rng);
  return p;
}

template <class S>
NamedParams<S> init_topk_params(int d, uint64_t seed) {
  if (d < 1) throw std::invalid_argument("init_topk_params: d must be >= 1");
  NamedParams<S> p;
  Rng rng(seed);
  detail::add_param(p, "topk.w", d, 1, 0.1, rng);
  detail::add_param(p, "topk.b", 1, 1, 0.0, rng);
  return p;
}

// ---- differentiable forwards over the valid rows ---------------------------
// `z` holds the valid rows of one night in temporal order (N x D). `lf(name)`
// resolves a parameter name to a tape tensor (leaf when training, constant
// when evaluating).

template <class S>
nn::Tensor<S> mean_pool_forward(nn::Tape<S>& t, nn::Tensor<S> z) {
  const long n = z.val().rows();
  if (n < 1) throw std::invalid_argument("mean_pool_forward: empty sequence");
  nn::Mat<S> ones = nn::Mat<S>::Constant(1, n, static_cast<S>(1.0 / static_cast<double>(n)));
  return nn::matmul(t.constant(std::move(ones)), z);
}

// Gated recurrence over rows with hidden size D, final hidden state projected
// back to D.
template <class S, class LeafFn>
nn::Tensor<S> recurrent_forward(nn::Tape<S>& t, nn::Tensor<S> z, LeafFn&& lf) {
  const long n = z.val().rows();
  const long d = z.val().cols();
  if (n < 1) throw std::invalid_argument("recurrent_forward: empty sequence");
  auto h = t.constant(nn::Mat<S>::Zero(1, d));
  auto c = t.constant(nn::Mat<S>::Zero(1, d));
  for (long i = 0; i < n; ++i) {
    auto x = nn::gather_rows(z, {static_cast<int>(i)});
    auto ig = nn::sigmoid(nn::add(nn::linear(x, lf("rec.wi"), lf("rec.bi")), nn::matmul(h, lf("rec.ui"))));
    auto fg = nn::sigmoid(nn::add(nn::linear(x, lf("rec.wf"), lf("rec.bf")), nn::matmul(h, lf("rec.uf"))));
    auto og = nn::sigmoid(nn::add(nn::linear(x, lf("rec.wo"), lf("rec.bo")), nn::matmul(h, lf("rec.uo"))));
    auto g = nn::tanh_op(nn::add(nn::linear(x, lf("rec.wc"), lf("rec.bc")), nn::matmul(h, lf("rec.uc"))));
    c = nn::add(nn::mul(fg, c), nn::mul(ig, g));
    h = nn::mul(og, nn::tanh_op(c));
  }
  return nn::linear(h, lf("rec.proj.w"), lf("rec.proj.b"));
}

// Gated attention pooling: a = softmax_i w^T (tanh(V z_i) * sigmoid(U z_i)),
// output sum_i a_i z_i.
template <class S, class LeafFn>
nn::Tensor<S> mil_forward(nn::Tape<S>& t, nn::Tensor<S> z, LeafFn&& lf) {
  if (z.val().rows() < 1) throw std::invalid_argument("mil_forward: empty sequence");
  (void)t;
  auto gate = nn::mul(nn::tanh_op(nn::matmul(z, lf("mil.v"))), nn::sigmoid(nn::matmul(z, lf("mil.u"))));
  auto scores = nn::transpose(nn::matmul(gate, lf("mil.w")));  // 1 x N
  auto a = nn::softmax_rows(scores);
  return nn::matmul(a, z);
}

// Row indices of the k highest scores; ties keep the lower index.
std::vector<long> topk_indices(const std::vector<double>& scores, int k);

// Mean of the selected rows, summed in ascending index order.
EmbeddingMatrix mean_of_rows(const EmbeddingMatrix& block, const std::vector<long>& rows);

// Hard top-k mean in the forward pass; gradients flow through a
// softmax(scores / st_temperature)-weighted surrogate.
template <class S, class LeafFn>
nn::Tensor<S> topk_forward(nn::Tape<S>& t, nn::Tensor<S> z, LeafFn&& lf, int k,
                           double st_temperature = 1.0) {
  const long n = z.val().rows();
  if (n < 1) throw std::invalid_argument("topk_forward: empty sequence");
  if (k < 1 || k > n) throw std::invalid_argument("topk_forward: k must be in [1, N]");
  if (!(st_temperature > 0)) throw std::invalid_argument("topk_forward: temperature must be > 0");
  (void)t;
  auto scores = nn::transpose(nn::linear(z, lf("topk.w"), lf("topk.b")));  // 1 x N
  std::vector<double> s(n);
  for (long i = 0; i < n; ++i) s[i] = static_cast<double>(scores.val()(0, i));
  auto picked = topk_indices(s, k);
  std::sort(picked.begin(), picked.end());  // accumulate in ascending row order
  nn::Mat<S> hard = nn::Mat<S>::Zero(1, z.val().cols());
  for (long r : picked) hard += z.val().row(r);
  hard /= static_cast<S>(k);
  auto surrogate = nn::matmul(nn::softmax_rows(nn::scale(scores, static_cast<S>(1.0 / st_temperature))), z);
  return nn::straight_through(hard, surrogate);
}

// ---- value-level aggregation over a sequence --------------------------------

EmbeddingMatrix agg_mean(const EmbeddingSequence& seq);  // 1 x D
EmbeddingMatrix agg_recurrent(const EmbeddingSequence& seq, NamedParams<float>& params);
EmbeddingMatrix agg_mil(const EmbeddingSequence& seq, NamedParams<float>& params);
std::vector<double> mil_attention(const EmbeddingSequence& seq, NamedParams<float>& params);
EmbeddingMatrix agg_topk(const EmbeddingSequence& seq, NamedParams<float>& params, int k,
                         double st_temperature = 1.0);

// ---- on-disk sequence cache --------------------------------------------------
// dir/index.json lists patients; each seq_<id>.bin holds the f32 row-major
// kMaxNightEpochs x D block followed by an LSB-first validity bitmap.
void save_sequences(const std::vector<EmbeddingSequence>& seqs,
                    const std::filesystem::path& dir);
std::vector<EmbeddingSequence> load_sequences(const std::filesystem::path& dir);

// ---- patient-level disease classification ------------------------------------

struct DiseaseHeadConfig {
  AggregatorKind kind = AggregatorKind::mean_pool;
  double base_lr = 0.0;  // 0 -> 1e-2 for mean_pool, 5e-3 otherwise
  int max_epochs = 50;   // hard cap 50
  int topk_k = 16;       // clamped per night to its valid count
  double st_temperature = 1.0;
  int mil_hidden = 64;
  uint64_t seed = 0;

  double effective_lr() const {
    if (base_lr > 0) return base_lr;
    return kind == AggregatorKind::mean_pool ? 1e-2 : 5e-3;
  }
};

void to_json(nlohmann::json& j, const DiseaseHeadConfig& c);
void from_json(const nlohmann::json& j, DiseaseHeadConfig& c);
void validate(const DiseaseHeadConfig& c);

// Trains the aggregator and a logistic head jointly on the training patients
// and reports AUROC/AUPRC over the test patients. Train and test patient sets
// must be disjoint; training labels must contain both classes.
EvalReport train_disease_head(const std::vector<EmbeddingSequence>& train,
                              const std::vector<EmbeddingSequence>& test, int disease,
                              const DiseaseHeadConfig& cfg);

}  // namespace osf
