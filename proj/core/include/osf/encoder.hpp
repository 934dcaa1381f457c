#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "osf/epoch.hpp"
#include "osf/nn/tensor.hpp"
#include "osf/rng.hpp"

namespace osf {

struct EncoderConfig {
  int width = 64;
  int depth = 2;
  int heads = 4;
  int mlp_dim = 256;
  int token_window = 64;
  int projection_dim = 128;
  std::string preset = "tiny";

  // tiny(64/2/4/256), vit-1m(128/6/4/512), vit-5m(192/12/3/768), vit-85m(768/12/12/3072)
  static EncoderConfig from_preset(const std::string& name);

  int windows_per_channel() const { return kEpochSamples / token_window; }  // 30
  int signal_tokens() const { return kNumChannels * windows_per_channel(); }  // 360
  int total_tokens() const { return signal_tokens() + 1; }  // + CLS
};

void validate(const EncoderConfig& c);
void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

// exact trainable parameter count (tokenizer + blocks + embeddings + CLS)
long param_count(const EncoderConfig& c);

template <class S>
struct EncoderWeights {
  std::map<std::string, nn::Param<S>> params;  // ordered: canonical checkpoint layout

  nn::Param<S>& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("no such weight: " + name);
    return it->second;
  }

  std::vector<nn::Param<S>*> all() {
    std::vector<nn::Param<S>*> v;
    for (auto& [k, p] : params) v.push_back(&p);
    return v;
  }

  long total_size() const {
    long n = 0;
    for (const auto& [k, p] : params) n += p.size();
    return n;
  }
};

namespace detail {

template <class S>
void add_param(EncoderWeights<S>& w, const std::string& name, long rows, long cols,
               double std_dev, Rng& rng, double fill = 0.0) {
  nn::Param<S> p;
  p.name = name;
  p.value.resize(rows, cols);
  if (std_dev > 0) {
    for (long i = 0; i < rows; ++i)
      for (long j = 0; j < cols; ++j) p.value(i, j) = static_cast<S>(rng.normal(0.0, std_dev));
  } else {
    p.value.setConstant(static_cast<S>(fill));
  }
  w.params.emplace(name, std::move(p));
}

}  // namespace detail

template <class S>
void add_transformer_block_params(EncoderWeights<S>& w, const std::string& prefix, int depth,
                                  int d, int mlp_dim, Rng& rng) {
  for (int b = 0; b < depth; ++b) {
    std::string p = prefix + std::to_string(b) + ".";
    detail::add_param(w, p + "ln1.g", 1, d, 0.0, rng, 1.0);
    detail::add_param(w, p + "ln1.b", 1, d, 0.0, rng);
    for (const char* n : {"wq", "wk", "wv", "wo"}) detail::add_param(w, p + "attn." + n, d, d, 0.02, rng);
    for (const char* n : {"bq", "bk", "bv", "bo"}) detail::add_param(w, p + "attn." + n, 1, d, 0.0, rng);
    detail::add_param(w, p + "ln2.g", 1, d, 0.0, rng, 1.0);
    detail::add_param(w, p + "ln2.b", 1, d, 0.0, rng);
    detail::add_param(w, p + "mlp.w1", d, mlp_dim, 0.02, rng);
    detail::add_param(w, p + "mlp.b1", 1, mlp_dim, 0.0, rng);
    detail::add_param(w, p + "mlp.w2", mlp_dim, d, 0.02, rng);
    detail::add_param(w, p + "mlp.b2", 1, d, 0.0, rng);
  }
}

// Pre-norm attention + MLP stack; lf maps a weight name to a tape tensor.
template <class S, class LeafFn>
nn::Tensor<S> transformer_blocks(nn::Tensor<S> x, const std::string& prefix, int depth,
                                 int heads, int batch, int T, bool causal, LeafFn&& lf) {
  for (int b = 0; b < depth; ++b) {
    std::string p = prefix + std::to_string(b) + ".";
    auto h = nn::layer_norm(x, lf(p + "ln1.g"), lf(p + "ln1.b"));
    auto q = nn::linear(h, lf(p + "attn.wq"), lf(p + "attn.bq"));
    auto k = nn::linear(h, lf(p + "attn.wk"), lf(p + "attn.bk"));
    auto v = nn::linear(h, lf(p + "attn.wv"), lf(p + "attn.bv"));
    auto a = nn::self_attention(q, k, v, batch, T, heads, causal);
    x = nn::add(x, nn::linear(a, lf(p + "attn.wo"), lf(p + "attn.bo")));
    auto h2 = nn::layer_norm(x, lf(p + "ln2.g"), lf(p + "ln2.b"));
    auto m = nn::linear(nn::gelu(nn::linear(h2, lf(p + "mlp.w1"), lf(p + "mlp.b1"))),
                        lf(p + "mlp.w2"), lf(p + "mlp.b2"));
    x = nn::add(x, m);
  }
  return x;
}

template <class S>
EncoderWeights<S> init_encoder_weights(const EncoderConfig& c, uint64_t seed) {
  validate(c);
  EncoderWeights<S> w;
  Rng rng(seed);
  const int d = c.width;
  detail::add_param(w, "tok.w", c.token_window, d, 0.02, rng);
  detail::add_param(w, "tok.b", 1, d, 0.0, rng);
  detail::add_param(w, "emb.chan", kNumChannels, d, 0.02, rng);
  detail::add_param(w, "emb.time", c.windows_per_channel(), d, 0.02, rng);
  detail::add_param(w, "emb.cls", 1, d, 0.02, rng);
  add_transformer_block_params(w, "blk", c.depth, d, c.mlp_dim, rng);
  detail::add_param(w, "final.ln.g", 1, d, 0.0, rng, 1.0);
  detail::add_param(w, "final.ln.b", 1, d, 0.0, rng);
  return w;
}

// (channel, window) grid ids in channel-major token order
inline std::vector<std::pair<int, int>> full_token_grid(const EncoderConfig& c) {
  std::vector<std::pair<int, int>> ids;
  ids.reserve(c.signal_tokens());
  for (int ch = 0; ch < kNumChannels; ++ch)
    for (int wd = 0; wd < c.windows_per_channel(); ++wd) ids.emplace_back(ch, wd);
  return ids;
}

// Reshape epochs into the (B * signal_tokens) x token_window window matrix.
template <class S>
nn::Mat<S> epoch_windows(const std::vector<const Epoch*>& batch, const EncoderConfig& c) {
  const int per = c.signal_tokens();
  nn::Mat<S> out(static_cast<long>(batch.size()) * per, c.token_window);
  for (size_t b = 0; b < batch.size(); ++b) {
    const Epoch& e = *batch[b];
    if (e.values.rows() != kNumChannels || e.values.cols() != kEpochSamples)
      throw std::invalid_argument("epoch_windows: epoch is not 12x1920");
    for (int ch = 0; ch < kNumChannels; ++ch)
      for (int wd = 0; wd < c.windows_per_channel(); ++wd)
        for (int j = 0; j < c.token_window; ++j)
          out(b * per + ch * c.windows_per_channel() + wd, j) =
              static_cast<S>(e.values(ch, wd * c.token_window + j));
  }
  return out;
}

template <class S>
class Encoder {
 public:
  EncoderConfig cfg;
  EncoderWeights<S> weights;

  static Encoder init(const EncoderConfig& c, uint64_t seed) {
    Encoder e;
    e.cfg = c;
    e.weights = init_encoder_weights<S>(c, seed);
    return e;
  }

  // All token states (B*(n_tokens+1)) x width after the final LayerNorm.
  // `windows` holds n_tokens windows per example (channel-major), `row_ids`
  // one (channel, window) id per windows row. trainable=false builds a
  // gradient-free graph.
  nn::Tensor<S> forward_tokens(nn::Tape<S>& tape, const nn::Mat<S>& windows, int batch,
                               const std::vector<std::pair<int, int>>& row_ids,
                               bool causal = false, bool trainable = true) {
    if (batch < 1 || windows.rows() % batch != 0)
      throw std::invalid_argument("forward_tokens: bad batch size");
    const int per = static_cast<int>(windows.rows() / batch);
    const int T = per + 1;
    auto lf = [&](const std::string& name) {
      return trainable ? tape.leaf(weights.at(name)) : tape.constant(weights.at(name).value);
    };
    auto x0 = tape.constant(windows);
    auto x = nn::linear(x0, lf("tok.w"), lf("tok.b"));
    x = nn::add_grid_embeddings(x, lf("emb.chan"), lf("emb.time"), row_ids);
    x = nn::insert_cls(x, lf("emb.cls"), batch);
    x = transformer_blocks(x, "blk", cfg.depth, cfg.heads, batch, T, causal, lf);
    return nn::layer_norm(x, lf("final.ln.g"), lf("final.ln.b"));
  }

  nn::Tensor<S> forward_tokens(nn::Tape<S>& tape, const nn::Mat<S>& windows, int batch,
                               bool causal = false, bool trainable = true) {
    if (windows.rows() != static_cast<long>(batch) * cfg.signal_tokens())
      throw std::invalid_argument("forward_tokens: expected full 360-token grid per example");
    std::vector<std::pair<int, int>> ids;
    auto grid = full_token_grid(cfg);
    ids.reserve(windows.rows());
    for (int b = 0; b < batch; ++b) ids.insert(ids.end(), grid.begin(), grid.end());
    return forward_tokens(tape, windows, batch, ids, causal, trainable);
  }

  // CLS states (B x width)
  nn::Tensor<S> forward_cls(nn::Tape<S>& tape, const nn::Mat<S>& windows, int batch,
                            bool trainable = true) {
    auto toks = forward_tokens(tape, windows, batch, false, trainable);
    const int T = static_cast<int>(toks.val().rows() / batch);
    std::vector<int> cls_rows(batch);
    for (int b = 0; b < batch; ++b) cls_rows[b] = b * T;
    return nn::gather_rows(toks, cls_rows);
  }

  // no-grad convenience: epoch batch -> embeddings (B x width)
  nn::Mat<S> encode(const std::vector<const Epoch*>& batch) {
    nn::Tape<S> tape;
    auto emb = forward_cls(tape, epoch_windows<S>(batch, cfg), static_cast<int>(batch.size()),
                           /*trainable=*/false);
    if (!emb.val().allFinite())
      throw std::runtime_error("encoder produced non-finite activations");
    return emb.val();
  }
};

struct CheckpointMeta {
  std::string objective;
  long steps = 0;
  uint64_t seed = 0;
  std::string corpus_hash;
};

void save_checkpoint(const std::filesystem::path& dir, const EncoderConfig& cfg,
                     EncoderWeights<float>& weights, const CheckpointMeta& meta);
Encoder<float> load_checkpoint(const std::filesystem::path& dir,
                               CheckpointMeta* meta_out = nullptr);

}  // namespace osf
