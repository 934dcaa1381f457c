#include "osf/aggregate.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "osf/metrics.hpp"
#include "osf/nn/optim.hpp"
#include "osf/util.hpp"

namespace osf {

long EmbeddingSequence::valid_count() const {
  return std::count(valid.begin(), valid.end(), true);
}

std::vector<long> EmbeddingSequence::valid_rows() const {
  std::vector<long> rows;
  for (long i = 0; i < static_cast<long>(valid.size()); ++i)
    if (valid[i]) rows.push_back(i);
  return rows;
}

EmbeddingMatrix EmbeddingSequence::valid_block() const {
  auto rows = valid_rows();
  EmbeddingMatrix out(rows.size(), embeddings.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(i) = embeddings.row(rows[i]);
  return out;
}

EmbeddingSequence embed_night(Encoder<float>& encoder, const std::vector<Epoch>& night,
                              const std::array<bool, kNumDiseases>& diseases, int batch,
                              bool* truncated) {
  if (night.empty()) throw std::invalid_argument("embed_night: empty night");
  if (batch < 1) throw std::invalid_argument("embed_night: batch must be >= 1");
  const long n_all = static_cast<long>(night.size());
  const long n = std::min<long>(n_all, kMaxNightEpochs);
  const bool trunc = n_all > kMaxNightEpochs;
  if (truncated) *truncated = trunc;
  if (trunc)
    std::fprintf(stderr, "embed_night: patient %u night has %ld epochs, keeping first %d\n",
                 night.front().patient_id, n_all, kMaxNightEpochs);

  EmbeddingSequence seq;
  seq.patient_id = night.front().patient_id;
  seq.disease_labels = diseases;
  seq.embeddings = EmbeddingMatrix::Zero(kMaxNightEpochs, encoder.cfg.width);
  seq.valid.assign(kMaxNightEpochs, false);
  for (long start = 0; start < n; start += batch) {
    const long stop = std::min(n, start + batch);
    std::vector<const Epoch*> ptrs;
    for (long i = start; i < stop; ++i) ptrs.push_back(&night[i]);
    auto emb = encoder.encode(ptrs);
    for (long i = start; i < stop; ++i) {
      seq.embeddings.row(i) = emb.row(i - start);
      seq.valid[i] = true;
    }
  }
  return seq;
}

std::string aggregator_name(AggregatorKind k) {
  switch (k) {
    case AggregatorKind::mean_pool: return "mean_pool";
    case AggregatorKind::recurrent: return "recurrent";
    case AggregatorKind::mil: return "mil";
    case AggregatorKind::topk: return "topk";
  }
  throw std::invalid_argument("unknown aggregator kind");
}

AggregatorKind aggregator_from_name(const std::string& s) {
  if (s == "mean_pool") return AggregatorKind::mean_pool;
  if (s == "recurrent") return AggregatorKind::recurrent;
  if (s == "mil") return AggregatorKind::mil;
  if (s == "topk") return AggregatorKind::topk;
  throw std::invalid_argument("unknown aggregator: " + s);
}

std::vector<long> topk_indices(const std::vector<double>& scores, int k) {
  const long n = static_cast<long>(scores.size());
  if (k < 1 || k > n) throw std::invalid_argument("topk_indices: k must be in [1, N]");
  std::vector<long> idx(n);
  std::iota(idx.begin(), idx.end(), 0L);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](long a, long b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

EmbeddingMatrix mean_of_rows(const EmbeddingMatrix& block, const std::vector<long>& rows) {
  if (rows.empty()) throw std::invalid_argument("mean_of_rows: no rows selected");
  EmbeddingMatrix out = EmbeddingMatrix::Zero(1, block.cols());
  for (long r : rows) out += block.row(r);
  out /= static_cast<float>(rows.size());
  return out;
}

namespace {

EmbeddingMatrix require_valid_block(const EmbeddingSequence& seq) {
  auto block = seq.valid_block();
  if (block.rows() == 0) throw std::invalid_argument("sequence has no valid rows");
  return block;
}

auto constants_of(nn::Tape<float>& t, NamedParams<float>& p) {
  return [&t, &p](const std::string& name) { return t.constant(p.at(name).value); };
}

}  // namespace

EmbeddingMatrix agg_mean(const EmbeddingSequence& seq) {
  auto block = require_valid_block(seq);
  std::vector<long> rows(block.rows());
  std::iota(rows.begin(), rows.end(), 0L);
  return mean_of_rows(block, rows);
}

EmbeddingMatrix agg_recurrent(const EmbeddingSequence& seq, NamedParams<float>& params) {
  nn::Tape<float> t;
  auto z = t.constant(require_valid_block(seq));
  return recurrent_forward(t, z, constants_of(t, params)).val();
}

EmbeddingMatrix agg_mil(const EmbeddingSequence& seq, NamedParams<float>& params) {
  nn::Tape<float> t;
  auto z = t.constant(require_valid_block(seq));
  return mil_forward(t, z, constants_of(t, params)).val();
}

std::vector<double> mil_attention(const EmbeddingSequence& seq, NamedParams<float>& params) {
  nn::Tape<float> t;
  auto z = t.constant(require_valid_block(seq));
  auto lf = constants_of(t, params);
  auto gate =
      nn::mul(nn::tanh_op(nn::matmul(z, lf("mil.v"))), nn::sigmoid(nn::matmul(z, lf("mil.u"))));
  auto a = nn::softmax_rows(nn::transpose(nn::matmul(gate, lf("mil.w"))));
  std::vector<double> out(a.val().cols());
  for (long i = 0; i < a.val().cols(); ++i) out[i] = static_cast<double>(a.val()(0, i));
  return out;
}

EmbeddingMatrix agg_topk(const EmbeddingSequence& seq, NamedParams<float>& params, int k,
                         double st_temperature) {
  nn::Tape<float> t;
  auto z = t.constant(require_valid_block(seq));
  return topk_forward(t, z, constants_of(t, params), k, st_temperature).val();
}

// ---- sequence cache ----------------------------------------------------------

static constexpr size_t kBitmapBytes = (kMaxNightEpochs + 7) / 8;

void save_sequences(const std::vector<EmbeddingSequence>& seqs,
                    const std::filesystem::path& dir) {
  if (seqs.empty()) throw std::invalid_argument("save_sequences: nothing to save");
  const long d = seqs.front().dim();
  std::filesystem::create_directories(dir);
  nlohmann::json index;
  index["dim"] = d;
  index["max_epochs"] = kMaxNightEpochs;
  index["sequences"] = nlohmann::json::array();
  for (size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    if (s.dim() != d) throw std::invalid_argument("save_sequences: inconsistent dims");
    if (s.embeddings.rows() != kMaxNightEpochs ||
        static_cast<int>(s.valid.size()) != kMaxNightEpochs)
      throw std::invalid_argument("save_sequences: malformed sequence");
    std::string file = "seq_" + std::to_string(i) + ".bin";
    std::ofstream f(dir / file, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + (dir / file).string());
    f.write(reinterpret_cast<const char*>(s.embeddings.data()),
            static_cast<std::streamsize>(sizeof(float) * kMaxNightEpochs * d));
    std::array<uint8_t, kBitmapBytes> bits{};
    for (int r = 0; r < kMaxNightEpochs; ++r)
      if (s.valid[r]) bits[r / 8] |= uint8_t(1u << (r % 8));
    f.write(reinterpret_cast<const char*>(bits.data()), bits.size());
    if (!f) throw std::runtime_error("write failed: " + (dir / file).string());
    nlohmann::json entry;
    entry["patient_id"] = s.patient_id;
    entry["file"] = file;
    entry["valid_count"] = s.valid_count();
    entry["diseases"] = s.disease_labels;
    index["sequences"].push_back(entry);
  }
  write_text_file(dir / "index.json", index.dump(2));
}

std::vector<EmbeddingSequence> load_sequences(const std::filesystem::path& dir) {
  auto index = nlohmann::json::parse(read_text_file(dir / "index.json"));
  const long d = index.at("dim").get<long>();
  std::vector<EmbeddingSequence> out;
  for (const auto& entry : index.at("sequences")) {
    EmbeddingSequence s;
    s.patient_id = entry.at("patient_id").get<uint32_t>();
    s.disease_labels = entry.at("diseases").get<std::array<bool, kNumDiseases>>();
    s.embeddings.resize(kMaxNightEpochs, d);
    s.valid.assign(kMaxNightEpochs, false);
    auto path = dir / entry.at("file").get<std::string>();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    f.read(reinterpret_cast<char*>(s.embeddings.data()),
           static_cast<std::streamsize>(sizeof(float) * kMaxNightEpochs * d));
    std::array<uint8_t, kBitmapBytes> bits{};
    f.read(reinterpret_cast<char*>(bits.data()), bits.size());
    if (!f) throw std::runtime_error("truncated sequence file: " + path.string());
    for (int r = 0; r < kMaxNightEpochs; ++r) s.valid[r] = (bits[r / 8] >> (r % 8)) & 1u;
    if (s.valid_count() != entry.at("valid_count").get<long>())
      throw std::runtime_error("validity bitmap disagrees with index: " + path.string());
    out.push_back(std::move(s));
  }
  return out;
}

// ---- disease head -------------------------------------------------------------

void to_json(nlohmann::json& j, const DiseaseHeadConfig& c) {
  j = nlohmann::json{{"aggregator", aggregator_name(c.kind)},
                     {"base_lr", c.base_lr},
                     {"max_epochs", c.max_epochs},
                     {"topk_k", c.topk_k},
                     {"st_temperature", c.st_temperature},
                     {"mil_hidden", c.mil_hidden},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DiseaseHeadConfig& c) {
  c = DiseaseHeadConfig{};
  if (j.contains("aggregator")) c.kind = aggregator_from_name(j.at("aggregator"));
  if (j.contains("base_lr")) c.base_lr = j.at("base_lr");
  if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs");
  if (j.contains("topk_k")) c.topk_k = j.at("topk_k");
  if (j.contains("st_temperature")) c.st_temperature = j.at("st_temperature");
  if (j.contains("mil_hidden")) c.mil_hidden = j.at("mil_hidden");
  if (j.contains("seed")) c.seed = j.at("seed");
}

void validate(const DiseaseHeadConfig& c) {
  if (c.base_lr < 0) throw std::invalid_argument("base_lr must be >= 0");
  if (c.max_epochs < 1 || c.max_epochs > 50)
    throw std::invalid_argument("max_epochs must be in [1, 50]");
  if (c.topk_k < 1) throw std::invalid_argument("topk_k must be >= 1");
  if (!(c.st_temperature > 0)) throw std::invalid_argument("st_temperature must be > 0");
  if (c.mil_hidden < 1) throw std::invalid_argument("mil_hidden must be >= 1");
}

EvalReport train_disease_head(const std::vector<EmbeddingSequence>& train,
                              const std::vector<EmbeddingSequence>& test, int disease,
                              const DiseaseHeadConfig& cfg) {
  validate(cfg);
  if (disease < 0 || disease >= kNumDiseases) throw std::out_of_range("disease index");
  if (train.empty() || test.empty())
    throw std::invalid_argument("train_disease_head: empty patient split");
  const int d = train.front().dim();
  for (const auto& s : train)
    if (s.dim() != d) throw std::invalid_argument("inconsistent embedding dims");
  for (const auto& s : test)
    if (s.dim() != d) throw std::invalid_argument("inconsistent embedding dims");

  std::set<uint32_t> train_ids;
  for (const auto& s : train) train_ids.insert(s.patient_id);
  for (const auto& s : test)
    if (train_ids.count(s.patient_id))
      throw std::runtime_error("patient " + std::to_string(s.patient_id) +
                               " appears in both train and test splits");

  std::vector<int> y_train;
  for (const auto& s : train) y_train.push_back(s.disease_labels[disease] ? 1 : 0);
  const long n_pos = std::count(y_train.begin(), y_train.end(), 1);
  if (n_pos == 0 || n_pos == static_cast<long>(y_train.size()))
    throw std::invalid_argument("training labels are degenerate: single class");

  Rng rng(cfg.seed);
  const uint64_t init_seed = rng.fork(21).next_u64();
  NamedParams<float> params;
  switch (cfg.kind) {
    case AggregatorKind::mean_pool: break;
    case AggregatorKind::recurrent:
      params = init_recurrent_params<float>(d, init_seed);
      break;
    case AggregatorKind::mil:
      params = init_mil_params<float>(d, cfg.mil_hidden, init_seed);
      break;
    case AggregatorKind::topk:
      params = init_topk_params<float>(d, init_seed);
      break;
  }
  {
    Rng head_rng(0);
    detail::add_param(params, "head.w", d, 2, 0.0, head_rng);
    detail::add_param(params, "head.b", 1, 2, 0.0, head_rng);
  }
  auto param_ptrs = params.all();

  auto forward = [&](nn::Tape<float>& t, const EmbeddingSequence& seq,
                     bool trainable) -> nn::Tensor<float> {
    auto lf = [&t, &params, trainable](const std::string& name) {
      return trainable ? t.leaf(params.at(name)) : t.constant(params.at(name).value);
    };
    auto z = t.constant(require_valid_block(seq));
    nn::Tensor<float> agg;
    switch (cfg.kind) {
      case AggregatorKind::mean_pool: agg = mean_pool_forward(t, z); break;
      case AggregatorKind::recurrent: agg = recurrent_forward(t, z, lf); break;
      case AggregatorKind::mil: agg = mil_forward(t, z, lf); break;
      case AggregatorKind::topk: {
        int k = static_cast<int>(std::min<long>(cfg.topk_k, z.val().rows()));
        agg = topk_forward(t, z, lf, k, cfg.st_temperature);
        break;
      }
    }
    return nn::linear(agg, lf("head.w"), lf("head.b"));
  };

  const long n_train = static_cast<long>(train.size());
  const long total_steps = static_cast<long>(cfg.max_epochs) * n_train;
  const double base_lr = cfg.effective_lr();
  nn::AdamW<float> opt(0.9, 0.95, 0.0);
  auto order_rng = rng.fork(22);
  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), size_t{0});
  long step = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    order_rng.shuffle(order);
    for (size_t i : order) {
      nn::Tape<float> t;
      auto logits = forward(t, train[i], /*trainable=*/true);
      auto loss = nn::scale(
          nn::sum_all(nn::gather_elements(nn::log_softmax_rows(logits), {{0, y_train[i]}})),
          -1.0f);
      const double lv = static_cast<double>(loss.val()(0, 0));
      if (!std::isfinite(lv))
        throw std::runtime_error("disease head diverged at step " + std::to_string(step));
      nn::zero_grads(param_ptrs);
      t.backward(loss);
      opt.step(param_ptrs, nn::lr_at(step, total_steps, base_lr));
      ++step;
    }
  }

  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& s : test) {
    nn::Tape<float> t;
    auto logits = forward(t, s, /*trainable=*/false);
    const double a = logits.val()(0, 0), b = logits.val()(0, 1);
    const double m = std::max(a, b);
    scores.push_back(std::exp(b - m) / (std::exp(a - m) + std::exp(b - m)));
    labels.push_back(s.disease_labels[disease] ? 1 : 0);
  }

  EvalReport r;
  r.task = disease_name(disease);
  r.protocol = "disease-" + aggregator_name(cfg.kind);
  r.auroc = auroc(scores, labels);
  r.auprc = auprc(scores, labels);
  r.seed = cfg.seed;
  r.n_train = n_train;
  r.n_test = static_cast<long>(test.size());
  nlohmann::json h;
  to_json(h, cfg);
  h["disease"] = disease;
  r.config_hash = hex64(fnv1a64(h.dump()));
  return r;
}

}  // namespace osf
