#include "osf/eval.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "osf/nn/optim.hpp"
#include "osf/nn/tensor.hpp"
#include "osf/util.hpp"

namespace osf {

TaskSpec TaskSpec::from_name(const std::string& s) {
  if (s == "staging") return {TaskKind::staging};
  if (s == "arousal") return {TaskKind::arousal};
  if (s == "hypopnea") return {TaskKind::hypopnea};
  if (s == "ox_desat") return {TaskKind::ox_desat};
  if (s == "central_apnea") return {TaskKind::central_apnea};
  if (s == "hr_regression") return {TaskKind::hr_regression};
  throw std::invalid_argument("unknown task: " + s);
}

std::vector<TaskSpec> TaskSpec::all() {
  return {{TaskKind::staging},       {TaskKind::arousal},
          {TaskKind::hypopnea},      {TaskKind::ox_desat},
          {TaskKind::central_apnea}, {TaskKind::hr_regression}};
}

std::string TaskSpec::name() const {
  switch (kind) {
    case TaskKind::staging: return "staging";
    case TaskKind::arousal: return "arousal";
    case TaskKind::hypopnea: return "hypopnea";
    case TaskKind::ox_desat: return "ox_desat";
    case TaskKind::central_apnea: return "central_apnea";
    case TaskKind::hr_regression: return "hr_regression";
  }
  throw std::logic_error("bad task kind");
}

int TaskSpec::n_classes() const {
  if (kind == TaskKind::staging) return kNumStages;
  if (kind == TaskKind::hr_regression) return 0;
  return 2;
}

int TaskSpec::label_of(const Epoch& e) const {
  switch (kind) {
    case TaskKind::staging: return static_cast<int>(e.stage);
    case TaskKind::arousal: return e.event_flags[0] ? 1 : 0;
    case TaskKind::hypopnea: return e.event_flags[1] ? 1 : 0;
    case TaskKind::ox_desat: return e.event_flags[2] ? 1 : 0;
    case TaskKind::central_apnea: return e.event_flags[3] ? 1 : 0;
    case TaskKind::hr_regression: break;
  }
  throw std::logic_error("label_of: regression task has no class label");
}

float TaskSpec::target_of(const Epoch& e) const {
  if (kind != TaskKind::hr_regression)
    throw std::logic_error("target_of: only the hr task has a numeric target");
  return e.hr_bpm;
}

MissingChannelSetting MissingChannelSetting::preset(const std::string& name) {
  if (name == "full_montage") return full_montage();
  if (name == "head_band") return head_band();
  if (name == "disorder_study") return disorder_study();
  if (name == "micro_arch") return micro_arch();
  if (name == "in_home") return in_home();
  throw std::invalid_argument("unknown channel setting: " + name);
}

bool MissingChannelSetting::keeps(ChannelGroup g) const {
  return std::find(kept.begin(), kept.end(), g) != kept.end();
}

Epoch apply_missing_setting(const Epoch& e, const MissingChannelSetting& s) {
  Epoch out = e;
  auto montage = ChannelMontage::standard();
  for (int ch = 0; ch < kNumChannels; ++ch) {
    if (s.keeps(montage[ch].group)) continue;
    out.values.row(ch).setZero();
    out.channel_valid[ch] = false;
  }
  return out;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"task", r.task},
                     {"protocol", r.protocol},
                     {"setting", r.setting},
                     {"seed", r.seed},
                     {"config_hash", r.config_hash},
                     {"n_train", r.n_train},
                     {"n_test", r.n_test}};
  if (!std::isnan(r.auroc)) j["auroc"] = r.auroc;
  if (!std::isnan(r.auprc)) j["auprc"] = r.auprc;
  if (!std::isnan(r.mae_bpm)) {
    j["mae_bpm"] = r.mae_bpm;
    j["rmse_bpm"] = r.rmse_bpm;
    j["baseline_mae_bpm"] = r.baseline_mae_bpm;
    j["baseline_rmse_bpm"] = r.baseline_rmse_bpm;
  }
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r = EvalReport{};
  j.at("task").get_to(r.task);
  j.at("protocol").get_to(r.protocol);
  r.setting = j.value("setting", std::string("full_montage"));
  r.seed = j.value("seed", uint64_t{0});
  r.config_hash = j.value("config_hash", std::string());
  r.n_train = j.value("n_train", 0L);
  r.n_test = j.value("n_test", 0L);
  r.auroc = j.value("auroc", std::nan(""));
  r.auprc = j.value("auprc", std::nan(""));
  r.mae_bpm = j.value("mae_bpm", std::nan(""));
  r.rmse_bpm = j.value("rmse_bpm", std::nan(""));
  r.baseline_mae_bpm = j.value("baseline_mae_bpm", std::nan(""));
  r.baseline_rmse_bpm = j.value("baseline_rmse_bpm", std::nan(""));
}

std::string reports_to_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  out << "task,protocol,setting,seed,auroc,auprc,mae_bpm,rmse_bpm,baseline_mae_bpm,"
         "baseline_rmse_bpm,n_train,n_test,config_hash\n";
  auto cell = [](double v) {
    if (std::isnan(v)) return std::string();
    char buf[32];
    snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  for (const auto& r : reports)
    out << r.task << ',' << r.protocol << ',' << r.setting << ',' << r.seed << ','
        << cell(r.auroc) << ',' << cell(r.auprc) << ',' << cell(r.mae_bpm) << ','
        << cell(r.rmse_bpm) << ',' << cell(r.baseline_mae_bpm) << ','
        << cell(r.baseline_rmse_bpm) << ',' << r.n_train << ',' << r.n_test << ','
        << r.config_hash << '\n';
  return out.str();
}

void to_json(nlohmann::json& j, const EvalOptions& o) {
  j = nlohmann::json{{"probe_lr", o.probe_lr},
                     {"probe_max_steps", o.probe_max_steps},
                     {"probe_batch", o.probe_batch},
                     {"finetune_lr", o.finetune_lr},
                     {"finetune_epochs", o.finetune_epochs},
                     {"finetune_batch", o.finetune_batch},
                     {"embed_batch", o.embed_batch},
                     {"seed", o.seed}};
  if (o.setting) j["setting"] = o.setting->name;
}

void from_json(const nlohmann::json& j, EvalOptions& o) {
  o = EvalOptions{};
  o.probe_lr = j.value("probe_lr", o.probe_lr);
  o.probe_max_steps = j.value("probe_max_steps", o.probe_max_steps);
  o.probe_batch = j.value("probe_batch", o.probe_batch);
  o.finetune_lr = j.value("finetune_lr", o.finetune_lr);
  o.finetune_epochs = j.value("finetune_epochs", o.finetune_epochs);
  o.finetune_batch = j.value("finetune_batch", o.finetune_batch);
  o.embed_batch = j.value("embed_batch", o.embed_batch);
  o.seed = j.value("seed", o.seed);
  if (j.contains("setting"))
    o.setting = MissingChannelSetting::preset(j.at("setting").get<std::string>());
}

EmbeddingMatrix extract_embeddings(Encoder<float>& encoder, const std::filesystem::path& shard,
                                   const MissingChannelSetting* setting, int batch) {
  ShardReader reader(shard);
  const size_t n = reader.size();
  EmbeddingMatrix out(n, encoder.cfg.width);
  for (size_t start = 0; start < n; start += batch) {
    size_t end = std::min(n, start + batch);
    std::vector<Epoch> chunk;
    chunk.reserve(end - start);
    for (size_t i = start; i < end; ++i) {
      Epoch e = reader.read(i);
      chunk.push_back(setting ? apply_missing_setting(e, *setting) : std::move(e));
    }
    std::vector<const Epoch*> ptrs;
    for (const auto& e : chunk) ptrs.push_back(&e);
    out.middleRows(start, end - start) = encoder.encode(ptrs);
  }
  return out;
}

EmbeddingMatrix LinearHead::logits(const EmbeddingMatrix& emb) const {
  EmbeddingMatrix z = emb * w;
  z.rowwise() += Eigen::Matrix<float, 1, Eigen::Dynamic>(b.row(0));
  return z;
}

Eigen::MatrixXd LinearHead::probabilities(const EmbeddingMatrix& emb) const {
  Eigen::MatrixXd z = logits(emb).cast<double>();
  for (long r = 0; r < z.rows(); ++r) {
    Eigen::RowVectorXd e = (z.row(r).array() - z.row(r).maxCoeff()).exp();
    z.row(r) = e / e.sum();
  }
  return z;
}

namespace {

using Mf = nn::Mat<float>;

// one pass of minibatch indices in a seeded shuffled order, wrapping
struct BatchCursor {
  std::vector<long> order;
  size_t pos;
  Rng rng;

  BatchCursor(long n, uint64_t seed) : order(n), pos(n), rng(seed) {
    std::iota(order.begin(), order.end(), 0L);
  }
  std::vector<long> next(int batch) {
    std::vector<long> out;
    out.reserve(batch);
    for (int i = 0; i < batch; ++i) {
      if (pos >= order.size()) {
        rng.shuffle(order);
        pos = 0;
      }
      out.push_back(order[pos++]);
    }
    return out;
  }
};

LinearHead train_head_impl(const EmbeddingMatrix& emb, const std::vector<int>* labels,
                           const std::vector<float>* targets, int n_classes,
                           const HeadTrainOptions& opts) {
  const long n = emb.rows();
  if (n == 0) throw std::invalid_argument("head training: empty split");
  const long d = emb.cols();
  nn::Param<float> w, b;
  w.name = "head.w";
  w.value = Mf::Zero(d, n_classes);
  b.name = "head.b";
  b.value = Mf::Zero(1, n_classes);
  std::vector<nn::Param<float>*> params = {&w, &b};
  nn::AdamW<float> opt(0.9, 0.95, 0.0);
  BatchCursor cursor(n, opts.seed);
  const int batch = static_cast<int>(std::min<long>(opts.batch, n));
  for (long step = 0; step < opts.max_steps; ++step) {
    auto idx = cursor.next(batch);
    Mf x(batch, d);
    for (int i = 0; i < batch; ++i) x.row(i) = emb.row(idx[i]);
    nn::Tape<float> t;
    auto logits = nn::linear(t.constant(x), t.leaf(w), t.leaf(b));
    nn::Tensor<float> loss;
    if (labels) {
      std::vector<std::pair<int, int>> at;
      at.reserve(batch);
      for (int i = 0; i < batch; ++i) at.emplace_back(i, (*labels)[idx[i]]);
      loss = nn::scale(nn::sum_all(nn::gather_elements(nn::log_softmax_rows(logits), at)),
                       -1.0f / batch);
    } else {
      Mf y(batch, 1);
      for (int i = 0; i < batch; ++i) y(i, 0) = (*targets)[idx[i]];
      loss = nn::mse_loss(logits, y);
    }
    nn::zero_grads(params);
    t.backward(loss);
    opt.step(params, nn::lr_at(step, opts.max_steps, opts.base_lr));
  }
  return LinearHead{w.value, b.value};
}

struct Labeled {
  EmbeddingMatrix emb;
  std::vector<int> labels;
};

std::vector<int> shard_labels(const ShardReader& reader, const TaskSpec& task) {
  std::vector<int> labels(reader.size());
  for (size_t i = 0; i < reader.size(); ++i) {
    if (task.kind == TaskKind::staging)
      labels[i] = reader.stages()[i];
    else
      labels[i] = (reader.event_bits()[i] >> (static_cast<int>(task.kind) - 1)) & 1;
  }
  return labels;
}

void check_patient_isolation(const std::filesystem::path& train_shard,
                             const std::filesystem::path& test_shard) {
  ShardReader a(train_shard), b(test_shard);
  std::set<uint32_t> train_ids(a.patient_ids().begin(), a.patient_ids().end());
  for (uint32_t id : b.patient_ids())
    if (train_ids.count(id))
      throw std::runtime_error("patient " + std::to_string(id) +
                               " appears in both train and test splits");
}

EvalReport classification_report(const TaskSpec& task, const LinearHead& head,
                                 const EmbeddingMatrix& test_emb,
                                 const std::vector<int>& test_labels) {
  EvalReport r;
  r.task = task.name();
  auto probs = head.probabilities(test_emb);
  if (task.kind == TaskKind::staging) {
    auto m = staging_metrics(probs, test_labels);
    r.auroc = m.macro_auroc;
    r.auprc = m.macro_auprc;
  } else {
    std::vector<double> scores(probs.rows());
    for (long i = 0; i < probs.rows(); ++i) scores[i] = probs(i, 1);
    r.auroc = auroc(scores, test_labels);
    r.auprc = auprc(scores, test_labels);
  }
  return r;
}

std::string hash_config(const std::string& protocol, const TaskSpec& task,
                        const EvalOptions& opts, const std::filesystem::path& checkpoint,
                        int k = 0) {
  nlohmann::json j = opts;
  j["protocol"] = protocol;
  j["task"] = task.name();
  // identify the checkpoint by its content, not its location
  j["checkpoint"] = hex64(fnv1a64(read_text_file(checkpoint / "config.json")));
  if (k > 0) j["k"] = k;
  return hex64(fnv1a64(j.dump()));
}

}  // namespace

LinearHead train_logistic_head(const EmbeddingMatrix& emb, const std::vector<int>& labels,
                               int n_classes, const HeadTrainOptions& opts) {
  if (static_cast<long>(labels.size()) != emb.rows())
    throw std::invalid_argument("head training: labels/embeddings size mismatch");
  if (n_classes < 2) throw std::invalid_argument("head training: need >= 2 classes");
  for (int y : labels)
    if (y < 0 || y >= n_classes) throw std::invalid_argument("head training: label out of range");
  return train_head_impl(emb, &labels, nullptr, n_classes, opts);
}

LinearHead train_regression_head(const EmbeddingMatrix& emb, const std::vector<float>& targets,
                                 const HeadTrainOptions& opts) {
  if (static_cast<long>(targets.size()) != emb.rows())
    throw std::invalid_argument("head training: targets/embeddings size mismatch");
  return train_head_impl(emb, nullptr, &targets, 1, opts);
}

EvalReport linear_probe(const std::filesystem::path& checkpoint_dir,
                        const std::filesystem::path& train_shard,
                        const std::filesystem::path& test_shard, const TaskSpec& task,
                        const EvalOptions& opts) {
  if (task.is_regression()) return hr_probe(checkpoint_dir, train_shard, test_shard, opts);
  check_patient_isolation(train_shard, test_shard);
  auto enc = load_checkpoint(checkpoint_dir);
  const MissingChannelSetting* setting = opts.setting ? &*opts.setting : nullptr;
  auto train_emb = extract_embeddings(enc, train_shard, setting, opts.embed_batch);
  auto test_emb = extract_embeddings(enc, test_shard, setting, opts.embed_batch);
  ShardReader train_reader(train_shard), test_reader(test_shard);
  auto train_labels = shard_labels(train_reader, task);
  auto test_labels = shard_labels(test_reader, task);
  if (train_emb.rows() == 0 || test_emb.rows() == 0)
    throw std::invalid_argument("linear_probe: empty split");

  HeadTrainOptions hopts{opts.probe_lr, opts.probe_max_steps, opts.probe_batch, opts.seed};
  auto head = train_logistic_head(train_emb, train_labels, task.n_classes(), hopts);
  auto r = classification_report(task, head, test_emb, test_labels);
  r.protocol = "linear_probe";
  r.setting = opts.setting ? opts.setting->name : "full_montage";
  r.seed = opts.seed;
  r.n_train = train_emb.rows();
  r.n_test = test_emb.rows();
  r.config_hash = hash_config("linear_probe", task, opts, checkpoint_dir);
  return r;
}

EvalReport finetune(const std::filesystem::path& checkpoint_dir,
                    const std::filesystem::path& train_shard,
                    const std::filesystem::path& test_shard, const TaskSpec& task,
                    const EvalOptions& opts) {
  if (task.is_regression())
    throw std::invalid_argument("finetune: classification tasks only");
  check_patient_isolation(train_shard, test_shard);
  auto enc = load_checkpoint(checkpoint_dir);
  const MissingChannelSetting* setting = opts.setting ? &*opts.setting : nullptr;

  if (opts.finetune_epochs == 0) {
    // degenerate case: frozen encoder, head-only training
    auto r = linear_probe(checkpoint_dir, train_shard, test_shard, task, opts);
    r.protocol = "finetune";
    r.config_hash = hash_config("finetune", task, opts, checkpoint_dir);
    return r;
  }

  ShardReader train_reader(train_shard);
  const long n = static_cast<long>(train_reader.size());
  if (n == 0) throw std::invalid_argument("finetune: empty split");
  std::vector<Epoch> train_epochs;
  train_epochs.reserve(n);
  for (long i = 0; i < n; ++i) {
    Epoch e = train_reader.read(i);
    train_epochs.push_back(setting ? apply_missing_setting(e, *setting) : std::move(e));
  }
  auto train_labels = shard_labels(train_reader, task);

  const int c = task.n_classes();
  nn::Param<float> hw, hb;
  hw.name = "task.w";
  hw.value = Mf::Zero(enc.cfg.width, c);
  hb.name = "task.b";
  hb.value = Mf::Zero(1, c);
  auto params = enc.weights.all();
  params.push_back(&hw);
  params.push_back(&hb);
  nn::AdamW<float> opt(0.9, 0.95, 0.0);

  const int batch = static_cast<int>(std::min<long>(opts.finetune_batch, n));
  const long steps_per_epoch = (n + batch - 1) / batch;
  const long total = steps_per_epoch * opts.finetune_epochs;
  BatchCursor cursor(n, opts.seed);
  for (long step = 0; step < total; ++step) {
    auto idx = cursor.next(batch);
    std::vector<const Epoch*> bp;
    std::vector<std::pair<int, int>> at;
    for (int i = 0; i < batch; ++i) {
      bp.push_back(&train_epochs[idx[i]]);
      at.emplace_back(i, train_labels[idx[i]]);
    }
    nn::Tape<float> t;
    auto cls = enc.forward_cls(t, epoch_windows<float>(bp, enc.cfg), batch);
    auto logits = nn::linear(cls, t.leaf(hw), t.leaf(hb));
    auto loss = nn::scale(nn::sum_all(nn::gather_elements(nn::log_softmax_rows(logits), at)),
                          -1.0f / batch);
    double lv = loss.val()(0, 0);
    if (!std::isfinite(lv))
      throw std::runtime_error("finetune diverged at step " + std::to_string(step) +
                               " (loss=" + std::to_string(lv) + ")");
    nn::zero_grads(params);
    t.backward(loss);
    opt.step(params, nn::lr_at(step, total, opts.finetune_lr));
  }

  auto test_emb = extract_embeddings(enc, test_shard, setting, opts.embed_batch);
  ShardReader test_reader(test_shard);
  if (test_emb.rows() == 0) throw std::invalid_argument("finetune: empty test split");
  LinearHead head{hw.value, hb.value};
  auto r = classification_report(task, head, test_emb, shard_labels(test_reader, task));
  r.protocol = "finetune";
  r.setting = opts.setting ? opts.setting->name : "full_montage";
  r.seed = opts.seed;
  r.n_train = n;
  r.n_test = test_emb.rows();
  r.config_hash = hash_config("finetune", task, opts, checkpoint_dir);
  return r;
}

EvalReport fewshot(const std::filesystem::path& checkpoint_dir,
                   const std::filesystem::path& train_shard,
                   const std::filesystem::path& test_shard, const TaskSpec& task, int k,
                   const EvalOptions& opts) {
  if (task.is_regression()) throw std::invalid_argument("fewshot: classification tasks only");
  if (k < 1) throw std::invalid_argument("fewshot: k must be >= 1");
  check_patient_isolation(train_shard, test_shard);
  ShardReader train_reader(train_shard);
  auto train_labels = shard_labels(train_reader, task);
  const int c = task.n_classes();
  std::vector<std::vector<long>> by_class(c);
  for (size_t i = 0; i < train_labels.size(); ++i) by_class[train_labels[i]].push_back(i);
  Rng rng = Rng(opts.seed).fork(fnv1a64(task.name()));
  std::vector<long> subset;
  for (int y = 0; y < c; ++y) {
    if (static_cast<int>(by_class[y].size()) < k) {
      std::string cls = task.kind == TaskKind::staging
                            ? std::string("stage ") + std::to_string(y)
                            : (y == 1 ? "positive" : "negative") + std::string(" class");
      throw std::invalid_argument("fewshot: " + cls + " has only " +
                                  std::to_string(by_class[y].size()) + " examples, need " +
                                  std::to_string(k));
    }
    auto pick = rng.sample_without_replacement(static_cast<int>(by_class[y].size()), k);
    for (int p : pick) subset.push_back(by_class[y][p]);
  }
  std::sort(subset.begin(), subset.end());

  auto enc = load_checkpoint(checkpoint_dir);
  const MissingChannelSetting* setting = opts.setting ? &*opts.setting : nullptr;
  std::vector<Epoch> chunk;
  chunk.reserve(subset.size());
  for (long i : subset) {
    Epoch e = train_reader.read(i);
    chunk.push_back(setting ? apply_missing_setting(e, *setting) : std::move(e));
  }
  std::vector<const Epoch*> ptrs;
  for (const auto& e : chunk) ptrs.push_back(&e);
  EmbeddingMatrix sub_emb = enc.encode(ptrs);
  std::vector<int> sub_labels;
  for (long i : subset) sub_labels.push_back(train_labels[i]);

  HeadTrainOptions hopts{opts.probe_lr, opts.probe_max_steps, opts.probe_batch, opts.seed};
  auto head = train_logistic_head(sub_emb, sub_labels, c, hopts);
  auto test_emb = extract_embeddings(enc, test_shard, setting, opts.embed_batch);
  ShardReader test_reader(test_shard);
  auto r = classification_report(task, head, test_emb, shard_labels(test_reader, task));
  r.protocol = "fewshot-" + std::to_string(k);
  r.setting = opts.setting ? opts.setting->name : "full_montage";
  r.seed = opts.seed;
  r.n_train = static_cast<long>(subset.size());
  r.n_test = test_emb.rows();
  r.config_hash = hash_config("fewshot", task, opts, checkpoint_dir, k);
  return r;
}

EvalReport hr_probe(const std::filesystem::path& checkpoint_dir,
                    const std::filesystem::path& train_shard,
                    const std::filesystem::path& test_shard, const EvalOptions& opts) {
  check_patient_isolation(train_shard, test_shard);
  auto enc = load_checkpoint(checkpoint_dir);
  const MissingChannelSetting* setting = opts.setting ? &*opts.setting : nullptr;

  auto load_hr = [&](const std::filesystem::path& shard, EmbeddingMatrix& emb,
                     std::vector<float>& targets) {
    ShardReader reader(shard);
    std::vector<Epoch> kept;
    for (size_t i = 0; i < reader.size(); ++i) {
      Epoch e = reader.read(i);
      if (!e.has_hr()) continue;
      kept.push_back(setting ? apply_missing_setting(e, *setting) : std::move(e));
    }
    if (kept.empty()) throw std::invalid_argument("hr_probe: no heart-rate labels in " +
                                                  shard.string());
    emb.resize(kept.size(), enc.cfg.width);
    targets.resize(kept.size());
    for (size_t start = 0; start < kept.size(); start += opts.embed_batch) {
      size_t end = std::min(kept.size(), start + opts.embed_batch);
      std::vector<const Epoch*> ptrs;
      for (size_t i = start; i < end; ++i) ptrs.push_back(&kept[i]);
      emb.middleRows(start, end - start) = enc.encode(ptrs);
    }
    for (size_t i = 0; i < kept.size(); ++i) targets[i] = kept[i].hr_bpm;
  };

  EmbeddingMatrix train_emb, test_emb;
  std::vector<float> train_hr, test_hr;
  load_hr(train_shard, train_emb, train_hr);
  load_hr(test_shard, test_emb, test_hr);

  HeadTrainOptions hopts{opts.probe_lr, opts.probe_max_steps, opts.probe_batch, opts.seed};
  auto head = train_regression_head(train_emb, train_hr, hopts);
  EmbeddingMatrix pred = head.logits(test_emb);

  double mae = 0, mse = 0, bl_mae = 0, bl_mse = 0;
  double train_mean = 0;
  for (float t : train_hr) train_mean += t;
  train_mean /= train_hr.size();
  for (size_t i = 0; i < test_hr.size(); ++i) {
    double d = static_cast<double>(pred(i, 0)) - test_hr[i];
    mae += std::abs(d);
    mse += d * d;
    double bd = train_mean - test_hr[i];
    bl_mae += std::abs(bd);
    bl_mse += bd * bd;
  }
  const double n = static_cast<double>(test_hr.size());
  EvalReport r;
  r.task = "hr_regression";
  r.protocol = "linear_probe";
  r.setting = opts.setting ? opts.setting->name : "full_montage";
  r.mae_bpm = mae / n;
  r.rmse_bpm = std::sqrt(mse / n);
  r.baseline_mae_bpm = bl_mae / n;
  r.baseline_rmse_bpm = std::sqrt(bl_mse / n);
  r.seed = opts.seed;
  r.n_train = train_emb.rows();
  r.n_test = test_emb.rows();
  r.config_hash = hash_config("hr_probe", TaskSpec{TaskKind::hr_regression}, opts,
                              checkpoint_dir);
  return r;
}

}  // namespace osf
