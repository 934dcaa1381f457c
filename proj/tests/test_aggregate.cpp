#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <set>

#include "osf/aggregate.hpp"
#include "osf/metrics.hpp"
#include "gradcheck.hpp"

using namespace osf;

namespace {

Epoch make_epoch(Rng& rng, uint32_t patient) {
  Epoch e;
  e.values.resize(kNumChannels, kEpochSamples);
  for (int c = 0; c < kNumChannels; ++c)
    for (int s = 0; s < kEpochSamples; ++s) e.values(c, s) = float(rng.normal(0.0, 0.5));
  e.channel_valid.fill(true);
  e.patient_id = patient;
  return e;
}

EmbeddingSequence make_seq(Rng& rng, uint32_t pid, const std::vector<long>& rows, int d,
                           std::array<bool, kNumDiseases> dis = {}) {
  EmbeddingSequence s;
  s.patient_id = pid;
  s.disease_labels = dis;
  s.embeddings = EmbeddingMatrix::Zero(kMaxNightEpochs, d);
  s.valid.assign(kMaxNightEpochs, false);
  for (long r : rows) {
    for (int j = 0; j < d; ++j) s.embeddings(r, j) = float(rng.normal(0.0, 1.0));
    s.valid[r] = true;
  }
  return s;
}

std::vector<long> front_rows(int n) {
  std::vector<long> rows(n);
  std::iota(rows.begin(), rows.end(), 0L);
  return rows;
}

std::filesystem::path temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("osf_agg_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("embed_night matches per-epoch encoding and zero-pads the tail") {
  auto enc = Encoder<float>::init(EncoderConfig::from_preset("tiny"), 5);
  Rng rng(31);
  std::vector<Epoch> night;
  for (int i = 0; i < 7; ++i) night.push_back(make_epoch(rng, 42));

  bool truncated = true;
  auto seq = embed_night(enc, night, {true, false, true}, 3, &truncated);
  CHECK(!truncated);
  CHECK(seq.patient_id == 42);
  CHECK(seq.valid_count() == 7);
  CHECK(seq.disease_labels == std::array<bool, kNumDiseases>{true, false, true});
  for (int i = 0; i < 7; ++i) {
    auto single = enc.encode({&night[i]});
    CHECK((seq.embeddings.row(i) - single.row(0)).cwiseAbs().maxCoeff() <= 1e-6f);
  }
  for (int i = 7; i < kMaxNightEpochs; ++i) {
    CHECK(!seq.valid[i]);
    CHECK(seq.embeddings.row(i).cwiseAbs().maxCoeff() == 0.0f);
  }
  CHECK_THROWS_AS(embed_night(enc, {}, {}), std::invalid_argument);
}

TEST_CASE("embed_night truncates long nights to the first 1200 epochs") {
  auto enc = Encoder<float>::init(EncoderConfig::from_preset("tiny"), 5);
  Rng rng(32);
  Epoch proto = make_epoch(rng, 9);
  std::vector<Epoch> night(kMaxNightEpochs + 5, proto);
  bool truncated = false;
  auto seq = embed_night(enc, night, {}, 128, &truncated);
  CHECK(truncated);
  CHECK(seq.valid_count() == kMaxNightEpochs);
}

TEST_CASE("agg_mean equals the arithmetic mean of valid rows") {
  Rng rng(7);
  auto seq = make_seq(rng, 1, {2, 5, 9, 40, 1100}, 6);
  auto m = agg_mean(seq);
  Eigen::MatrixXd oracle = Eigen::MatrixXd::Zero(1, 6);
  for (long r : seq.valid_rows()) oracle += seq.embeddings.row(r).cast<double>();
  oracle /= double(seq.valid_count());
  CHECK((m.cast<double>() - oracle).cwiseAbs().maxCoeff() <= 1e-7);

  // permuting the valid rows leaves the mean unchanged
  auto perm = seq;
  perm.embeddings.row(2).swap(perm.embeddings.row(40));
  perm.embeddings.row(5).swap(perm.embeddings.row(1100));
  CHECK((agg_mean(perm) - m).cwiseAbs().maxCoeff() <= 1e-6f);

  EmbeddingSequence empty;
  empty.embeddings = EmbeddingMatrix::Zero(kMaxNightEpochs, 6);
  empty.valid.assign(kMaxNightEpochs, false);
  CHECK_THROWS_AS(agg_mean(empty), std::invalid_argument);
}

TEST_CASE("padding rows never influence any aggregator") {
  const int d = 6;
  Rng rng(11);
  auto seq = make_seq(rng, 3, {0, 4, 17, 300, 777}, d);
  auto rec = init_recurrent_params<float>(d, 21);
  auto mil = init_mil_params<float>(d, 5, 22);
  auto top = init_topk_params<float>(d, 23);

  auto poisoned = seq;
  Rng noise(99);
  for (int r = 0; r < kMaxNightEpochs; ++r)
    if (!poisoned.valid[r])
      for (int j = 0; j < d; ++j) poisoned.embeddings(r, j) = float(noise.normal(0.0, 100.0));

  CHECK((agg_mean(poisoned) - agg_mean(seq)).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((agg_recurrent(poisoned, rec) - agg_recurrent(seq, rec)).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((agg_mil(poisoned, mil) - agg_mil(seq, mil)).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((agg_topk(poisoned, top, 3) - agg_topk(seq, top, 3)).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("recurrent aggregation is order sensitive and respects gate settings") {
  const int d = 5;
  Rng rng(13);
  auto params = init_recurrent_params<float>(d, 40);
  auto seq = make_seq(rng, 4, front_rows(8), d);

  auto rev = seq;
  for (int i = 0; i < 8; ++i) rev.embeddings.row(i) = seq.embeddings.row(7 - i);
  auto out_fwd = agg_recurrent(seq, params);
  auto out_rev = agg_recurrent(rev, params);
  CHECK((out_fwd - out_rev).cwiseAbs().maxCoeff() > 1e-4f);

  // input/output gates forced open, forget gate closed, no hidden feedback into
  // the candidate: the output becomes a fixed function of the last valid row
  auto gated = params;
  gated.at("rec.bi").value.setConstant(20.0f);
  gated.at("rec.bo").value.setConstant(20.0f);
  gated.at("rec.bf").value.setConstant(-20.0f);
  gated.at("rec.uc").value.setZero();
  auto other = make_seq(rng, 5, front_rows(8), d);
  other.embeddings.row(7) = seq.embeddings.row(7);  // same final row, different history
  auto a = agg_recurrent(seq, gated);
  auto b = agg_recurrent(other, gated);
  CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-5f);

  EmbeddingSequence empty;
  empty.embeddings = EmbeddingMatrix::Zero(kMaxNightEpochs, d);
  empty.valid.assign(kMaxNightEpochs, false);
  CHECK_THROWS_AS(agg_recurrent(empty, params), std::invalid_argument);
}

TEST_CASE("gated attention weights are a distribution and split under duplication") {
  const int d = 6;
  Rng rng(17);
  auto params = init_mil_params<float>(d, 4, 50);
  auto seq = make_seq(rng, 6, front_rows(5), d);

  auto w = mil_attention(seq, params);
  REQUIRE(w.size() == 5);
  double sum = 0;
  for (double x : w) sum += x;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

  // one valid row: weight 1 and the output is that row
  auto solo = make_seq(rng, 7, {12}, d);
  CHECK(mil_attention(solo, params)[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK((agg_mil(solo, params) - EmbeddingMatrix(solo.embeddings.row(12))).cwiseAbs().maxCoeff() <=
        1e-6f);

  // duplicating every row halves each copy's weight and keeps the output
  auto dup = make_seq(rng, 8, front_rows(10), d);
  for (int i = 0; i < 5; ++i) {
    dup.embeddings.row(2 * i) = seq.embeddings.row(i);
    dup.embeddings.row(2 * i + 1) = seq.embeddings.row(i);
  }
  auto wd = mil_attention(dup, params);
  for (int i = 0; i < 5; ++i) {
    CHECK(wd[2 * i] == doctest::Approx(wd[2 * i + 1]).epsilon(1e-6));
    CHECK(wd[2 * i] == doctest::Approx(w[i] / 2).epsilon(1e-5));
  }
  CHECK((agg_mil(dup, params) - agg_mil(seq, params)).cwiseAbs().maxCoeff() <= 1e-5f);
}

TEST_CASE("gated attention gradients match finite differences") {
  const int n = 6, d = 5;
  Rng rng(19);
  auto params = init_mil_params<double>(d, 4, 60);
  nn::Param<double> zp;
  zp.name = "z";
  zp.value.resize(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) zp.value(i, j) = rng.normal(0.0, 1.0);
  nn::Mat<double> probe(1, d);
  for (int j = 0; j < d; ++j) probe(0, j) = rng.normal(0.0, 1.0);

  auto loss_value = [&](bool with_grads) {
    nn::Tape<double> t;
    auto lf = [&](const std::string& name) { return t.leaf(params.at(name)); };
    auto loss = nn::sum_all(nn::mul(mil_forward(t, t.leaf(zp), lf), t.constant(probe)));
    if (with_grads) t.backward(loss);
    return loss.val()(0, 0);
  };
  std::vector<nn::Param<double>*> ptrs = params.all();
  ptrs.push_back(&zp);
  for (auto* p : ptrs) p->zero_grad();
  loss_value(true);
  Rng coords(3);
  auto res = osf::testing::fd_check(ptrs, [&] { return loss_value(false); }, 24, coords);
  CHECK(res.failed == 0);
}

TEST_CASE("top-k selection follows score order with lowest-index ties") {
  const int d = 4;
  Rng rng(23);
  auto params = init_topk_params<float>(d, 70);
  auto seq = make_seq(rng, 9, front_rows(7), d);
  const long n = seq.valid_count();

  // k = N reproduces the plain mean bit for bit
  CHECK((agg_topk(seq, params, int(n)) - agg_mean(seq)).cwiseAbs().maxCoeff() == 0.0f);

  // k = 1 picks the arg-max scoring row
  auto block = seq.valid_block();
  Eigen::VectorXf s = block * params.at("topk.w").value + Eigen::VectorXf::Constant(n, params.at("topk.b").value(0, 0));
  long best = 0;
  for (long i = 1; i < n; ++i)
    if (s(i) > s(best)) best = i;
  CHECK((agg_topk(seq, params, 1) - EmbeddingMatrix(block.row(best))).cwiseAbs().maxCoeff() == 0.0f);

  // equal scores resolve to the lowest indices
  auto flat = params;
  flat.at("topk.w").value.setZero();
  std::vector<long> first2 = {0, 1};
  CHECK((agg_topk(seq, flat, 2) - mean_of_rows(block, first2)).cwiseAbs().maxCoeff() == 0.0f);

  CHECK_THROWS_AS(agg_topk(seq, params, 0), std::invalid_argument);
  CHECK_THROWS_AS(agg_topk(seq, params, int(n) + 1), std::invalid_argument);
  CHECK_THROWS_AS(agg_topk(seq, params, 2, 0.0), std::invalid_argument);
}

TEST_CASE("top-k gradients equal the softmax-relaxation gradients") {
  const int n = 6, d = 5;
  const double temp = 0.7;
  Rng rng(29);
  auto params = init_topk_params<double>(d, 80);
  nn::Param<double> zp;
  zp.name = "z";
  zp.value.resize(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) zp.value(i, j) = rng.normal(0.0, 1.0);
  nn::Mat<double> probe(1, d);
  for (int j = 0; j < d; ++j) probe(0, j) = rng.normal(0.0, 1.0);

  // analytic gradients flow through the straight-through estimator
  {
    nn::Tape<double> t;
    auto lf = [&](const std::string& name) { return t.leaf(params.at(name)); };
    auto out = topk_forward(t, t.leaf(zp), lf, 2, temp);
    auto loss = nn::sum_all(nn::mul(out, t.constant(probe)));
    for (auto* p : params.all()) p->zero_grad();
    zp.zero_grad();
    t.backward(loss);
  }
  // reference function: the softmax-weighted relaxation without hard selection
  auto relaxed = [&] {
    nn::Tape<double> t;
    auto z = t.constant(zp.value);
    auto scores = nn::transpose(nn::linear(z, t.constant(params.at("topk.w").value),
                                           t.constant(params.at("topk.b").value)));
    auto out = nn::matmul(nn::softmax_rows(nn::scale(scores, 1.0 / temp)), z);
    return nn::sum_all(nn::mul(out, t.constant(probe))).val()(0, 0);
  };
  std::vector<nn::Param<double>*> ptrs = params.all();
  ptrs.push_back(&zp);
  Rng coords(5);
  auto res = osf::testing::fd_check(ptrs, relaxed, 24, coords, 1e-3, 1e-6);
  CHECK(res.failed == 0);
  CHECK(res.worst_rel <= 1e-3);
}

TEST_CASE("sequence cache round trips bit for bit") {
  const int d = 5;
  Rng rng(37);
  std::vector<EmbeddingSequence> seqs = {
      make_seq(rng, 10, {0, 3, 900}, d, {true, false, false}),
      make_seq(rng, 11, front_rows(4), d, {false, true, true}),
      make_seq(rng, 12, {1199}, d, {false, false, false}),
  };
  auto dir = temp_dir("cache");
  save_sequences(seqs, dir);
  auto back = load_sequences(dir);
  REQUIRE(back.size() == seqs.size());
  for (size_t i = 0; i < seqs.size(); ++i) {
    CHECK(back[i].patient_id == seqs[i].patient_id);
    CHECK(back[i].disease_labels == seqs[i].disease_labels);
    CHECK(back[i].valid == seqs[i].valid);
    CHECK((back[i].embeddings - seqs[i].embeddings).cwiseAbs().maxCoeff() == 0.0f);
  }
  std::filesystem::remove_all(dir);
}

namespace {

// Patients with the disease carry a few strongly offset rows; the rest is noise.
std::vector<EmbeddingSequence> disease_cohort(Rng& rng, uint32_t first_pid, int n_pos, int n_neg,
                                              int d, int disease) {
  std::vector<EmbeddingSequence> out;
  uint32_t pid = first_pid;
  for (int i = 0; i < n_pos + n_neg; ++i) {
    const bool positive = i < n_pos;
    std::array<bool, kNumDiseases> dis{};
    dis[disease] = positive;
    auto s = make_seq(rng, pid++, front_rows(30), d, dis);
    if (positive) {
      auto rows = rng.sample_without_replacement(30, 4);
      for (int r : rows)
        for (int j = 0; j < d; ++j) s.embeddings(r, j) += 3.0f;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("disease heads separate a constructed cohort and stay at chance on shuffled labels") {
  const int d = 8, disease = 1;
  Rng rng(41);
  auto train = disease_cohort(rng, 1, 20, 20, d, disease);
  auto test = disease_cohort(rng, 1000, 60, 60, d, disease);

  DiseaseHeadConfig top;
  top.kind = AggregatorKind::topk;
  top.topk_k = 4;
  top.max_epochs = 30;
  top.seed = 7;
  auto rt = train_disease_head(train, test, disease, top);
  CHECK(rt.auroc >= 0.9);
  CHECK(rt.protocol == "disease-topk");
  CHECK(rt.task == std::string(disease_name(disease)));
  CHECK(rt.n_train == 40);
  CHECK(rt.n_test == 120);

  DiseaseHeadConfig mean;
  mean.kind = AggregatorKind::mean_pool;
  mean.max_epochs = 30;
  mean.seed = 7;
  auto rm = train_disease_head(train, test, disease, mean);
  CHECK(rm.auroc >= 0.9);
  CHECK(rm.config_hash != rt.config_hash);

  DiseaseHeadConfig mil;
  mil.kind = AggregatorKind::mil;
  mil.mil_hidden = 8;
  mil.max_epochs = 20;
  mil.seed = 7;
  CHECK(train_disease_head(train, test, disease, mil).auroc >= 0.85);

  DiseaseHeadConfig rec;
  rec.kind = AggregatorKind::recurrent;
  rec.max_epochs = 5;
  rec.seed = 7;
  auto rr = train_disease_head(train, test, disease, rec);
  CHECK(rr.auroc >= 0.0);
  CHECK(rr.auroc <= 1.0);

  // permutation null: scoring the same model against shuffled test labels
  // lands near chance
  double null_sum = 0;
  for (uint64_t s = 0; s < 3; ++s) {
    auto shuffled = test;
    std::vector<int> labels;
    for (auto& q : shuffled) labels.push_back(q.disease_labels[disease] ? 1 : 0);
    Rng perm(100 + s);
    perm.shuffle(labels);
    for (size_t i = 0; i < shuffled.size(); ++i) shuffled[i].disease_labels[disease] = labels[i];
    DiseaseHeadConfig c = mean;
    c.max_epochs = 10;
    c.seed = 200 + s;
    null_sum += train_disease_head(train, shuffled, disease, c).auroc;
  }
  CHECK(std::abs(null_sum / 3 - 0.5) <= 0.07);
}

TEST_CASE("disease head rejects leakage and degenerate labels") {
  const int d = 6, disease = 0;
  Rng rng(43);
  auto train = disease_cohort(rng, 1, 4, 4, d, disease);
  auto test = disease_cohort(rng, 500, 4, 4, d, disease);

  auto leaked = test;
  leaked[0].patient_id = train[2].patient_id;
  CHECK_THROWS_AS(train_disease_head(train, leaked, disease, {}), std::runtime_error);

  auto onesided = train;
  for (auto& s : onesided) s.disease_labels[disease] = true;
  CHECK_THROWS_AS(train_disease_head(onesided, test, disease, {}), std::invalid_argument);

  auto flat_test = test;
  for (auto& s : flat_test) s.disease_labels[disease] = false;
  CHECK_THROWS_AS(train_disease_head(train, flat_test, disease, {}), UndefinedMetricError);

  CHECK_THROWS_AS(train_disease_head(train, test, 5, {}), std::out_of_range);
}

TEST_CASE("disease head config round trips and validates") {
  DiseaseHeadConfig c;
  c.kind = AggregatorKind::topk;
  c.base_lr = 2e-3;
  c.max_epochs = 12;
  c.topk_k = 9;
  c.st_temperature = 0.5;
  c.mil_hidden = 16;
  c.seed = 99;
  nlohmann::json j;
  to_json(j, c);
  DiseaseHeadConfig back;
  from_json(j, back);
  CHECK(back.kind == c.kind);
  CHECK(back.base_lr == c.base_lr);
  CHECK(back.max_epochs == c.max_epochs);
  CHECK(back.topk_k == c.topk_k);
  CHECK(back.st_temperature == c.st_temperature);
  CHECK(back.mil_hidden == c.mil_hidden);
  CHECK(back.seed == c.seed);

  CHECK(DiseaseHeadConfig{}.effective_lr() == 1e-2);
  CHECK(c.effective_lr() == 2e-3);
  DiseaseHeadConfig top;
  top.kind = AggregatorKind::topk;
  CHECK(top.effective_lr() == 5e-3);

  DiseaseHeadConfig bad = c;
  bad.max_epochs = 51;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = c;
  bad.st_temperature = 0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = c;
  bad.topk_k = 0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);

  CHECK(aggregator_from_name(aggregator_name(AggregatorKind::recurrent)) ==
        AggregatorKind::recurrent);
  CHECK_THROWS_AS(aggregator_from_name("nope"), std::invalid_argument);
}
