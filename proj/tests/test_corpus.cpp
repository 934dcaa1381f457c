#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <vector>

#include "osf/corpus.hpp"
#include "osf/metrics.hpp"
#include "osf/util.hpp"

namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("osf_corpus_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// all-channels-off cohorts: label machinery only, no waveform synthesis
osf::CorpusSpec labels_only_spec(int n_patients, uint64_t seed) {
  osf::CorpusSpec spec = osf::CorpusSpec::defaults();
  osf::CohortSpec cohort;
  cohort.id = "main";
  cohort.n_patients = n_patients;
  cohort.channel_available.fill(false);
  spec.cohorts = {cohort};
  spec.seed = seed;
  return spec;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// independent interval-intersection oracle for the >=1s overlap rule
int overlap_slot_count(const std::vector<std::pair<double, double>>& intervals, int n_slots) {
  int count = 0;
  for (int s = 0; s < n_slots; ++s) {
    double lo = s * 30.0, hi = lo + 30.0;
    for (const auto& [a, b] : intervals) {
      if (std::min(b, hi) - std::max(a, lo) >= 1.0) {
        ++count;
        break;
      }
    }
  }
  return count;
}

double goertzel_power(const float* x, int n, double freq_hz, double rate_hz) {
  std::complex<double> acc = 0;
  const double w = -2.0 * M_PI * freq_hz / rate_hz;
  for (int i = 0; i < n; ++i) acc += double(x[i]) * std::polar(1.0, w * i);
  return std::norm(acc) / n;
}

}  // namespace

TEST_CASE("spec validation rejects bad fields with field-level messages") {
  osf::CorpusSpec spec = labels_only_spec(4, 1);
  osf::validate(spec);

  SUBCASE("transition row sum") {
    spec.stage_transitions[0] = {0.5, 0.2, 0.1, 0.1};
    CHECK_THROWS_WITH_AS(osf::validate(spec),
                         doctest::Contains("stage_transition_matrix[0]"), std::invalid_argument);
  }
  SUBCASE("negative transition entry") {
    spec.stage_transitions[2] = {-0.1, 0.5, 0.3, 0.3};
    CHECK_THROWS_WITH_AS(osf::validate(spec),
                         doctest::Contains("stage_transition_matrix[2]"), std::invalid_argument);
  }
  SUBCASE("event rate out of range") {
    spec.event_rates[1] = 0.7;
    CHECK_THROWS_WITH_AS(osf::validate(spec), doctest::Contains("event_rates.hypopnea"),
                         std::invalid_argument);
  }
  SUBCASE("empty cohort") {
    spec.cohorts[0].n_patients = 0;
    CHECK_THROWS_WITH_AS(osf::validate(spec), doctest::Contains("n_patients"),
                         std::invalid_argument);
  }
  SUBCASE("inverted night range") {
    spec.night_minutes_lo = 400;
    spec.night_minutes_hi = 300;
    CHECK_THROWS_WITH_AS(osf::validate(spec), doctest::Contains("night_duration_range"),
                         std::invalid_argument);
  }
}

TEST_CASE("spec JSON round trip is lossless") {
  osf::CorpusSpec spec = osf::CorpusSpec::defaults();
  osf::CohortSpec a, b;
  a.id = "clinic";
  a.n_patients = 7;
  a.noise_scale = 1.4;
  a.stage_freq_offset_hz = 0.2;
  b.id = "lab";
  b.n_patients = 3;
  b.channel_available[8] = false;
  spec.cohorts = {a, b};
  spec.seed = 424242;
  spec.event_rates = {0.02, 0.12, 0.07, 0.01};

  nlohmann::json j = spec;
  auto back = j.get<osf::CorpusSpec>();
  CHECK(nlohmann::json(back).dump() == j.dump());
}

TEST_CASE("identical spec and seed give bit-identical corpora on disk") {
  osf::CorpusSpec spec = osf::CorpusSpec::defaults();
  osf::CohortSpec cohort;
  cohort.id = "main";
  cohort.n_patients = 3;
  spec.cohorts = {cohort};
  spec.night_minutes_lo = 8;
  spec.night_minutes_hi = 12;
  spec.seed = 7;

  fs::path d1 = fresh_dir("det_a"), d2 = fresh_dir("det_b");
  auto m1 = osf::synth_corpus_to_dir(spec, d1);
  auto m2 = osf::synth_corpus_to_dir(spec, d2);

  CHECK(read_bytes(d1 / "manifest.json") == read_bytes(d2 / "manifest.json"));
  REQUIRE(m1.nights.size() == 3);
  for (size_t i = 0; i < m1.nights.size(); ++i) {
    CHECK(read_bytes(d1 / m1.nights[i].waveform_file) ==
          read_bytes(d2 / m2.nights[i].waveform_file));
    CHECK(read_bytes(d1 / m1.nights[i].sidecar_file) ==
          read_bytes(d2 / m2.nights[i].sidecar_file));
  }

  // and a different seed changes the output
  spec.seed = 8;
  fs::path d3 = fresh_dir("det_c");
  osf::synth_corpus_to_dir(spec, d3);
  CHECK(read_bytes(d1 / "manifest.json") != read_bytes(d3 / "manifest.json"));
}

TEST_CASE("identity transition matrix keeps every slot awake") {
  osf::CorpusSpec spec = labels_only_spec(1, 5);
  spec.stage_transitions = {{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}}};
  auto rec = osf::synth_night(spec, 0, 0);
  REQUIRE(rec.n_slots() > 0);
  for (auto st : rec.stage_labels) CHECK(st == osf::SleepStage::Wake);
}

TEST_CASE("night recording satisfies its shape invariants") {
  osf::CorpusSpec spec = osf::CorpusSpec::defaults();
  osf::CohortSpec cohort;
  cohort.id = "main";
  cohort.n_patients = 1;
  cohort.channel_available[5] = false;  // one missing channel
  spec.cohorts = {cohort};
  spec.night_minutes_lo = 10;
  spec.night_minutes_hi = 15;
  spec.seed = 33;

  auto rec = osf::synth_night(spec, 0, 0);
  const auto montage = osf::ChannelMontage::standard();
  CHECK(rec.n_slots() == static_cast<int>(rec.duration_s / 30.0));
  CHECK(rec.hr_per_epoch.size() == rec.stage_labels.size());
  for (int c = 0; c < osf::kNumChannels; ++c) {
    if (!rec.channel_available[c]) {
      CHECK(rec.channels[c].empty());
      continue;
    }
    CHECK(rec.channels[c].size() ==
          static_cast<size_t>(rec.duration_s * montage[c].rate_hz));
  }
  for (int e = 0; e < osf::kNumEventTypes; ++e)
    for (const auto& [a, b] : rec.event_intervals[e]) {
      CHECK(a >= 0.0);
      CHECK(b > a);
      CHECK(b <= rec.duration_s);
    }
}

TEST_CASE("event flagging matches an independent interval-intersection oracle") {
  osf::CorpusSpec spec = labels_only_spec(10, 99);
  auto nights = osf::synth_corpus(spec);
  for (const auto& rec : nights) {
    for (int e = 0; e < osf::kNumEventTypes; ++e) {
      auto flags = osf::slots_with_event(rec.event_intervals[e], rec.n_slots());
      int got = static_cast<int>(std::count(flags.begin(), flags.end(), true));
      CHECK(got == overlap_slot_count(rec.event_intervals[e], rec.n_slots()));
    }
  }
}

TEST_CASE("hypopnea epoch fraction tracks the configured rate over 200 nights") {
  osf::CorpusSpec spec = labels_only_spec(200, 2024);
  spec.event_rates[1] = 0.12;
  auto nights = osf::synth_corpus(spec);
  REQUIRE(nights.size() == 200);
  long flagged = 0, total = 0;
  for (const auto& rec : nights) {
    auto flags = osf::slots_with_event(rec.event_intervals[1], rec.n_slots());
    flagged += std::count(flags.begin(), flags.end(), true);
    total += rec.n_slots();
  }
  double frac = static_cast<double>(flagged) / total;
  CHECK(frac > 0.09);
  CHECK(frac < 0.15);
}

TEST_CASE("disease labels follow the logistic link on event fractions") {
  SUBCASE("saturated bias pins prevalence") {
    osf::CorpusSpec spec = labels_only_spec(100, 3);
    spec.disease_link[0] = {20.0, {0, 0, 0, 0}};
    spec.disease_link[1] = {-20.0, {0, 0, 0, 0}};
    auto nights = osf::synth_corpus(spec);
    for (const auto& rec : nights) {
      CHECK(rec.disease_labels[0]);
      CHECK_FALSE(rec.disease_labels[1]);
    }
  }
  SUBCASE("positives carry higher linked-event burden") {
    osf::CorpusSpec spec = labels_only_spec(300, 17);
    spec.event_rates[1] = 0.12;
    spec.disease_link[2] = {-2.0, {0, 30.0, 0, 0}};
    auto nights = osf::synth_corpus(spec);
    double sum_pos = 0, sum_neg = 0;
    int n_pos = 0, n_neg = 0;
    for (const auto& rec : nights) {
      auto flags = osf::slots_with_event(rec.event_intervals[1], rec.n_slots());
      double f = static_cast<double>(std::count(flags.begin(), flags.end(), true)) /
                 rec.n_slots();
      if (rec.disease_labels[2]) { sum_pos += f; ++n_pos; }
      else { sum_neg += f; ++n_neg; }
    }
    REQUIRE(n_pos > 10);
    REQUIRE(n_neg > 10);
    CHECK(sum_pos / n_pos > sum_neg / n_neg);
  }
}

TEST_CASE("corpus stats: exact counts, filters, brute-force prevalence") {
  SUBCASE("ten 8-hour nights count 9600 epochs") {
    osf::CorpusSpec spec = labels_only_spec(10, 6);
    spec.night_minutes_lo = spec.night_minutes_hi = 480;
    fs::path dir = fresh_dir("stats8h");
    auto manifest = osf::synth_corpus_to_dir(spec, dir);
    auto rows = osf::corpus_stats(manifest);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].nights == 10);
    CHECK(rows[0].epochs == 9600);
  }
  SUBCASE("empty cohort filter gives a zero-row table") {
    osf::CorpusSpec spec = labels_only_spec(3, 6);
    fs::path dir = fresh_dir("stats_empty");
    auto manifest = osf::synth_corpus_to_dir(spec, dir);
    auto rows = osf::corpus_stats(manifest, nullptr, std::vector<std::string>{});
    CHECK(rows.empty());
    CHECK_THROWS_AS(osf::corpus_stats(osf::CorpusManifest{}), std::invalid_argument);
  }
  SUBCASE("prevalence columns equal an independent label scan over 5 nights") {
    osf::CorpusSpec spec = labels_only_spec(5, 41);
    fs::path dir = fresh_dir("stats5");
    auto manifest = osf::synth_corpus_to_dir(spec, dir);
    auto rows = osf::corpus_stats(manifest);
    REQUIRE(rows.size() == 1);

    long slots = 0;
    std::array<long, osf::kNumEventTypes> event_slots{};
    std::array<long, osf::kNumDiseases> disease_nights{};
    for (const auto& entry : manifest.nights) {
      auto rec = osf::load_night(dir, entry);
      slots += rec.n_slots();
      for (int e = 0; e < osf::kNumEventTypes; ++e)
        event_slots[e] += overlap_slot_count(rec.event_intervals[e], rec.n_slots());
      for (int d = 0; d < osf::kNumDiseases; ++d)
        disease_nights[d] += rec.disease_labels[d] ? 1 : 0;
    }
    CHECK(rows[0].epochs == slots);
    for (int e = 0; e < osf::kNumEventTypes; ++e)
      CHECK(rows[0].event_prevalence[e] ==
            doctest::Approx(static_cast<double>(event_slots[e]) / slots).epsilon(1e-12));
    for (int d = 0; d < osf::kNumDiseases; ++d)
      CHECK(rows[0].disease_prevalence[d] ==
            doctest::Approx(disease_nights[d] / 5.0).epsilon(1e-12));
    CHECK(osf::stats_to_csv(rows).find("main") != std::string::npos);
  }
}

TEST_CASE("disk round trip reproduces the in-memory recording") {
  osf::CorpusSpec spec = osf::CorpusSpec::defaults();
  osf::CohortSpec cohort;
  cohort.id = "main";
  cohort.n_patients = 2;
  spec.cohorts = {cohort};
  spec.night_minutes_lo = 8;
  spec.night_minutes_hi = 10;
  spec.seed = 55;

  fs::path dir = fresh_dir("roundtrip");
  auto manifest = osf::synth_corpus_to_dir(spec, dir);
  for (int p = 0; p < 2; ++p) {
    auto mem = osf::synth_night(spec, 0, static_cast<uint32_t>(p));
    auto disk = osf::load_night(dir, manifest.nights[p]);
    CHECK(disk.patient_id == mem.patient_id);
    CHECK(disk.duration_s == mem.duration_s);
    CHECK(disk.stage_labels == mem.stage_labels);
    CHECK(disk.hr_per_epoch == mem.hr_per_epoch);
    CHECK(disk.disease_labels == mem.disease_labels);
    for (int c = 0; c < osf::kNumChannels; ++c) CHECK(disk.channels[c] == mem.channels[c]);
    for (int e = 0; e < osf::kNumEventTypes; ++e)
      CHECK(disk.event_intervals[e] == mem.event_intervals[e]);
  }
}

TEST_CASE("band-power features decode staging at macro AUROC >= 0.9 on 50 nights") {
  osf::CorpusSpec spec = osf::CorpusSpec::defaults();
  osf::CohortSpec cohort;
  cohort.id = "main";
  cohort.n_patients = 50;
  spec.cohorts = {cohort};
  spec.night_minutes_lo = spec.night_minutes_hi = 60;
  spec.seed = 11;
  auto nights = osf::synth_corpus(spec);
  REQUIRE(nights.size() == 50);

  // feature-engineering oracle: log band power of the four brain channels at
  // the four candidate oscillation frequencies, per 30-s slot
  const double freqs[4] = {2.0, 6.0, 8.0, 10.0};
  const int n_feat = 16;
  std::vector<std::array<double, n_feat>> train_x, test_x;
  std::vector<int> train_y, test_y;
  for (const auto& rec : nights) {
    bool is_test = rec.patient_id >= 40;
    for (int s = 0; s < rec.n_slots(); ++s) {
      std::array<double, n_feat> feat{};
      int k = 0;
      for (int c = 0; c < 4; ++c)
        for (double f : freqs)
          feat[k++] = std::log(
              goertzel_power(rec.channels[c].data() + size_t(s) * 1920, 1920, f, 64.0) + 1e-12);
      (is_test ? test_x : train_x).push_back(feat);
      (is_test ? test_y : train_y).push_back(static_cast<int>(rec.stage_labels[s]));
    }
  }

  // feature standardization from the training split
  std::array<double, n_feat> mu{}, sd{};
  for (const auto& f : train_x)
    for (int j = 0; j < n_feat; ++j) mu[j] += f[j];
  for (int j = 0; j < n_feat; ++j) mu[j] /= train_x.size();
  for (const auto& f : train_x)
    for (int j = 0; j < n_feat; ++j) sd[j] += (f[j] - mu[j]) * (f[j] - mu[j]);
  for (int j = 0; j < n_feat; ++j) sd[j] = std::sqrt(sd[j] / train_x.size()) + 1e-9;
  auto norm = [&](std::vector<std::array<double, n_feat>>& xs) {
    for (auto& f : xs)
      for (int j = 0; j < n_feat; ++j) f[j] = (f[j] - mu[j]) / sd[j];
  };
  norm(train_x);
  norm(test_x);

  // full-batch multinomial logistic regression, plain gradient descent
  std::array<std::array<double, 4>, n_feat> w{};
  std::array<double, 4> b{};
  const size_t n = train_x.size();
  for (int it = 0; it < 250; ++it) {
    std::array<std::array<double, 4>, n_feat> gw{};
    std::array<double, 4> gb{};
    for (size_t i = 0; i < n; ++i) {
      std::array<double, 4> z = b;
      for (int j = 0; j < n_feat; ++j)
        for (int c = 0; c < 4; ++c) z[c] += train_x[i][j] * w[j][c];
      double m = *std::max_element(z.begin(), z.end()), zs = 0;
      for (int c = 0; c < 4; ++c) { z[c] = std::exp(z[c] - m); zs += z[c]; }
      for (int c = 0; c < 4; ++c) {
        double g = z[c] / zs - (train_y[i] == c ? 1.0 : 0.0);
        gb[c] += g;
        for (int j = 0; j < n_feat; ++j) gw[j][c] += g * train_x[i][j];
      }
    }
    for (int c = 0; c < 4; ++c) {
      b[c] -= 0.5 * gb[c] / n;
      for (int j = 0; j < n_feat; ++j) w[j][c] -= 0.5 * gw[j][c] / n;
    }
  }

  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic> probs(test_x.size(), 4);
  for (size_t i = 0; i < test_x.size(); ++i) {
    std::array<double, 4> z = b;
    for (int j = 0; j < n_feat; ++j)
      for (int c = 0; c < 4; ++c) z[c] += test_x[i][j] * w[j][c];
    double m = *std::max_element(z.begin(), z.end()), zs = 0;
    for (int c = 0; c < 4; ++c) { z[c] = std::exp(z[c] - m); zs += z[c]; }
    for (int c = 0; c < 4; ++c) probs(i, c) = z[c] / zs;
  }
  auto m = osf::staging_metrics(probs, test_y);
  INFO("macro auroc = ", m.macro_auroc);
  CHECK(m.macro_auroc >= 0.9);
}
