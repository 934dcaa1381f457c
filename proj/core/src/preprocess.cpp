#include "osf/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "osf/rng.hpp"
#include "osf/util.hpp"

namespace osf {

namespace {

NightRecording crop_slots(const NightRecording& rec, int first_slot, int n_slots) {
  const ChannelMontage montage = ChannelMontage::standard();
  NightRecording out;
  out.patient_id = rec.patient_id;
  out.cohort_id = rec.cohort_id;
  out.channel_available = rec.channel_available;
  out.disease_labels = rec.disease_labels;
  out.duration_s = n_slots * static_cast<double>(kEpochSeconds);
  out.stage_labels.assign(rec.stage_labels.begin() + first_slot,
                          rec.stage_labels.begin() + first_slot + n_slots);
  out.hr_per_epoch.assign(rec.hr_per_epoch.begin() + first_slot,
                          rec.hr_per_epoch.begin() + first_slot + n_slots);
  double t0 = first_slot * static_cast<double>(kEpochSeconds);
  for (int e = 0; e < kNumEventTypes; ++e) {
    for (auto [a, b] : rec.event_intervals[e]) {
      double na = std::max(0.0, a - t0);
      double nb = std::min(out.duration_s, b - t0);
      if (nb > na) out.event_intervals[e].emplace_back(na, nb);
    }
  }
  for (int c = 0; c < kNumChannels; ++c) {
    if (!rec.channel_available[c]) continue;
    int rate = montage[c].rate_hz;
    size_t lo = static_cast<size_t>(t0 * rate);
    size_t len = static_cast<size_t>(out.duration_s * rate);
    lo = std::min(lo, rec.channels[c].size());
    len = std::min(len, rec.channels[c].size() - lo);
    out.channels[c].assign(rec.channels[c].begin() + lo, rec.channels[c].begin() + lo + len);
  }
  return out;
}

}  // namespace

NightRecording trim_wake_edges(const NightRecording& rec) {
  if (rec.stage_labels.empty()) throw std::invalid_argument("trim_wake_edges: no stage labels");
  const int n = rec.n_slots();

  int lead = 0;
  while (lead < n && rec.stage_labels[lead] == SleepStage::Wake) ++lead;
  if (lead == n) {
    // night without any sleep: keep a 10-slot stub and flag it
    NightRecording stub = crop_slots(rec, 0, std::min(10, n));
    stub.all_wake_stub = true;
    return stub;
  }
  int tail = 0;
  while (tail < n && rec.stage_labels[n - 1 - tail] == SleepStage::Wake) ++tail;

  int first = lead > 60 ? lead - 10 : 0;
  int last = tail > 60 ? n - (tail - 10) : n;  // exclusive
  return crop_slots(rec, first, last - first);
}

NightRecording normalize_night(const NightRecording& rec, const ChannelMontage& montage) {
  NightRecording out = rec;
  for (int c = 0; c < kNumChannels; ++c) {
    if (!rec.channel_available[c]) continue;
    const std::vector<float>& x = rec.channels[c];
    std::vector<float>& y = out.channels[c];
    if (x.empty()) continue;
    const size_t n = x.size();

    double sum = 0, sq = 0;
    for (float v : x) { sum += v; sq += double(v) * v; }
    double mean = sum / n;
    double var = std::max(0.0, sq / n - mean * mean);
    if (var < 1e-24) {
      std::fill(y.begin(), y.end(), 0.0f);
      continue;
    }

    if (!montage.is_respiratory(c)) {
      double inv = 1.0 / std::sqrt(var);
      for (size_t i = 0; i < n; ++i)
        y[i] = std::clamp(static_cast<float>((x[i] - mean) * inv), -kClipValue, kClipValue);
      continue;
    }

    // local z-score: stats on a centered 5-min window at every 30-s hop,
    // linearly interpolated between hop centers
    const int rate = montage[c].rate_hz;
    const double dur = static_cast<double>(n) / rate;
    const int n_hops = std::max(1, static_cast<int>(std::ceil(dur / kLocalZscoreHopS)));
    std::vector<double> hop_mean(n_hops), hop_std(n_hops);
    for (int h = 0; h < n_hops; ++h) {
      double center = (h + 0.5) * kLocalZscoreHopS;
      size_t lo = static_cast<size_t>(std::max(0.0, center - kLocalZscoreWindowS / 2) * rate);
      size_t hi = std::min(n, static_cast<size_t>(
                                  std::max(0.0, center + kLocalZscoreWindowS / 2) * rate));
      if (hi <= lo) { hi = std::min(n, lo + 1); }
      double s = 0, s2 = 0;
      for (size_t i = lo; i < hi; ++i) { s += x[i]; s2 += double(x[i]) * x[i]; }
      double m = s / (hi - lo);
      double v = std::max(0.0, s2 / (hi - lo) - m * m);
      hop_mean[h] = m;
      hop_std[h] = std::sqrt(v);
    }
    for (size_t i = 0; i < n; ++i) {
      double t = (i + 0.5) / rate;
      double pos = t / kLocalZscoreHopS - 0.5;
      int h0 = std::clamp(static_cast<int>(std::floor(pos)), 0, n_hops - 1);
      int h1 = std::min(h0 + 1, n_hops - 1);
      double w = std::clamp(pos - h0, 0.0, 1.0);
      double m = (1 - w) * hop_mean[h0] + w * hop_mean[h1];
      double s = (1 - w) * hop_std[h0] + w * hop_std[h1];
      y[i] = s < 1e-12 ? 0.0f
                       : std::clamp(static_cast<float>((x[i] - m) / s), -kClipValue, kClipValue);
    }
  }
  return out;
}

std::vector<Epoch> segment_epochs(const NightRecording& rec, const ChannelMontage& montage) {
  const int n_slots = static_cast<int>(rec.duration_s / kEpochSeconds);
  std::vector<Epoch> epochs;
  if (n_slots < 1) return epochs;

  std::array<std::vector<bool>, kNumEventTypes> flags;
  for (int e = 0; e < kNumEventTypes; ++e)
    flags[e] = slots_with_event(rec.event_intervals[e], n_slots);

  epochs.reserve(n_slots);
  for (int s = 0; s < n_slots; ++s) {
    Epoch ep;
    ep.values = EpochMatrix::Zero(kNumChannels, kEpochSamples);
    ep.patient_id = rec.patient_id;
    ep.cohort_id = rec.cohort_id;
    ep.night_index = static_cast<uint16_t>(s);
    ep.stage = rec.stage_labels.at(s);
    for (int e = 0; e < kNumEventTypes; ++e) ep.event_flags[e] = flags[e][s];
    if (s < static_cast<int>(rec.hr_per_epoch.size())) ep.hr_bpm = rec.hr_per_epoch[s];

    for (int c = 0; c < kNumChannels; ++c) {
      if (!rec.channel_available[c] || rec.channels[c].empty()) {
        ep.channel_valid[c] = false;
        continue;
      }
      ep.channel_valid[c] = true;
      const std::vector<float>& x = rec.channels[c];
      const int rate = montage[c].rate_hz;
      const double t0 = s * static_cast<double>(kEpochSeconds);
      for (int j = 0; j < kEpochSamples; ++j) {
        double src = (t0 + static_cast<double>(j) / kTargetRateHz) * rate;
        size_t i0 = std::min(x.size() - 1, static_cast<size_t>(src));
        size_t i1 = std::min(x.size() - 1, i0 + 1);
        double w = src - static_cast<double>(i0);
        ep.values(c, j) = static_cast<float>((1.0 - w) * x[i0] + w * x[i1]);
      }
    }
    epochs.push_back(std::move(ep));
  }
  return epochs;
}

std::map<uint32_t, std::string> SplitSets::as_map() const {
  std::map<uint32_t, std::string> m;
  for (auto p : train) m[p] = "train";
  for (auto p : valid) m[p] = "valid";
  for (auto p : test) m[p] = "test";
  return m;
}

const std::set<uint32_t>& SplitSets::by_name(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  throw std::invalid_argument("unknown split: " + name);
}

SplitSets split_patients(const std::map<uint32_t, std::string>& cohort_of,
                         std::array<double, 3> ratios, uint64_t seed) {
  double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9)
    throw std::invalid_argument("split ratios must sum to 1");

  std::map<std::string, std::vector<uint32_t>> per_cohort;
  for (const auto& [pid, cid] : cohort_of) per_cohort[cid].push_back(pid);

  SplitSets out;
  for (auto& [cid, patients] : per_cohort) {
    std::sort(patients.begin(), patients.end());
    if (patients.size() < 3) {
      for (auto p : patients) out.train.insert(p);
      continue;
    }
    Rng rng = Rng(seed).fork(fnv1a64(cid));
    rng.shuffle(patients);
    size_t n = patients.size();
    size_t n_valid = std::max<size_t>(1, static_cast<size_t>(std::llround(n * ratios[1])));
    size_t n_test = std::max<size_t>(1, static_cast<size_t>(std::llround(n * ratios[2])));
    if (n_valid + n_test >= n) { n_valid = 1; n_test = 1; }
    size_t i = 0;
    for (; i < n - n_valid - n_test; ++i) out.train.insert(patients[i]);
    for (; i < n - n_test; ++i) out.valid.insert(patients[i]);
    for (; i < n; ++i) out.test.insert(patients[i]);
  }
  return out;
}

void to_json(nlohmann::json& j, const SplitSets& s) {
  j = {{"train", s.train}, {"valid", s.valid}, {"test", s.test}};
}

void from_json(const nlohmann::json& j, SplitSets& s) {
  s.train = j.at("train").get<std::set<uint32_t>>();
  s.valid = j.at("valid").get<std::set<uint32_t>>();
  s.test = j.at("test").get<std::set<uint32_t>>();
}

PreprocessResult preprocess_corpus(const std::filesystem::path& corpus_dir,
                                   const std::filesystem::path& out_dir,
                                   std::array<double, 3> ratios, uint64_t seed) {
  const ChannelMontage montage = ChannelMontage::standard();
  CorpusManifest manifest = load_manifest(corpus_dir);

  std::map<uint32_t, std::string> cohort_of;
  for (const auto& e : manifest.nights) cohort_of[e.patient_id] = e.cohort_id;
  SplitSets splits = split_patients(cohort_of, ratios, seed);
  auto split_of = splits.as_map();

  std::filesystem::create_directories(out_dir);
  std::map<std::string, std::unique_ptr<ShardWriter>> writers;
  for (const char* name : {"train", "valid", "test"})
    writers[name] = std::make_unique<ShardWriter>(out_dir / (std::string(name) + ".shard"), name);

  for (const auto& entry : manifest.nights) {
    auto it = split_of.find(entry.patient_id);
    if (it == split_of.end()) continue;
    NightRecording rec = load_night(corpus_dir, entry);
    NightRecording trimmed = trim_wake_edges(rec);
    NightRecording norm = normalize_night(trimmed, montage);
    for (const Epoch& ep : segment_epochs(norm, montage)) writers[it->second]->append(ep);
  }

  PreprocessResult result;
  result.splits = splits;
  for (auto& [name, w] : writers) {
    result.epoch_counts[name] = w->count();
    w->close();
  }
  nlohmann::json sj;
  to_json(sj, splits);
  sj["seed"] = seed;
  sj["ratios"] = ratios;
  write_text_file(out_dir / "splits.json", sj.dump(2) + "\n");
  return result;
}

}  // namespace osf
