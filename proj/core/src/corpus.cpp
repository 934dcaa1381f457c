#include "osf/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "osf/util.hpp"

namespace osf {

using nlohmann::json;

CorpusSpec CorpusSpec::defaults() {
  CorpusSpec s;
  s.stage_transitions = {{{0.70, 0.25, 0.02, 0.03},
                          {0.05, 0.70, 0.15, 0.10},
                          {0.02, 0.18, 0.78, 0.02},
                          {0.05, 0.20, 0.02, 0.73}}};
  s.event_rates = {0.05, 0.08, 0.06, 0.03};
  s.disease_link[0] = {-3.0, {0.0, 8.0, 10.0, 20.0}};   // coronary disease
  s.disease_link[1] = {-2.5, {5.0, 10.0, 0.0, 0.0}};    // diabetes
  s.disease_link[2] = {-3.5, {0.0, 12.0, 12.0, 8.0}};   // hypertension
  return s;
}

void validate(const CorpusSpec& spec) {
  if (spec.cohorts.empty()) throw std::invalid_argument("cohorts: must be non-empty");
  for (const auto& c : spec.cohorts) {
    if (c.id.empty()) throw std::invalid_argument("cohorts[].id: must be non-empty");
    if (c.n_patients < 1)
      throw std::invalid_argument("cohorts[" + c.id + "].n_patients: must be >= 1");
    if (c.noise_scale < 0)
      throw std::invalid_argument("cohorts[" + c.id + "].noise_scale: must be >= 0");
  }
  if (!(spec.night_minutes_lo > 0) || spec.night_minutes_hi < spec.night_minutes_lo)
    throw std::invalid_argument("night_duration_range: need 0 < lo <= hi");
  for (int i = 0; i < kNumStages; ++i) {
    double row_sum = 0;
    for (int j = 0; j < kNumStages; ++j) {
      double p = spec.stage_transitions[i][j];
      if (p < 0)
        throw std::invalid_argument("stage_transition_matrix[" + std::to_string(i) + "][" +
                                    std::to_string(j) + "]: negative entry");
      row_sum += p;
    }
    if (std::abs(row_sum - 1.0) > 1e-9)
      throw std::invalid_argument("stage_transition_matrix[" + std::to_string(i) +
                                  "]: row sum " + std::to_string(row_sum) + " != 1");
  }
  for (int e = 0; e < kNumEventTypes; ++e) {
    if (spec.event_rates[e] < 0 || spec.event_rates[e] > 0.6)
      throw std::invalid_argument(std::string("event_rates.") +
                                  event_name(static_cast<EventType>(e)) +
                                  ": must be in [0, 0.6]");
  }
  if (!(spec.hr_base_lo > 0) || spec.hr_base_hi < spec.hr_base_lo)
    throw std::invalid_argument("hr_base_range: need 0 < lo <= hi");
}

void to_json(json& j, const CorpusSpec& s) {
  j = json::object();
  j["cohorts"] = json::array();
  for (const auto& c : s.cohorts) {
    j["cohorts"].push_back({{"id", c.id},
                            {"n_patients", c.n_patients},
                            {"channel_available", c.channel_available},
                            {"noise_scale", c.noise_scale},
                            {"stage_freq_offset_hz", c.stage_freq_offset_hz}});
  }
  j["night_minutes"] = {s.night_minutes_lo, s.night_minutes_hi};
  j["stage_transition_matrix"] = s.stage_transitions;
  json rates = json::object();
  for (int e = 0; e < kNumEventTypes; ++e)
    rates[event_name(static_cast<EventType>(e))] = s.event_rates[e];
  j["event_rates"] = rates;
  json link = json::object();
  for (int d = 0; d < kNumDiseases; ++d)
    link[disease_name(d)] = {{"bias", s.disease_link[d].bias},
                             {"event_weights", s.disease_link[d].event_weights}};
  j["disease_link"] = link;
  j["hr_base_range"] = {s.hr_base_lo, s.hr_base_hi};
  j["seed"] = s.seed;
}

void from_json(const json& j, CorpusSpec& s) {
  s = CorpusSpec::defaults();
  s.cohorts.clear();
  for (const auto& cj : j.at("cohorts")) {
    CohortSpec c;
    c.id = cj.at("id").get<std::string>();
    c.n_patients = cj.at("n_patients").get<int>();
    if (cj.contains("channel_available"))
      c.channel_available = cj.at("channel_available").get<std::array<bool, kNumChannels>>();
    c.noise_scale = cj.value("noise_scale", 1.0);
    c.stage_freq_offset_hz = cj.value("stage_freq_offset_hz", 0.0);
    s.cohorts.push_back(c);
  }
  if (j.contains("night_minutes")) {
    s.night_minutes_lo = j["night_minutes"][0].get<double>();
    s.night_minutes_hi = j["night_minutes"][1].get<double>();
  }
  if (j.contains("stage_transition_matrix"))
    s.stage_transitions =
        j["stage_transition_matrix"].get<std::array<std::array<double, 4>, 4>>();
  if (j.contains("event_rates"))
    for (int e = 0; e < kNumEventTypes; ++e) {
      const char* name = event_name(static_cast<EventType>(e));
      if (j["event_rates"].contains(name)) s.event_rates[e] = j["event_rates"][name];
    }
  if (j.contains("disease_link"))
    for (int d = 0; d < kNumDiseases; ++d) {
      if (!j["disease_link"].contains(disease_name(d))) continue;
      const auto& dj = j["disease_link"][disease_name(d)];
      s.disease_link[d].bias = dj.at("bias").get<double>();
      s.disease_link[d].event_weights = dj.at("event_weights").get<std::array<double, 4>>();
    }
  if (j.contains("hr_base_range")) {
    s.hr_base_lo = j["hr_base_range"][0].get<double>();
    s.hr_base_hi = j["hr_base_range"][1].get<double>();
  }
  s.seed = j.value("seed", uint64_t{0});
}

namespace {

// Kellet's economy pink noise filter
struct PinkNoise {
  double b0 = 0, b1 = 0, b2 = 0;
  double step(double white) {
    b0 = 0.99765 * b0 + white * 0.0990460;
    b1 = 0.96300 * b1 + white * 0.2965164;
    b2 = 0.57000 * b2 + white * 1.0526913;
    return (b0 + b1 + b2 + white * 0.1848) * 0.25;
  }
};

// sorted, non-overlapping-enough cursor over event intervals
struct IntervalCursor {
  const std::vector<std::pair<double, double>>* iv;
  size_t i = 0;
  bool contains(double t) {
    while (i < iv->size() && (*iv)[i].second < t) ++i;
    for (size_t k = i; k < iv->size() && (*iv)[k].first <= t; ++k)
      if (t >= (*iv)[k].first && t < (*iv)[k].second) return true;
    return false;
  }
};

constexpr double kStageFreqHz[kNumStages] = {10.0, 6.0, 2.0, 8.0};  // Wake, Light, Deep, REM

}  // namespace

std::vector<bool> slots_with_event(const std::vector<std::pair<double, double>>& intervals,
                                   int n_slots, double min_overlap_s) {
  std::vector<bool> flags(n_slots, false);
  for (const auto& [a, b] : intervals) {
    int lo = std::max(0, static_cast<int>(std::floor(a / kEpochSeconds)));
    int hi = std::min(n_slots - 1, static_cast<int>(std::floor(b / kEpochSeconds)));
    for (int s = lo; s <= hi; ++s) {
      double overlap = std::min(b, (s + 1) * 30.0) - std::max(a, s * 30.0);
      if (overlap >= min_overlap_s) flags[s] = true;
    }
  }
  return flags;
}

NightRecording synth_night(const CorpusSpec& spec, int cohort_idx, uint32_t patient_id) {
  validate(spec);
  const CohortSpec& cohort = spec.cohorts.at(cohort_idx);
  Rng rng = Rng(spec.seed).fork(patient_id);

  NightRecording rec;
  rec.patient_id = patient_id;
  rec.cohort_id = cohort.id;
  rec.channel_available = cohort.channel_available;

  double minutes = rng.uniform(spec.night_minutes_lo, spec.night_minutes_hi);
  int n_slots = std::max(1, static_cast<int>(minutes * 60.0 / kEpochSeconds));
  rec.duration_s = n_slots * static_cast<double>(kEpochSeconds);

  // staging: Markov chain per slot, every night starts awake
  rec.stage_labels.resize(n_slots);
  rec.stage_labels[0] = SleepStage::Wake;
  for (int s = 1; s < n_slots; ++s) {
    const auto& row = spec.stage_transitions[static_cast<int>(rec.stage_labels[s - 1])];
    double u = rng.uniform(), acc = 0;
    int next = kNumStages - 1;
    for (int j = 0; j < kNumStages; ++j) {
      acc += row[j];
      if (u < acc) { next = j; break; }
    }
    rec.stage_labels[s] = static_cast<SleepStage>(next);
  }

  // heart rate: per-night base with a bounded random walk
  double hr_base = rng.uniform(spec.hr_base_lo, spec.hr_base_hi);
  rec.hr_per_epoch.resize(n_slots);
  double hr = hr_base;
  for (int s = 0; s < n_slots; ++s) {
    hr = std::clamp(hr + rng.normal(0.0, 0.8), hr_base - 10.0, hr_base + 10.0);
    rec.hr_per_epoch[s] = static_cast<float>(hr);
  }

  // events: per-night rate jitter, then per-slot Bernoulli placing one interval
  // fully inside the slot so the overlap rule flags exactly that slot
  for (int e = 0; e < kNumEventTypes; ++e) {
    double night_rate = std::clamp(spec.event_rates[e] * std::exp(rng.normal(0.0, 0.4) - 0.08),
                                   0.0, 0.6);
    for (int s = 0; s < n_slots; ++s) {
      if (!rng.bernoulli(night_rate)) continue;
      double start = s * 30.0 + rng.uniform(1.0, 4.0);
      double dur = rng.uniform(8.0, 20.0);
      rec.event_intervals[e].emplace_back(start, start + dur);
    }
  }

  // disease labels from the logistic link on night-level event fractions
  for (int d = 0; d < kNumDiseases; ++d) {
    double logit = spec.disease_link[d].bias;
    for (int e = 0; e < kNumEventTypes; ++e) {
      auto flags = slots_with_event(rec.event_intervals[e], n_slots);
      double frac = static_cast<double>(std::count(flags.begin(), flags.end(), true)) / n_slots;
      logit += spec.disease_link[d].event_weights[e] * frac;
    }
    rec.disease_labels[d] = rng.bernoulli(1.0 / (1.0 + std::exp(-logit)));
  }

  // waveforms
  const ChannelMontage montage = ChannelMontage::standard();
  double breath_hz = rng.uniform(0.2, 0.3);
  double drift_phase = rng.uniform(0.0, 2.0 * M_PI);

  IntervalCursor hyp{&rec.event_intervals[static_cast<int>(EventType::Hypopnea)]};
  IntervalCursor des{&rec.event_intervals[static_cast<int>(EventType::OxygenDesat)]};
  IntervalCursor aro{&rec.event_intervals[static_cast<int>(EventType::Arousal)]};

  for (int c = 0; c < kNumChannels; ++c) {
    if (!rec.channel_available[c]) continue;
    const ChannelDesc& ch = montage[c];
    const int rate = ch.rate_hz;
    const double dt = 1.0 / rate;
    const size_t n = static_cast<size_t>(rec.duration_s * rate);
    std::vector<float>& out = rec.channels[c];
    out.resize(n);

    double phase = rng.uniform(0.0, 2.0 * M_PI);
    PinkNoise pink;
    IntervalCursor resp_dip1 = hyp, resp_dip2 = des, burst = aro;

    for (size_t i = 0; i < n; ++i) {
      double t = i * dt;
      int slot = std::min(n_slots - 1, static_cast<int>(t / kEpochSeconds));
      double x = 0;
      switch (ch.group) {
        case ChannelGroup::Brain: {
          double f = kStageFreqHz[static_cast<int>(rec.stage_labels[slot])] +
                     cohort.stage_freq_offset_hz;
          phase += 2.0 * M_PI * f * dt;
          x = 0.9 * std::sin(phase) + 0.45 * cohort.noise_scale * pink.step(rng.normal());
          break;
        }
        case ChannelGroup::Respiration: {
          phase += 2.0 * M_PI * breath_hz * dt;
          double amp = 1.0 + 0.4 * std::sin(2.0 * M_PI * t / 3600.0 + drift_phase);
          if (resp_dip1.contains(t) || resp_dip2.contains(t)) amp *= 0.2;
          if (ch.name == "Snore") {
            double gate = std::max(0.0, std::sin(phase));
            x = amp * gate * 0.8 * rng.normal() * cohort.noise_scale;
          } else {
            x = amp * std::sin(phase) + 0.05 * cohort.noise_scale * rng.normal();
          }
          break;
        }
        case ChannelGroup::Cardiac: {
          phase += (rec.hr_per_epoch[slot] / 60.0) * dt;  // beats
          double frac = phase - std::floor(phase);
          x = 1.6 * std::exp(-0.5 * std::pow((frac - 0.5) / 0.03, 2)) -
              0.25 * std::exp(-0.5 * std::pow((frac - 0.7) / 0.08, 2)) +
              0.03 * cohort.noise_scale * rng.normal();
          break;
        }
        case ChannelGroup::Somatic: {
          double amp = burst.contains(t) ? 1.0 : 0.12;
          x = amp * cohort.noise_scale * rng.normal();
          break;
        }
      }
      out[i] = static_cast<float>(x);
    }
  }
  return rec;
}

std::vector<NightRecording> synth_corpus(const CorpusSpec& spec) {
  validate(spec);
  std::vector<NightRecording> nights;
  uint32_t pid = 0;
  for (int ci = 0; ci < static_cast<int>(spec.cohorts.size()); ++ci)
    for (int p = 0; p < spec.cohorts[ci].n_patients; ++p)
      nights.push_back(synth_night(spec, ci, pid++));
  return nights;
}

namespace {

NightEntry make_entry(const NightRecording& rec) {
  NightEntry e;
  e.patient_id = rec.patient_id;
  e.cohort_id = rec.cohort_id;
  e.duration_s = rec.duration_s;
  e.n_slots = rec.n_slots();
  e.channel_available = rec.channel_available;
  e.disease_labels = rec.disease_labels;
  for (auto st : rec.stage_labels) e.stage_counts[static_cast<int>(st)]++;
  for (int ev = 0; ev < kNumEventTypes; ++ev) {
    auto flags = slots_with_event(rec.event_intervals[ev], e.n_slots);
    e.event_epoch_counts[ev] = static_cast<int>(std::count(flags.begin(), flags.end(), true));
  }
  return e;
}

json night_sidecar(const NightRecording& rec) {
  const ChannelMontage montage = ChannelMontage::standard();
  json j;
  j["patient_id"] = rec.patient_id;
  j["cohort_id"] = rec.cohort_id;
  j["duration_s"] = rec.duration_s;
  j["order"] = "channel-major";
  json chans = json::array();
  for (int c = 0; c < kNumChannels; ++c) {
    chans.push_back({{"name", montage[c].name},
                     {"rate_hz", montage[c].rate_hz},
                     {"available", rec.channel_available[c]},
                     {"length", rec.channels[c].size()}});
  }
  j["channels"] = chans;
  std::vector<int> stages(rec.stage_labels.size());
  for (size_t i = 0; i < stages.size(); ++i) stages[i] = static_cast<int>(rec.stage_labels[i]);
  j["stage_labels"] = stages;
  json events = json::object();
  for (int e = 0; e < kNumEventTypes; ++e)
    events[event_name(static_cast<EventType>(e))] = rec.event_intervals[e];
  j["event_intervals"] = events;
  j["disease_labels"] = rec.disease_labels;
  j["hr_per_epoch"] = rec.hr_per_epoch;
  return j;
}

}  // namespace

void to_json(json& j, const CorpusManifest& m) {
  j = json::object();
  j["version"] = 1;
  j["seed"] = m.seed;
  j["spec_hash"] = m.spec_hash;
  json nights = json::array();
  for (const auto& e : m.nights) {
    nights.push_back({{"patient_id", e.patient_id},
                      {"cohort_id", e.cohort_id},
                      {"duration_s", e.duration_s},
                      {"n_slots", e.n_slots},
                      {"channel_available", e.channel_available},
                      {"disease_labels", e.disease_labels},
                      {"stage_counts", e.stage_counts},
                      {"event_epoch_counts", e.event_epoch_counts},
                      {"waveform_file", e.waveform_file},
                      {"sidecar_file", e.sidecar_file}});
  }
  j["nights"] = nights;
}

void from_json(const json& j, CorpusManifest& m) {
  m.seed = j.at("seed").get<uint64_t>();
  m.spec_hash = j.value("spec_hash", "");
  m.nights.clear();
  for (const auto& nj : j.at("nights")) {
    NightEntry e;
    e.patient_id = nj.at("patient_id").get<uint32_t>();
    e.cohort_id = nj.at("cohort_id").get<std::string>();
    e.duration_s = nj.at("duration_s").get<double>();
    e.n_slots = nj.at("n_slots").get<int>();
    e.channel_available = nj.at("channel_available").get<std::array<bool, kNumChannels>>();
    e.disease_labels = nj.at("disease_labels").get<std::array<bool, kNumDiseases>>();
    e.stage_counts = nj.at("stage_counts").get<std::array<int, kNumStages>>();
    e.event_epoch_counts = nj.at("event_epoch_counts").get<std::array<int, kNumEventTypes>>();
    e.waveform_file = nj.at("waveform_file").get<std::string>();
    e.sidecar_file = nj.at("sidecar_file").get<std::string>();
    m.nights.push_back(e);
  }
}

CorpusManifest synth_corpus_to_dir(const CorpusSpec& spec, const std::filesystem::path& dir) {
  validate(spec);
  std::filesystem::create_directories(dir / "waves");

  CorpusManifest manifest;
  manifest.seed = spec.seed;
  manifest.spec_hash = hex64(fnv1a64(json(spec).dump()));

  uint32_t pid = 0;
  for (int ci = 0; ci < static_cast<int>(spec.cohorts.size()); ++ci) {
    for (int p = 0; p < spec.cohorts[ci].n_patients; ++p, ++pid) {
      NightRecording rec = synth_night(spec, ci, pid);
      NightEntry entry = make_entry(rec);
      char base[32];
      snprintf(base, sizeof(base), "p%06u", pid);
      entry.waveform_file = std::string("waves/") + base + ".f32";
      entry.sidecar_file = std::string("waves/") + base + ".json";

      std::vector<float> payload;
      for (int c = 0; c < kNumChannels; ++c)
        payload.insert(payload.end(), rec.channels[c].begin(), rec.channels[c].end());
      write_f32_file(dir / entry.waveform_file, payload);
      write_text_file(dir / entry.sidecar_file, night_sidecar(rec).dump(2) + "\n");
      manifest.nights.push_back(entry);
    }
  }
  write_text_file(dir / "manifest.json", json(manifest).dump(2) + "\n");
  return manifest;
}

CorpusManifest load_manifest(const std::filesystem::path& corpus_dir) {
  return json::parse(read_text_file(corpus_dir / "manifest.json")).get<CorpusManifest>();
}

NightRecording load_night(const std::filesystem::path& corpus_dir, const NightEntry& entry) {
  json side = json::parse(read_text_file(corpus_dir / entry.sidecar_file));
  NightRecording rec;
  rec.patient_id = side.at("patient_id").get<uint32_t>();
  rec.cohort_id = side.at("cohort_id").get<std::string>();
  rec.duration_s = side.at("duration_s").get<double>();
  auto payload = read_f32_file(corpus_dir / entry.waveform_file);
  size_t off = 0;
  for (int c = 0; c < kNumChannels; ++c) {
    const auto& cj = side.at("channels").at(c);
    size_t len = cj.at("length").get<size_t>();
    rec.channel_available[c] = cj.at("available").get<bool>();
    if (off + len > payload.size())
      throw std::runtime_error("waveform file shorter than sidecar declares: " +
                               entry.waveform_file);
    rec.channels[c].assign(payload.begin() + off, payload.begin() + off + len);
    off += len;
  }
  if (off != payload.size())
    throw std::runtime_error("waveform file longer than sidecar declares: " +
                             entry.waveform_file);
  for (int s : side.at("stage_labels").get<std::vector<int>>())
    rec.stage_labels.push_back(static_cast<SleepStage>(s));
  for (int e = 0; e < kNumEventTypes; ++e)
    rec.event_intervals[e] = side.at("event_intervals")
                                 .at(event_name(static_cast<EventType>(e)))
                                 .get<std::vector<std::pair<double, double>>>();
  rec.disease_labels = side.at("disease_labels").get<std::array<bool, kNumDiseases>>();
  rec.hr_per_epoch = side.at("hr_per_epoch").get<std::vector<float>>();
  return rec;
}

std::vector<CorpusStatsRow> corpus_stats(
    const CorpusManifest& manifest,
    const std::unordered_map<uint32_t, std::string>* patient_split,
    const std::optional<std::vector<std::string>>& cohort_filter) {
  if (manifest.nights.empty()) throw std::invalid_argument("corpus_stats: empty corpus");

  auto keep = [&](const std::string& cohort) {
    if (!cohort_filter) return true;
    return std::find(cohort_filter->begin(), cohort_filter->end(), cohort) !=
           cohort_filter->end();
  };

  std::map<std::pair<std::string, std::string>, CorpusStatsRow> acc;
  std::map<std::pair<std::string, std::string>, long> slot_totals;
  for (const auto& e : manifest.nights) {
    if (!keep(e.cohort_id)) continue;
    std::string split;
    if (patient_split) {
      auto it = patient_split->find(e.patient_id);
      split = it == patient_split->end() ? "unassigned" : it->second;
    }
    auto key = std::make_pair(e.cohort_id, split);
    auto& row = acc[key];
    row.cohort_id = e.cohort_id;
    row.split = split;
    row.nights += 1;
    row.epochs += e.n_slots;
    slot_totals[key] += e.n_slots;
    for (int s = 0; s < kNumStages; ++s) row.stage_fraction[s] += e.stage_counts[s];
    for (int ev = 0; ev < kNumEventTypes; ++ev)
      row.event_prevalence[ev] += e.event_epoch_counts[ev];
    for (int d = 0; d < kNumDiseases; ++d) row.disease_prevalence[d] += e.disease_labels[d];
  }
  std::vector<CorpusStatsRow> rows;
  for (auto& [key, row] : acc) {
    double slots = static_cast<double>(slot_totals[key]);
    for (int s = 0; s < kNumStages; ++s) row.stage_fraction[s] /= slots;
    for (int ev = 0; ev < kNumEventTypes; ++ev) row.event_prevalence[ev] /= slots;
    for (int d = 0; d < kNumDiseases; ++d) row.disease_prevalence[d] /= row.nights;
    rows.push_back(row);
  }
  return rows;
}

std::string stats_to_csv(const std::vector<CorpusStatsRow>& rows) {
  std::ostringstream os;
  os << "cohort,split,nights,epochs";
  for (int s = 0; s < kNumStages; ++s) os << ",stage_frac_" << s;
  for (int e = 0; e < kNumEventTypes; ++e)
    os << "," << event_name(static_cast<EventType>(e)) << "_prevalence";
  for (int d = 0; d < kNumDiseases; ++d) os << "," << disease_name(d) << "_prevalence";
  os << "\n";
  os.precision(9);
  for (const auto& r : rows) {
    os << r.cohort_id << "," << r.split << "," << r.nights << "," << r.epochs;
    for (int s = 0; s < kNumStages; ++s) os << "," << r.stage_fraction[s];
    for (int e = 0; e < kNumEventTypes; ++e) os << "," << r.event_prevalence[e];
    for (int d = 0; d < kNumDiseases; ++d) os << "," << r.disease_prevalence[d];
    os << "\n";
  }
  return os.str();
}

}  // namespace osf
