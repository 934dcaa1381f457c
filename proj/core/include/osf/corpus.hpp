#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "osf/montage.hpp"
#include "osf/rng.hpp"

namespace osf {

struct CohortSpec {
  std::string id;
  int n_patients = 0;
  std::array<bool, kNumChannels> channel_available = {true, true, true, true, true, true,
                                                      true, true, true, true, true, true};
  double noise_scale = 1.0;        // cohort-specific acquisition noise
  double stage_freq_offset_hz = 0.0;  // small cohort shift of the brain oscillation
};

struct DiseaseLink {
  double bias = 0.0;
  std::array<double, kNumEventTypes> event_weights = {0, 0, 0, 0};
};

struct CorpusSpec {
  std::vector<CohortSpec> cohorts;
  double night_minutes_lo = 360.0;
  double night_minutes_hi = 600.0;
  // row-stochastic over {Wake, Light, Deep, REM}, applied per 30-s slot
  std::array<std::array<double, kNumStages>, kNumStages> stage_transitions;
  std::array<double, kNumEventTypes> event_rates = {0.05, 0.08, 0.06, 0.03};
  std::array<DiseaseLink, kNumDiseases> disease_link;
  double hr_base_lo = 55.0;
  double hr_base_hi = 75.0;
  uint64_t seed = 0;

  static CorpusSpec defaults();
};

// throws std::invalid_argument naming the offending field
void validate(const CorpusSpec& spec);

void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);

struct NightRecording {
  uint32_t patient_id = 0;
  std::string cohort_id;
  double duration_s = 0;
  std::array<std::vector<float>, kNumChannels> channels;  // at montage intermediate rates
  std::array<bool, kNumChannels> channel_available{};
  std::vector<SleepStage> stage_labels;  // one per 30-s slot
  std::array<std::vector<std::pair<double, double>>, kNumEventTypes> event_intervals;
  std::array<bool, kNumDiseases> disease_labels{};
  std::vector<float> hr_per_epoch;  // bpm per 30-s slot
  bool all_wake_stub = false;       // set by trim when a night had no sleep

  int n_slots() const { return static_cast<int>(stage_labels.size()); }
};

NightRecording synth_night(const CorpusSpec& spec, int cohort_idx, uint32_t patient_id);

// whole corpus in memory; intended for tests and small runs
std::vector<NightRecording> synth_corpus(const CorpusSpec& spec);

struct NightEntry {
  uint32_t patient_id = 0;
  std::string cohort_id;
  double duration_s = 0;
  int n_slots = 0;
  std::array<bool, kNumChannels> channel_available{};
  std::array<bool, kNumDiseases> disease_labels{};
  std::array<int, kNumStages> stage_counts{};
  std::array<int, kNumEventTypes> event_epoch_counts{};  // slots with >=1 s overlap
  std::string waveform_file;  // relative to corpus dir
  std::string sidecar_file;
};

struct CorpusManifest {
  uint64_t seed = 0;
  std::string spec_hash;
  std::vector<NightEntry> nights;
};

void to_json(nlohmann::json& j, const CorpusManifest& m);
void from_json(const nlohmann::json& j, CorpusManifest& m);

// Generates every night, writes waveforms + sidecars + manifest.json under dir.
CorpusManifest synth_corpus_to_dir(const CorpusSpec& spec, const std::filesystem::path& dir);

CorpusManifest load_manifest(const std::filesystem::path& corpus_dir);
NightRecording load_night(const std::filesystem::path& corpus_dir, const NightEntry& entry);

// slots with >= min_overlap_s seconds of overlap with any interval of one type
std::vector<bool> slots_with_event(const std::vector<std::pair<double, double>>& intervals,
                                   int n_slots, double min_overlap_s = 1.0);

struct CorpusStatsRow {
  std::string cohort_id;
  std::string split;  // empty when not split
  int nights = 0;
  long epochs = 0;
  std::array<double, kNumStages> stage_fraction{};
  std::array<double, kNumEventTypes> event_prevalence{};  // fraction of epochs flagged
  std::array<double, kNumDiseases> disease_prevalence{};  // fraction of nights
};

std::vector<CorpusStatsRow> corpus_stats(
    const CorpusManifest& manifest,
    const std::unordered_map<uint32_t, std::string>* patient_split = nullptr,
    const std::optional<std::vector<std::string>>& cohort_filter = std::nullopt);

std::string stats_to_csv(const std::vector<CorpusStatsRow>& rows);

}  // namespace osf
