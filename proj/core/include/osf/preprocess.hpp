#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "osf/corpus.hpp"
#include "osf/epoch.hpp"
#include "osf/montage.hpp"

namespace osf {

// Removes leading/trailing maximal Wake runs longer than 60 slots, keeping a
// 10-slot buffer. A night that is entirely Wake collapses to a 10-slot stub
// with all_wake_stub set.
NightRecording trim_wake_edges(const NightRecording& rec);

// Per-night z-score (population std) with [-6, 6] clipping; respiratory
// channels use a local z-score over a centered 5-minute window recomputed
// every 30 s and linearly interpolated between hops.
NightRecording normalize_night(const NightRecording& rec, const ChannelMontage& montage);

inline constexpr double kLocalZscoreWindowS = 300.0;
inline constexpr double kLocalZscoreHopS = 30.0;
inline constexpr float kClipValue = 6.0f;

// Linear resample of every channel to 64 Hz, cut into non-overlapping 30-s
// epochs; unavailable channels zero-filled with channel_valid=false. Event
// flag e is set iff an interval of type e overlaps the slot by >= 1 s.
std::vector<Epoch> segment_epochs(const NightRecording& rec, const ChannelMontage& montage);

struct SplitSets {
  std::set<uint32_t> train, valid, test;

  std::map<uint32_t, std::string> as_map() const;
  const std::set<uint32_t>& by_name(const std::string& name) const;
};

// Patient-level partition, per cohort independently, deterministic in seed.
// cohort_of: patient id -> cohort id.
SplitSets split_patients(const std::map<uint32_t, std::string>& cohort_of,
                         std::array<double, 3> ratios, uint64_t seed);

void to_json(nlohmann::json& j, const SplitSets& s);
void from_json(const nlohmann::json& j, SplitSets& s);

// Full pipeline over a synthesized corpus directory: trim -> normalize ->
// segment -> per-split shards (train.shard / valid.shard / test.shard) plus
// splits.json under out_dir.
struct PreprocessResult {
  SplitSets splits;
  std::map<std::string, size_t> epoch_counts;  // per split
};

PreprocessResult preprocess_corpus(const std::filesystem::path& corpus_dir,
                                   const std::filesystem::path& out_dir,
                                   std::array<double, 3> ratios = {0.8, 0.1, 0.1},
                                   uint64_t seed = 0);

}  // namespace osf
