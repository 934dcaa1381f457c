#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "osf/montage.hpp"

namespace osf {

using EpochMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// One 30-second sample: 12 x 1920 normalized values plus labels.
struct Epoch {
  EpochMatrix values;  // kNumChannels x kEpochSamples
  std::array<bool, kNumChannels> channel_valid{};
  SleepStage stage = SleepStage::Wake;
  std::array<bool, kNumEventTypes> event_flags{};
  float hr_bpm = std::nanf("");  // NaN when absent
  uint32_t patient_id = 0;
  std::string cohort_id;
  uint16_t night_index = 0;  // slot index within the night

  bool has_hr() const { return !std::isnan(hr_bpm); }
};

// Binary shard of epochs.
//   magic "OSFS" | version u16 | count u32 | manifest_len u32 | manifest JSON |
//   records: 12*1920 f32 LE, validity u16 (bit c = channel c), stage u8,
//            event flags u8 bitfield, hr f32, patient id u32, night index u16
inline constexpr char kShardMagic[4] = {'O', 'S', 'F', 'S'};
inline constexpr uint16_t kShardVersion = 1;
inline constexpr size_t kShardValueBytes = size_t(kNumChannels) * kEpochSamples * 4;
inline constexpr size_t kShardRecordBytes = kShardValueBytes + 2 + 1 + 1 + 4 + 4 + 2;

void write_shard(const std::vector<Epoch>& epochs, const std::filesystem::path& path,
                 const std::string& split_tag = "");

class ShardWriter {
 public:
  ShardWriter(const std::filesystem::path& path, const std::string& split_tag = "");
  ~ShardWriter();
  void append(const Epoch& e);
  void close();  // writes the final file; idempotent
  size_t count() const { return count_; }

 private:
  std::filesystem::path path_, tmp_path_;
  std::string split_tag_;
  std::ofstream payload_;
  size_t count_ = 0;
  bool closed_ = false;
  std::vector<uint8_t> stages_;
  std::vector<uint32_t> patient_ids_;
  std::vector<uint8_t> event_bits_;
  std::map<uint32_t, std::string> patient_cohorts_;
};

class ShardReader {
 public:
  explicit ShardReader(const std::filesystem::path& path);
  size_t size() const { return count_; }
  Epoch read(size_t i) const;
  const nlohmann::json& manifest() const { return manifest_; }
  const std::vector<uint8_t>& stages() const { return stages_; }
  const std::vector<uint32_t>& patient_ids() const { return patient_ids_; }
  const std::vector<uint8_t>& event_bits() const { return event_bits_; }

 private:
  std::filesystem::path path_;
  mutable std::ifstream file_;
  size_t count_ = 0;
  size_t payload_offset_ = 0;
  nlohmann::json manifest_;
  std::vector<uint8_t> stages_;
  std::vector<uint32_t> patient_ids_;
  std::vector<uint8_t> event_bits_;
  std::map<uint32_t, std::string> patient_cohorts_;
};

std::vector<Epoch> read_shard(const std::filesystem::path& path);

}  // namespace osf
