#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace osf {

enum class ChannelGroup : uint8_t { Brain = 0, Respiration = 1, Cardiac = 2, Somatic = 3 };

inline const char* group_name(ChannelGroup g) {
  switch (g) {
    case ChannelGroup::Brain: return "brain";
    case ChannelGroup::Respiration: return "respiration";
    case ChannelGroup::Cardiac: return "cardiac";
    case ChannelGroup::Somatic: return "somatic";
  }
  throw std::logic_error("bad group");
}

inline ChannelGroup group_from_name(const std::string& s) {
  if (s == "brain") return ChannelGroup::Brain;
  if (s == "respiration") return ChannelGroup::Respiration;
  if (s == "cardiac") return ChannelGroup::Cardiac;
  if (s == "somatic") return ChannelGroup::Somatic;
  throw std::invalid_argument("unknown channel group: " + s);
}

struct ChannelDesc {
  std::string name;
  ChannelGroup group;
  int rate_hz;  // intermediate rate before the final 64 Hz resample
};

inline constexpr int kNumChannels = 12;
inline constexpr int kEpochSeconds = 30;
inline constexpr int kTargetRateHz = 64;
inline constexpr int kEpochSamples = kEpochSeconds * kTargetRateHz;  // 1920

// The fixed 12-channel layout. Order is part of the on-disk contracts.
struct ChannelMontage {
  std::array<ChannelDesc, kNumChannels> channels;

  static ChannelMontage standard() {
    return ChannelMontage{{{
        {"C3-A2", ChannelGroup::Brain, 64},
        {"C4-A1", ChannelGroup::Brain, 64},
        {"E1-A2", ChannelGroup::Brain, 64},
        {"E2-A1", ChannelGroup::Brain, 64},
        {"Abdominal", ChannelGroup::Respiration, 8},
        {"Thorax", ChannelGroup::Respiration, 8},
        {"Nasal Pressure", ChannelGroup::Respiration, 8},
        {"Snore", ChannelGroup::Respiration, 32},
        {"ECG", ChannelGroup::Cardiac, 128},
        {"EMG-Chin", ChannelGroup::Somatic, 64},
        {"EMG-LLeg", ChannelGroup::Somatic, 64},
        {"EMG-RLeg", ChannelGroup::Somatic, 64},
    }}};
  }

  const ChannelDesc& operator[](int i) const { return channels.at(i); }

  bool is_respiratory(int i) const {
    return channels.at(i).group == ChannelGroup::Respiration;
  }
};

inline constexpr int kEcgChannel = 8;

enum class SleepStage : uint8_t { Wake = 0, Light = 1, Deep = 2, Rem = 3 };
inline constexpr int kNumStages = 4;

enum class EventType : uint8_t { Arousal = 0, Hypopnea = 1, OxygenDesat = 2, CentralApnea = 3 };
inline constexpr int kNumEventTypes = 4;

inline const char* event_name(EventType e) {
  switch (e) {
    case EventType::Arousal: return "arousal";
    case EventType::Hypopnea: return "hypopnea";
    case EventType::OxygenDesat: return "oxygen_desaturation";
    case EventType::CentralApnea: return "central_apnea";
  }
  throw std::logic_error("bad event type");
}

inline constexpr int kNumDiseases = 3;
inline const char* disease_name(int d) {
  static const char* names[kNumDiseases] = {"coronary_disease", "diabetes", "hypertension"};
  if (d < 0 || d >= kNumDiseases) throw std::out_of_range("disease index");
  return names[d];
}

}  // namespace osf
