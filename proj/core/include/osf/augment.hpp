#pragma once

#include <utility>

#include <json.hpp>

#include "osf/epoch.hpp"
#include "osf/rng.hpp"

namespace osf {

struct AugmentationSpec {
  struct TimeMask {
    bool enabled = true;
    double ratio_lo = 0.3;
    double ratio_hi = 0.6;
  } time_mask;
  struct ChannelMask {
    bool enabled = true;
    double drop_fraction = 0.5;
  } channel_mask;
  struct Crop {
    bool enabled = false;
    double ratio_lo = 0.25;
    double ratio_hi = 0.75;
  } crop;

  // channel + time masking, no crop
  static AugmentationSpec osf_default() { return AugmentationSpec{}; }
  static AugmentationSpec time_only() {
    AugmentationSpec s;
    s.channel_mask.enabled = false;
    return s;
  }
  static AugmentationSpec none() {
    AugmentationSpec s;
    s.time_mask.enabled = false;
    s.channel_mask.enabled = false;
    return s;
  }
};

void validate(const AugmentationSpec& spec);
void to_json(nlohmann::json& j, const AugmentationSpec& s);
void from_json(const nlohmann::json& j, AugmentationSpec& s);

// Per channel: draw r in ratio_range, start p in {0..floor((1-r)T)}, zero
// [p, p + floor(rT)). channel_valid untouched.
Epoch block_time_mask(const Epoch& epoch, double ratio_lo, double ratio_hi, Rng& rng);

// Zero floor(12 * drop_fraction) channels chosen uniformly without replacement.
Epoch channel_mask(const Epoch& epoch, double drop_fraction, Rng& rng);

// Keep a contiguous segment of ratio r (same segment for all channels) and
// linearly stretch it back to the full 1920 samples.
Epoch temporal_crop(const Epoch& epoch, double ratio_lo, double ratio_hi, Rng& rng);

// Two independently augmented views, order crop -> channel_mask -> time_mask.
std::pair<Epoch, Epoch> make_views(const Epoch& epoch, const AugmentationSpec& spec, Rng& rng);

Epoch apply_augmentations(const Epoch& epoch, const AugmentationSpec& spec, Rng& rng);

}  // namespace osf
