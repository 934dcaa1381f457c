#include "osf/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace osf {

void validate(const AugmentationSpec& spec) {
  auto check_range = [](const char* name, double lo, double hi) {
    if (!(lo >= 0 && hi <= 1 && lo <= hi))
      throw std::invalid_argument(std::string(name) + ": range must satisfy 0 <= lo <= hi <= 1");
  };
  check_range("time_mask.ratio_range", spec.time_mask.ratio_lo, spec.time_mask.ratio_hi);
  check_range("crop.ratio_range", spec.crop.ratio_lo, spec.crop.ratio_hi);
  if (!(spec.channel_mask.drop_fraction >= 0 && spec.channel_mask.drop_fraction < 1))
    throw std::invalid_argument("channel_mask.drop_fraction: must be in [0, 1)");
}

void to_json(nlohmann::json& j, const AugmentationSpec& s) {
  j = {{"time_mask",
        {{"enabled", s.time_mask.enabled}, {"ratio_range", {s.time_mask.ratio_lo, s.time_mask.ratio_hi}}}},
       {"channel_mask",
        {{"enabled", s.channel_mask.enabled}, {"drop_fraction", s.channel_mask.drop_fraction}}},
       {"crop",
        {{"enabled", s.crop.enabled}, {"ratio_range", {s.crop.ratio_lo, s.crop.ratio_hi}}}}};
}

void from_json(const nlohmann::json& j, AugmentationSpec& s) {
  s = AugmentationSpec{};
  if (j.contains("time_mask")) {
    const auto& t = j["time_mask"];
    s.time_mask.enabled = t.value("enabled", true);
    if (t.contains("ratio_range")) {
      s.time_mask.ratio_lo = t["ratio_range"][0].get<double>();
      s.time_mask.ratio_hi = t["ratio_range"][1].get<double>();
    }
  }
  if (j.contains("channel_mask")) {
    const auto& c = j["channel_mask"];
    s.channel_mask.enabled = c.value("enabled", true);
    s.channel_mask.drop_fraction = c.value("drop_fraction", 0.5);
  }
  if (j.contains("crop")) {
    const auto& c = j["crop"];
    s.crop.enabled = c.value("enabled", false);
    if (c.contains("ratio_range")) {
      s.crop.ratio_lo = c["ratio_range"][0].get<double>();
      s.crop.ratio_hi = c["ratio_range"][1].get<double>();
    }
  }
  validate(s);
}

Epoch block_time_mask(const Epoch& epoch, double ratio_lo, double ratio_hi, Rng& rng) {
  Epoch out = epoch;
  const int T = kEpochSamples;
  for (int c = 0; c < kNumChannels; ++c) {
    double r = rng.uniform(ratio_lo, ratio_hi);
    int len = static_cast<int>(std::floor(r * T));
    int max_start = static_cast<int>(std::floor((1.0 - r) * T));
    int p = static_cast<int>(rng.index(static_cast<uint64_t>(max_start + 1)));
    p = std::min(p, T - len);
    if (len > 0) out.values.row(c).segment(p, len).setZero();
  }
  return out;
}

Epoch channel_mask(const Epoch& epoch, double drop_fraction, Rng& rng) {
  Epoch out = epoch;
  int n_drop = static_cast<int>(std::floor(kNumChannels * drop_fraction));
  for (int c : rng.sample_without_replacement(kNumChannels, n_drop)) out.values.row(c).setZero();
  return out;
}

Epoch temporal_crop(const Epoch& epoch, double ratio_lo, double ratio_hi, Rng& rng) {
  Epoch out = epoch;
  const int T = kEpochSamples;
  double r = rng.uniform(ratio_lo, ratio_hi);
  int len = std::max(2, static_cast<int>(std::floor(r * T)));
  int start = static_cast<int>(rng.index(static_cast<uint64_t>(T - len + 1)));
  for (int c = 0; c < kNumChannels; ++c) {
    for (int j = 0; j < T; ++j) {
      double src = start + static_cast<double>(j) * (len - 1) / (T - 1);
      int i0 = std::min(start + len - 1, static_cast<int>(src));
      int i1 = std::min(start + len - 1, i0 + 1);
      double w = src - i0;
      out.values(c, j) =
          static_cast<float>((1.0 - w) * epoch.values(c, i0) + w * epoch.values(c, i1));
    }
  }
  return out;
}

Epoch apply_augmentations(const Epoch& epoch, const AugmentationSpec& spec, Rng& rng) {
  Epoch out = epoch;
  if (spec.crop.enabled) out = temporal_crop(out, spec.crop.ratio_lo, spec.crop.ratio_hi, rng);
  if (spec.channel_mask.enabled) out = channel_mask(out, spec.channel_mask.drop_fraction, rng);
  if (spec.time_mask.enabled)
    out = block_time_mask(out, spec.time_mask.ratio_lo, spec.time_mask.ratio_hi, rng);
  return out;
}

std::pair<Epoch, Epoch> make_views(const Epoch& epoch, const AugmentationSpec& spec, Rng& rng) {
  validate(spec);
  Epoch a = apply_augmentations(epoch, spec, rng);
  Epoch b = apply_augmentations(epoch, spec, rng);
  return {std::move(a), std::move(b)};
}

}  // namespace osf
