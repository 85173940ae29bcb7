#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "msfm/common.hpp"

namespace msfm {

inline constexpr std::size_t kDescriptorSize = 128;
using Descriptor = std::array<std::uint8_t, kDescriptorSize>;

struct Feature {
  float x = 0.0F;
  float y = 0.0F;
  float scale = 1.0F;  // scale-space sigma
  float orientation = 0.0F;
  Descriptor descriptor{};
};

/// Features of one image, sorted by descending scale (stable w.r.t. file
/// order). The first `coarse_count` features form the high-scale tier.
struct FeatureSet {
  ImageId image_id = 0;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<Feature> features;
  std::size_t coarse_count = 0;

  std::size_t size() const { return features.size(); }
  std::span<const Feature> tier() const {
    return {features.data(), coarse_count};
  }
};

// Binary layout, little-endian: "MSFT", u32 version=1, u32 image_id,
// u32 width, u32 height, u32 count, then count x {f32 x, f32 y, f32 scale,
// f32 orientation, u8[128] descriptor}.
inline constexpr std::uint32_t kFeatureFileVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 24;
inline constexpr std::size_t kFeatureRecordBytes = 16 + kDescriptorSize;

FeatureSet parse_features(std::span<const std::uint8_t> bytes);
FeatureSet load_features(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_features(const FeatureSet& fs);
void write_features(const std::filesystem::path& path, const FeatureSet& fs);

void sort_by_scale(FeatureSet& fs);

/// Size of the top-eta% tier: ceil(eta/100 * n), or all of them when the
/// image has fewer than `small_image_limit` features.
std::size_t top_scale_count(std::size_t n, double eta,
                            std::size_t small_image_limit = 1000);

FeatureSet select_top_scale(FeatureSet fs, double eta);

struct ScaleQuantization {
  double sigma0 = 1.6;
  int intervals_per_octave = 3;
};

int scale_level(double scale, const ScaleQuantization& q = {});

/// Fraction of distinct quantized scale levels of the whole set that also
/// occur in the top-eta% tier.
double scale_coverage(const FeatureSet& fs, double eta,
                      const ScaleQuantization& q = {});

struct Intrinsics {
  double focal = 0.0;
  double cx = 0.0;
  double cy = 0.0;
};

/// All feature sets of a run keyed by image id, plus optional per-image
/// calibration read from `calibration.txt` ("image_id f cx cy" per line).
class FeatureStore {
 public:
  FeatureStore() = default;

  static FeatureStore load_dir(const std::filesystem::path& dir);
  void write_dir(const std::filesystem::path& dir) const;

  void add(FeatureSet fs);
  void set_intrinsics(ImageId id, const Intrinsics& k);

  bool contains(ImageId id) const { return sets_.count(id) != 0; }
  const FeatureSet& get(ImageId id) const;
  std::vector<ImageId> image_ids() const;
  std::size_t size() const { return sets_.size(); }

  /// Calibrated intrinsics if known, else focal = 1.2 * max(width, height)
  /// with the principal point at the image center.
  Intrinsics intrinsics(ImageId id) const;
  bool has_calibration(ImageId id) const { return intrinsics_.count(id) != 0; }

  /// Recomputes every set's coarse tier.
  void apply_tier(double eta);

 private:
  std::map<ImageId, FeatureSet> sets_;
  std::map<ImageId, Intrinsics> intrinsics_;
};

std::filesystem::path feature_file_name(ImageId id);

}  // namespace msfm
