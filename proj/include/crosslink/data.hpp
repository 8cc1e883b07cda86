#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "crosslink/config.hpp"
#include "crosslink/image.hpp"

namespace crosslink::data {

enum class ShapeKind { Ellipse, FusedBlob, Crescent };
std::string shape_name(ShapeKind k);

/// Rejected generator configuration; the message names the violated constraint.
class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SynthSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t train = 160;
  std::size_t val = 20;
  std::size_t test = 20;
  double fraction_lo = 0.001;
  double fraction_hi = 0.02;
  double blur_lo = 0.5;
  double blur_hi = 1.5;
  double noise_sigma = 0.03;
  /// Mean foreground intensity offset over the background.
  double contrast = 0.35;
  std::array<double, 3> shape_mix = {1.0, 1.0, 1.0};  // ellipse, fused-blob, crescent
  std::uint64_t seed = 0;

  std::size_t images() const { return train + val + test; }
  void validate() const;

  /// Keys accepted by from_config / written by to_config.
  static const std::set<std::string>& keys();
  static SynthSpec from_config(const KeyValueConfig& cfg);
  std::string to_config() const;
};

struct SampleInfo {
  std::string id;
  std::string split;  // train | val | test
  ShapeKind shape = ShapeKind::Ellipse;
  double target_fraction = 0;
  double blur_sigma = 0;
};

struct Sample {
  GrayImage image;
  BinaryMask mask;
  SampleInfo info;
};

/// Deterministic per-purpose random stream derived from (seed, a, b).
std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

/// One sample; depends only on (spec, index).
Sample generate_sample(const SynthSpec& spec, std::size_t index);
std::vector<Sample> generate(const SynthSpec& spec);

struct AugmentSpec {
  double zoom_lo = 0.5;
  double zoom_hi = 1.75;
  double max_rotation_deg = 30.0;
  double flip_probability = 0.5;
};

struct AugmentParams {
  double zoom = 1.0;
  double rotation_deg = 0.0;
  bool flip = false;
  /// Placement of the zoomed image inside the canvas, as fractions in [0, 1]
  /// of the free (padding) or excess (cropping) extent.
  double offset_y = 0.5;
  double offset_x = 0.5;
};

AugmentParams sample_augment(const AugmentSpec& spec, std::mt19937_64& rng);

/// Zoom (zero padding when smaller, cropping when larger), rotation about
/// the centre, then optional horizontal flip. Bilinear for the image,
/// nearest neighbour for the mask; output size equals input size.
Sample augment(const Sample& s, const AugmentParams& p);
Sample augment(const Sample& s, const AugmentSpec& spec, std::mt19937_64& rng);
Sample flip_horizontal(const Sample& s);

/// Malformed or truncated file; `offset` is the byte position of the problem.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& path, std::size_t offset, const std::string& what);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Binary PGM (P5), maxval <= 255. Intensities map to v / maxval.
GrayImage read_image(const std::filesystem::path& path);
/// Writes round(clamp(v, 0, 1) * 255).
void write_image(const std::filesystem::path& path, const GrayImage& image);
/// Masks hold only 0 and maxval; anything else is rejected.
BinaryMask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const BinaryMask& mask);

inline constexpr int kManifestVersion = 1;

struct Dataset {
  std::map<std::string, std::string> meta;
  std::vector<Sample> samples;

  std::vector<const Sample*> split(const std::string& name) const;
};

/// Writes images/NNNN.pgm, masks/NNNN.pgm and the manifest.
void write_dataset(const std::filesystem::path& dir, const SynthSpec& spec,
                   const std::vector<Sample>& samples);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace crosslink::data
