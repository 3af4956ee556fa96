#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rtt/tensor.hpp"

namespace rtt {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ChecksumError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class LabelOverflowError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class DatasetShapeError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

struct Dataset {
  std::string name;
  std::string split;
  Tensor<float> images;  // N x C x H x W, values in [0, 1]
  std::vector<std::uint32_t> labels;
  std::size_t classes = 0;
  std::vector<float> channel_mean;
  std::vector<float> channel_std;

  std::size_t size() const noexcept { return labels.size(); }
  std::array<std::size_t, 3> image_shape() const;
  std::size_t image_numel() const;

  Tensor<float> gather_images(std::span<const std::size_t> indices) const;
  std::vector<std::uint32_t> gather_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;

  /// Recomputes channel_mean / channel_std from the images.
  void compute_stats();
};

/// Throws LabelOverflowError or DatasetShapeError when invariants fail.
void validate_dataset(const Dataset& ds);

// ---------------------------------------------------------------------------
// Manifest format

enum class ImageEncoding { float32, uint8 };

/// Writes `<dir>/manifest.json` plus one image and one label blob per split.
std::filesystem::path save_dataset(const std::vector<Dataset>& splits, const std::filesystem::path& dir,
                                   ImageEncoding encoding = ImageEncoding::float32);

Dataset load_dataset(const std::filesystem::path& manifest_path, const std::string& split);
std::map<std::string, Dataset> load_dataset_splits(const std::filesystem::path& manifest_path);

// ---------------------------------------------------------------------------
// Synthetic shape/texture task with a controllable domain shift

struct GeneratorConfig {
  std::size_t classes = 10;
  std::array<std::size_t, 3> image{3, 32, 32};
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::uint64_t seed = 0;
  /// Amplitude of the label-keyed high-frequency grating.
  double texture_amplitude = 0.04;
  /// Probability that the drawn shape comes from a random class instead of the label.
  double shape_label_noise = 0.1;
};

struct ShiftConfig {
  double magnitude = 0.0;     // s in [0, 1]
  double color_shift = 0.3;   // per-channel tint at s = 1
  double noise_sigma = 0.12;  // additive Gaussian std at s = 1
  double texture_shift = 1.0; // texture change at s = 1: re-keying probability and frequency stretch
  std::uint64_t seed = 0;     // generator seed of the target domain
  std::size_t train_size = 0; // 0: same as the source
  std::size_t test_size = 0;
};

struct ShiftedPair {
  Dataset source_train, source_test, target_train, target_test;
};

nlohmann::json to_json(const GeneratorConfig& c);
nlohmann::json to_json(const ShiftConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);
ShiftConfig shift_config_from_json(const nlohmann::json& j);

ShiftedPair make_shifted_pair(const GeneratorConfig& base, const ShiftConfig& shift);

/// Renders one split of the (optionally shifted) generator.
Dataset render_split(const GeneratorConfig& base, const ShiftConfig& shift, const std::string& split,
                     std::size_t count);

/// Shape-free blob/noise images used as the out-of-distribution set for OoD scoring.
Dataset make_ood_set(const GeneratorConfig& base, std::size_t count, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool enabled = true;
  bool flip = true;
  std::size_t crop_padding = 4;
};

/// Random horizontal flip and random crop with zero padding. Label-preserving.
Tensor<float> augment(const Tensor<float>& images, const AugmentConfig& cfg, std::mt19937_64& rng);

/// Mirrors every image left-right.
Tensor<float> flip_horizontal(const Tensor<float>& images);

}  // namespace rtt
