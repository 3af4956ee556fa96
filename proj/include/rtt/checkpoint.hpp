#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "rtt/model.hpp"

namespace rtt {

enum class PretrainScheme { natural, adversarial, random_smoothing };

std::string to_string(PretrainScheme s);
PretrainScheme pretrain_scheme_from_string(const std::string& s);

struct CheckpointMeta {
  std::string source_task;
  PretrainScheme pretraining_scheme = PretrainScheme::natural;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  nlohmann::json extra = nlohmann::json::object();
};

struct Checkpoint {
  Network<float> network;
  CheckpointMeta meta;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// Bad magic bytes, unparsable header or unsupported format version.
class CorruptHeaderError : public LoadError {
 public:
  using LoadError::LoadError;
};
/// The blob ends before the header says it should.
class TruncatedBlobError : public LoadError {
 public:
  using LoadError::LoadError;
};
/// A stored tensor does not match the shape the stored spec requires.
class ShapeMismatchError : public LoadError {
 public:
  using LoadError::LoadError;
};

inline constexpr int kFormatVersion = 1;

// File layout shared by checkpoints and masks:
//   "<MAGIC>\n" "<header byte count>\n" <JSON header> <little-endian blob>
// Checkpoint blobs are float32; mask blobs are bit-packed, least significant bit first.

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_masks(const MaskSet& masks, const std::filesystem::path& path,
                const nlohmann::json& metadata = nlohmann::json::object());
MaskSet load_masks(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

}  // namespace rtt
