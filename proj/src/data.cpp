#include "rtt/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "rtt/hashing.hpp"

namespace rtt {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Dataset

std::array<std::size_t, 3> Dataset::image_shape() const {
  const auto& s = images.shape();
  if (s.size() != 4) throw DatasetShapeError("dataset images must be [N,C,H,W], got " + shape_str(s));
  return {s[1], s[2], s[3]};
}

std::size_t Dataset::image_numel() const {
  const auto s = image_shape();
  return s[0] * s[1] * s[2];
}

Tensor<float> Dataset::gather_images(std::span<const std::size_t> indices) const {
  const auto s = image_shape();
  const auto per = image_numel();
  Tensor<float> out(Shape{indices.size(), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw std::out_of_range("dataset index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(images.data() + indices[i] * per, per, out.data() + i * per);
  }
  return out;
}

std::vector<std::uint32_t> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<std::uint32_t> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels.at(indices[i]);
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d{name, split, gather_images(indices), gather_labels(indices), classes, {}, {}};
  d.compute_stats();
  return d;
}

void Dataset::compute_stats() {
  const auto s = image_shape();
  const std::size_t hw = s[1] * s[2];
  channel_mean.assign(s[0], 0.0f);
  channel_std.assign(s[0], 0.0f);
  for (std::size_t c = 0; c < s[0]; ++c) {
    double acc = 0.0, acc2 = 0.0;
    for (std::size_t n = 0; n < size(); ++n) {
      const float* p = images.data() + (n * s[0] + c) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        acc += p[k];
        acc2 += static_cast<double>(p[k]) * p[k];
      }
    }
    const double cnt = static_cast<double>(size() * hw);
    const double mean = acc / cnt;
    channel_mean[c] = static_cast<float>(mean);
    channel_std[c] = static_cast<float>(std::sqrt(std::max(0.0, acc2 / cnt - mean * mean)));
  }
}

void validate_dataset(const Dataset& ds) {
  const auto& s = ds.images.shape();
  if (s.size() != 4) throw DatasetShapeError("dataset '" + ds.name + "' images must be [N,C,H,W]");
  if (s[0] != ds.labels.size()) {
    throw DatasetShapeError("dataset '" + ds.name + "' has " + std::to_string(s[0]) + " images and " +
                            std::to_string(ds.labels.size()) + " labels");
  }
  if (ds.classes == 0) throw DatasetShapeError("dataset '" + ds.name + "' declares zero classes");
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    if (ds.labels[i] >= ds.classes) {
      throw LabelOverflowError("dataset '" + ds.name + "' sample " + std::to_string(i) + " has label " +
                               std::to_string(ds.labels[i]) + " but only " + std::to_string(ds.classes) +
                               " classes are declared");
    }
  }
  for (float v : ds.images.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DatasetShapeError("dataset '" + ds.name + "' has pixel values outside [0,1]");
  }
}

// ---------------------------------------------------------------------------
// Manifest I/O

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + p.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::string checksum(const std::string& bytes) {
  return sha256_hex(std::span<const std::byte>(reinterpret_cast<const std::byte*>(bytes.data()), bytes.size()));
}

Dataset load_split(const fs::path& manifest_path, const nlohmann::json& manifest, const std::string& split) {
  const auto& splits = manifest.at("splits");
  if (!splits.contains(split)) throw DatasetError("manifest " + manifest_path.string() + " has no split '" + split + "'");
  const auto& entry = splits.at(split);
  const fs::path dir = manifest_path.parent_path();
  const auto shape = manifest.at("shape").get<std::array<std::size_t, 3>>();
  const auto classes = manifest.at("classes").get<std::size_t>();
  const auto count = entry.at("count").get<std::size_t>();

  const auto& img = entry.at("images");
  const auto& lab = entry.at("labels");
  const std::string img_bytes = read_file(dir / img.at("file").get<std::string>());
  const std::string lab_bytes = read_file(dir / lab.at("file").get<std::string>());
  if (checksum(img_bytes) != img.at("sha256").get<std::string>()) {
    throw ChecksumError("checksum mismatch for " + split + " images in " + manifest_path.string());
  }
  if (checksum(lab_bytes) != lab.at("sha256").get<std::string>()) {
    throw ChecksumError("checksum mismatch for " + split + " labels in " + manifest_path.string());
  }

  const std::size_t per = shape[0] * shape[1] * shape[2];
  const auto dtype = img.at("dtype").get<std::string>();
  const std::size_t width = dtype == "uint8" ? 1 : dtype == "float32" ? 4 : 0;
  if (width == 0) throw DatasetShapeError("unsupported image dtype '" + dtype + "'");
  if (count == 0 || img_bytes.size() != count * per * width) {
    throw DatasetShapeError(split + " image blob holds " + std::to_string(img_bytes.size()) + " bytes, expected " +
                            std::to_string(count) + " x " + std::to_string(per) + " x " + std::to_string(width));
  }
  if (lab_bytes.size() != count * 4) {
    throw DatasetShapeError(split + " label blob holds " + std::to_string(lab_bytes.size() / 4) + " labels, expected " +
                            std::to_string(count));
  }

  Dataset ds;
  ds.name = manifest.at("name").get<std::string>();
  ds.split = split;
  ds.classes = classes;
  ds.images = Tensor<float>(Shape{count, shape[0], shape[1], shape[2]});
  if (width == 1) {
    const double scale = img.value("scale", 1.0 / 255.0);
    for (std::size_t i = 0; i < count * per; ++i) {
      ds.images[i] = static_cast<float>(static_cast<unsigned char>(img_bytes[i]) * scale);
    }
  } else {
    for (std::size_t i = 0; i < count * per; ++i) ds.images[i] = std::bit_cast<float>(get_u32(img_bytes.data() + 4 * i));
  }
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) ds.labels[i] = get_u32(lab_bytes.data() + 4 * i);
  validate_dataset(ds);
  ds.compute_stats();
  return ds;
}

nlohmann::json read_manifest(const fs::path& manifest_path) {
  try {
    auto j = nlohmann::json::parse(read_file(manifest_path));
    if (j.value("format", "") != "rtt-dataset") throw DatasetError("not a dataset manifest: " + manifest_path.string());
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("unreadable manifest " + manifest_path.string() + ": " + e.what());
  }
}

}  // namespace

fs::path save_dataset(const std::vector<Dataset>& splits, const fs::path& dir, ImageEncoding encoding) {
  if (splits.empty()) throw DatasetError("save_dataset: no splits given");
  fs::create_directories(dir);
  const auto shape = splits.front().image_shape();
  nlohmann::json manifest = {{"format", "rtt-dataset"},
                             {"format_version", 1},
                             {"name", splits.front().name},
                             {"shape", shape},
                             {"classes", splits.front().classes},
                             {"splits", nlohmann::json::object()}};
  for (const auto& ds : splits) {
    validate_dataset(ds);
    if (ds.image_shape() != shape || ds.classes != splits.front().classes) {
      throw DatasetShapeError("split '" + ds.split + "' does not match the first split's shape/classes");
    }
    std::string img;
    nlohmann::json img_entry;
    if (encoding == ImageEncoding::uint8) {
      img.reserve(ds.images.size());
      for (float v : ds.images.values()) img.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      img_entry = {{"dtype", "uint8"}, {"scale", 1.0 / 255.0}};
    } else {
      img.reserve(4 * ds.images.size());
      for (float v : ds.images.values()) put_u32(img, std::bit_cast<std::uint32_t>(v));
      img_entry = {{"dtype", "float32"}};
    }
    std::string lab;
    for (auto y : ds.labels) put_u32(lab, y);
    const std::string img_file = ds.split + "_images.bin";
    const std::string lab_file = ds.split + "_labels.bin";
    write_file(dir / img_file, img);
    write_file(dir / lab_file, lab);
    img_entry["file"] = img_file;
    img_entry["sha256"] = checksum(img);
    manifest["splits"][ds.split] = {
        {"count", ds.size()},
        {"images", img_entry},
        {"labels", {{"file", lab_file}, {"dtype", "uint32"}, {"sha256", checksum(lab)}}}};
  }
  const fs::path path = dir / "manifest.json";
  write_file(path, manifest.dump(2) + "\n");
  return path;
}

Dataset load_dataset(const fs::path& manifest_path, const std::string& split) {
  return load_split(manifest_path, read_manifest(manifest_path), split);
}

std::map<std::string, Dataset> load_dataset_splits(const fs::path& manifest_path) {
  const auto manifest = read_manifest(manifest_path);
  std::map<std::string, Dataset> out;
  for (const auto& [name, _] : manifest.at("splits").items()) out.emplace(name, load_split(manifest_path, manifest, name));
  return out;
}

// ---------------------------------------------------------------------------
// Generator

nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"classes", c.classes},       {"image", c.image},
          {"train_size", c.train_size}, {"test_size", c.test_size},
          {"seed", c.seed},             {"texture_amplitude", c.texture_amplitude},
          {"shape_label_noise", c.shape_label_noise}};
}

nlohmann::json to_json(const ShiftConfig& c) {
  return {{"magnitude", c.magnitude},     {"color_shift", c.color_shift}, {"noise_sigma", c.noise_sigma},
          {"texture_shift", c.texture_shift}, {"seed", c.seed},           {"train_size", c.train_size},
          {"test_size", c.test_size}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.classes = j.value("classes", c.classes);
  c.image = j.value("image", c.image);
  c.train_size = j.value("train_size", c.train_size);
  c.test_size = j.value("test_size", c.test_size);
  c.seed = j.value("seed", c.seed);
  c.texture_amplitude = j.value("texture_amplitude", c.texture_amplitude);
  c.shape_label_noise = j.value("shape_label_noise", c.shape_label_noise);
  return c;
}

ShiftConfig shift_config_from_json(const nlohmann::json& j) {
  ShiftConfig c;
  c.magnitude = j.value("magnitude", c.magnitude);
  c.color_shift = j.value("color_shift", c.color_shift);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.texture_shift = j.value("texture_shift", c.texture_shift);
  c.seed = j.value("seed", c.seed);
  c.train_size = j.value("train_size", c.train_size);
  c.test_size = j.value("test_size", c.test_size);
  return c;
}

namespace {

constexpr std::size_t kShapeKinds = 10;
constexpr std::uint64_t kTestIndexBase = 1ULL << 32;

bool inside_shape(std::size_t kind, double du, double dv, double r) {
  const double au = std::abs(du), av = std::abs(dv);
  const double d2 = du * du + dv * dv;
  switch (kind % kShapeKinds) {
    case 0: return d2 <= r * r;
    case 1: return au <= 0.8 * r && av <= 0.8 * r;
    case 2: return au <= r && av <= 0.3 * r;
    case 3: return au <= 0.3 * r && av <= r;
    case 4: return (au <= r && av <= 0.25 * r) || (au <= 0.25 * r && av <= r);
    case 5: return (std::abs(du - dv) <= 0.3 * r || std::abs(du + dv) <= 0.3 * r) && au <= 0.8 * r && av <= 0.8 * r;
    case 6: return d2 <= r * r && d2 >= 0.3 * r * r;
    case 7: return dv >= -0.8 * r && dv <= 0.8 * r && au <= 0.6 * (dv + 0.8 * r);
    case 8: {
      const double m = std::max(au, av);
      return m <= 0.85 * r && m >= 0.5 * r;
    }
    default: {
      const double l = (du + 0.5 * r) * (du + 0.5 * r) + dv * dv;
      const double rr = (du - 0.5 * r) * (du - 0.5 * r) + dv * dv;
      return std::min(l, rr) <= 0.16 * r * r;
    }
  }
}

// One sample. Base content comes from `base_rng`; every shift effect comes from
// `shift_rng` and is scaled by the magnitude, so magnitude 0 reproduces the source.
void render_sample(const GeneratorConfig& g, const ShiftConfig& shift, std::mt19937_64& base_rng,
                   std::mt19937_64& shift_rng, float* out, std::uint32_t& label) {
  const std::size_t C = g.image[0], H = g.image[1], W = g.image[2];
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_class(0, g.classes - 1);

  label = static_cast<std::uint32_t>(pick_class(base_rng));
  const std::size_t random_shape = pick_class(base_rng);
  const std::size_t shape_class = unit(base_rng) < g.shape_label_noise ? random_shape : label;
  const double cx = 0.5 + (unit(base_rng) - 0.5) * 0.25;
  const double cy = 0.5 + (unit(base_rng) - 0.5) * 0.25;
  const double r = 0.22 + 0.10 * unit(base_rng);
  std::vector<double> bg(C), fg(C);
  for (std::size_t c = 0; c < C; ++c) bg[c] = 0.2 + 0.3 * unit(base_rng);
  for (std::size_t c = 0; c < C; ++c) fg[c] = 0.65 + 0.3 * unit(base_rng);
  const double grad_amp = 0.1 * unit(base_rng);
  const double grad_dir = 2.0 * std::numbers::pi * unit(base_rng);
  const double phase = 2.0 * std::numbers::pi * unit(base_rng);

  const double s = shift.magnitude;
  const double rekey = unit(shift_rng);
  const std::size_t rekey_class = pick_class(shift_rng);
  std::size_t texture_class = label;
  if (rekey < s * shift.texture_shift) texture_class = rekey_class;
  const double theta = std::numbers::pi * static_cast<double>(texture_class) / static_cast<double>(g.classes);
  const double period = (texture_class % 2 == 0 ? 3.0 : 4.0) * (1.0 + 0.5 * s * shift.texture_shift);
  const double kx = 2.0 * std::numbers::pi * std::cos(theta) / period;
  const double ky = 2.0 * std::numbers::pi * std::sin(theta) / period;
  const double tints[3] = {1.0, -1.0, 0.5};
  std::normal_distribution<double> gauss(0.0, 1.0);

  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
      const bool in_shape = inside_shape(shape_class, u - cx, v - cy, r);
      const double ramp = grad_amp * ((u - 0.5) * std::cos(grad_dir) + (v - 0.5) * std::sin(grad_dir));
      const double texture = g.texture_amplitude * std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
      for (std::size_t c = 0; c < C; ++c) {
        double val = (in_shape ? fg[c] : bg[c] + ramp) + texture;
        val = std::clamp(val, 0.0, 1.0);
        val += s * shift.color_shift * tints[c % 3];
        val += s * shift.noise_sigma * gauss(shift_rng);
        out[(c * H + y) * W + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
}

}  // namespace

Dataset render_split(const GeneratorConfig& base, const ShiftConfig& shift, const std::string& split,
                     std::size_t count) {
  if (base.classes == 0) throw DatasetError("generator needs at least one class");
  if (count == 0) throw DatasetError("generator split '" + split + "' is empty");
  if (shift.magnitude < 0.0 || shift.magnitude > 1.0) throw DatasetError("shift magnitude must lie in [0,1]");
  const std::uint64_t index_base = split == "train" ? 0 : kTestIndexBase;
  const auto [C, H, W] = base.image;
  Dataset ds;
  ds.name = "synthetic";
  ds.split = split;
  ds.classes = base.classes;
  ds.images = Tensor<float>(Shape{count, C, H, W});
  ds.labels.resize(count);
  const std::size_t per = C * H * W;
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 base_rng(derive_seed(base.seed, index_base + i));
    std::mt19937_64 shift_rng(derive_seed(derive_seed(base.seed, "shift"), index_base + i));
    render_sample(base, shift, base_rng, shift_rng, ds.images.data() + i * per, ds.labels[i]);
  }
  ds.compute_stats();
  return ds;
}

ShiftedPair make_shifted_pair(const GeneratorConfig& base, const ShiftConfig& shift) {
  if (base.classes == 0) throw DatasetError("degenerate generator config: zero classes");
  GeneratorConfig target = base;
  target.seed = shift.seed;
  const std::size_t t_train = shift.train_size ? shift.train_size : base.train_size;
  const std::size_t t_test = shift.test_size ? shift.test_size : base.test_size;
  ShiftConfig none = shift;
  none.magnitude = 0.0;
  ShiftedPair pair{render_split(base, none, "train", base.train_size), render_split(base, none, "test", base.test_size),
                   render_split(target, shift, "train", t_train), render_split(target, shift, "test", t_test)};
  pair.source_train.name = pair.source_test.name = "synthetic-source";
  pair.target_train.name = pair.target_test.name = "synthetic-target";
  return pair;
}

Dataset make_ood_set(const GeneratorConfig& base, std::size_t count, std::uint64_t seed) {
  const auto [C, H, W] = base.image;
  Dataset ds;
  ds.name = "synthetic-ood";
  ds.split = "ood";
  ds.classes = base.classes;
  ds.images = Tensor<float>(Shape{count, C, H, W});
  ds.labels.assign(count, 0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(derive_seed(seed, "ood"), i));
    struct Blob {
      double x, y, s;
      std::vector<double> col;
    };
    std::vector<Blob> blobs(3);
    for (auto& b : blobs) {
      b.x = unit(rng);
      b.y = unit(rng);
      b.s = 0.05 + 0.2 * unit(rng);
      b.col.resize(C);
      for (auto& c : b.col) c = unit(rng) - 0.5;
    }
    const double level = 0.3 + 0.4 * unit(rng);
    float* out = ds.images.data() + i * C * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
        for (std::size_t c = 0; c < C; ++c) {
          double val = level + 0.05 * gauss(rng);
          for (const auto& b : blobs) {
            val += b.col[c] * std::exp(-((u - b.x) * (u - b.x) + (v - b.y) * (v - b.y)) / (2 * b.s * b.s));
          }
          out[(c * H + y) * W + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
      }
    }
  }
  ds.compute_stats();
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

Tensor<float> flip_horizontal(const Tensor<float>& images) {
  const auto& s = images.shape();
  if (s.size() != 4) throw DimensionError("flip_horizontal expects [N,C,H,W], got " + shape_str(s));
  Tensor<float> out(s);
  const std::size_t W = s[3];
  for (std::size_t row = 0; row < s[0] * s[1] * s[2]; ++row) {
    const float* src = images.data() + row * W;
    float* dst = out.data() + row * W;
    for (std::size_t x = 0; x < W; ++x) dst[x] = src[W - 1 - x];
  }
  return out;
}

Tensor<float> augment(const Tensor<float>& images, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (!cfg.enabled) return images;
  const auto& s = images.shape();
  if (s.size() != 4) throw DimensionError("augment expects [N,C,H,W], got " + shape_str(s));
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  const auto pad = static_cast<std::ptrdiff_t>(cfg.crop_padding);
  std::uniform_int_distribution<std::ptrdiff_t> offset(-pad, pad);
  std::bernoulli_distribution coin(0.5);
  Tensor<float> out(s);
  for (std::size_t n = 0; n < N; ++n) {
    const bool flip = cfg.flip && coin(rng);
    const std::ptrdiff_t dy = pad ? offset(rng) : 0;
    const std::ptrdiff_t dx = pad ? offset(rng) : 0;
    for (std::size_t c = 0; c < C; ++c) {
      const float* src = images.data() + (n * C + c) * H * W;
      float* dst = out.data() + (n * C + c) * H * W;
      for (std::size_t y = 0; y < H; ++y) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t fx = flip ? W - 1 - x : x;
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(fx) + dx;
          const bool inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(H) && sx >= 0 && sx < static_cast<std::ptrdiff_t>(W);
          dst[y * W + x] = inside ? src[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)] : 0.0f;
        }
      }
    }
  }
  return out;
}

}  // namespace rtt
