#include "rtt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

namespace rtt {

namespace {

constexpr std::string_view kCheckpointMagic = "RTTCKPT";
constexpr std::string_view kMaskMagic = "RTTMASK";

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32_le(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

void write_container(const std::filesystem::path& path, std::string_view magic, const nlohmann::json& header,
                     const std::string& blob) {
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << magic << '\n' << text.size() << '\n' << text;
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

struct Container {
  nlohmann::json header;
  std::string blob;
};

Container read_container(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const std::string prefix = std::string(magic) + '\n';
  if (contents.compare(0, prefix.size(), prefix) != 0) {
    throw CorruptHeaderError(path.string() + ": bad magic bytes (expected " + std::string(magic) + ")");
  }
  const auto nl = contents.find('\n', prefix.size());
  if (nl == std::string::npos) throw CorruptHeaderError(path.string() + ": missing header length");
  std::size_t header_len = 0;
  try {
    std::size_t used = 0;
    header_len = std::stoull(contents.substr(prefix.size(), nl - prefix.size()), &used);
    if (used != nl - prefix.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw CorruptHeaderError(path.string() + ": unreadable header length");
  }
  const std::size_t header_start = nl + 1;
  if (header_start + header_len > contents.size()) {
    throw CorruptHeaderError(path.string() + ": header runs past end of file");
  }
  Container c;
  try {
    c.header = nlohmann::json::parse(contents.substr(header_start, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError(path.string() + ": header is not valid JSON: " + e.what());
  }
  if (!c.header.is_object() || c.header.value("format_version", -1) != kFormatVersion) {
    throw CorruptHeaderError(path.string() + ": unsupported format version");
  }
  const std::size_t declared = c.header.at("blob_bytes").get<std::size_t>();
  const std::size_t available = contents.size() - header_start - header_len;
  if (available < declared) {
    throw TruncatedBlobError(path.string() + ": blob has " + std::to_string(available) + " bytes, header declares " +
                             std::to_string(declared));
  }
  c.blob = contents.substr(header_start + header_len, declared);
  return c;
}

nlohmann::json meta_to_json(const CheckpointMeta& m) {
  return {{"source_task", m.source_task},
          {"pretraining_scheme", to_string(m.pretraining_scheme)},
          {"seed", m.seed},
          {"epoch", m.epoch},
          {"extra", m.extra}};
}

CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.source_task = j.at("source_task").get<std::string>();
  m.pretraining_scheme = pretrain_scheme_from_string(j.at("pretraining_scheme").get<std::string>());
  m.seed = j.at("seed").get<std::uint64_t>();
  m.epoch = j.at("epoch").get<std::size_t>();
  m.extra = j.value("extra", nlohmann::json::object());
  return m;
}

}  // namespace

std::string to_string(PretrainScheme s) {
  switch (s) {
    case PretrainScheme::natural: return "natural";
    case PretrainScheme::adversarial: return "adversarial";
    case PretrainScheme::random_smoothing: return "random_smoothing";
  }
  return "unknown";
}

PretrainScheme pretrain_scheme_from_string(const std::string& s) {
  if (s == "natural") return PretrainScheme::natural;
  if (s == "adversarial") return PretrainScheme::adversarial;
  if (s == "random_smoothing") return PretrainScheme::random_smoothing;
  throw std::invalid_argument("unknown pretraining scheme '" + s + "'");
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto& net = ckpt.network;
  nlohmann::json tensors = nlohmann::json::array();
  std::string blob;
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    const auto& t = net.params()[i];
    tensors.push_back({{"name", net.layout().params[i].name},
                       {"shape", t.shape()},
                       {"offset", blob.size()},
                       {"bytes", t.size() * 4}});
    for (float v : t.values()) put_u32_le(blob, std::bit_cast<std::uint32_t>(v));
  }
  nlohmann::json header = {{"format_version", kFormatVersion},
                           {"kind", "checkpoint"},
                           {"spec", net.spec()},
                           {"metadata", meta_to_json(ckpt.meta)},
                           {"tensors", std::move(tensors)},
                           {"blob_bytes", blob.size()}};
  write_container(path, kCheckpointMagic, header, blob);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto c = read_container(path, kCheckpointMagic);
  NetworkSpec spec;
  CheckpointMeta meta;
  NetworkLayout layout;
  try {
    spec = c.header.at("spec").get<NetworkSpec>();
    meta = meta_from_json(c.header.at("metadata"));
    layout = derive_layout(spec);
  } catch (const LoadError&) {
    throw;
  } catch (const std::exception& e) {
    throw CorruptHeaderError(path.string() + ": invalid spec or metadata: " + e.what());
  }
  const auto& entries = c.header.at("tensors");
  if (entries.size() != layout.params.size()) {
    throw ShapeMismatchError(path.string() + ": " + std::to_string(entries.size()) + " tensors stored, spec has " +
                             std::to_string(layout.params.size()));
  }
  std::vector<Tensor<float>> params;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const auto& info = layout.params[i];
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    if (name != info.name || shape != info.shape) {
      throw ShapeMismatchError(path.string() + ": tensor '" + name + "' " + shape_str(shape) + " does not match spec '" +
                               info.name + "' " + shape_str(info.shape));
    }
    const auto offset = e.at("offset").get<std::size_t>();
    const auto bytes = e.at("bytes").get<std::size_t>();
    if (bytes != shape_numel(shape) * 4 || offset + bytes > c.blob.size()) {
      throw TruncatedBlobError(path.string() + ": tensor '" + name + "' extends past the blob");
    }
    Tensor<float> t(shape);
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = std::bit_cast<float>(get_u32_le(c.blob.data() + offset + 4 * k));
    params.push_back(std::move(t));
  }
  return Checkpoint{Network<float>(std::move(spec), std::move(params)), std::move(meta)};
}

void save_masks(const MaskSet& masks, const std::filesystem::path& path, const nlohmann::json& metadata) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string blob;
  for (const auto& l : masks.layers()) {
    const std::size_t nbytes = (l.bits.size() + 7) / 8;
    tensors.push_back({{"name", l.name}, {"shape", l.shape}, {"offset", blob.size()}, {"bytes", nbytes}});
    std::string packed(nbytes, '\0');
    for (std::size_t i = 0; i < l.bits.size(); ++i) {
      if (l.bits[i]) packed[i / 8] = static_cast<char>(static_cast<unsigned char>(packed[i / 8]) | (1u << (i % 8)));
    }
    blob += packed;
  }
  nlohmann::json header = {{"format_version", kFormatVersion},
                           {"kind", "mask"},
                           {"metadata", metadata},
                           {"tensors", std::move(tensors)},
                           {"blob_bytes", blob.size()}};
  write_container(path, kMaskMagic, header, blob);
}

MaskSet load_masks(const std::filesystem::path& path, nlohmann::json* metadata) {
  auto c = read_container(path, kMaskMagic);
  std::vector<LayerMask> layers;
  for (const auto& e : c.header.at("tensors")) {
    LayerMask l;
    l.name = e.at("name").get<std::string>();
    l.shape = e.at("shape").get<Shape>();
    const auto n = shape_numel(l.shape);
    const auto offset = e.at("offset").get<std::size_t>();
    const auto bytes = e.at("bytes").get<std::size_t>();
    if (bytes != (n + 7) / 8 || offset + bytes > c.blob.size()) {
      throw TruncatedBlobError(path.string() + ": mask '" + l.name + "' extends past the blob");
    }
    l.bits.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      l.bits[i] = static_cast<std::uint8_t>((static_cast<unsigned char>(c.blob[offset + i / 8]) >> (i % 8)) & 1u);
    }
    layers.push_back(std::move(l));
  }
  if (metadata) *metadata = c.header.value("metadata", nlohmann::json::object());
  return MaskSet(std::move(layers));
}

}  // namespace rtt
