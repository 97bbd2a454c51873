#include "cnd/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <openssl/evp.h>

#include "cnd/errors.hpp"
#include "cnd/rng.hpp"

namespace cnd {

void seed_parameter_init(std::uint64_t seed) { torch::manual_seed(seed); }

}  // namespace cnd

namespace cnd::io {
namespace {

constexpr std::array<char, 8> kMagic = {'C', 'N', 'D', 'C', 'K', 'P', 'T', '\0'};

std::string dtype_tag(torch::ScalarType type) {
  switch (type) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    default: throw FormatError("checkpoint: unsupported dtype " + std::string(c10::toString(type)));
  }
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
  if (tag == "float32") return torch::kFloat32;
  if (tag == "float64") return torch::kFloat64;
  if (tag == "int64") return torch::kInt64;
  throw FormatError("checkpoint: unknown dtype tag '" + tag + "'");
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  std::array<std::uint8_t, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.insert(out.end(), bytes.begin(), bytes.end());
}

template <typename T>
T get_le(const std::uint8_t* src) {
  std::array<std::uint8_t, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), src, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

// Appends the raw little-endian payload of a contiguous CPU tensor.
void append_payload(std::vector<std::uint8_t>& out, const torch::Tensor& tensor) {
  const auto t = tensor.detach().to(torch::kCPU).contiguous();
  const auto* src = static_cast<const std::uint8_t*>(t.data_ptr());
  const std::size_t nbytes = t.numel() * t.element_size();
  const std::size_t start = out.size();
  out.insert(out.end(), src, src + nbytes);
  if constexpr (std::endian::native == std::endian::big) {
    const std::size_t width = t.element_size();
    for (std::size_t i = start; i < out.size(); i += width) std::reverse(out.begin() + i, out.begin() + i + width);
  }
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

const torch::Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& [key, value] : tensors) {
    if (key == name) return value;
  }
  throw FormatError("checkpoint '" + kind + "' has no tensor named '" + name + "'");
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& kv) { return kv.first == name; });
}

NamedTensors Checkpoint::with_prefix(const std::string& prefix) const {
  NamedTensors out;
  for (const auto& [key, value] : tensors) {
    if (key.rfind(prefix, 0) == 0) out.emplace_back(key.substr(prefix.size()), value);
  }
  return out;
}

std::vector<std::uint8_t> serialize_tensors(const NamedTensors& tensors) {
  std::vector<std::uint8_t> out;
  for (const auto& [name, tensor] : tensors) append_payload(out, tensor);
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json header;
  header["kind"] = checkpoint.kind;
  header["version"] = kCheckpointVersion;
  header["meta"] = checkpoint.meta;
  header["tensors"] = nlohmann::json::array();

  std::vector<std::uint8_t> payload;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    const std::size_t offset = payload.size();
    append_payload(payload, tensor);
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_tag(tensor.scalar_type())},
                                 {"shape", tensor.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", payload.size() - offset}});
  }
  const std::string header_text = header.dump();

  std::vector<std::uint8_t> bytes(kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(bytes, kCheckpointVersion);
  put_le<std::uint64_t>(bytes, header_text.size());
  bytes.insert(bytes.end(), header_text.begin(), header_text.end());
  bytes.insert(bytes.end(), payload.begin(), payload.end());

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  constexpr std::size_t kPrefix = kMagic.size() + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < kPrefix || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw FormatError(path.string() + ": not a cnd checkpoint");
  }
  const auto version = get_le<std::uint32_t>(bytes.data() + kMagic.size());
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(bytes.data() + kMagic.size() + sizeof(std::uint32_t));
  if (bytes.size() < kPrefix + header_len) throw FormatError(path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPrefix, bytes.begin() + kPrefix + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }

  Checkpoint ckpt;
  const std::size_t payload_start = kPrefix + header_len;
  try {
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
      const auto dtype = dtype_from_tag(entry.at("dtype").get<std::string>());
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto nbytes = entry.at("nbytes").get<std::size_t>();
      auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype));
      if (nbytes != static_cast<std::size_t>(tensor.numel()) * tensor.element_size()) {
        throw FormatError(path.string() + ": size mismatch for " + entry.at("name").get<std::string>());
      }
      if (payload_start + offset + nbytes > bytes.size()) throw FormatError(path.string() + ": truncated payload");
      auto* dst = static_cast<std::uint8_t*>(tensor.data_ptr());
      std::memcpy(dst, bytes.data() + payload_start + offset, nbytes);
      if constexpr (std::endian::native == std::endian::big) {
        const std::size_t width = tensor.element_size();
        for (std::size_t i = 0; i < nbytes; i += width) std::reverse(dst + i, dst + i + width);
      }
      ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(tensor));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }
  return ckpt;
}

NamedTensors module_state(const torch::nn::Module& module, const std::string& prefix) {
  NamedTensors out;
  for (const auto& item : module.named_parameters(true)) {
    out.emplace_back(prefix + item.key(), item.value().detach().clone());
  }
  for (const auto& item : module.named_buffers(true)) {
    out.emplace_back(prefix + item.key(), item.value().detach().clone());
  }
  return out;
}

void load_module_state(torch::nn::Module& module, const NamedTensors& state) {
  auto find = [&](const std::string& name) -> const torch::Tensor* {
    for (const auto& [key, value] : state) {
      if (key == name) return &value;
    }
    return nullptr;
  };
  torch::NoGradGuard no_grad;
  auto copy_into = [&](const std::string& name, torch::Tensor& target) {
    const auto* source = find(name);
    if (source == nullptr) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (source->sizes() != target.sizes()) {
      throw FormatError("shape mismatch for '" + name + "': checkpoint " + c10::str(source->sizes()) +
                        " vs model " + c10::str(target.sizes()));
    }
    target.copy_(source->to(target.dtype()));
  };
  for (auto& item : module.named_parameters(true)) copy_into(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) copy_into(item.key(), item.value());
}

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_all(path)); }

std::string state_hash(const torch::nn::Module& module) {
  return sha256_hex(serialize_tensors(module_state(module)));
}

void write_f32_le(std::ostream& out, const float* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      auto word = std::bit_cast<std::uint32_t>(data[i]);
      word = __builtin_bswap32(word);
      out.write(reinterpret_cast<const char*>(&word), sizeof(word));
    }
  }
}

void read_f32_le(std::istream& in, float* data, std::size_t count) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i) {
      data[i] = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(data[i])));
    }
  }
}

}  // namespace cnd::io
