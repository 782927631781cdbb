#include "stagechain/ad/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "stagechain/errors.hpp"

namespace stagechain::ad {

namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> to_le_bytes(std::span<const double> values) {
  std::vector<unsigned char> bytes(values.size() * sizeof(double));
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return bytes;
}

std::vector<double> from_le_bytes(const std::vector<unsigned char>& bytes) {
  std::vector<double> values(bytes.size() / 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::string file_name_for(std::size_t index) {
  std::ostringstream name;
  name << 't' << std::setw(4) << std::setfill('0') << index << ".bin";
  return name.str();
}

}  // namespace

const Tensor& Checkpoint::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw MissingArtifactError("checkpoint has no tensor '" + name + "'");
  return it->second;
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 computation failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span<const unsigned char>(
      reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string tensor_checksum(const Tensor& t) { return sha256_hex(to_le_bytes(t.data())); }

std::string tensors_checksum(const NamedTensors& tensors) {
  std::string joined;
  for (const auto& [name, t] : tensors) {
    joined += name + ':' + shape_string(t.shape()) + ':' + tensor_checksum(t) + '\n';
  }
  return sha256_hex(joined);
}

void save_checkpoint(const fs::path& dir, const NamedTensors& tensors,
                     const nlohmann::json& provenance) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "stagechain-checkpoint/1";
  manifest["dtype"] = "float64";
  manifest["byte_order"] = "little";
  manifest["provenance"] = provenance;
  manifest["tensors"] = nlohmann::json::array();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, t] = tensors[i];
    const auto bytes = to_le_bytes(t.data());
    const std::string file = file_name_for(i);
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + (dir / file).string());
    manifest["tensors"].push_back(
        {{"name", name}, {"shape", t.shape()}, {"file", file}, {"sha256", sha256_hex(bytes)}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw Error("failed writing " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw MissingArtifactError("missing checkpoint manifest " + manifest_path.string());
  }
  nlohmann::json manifest;
  try {
    std::ifstream in(manifest_path);
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("dtype", "") != "float64" || manifest.value("byte_order", "") != "little") {
    throw DataError("unsupported checkpoint encoding in " + manifest_path.string());
  }
  Checkpoint ckpt;
  ckpt.provenance = manifest.value("provenance", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    const auto bytes = read_file(dir / entry.at("file").get<std::string>());
    if (sha256_hex(bytes) != entry.at("sha256").get<std::string>()) {
      throw DataError("checksum mismatch for tensor " + entry.at("name").get<std::string>());
    }
    Shape shape = entry.at("shape").get<Shape>();
    ckpt.tensors.emplace(entry.at("name").get<std::string>(),
                         Tensor(std::move(shape), from_le_bytes(bytes)));
  }
  return ckpt;
}

void restore_into(const Checkpoint& ckpt, const NamedTensors& targets) {
  for (const auto& [name, target] : targets) {
    const Tensor& src = ckpt.get(name);
    if (src.shape() != target.shape()) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " +
                           shape_string(src.shape()) + ", expected " +
                           shape_string(target.shape()));
    }
    Tensor dst = target;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

// The manifest lists every payload's digest, so its own digest covers the
// whole directory.
std::string checkpoint_hash(const fs::path& dir) {
  return sha256_hex(read_file(dir / "manifest.json"));
}

}  // namespace stagechain::ad
