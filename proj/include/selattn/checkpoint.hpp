#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "error.hpp"
#include "tensor.hpp"

namespace selattn {

/// On-disk layout: `manifest.json` (format, version, config snapshot and a
/// tensor table with shapes, payload offsets and CRC-32s) next to
/// `tensors.bin` (8-byte magic, u32 version, then raw little-endian float32
/// tensors back to back).
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'L', 'A', 'T', 'T', 'N', '\0'};
inline constexpr const char* kCheckpointFormat = "selattn-checkpoint";

struct StoredTensor {
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string kind = "model";  // "model", or "oracle" for the ground-truth fixture
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> order;
  std::map<std::string, StoredTensor> tensors;
};

namespace detail {

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, data, static_cast<uInt>(n)));
}

inline void put_u32_le(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

/// Snapshot of a parameter group, quantized to float32.
template <ParamGroup P>
Checkpoint make_checkpoint(P& params, nlohmann::json config) {
  Checkpoint ck;
  ck.config = std::move(config);
  params.visit([&](auto name, Tensor& t) {
    StoredTensor st{t.shape(), std::vector<float>(t.size())};
    for (std::size_t i = 0; i < t.size(); ++i) st.values[i] = static_cast<float>(t[i]);
    ck.order.emplace_back(name);
    ck.tensors.emplace(std::string(name), std::move(st));
  });
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<unsigned char> payload;
  nlohmann::json table = nlohmann::json::array();
  for (const std::string& name : ck.order) {
    const StoredTensor& st = ck.tensors.at(name);
    if (st.values.size() != Tensor::count(st.shape))
      throw StateError("tensor '" + name + "' has " + std::to_string(st.values.size()) + " values for shape " +
                       shape_string(st.shape));
    const std::size_t offset = payload.size();
    for (float f : st.values) detail::put_u32_le(payload, std::bit_cast<std::uint32_t>(f));
    table.push_back({{"name", name},
                     {"shape", st.shape},
                     {"offset", offset},
                     {"crc32", detail::crc32_of(payload.data() + offset, payload.size() - offset)}});
  }
  const nlohmann::json manifest = {{"format", kCheckpointFormat},
                                   {"version", kCheckpointVersion},
                                   {"kind", ck.kind},
                                   {"config", ck.config},
                                   {"tensors", table}};
  std::ofstream ms(dir / "manifest.json", std::ios::binary);
  if (!ms) throw InputError("cannot write " + (dir / "manifest.json").string());
  ms << manifest.dump(2) << "\n";
  std::ofstream bs(dir / "tensors.bin", std::ios::binary);
  if (!bs) throw InputError("cannot write " + (dir / "tensors.bin").string());
  std::vector<unsigned char> header(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_u32_le(header, kCheckpointVersion);
  bs.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
  bs.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!bs) throw InputError("failed writing " + (dir / "tensors.bin").string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  const auto bpath = dir / "tensors.bin";
  if (!std::filesystem::exists(mpath)) throw InputError("missing checkpoint manifest " + mpath.string());
  nlohmann::json m;
  try {
    std::ifstream ms(mpath, std::ios::binary);
    m = nlohmann::json::parse(ms);
  } catch (const nlohmann::json::exception& e) {
    throw StateError("manifest.json: " + std::string(e.what()));
  }
  if (!m.is_object() || m.value("format", "") != kCheckpointFormat)
    throw StateError("manifest.json: not a selattn checkpoint");
  if (!m.contains("version") || m["version"] != kCheckpointVersion)
    throw StateError("manifest.json: unsupported checkpoint version " + m.value("version", nlohmann::json()).dump());
  Checkpoint ck;
  ck.kind = m.value("kind", "model");
  ck.config = m.value("config", nlohmann::json::object());
  if (ck.kind == "oracle") return ck;
  if (ck.kind != "model") throw StateError("manifest.json: unknown checkpoint kind '" + ck.kind + "'");

  if (!std::filesystem::exists(bpath)) throw InputError("missing checkpoint payload " + bpath.string());
  std::ifstream bs(bpath, std::ios::binary);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bs)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw StateError("tensors.bin: bad magic");
  if (detail::get_u32_le(bytes.data() + 8) != kCheckpointVersion)
    throw StateError("tensors.bin: version mismatch");
  const unsigned char* payload = bytes.data() + 12;
  const std::size_t payload_size = bytes.size() - 12;

  std::size_t expected_end = 0;
  try {
    for (const auto& entry : m.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      StoredTensor st;
      st.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      const std::size_t n = Tensor::count(st.shape);
      if (offset + 4 * n > payload_size)
        throw StateError("tensor '" + name + "' is missing from the payload (truncated tensors.bin)");
      if (detail::crc32_of(payload + offset, 4 * n) != entry.at("crc32").get<std::uint32_t>())
        throw StateError("tensor '" + name + "' is corrupted (checksum mismatch)");
      st.values.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        st.values[i] = std::bit_cast<float>(detail::get_u32_le(payload + offset + 4 * i));
      if (ck.tensors.count(name)) throw StateError("manifest.json: duplicate tensor '" + name + "'");
      ck.order.push_back(name);
      ck.tensors.emplace(name, std::move(st));
      expected_end = std::max(expected_end, offset + 4 * n);
    }
  } catch (const nlohmann::json::exception& e) {
    throw StateError("manifest.json: malformed tensor table: " + std::string(e.what()));
  }
  if (expected_end != payload_size)
    throw StateError("tensors.bin: payload holds " + std::to_string(payload_size) + " bytes but the manifest covers " +
                     std::to_string(expected_end));
  return ck;
}

/// Copies stored tensors into `params`; the name sets and shapes must match
/// exactly.
template <ParamGroup P>
void restore(P& params, const Checkpoint& ck) {
  std::size_t seen = 0;
  params.visit([&](auto name, Tensor& t) {
    const auto it = ck.tensors.find(std::string(name));
    if (it == ck.tensors.end()) throw StateError("checkpoint has no tensor '" + std::string(name) + "'");
    if (it->second.shape != t.shape())
      throw StateError("tensor '" + std::string(name) + "' has shape " + shape_string(it->second.shape) +
                       " in the checkpoint but the model expects " + shape_string(t.shape()));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(it->second.values[i]);
    ++seen;
  });
  if (seen != ck.tensors.size()) throw StateError("checkpoint holds tensors the model does not have");
}

}  // namespace selattn
