// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "soundloc/common.hpp"
#include "soundloc/tensor.hpp"

namespace soundloc {

static_assert(std::endian::native == std::endian::little,
              "tensor archive assumes a little-endian host");

/// Named-tensor container with a JSON header. One format backs checkpoints,
/// object-representation sets, dictionaries and heatmap bundles. Output
/// bytes are deterministic: tensors are written in name order.
class TensorArchive {
 public:
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, RTensor> reals;
  std::map<std::string, Tensor<std::int64_t>> ints;

  void save(const std::string& path) const {
    std::string out;
    out += "SLTA";
    append_u32(out, kVersion);
    const std::string hdr = header.dump();
    append_u64(out, hdr.size());
    out += hdr;
    append_u32(out, static_cast<std::uint32_t>(reals.size() + ints.size()));
    for (const auto& [name, t] : reals) {
      append_entry(out, name, 0, t.shape(),
                   reinterpret_cast<const char*>(t.data()),
                   static_cast<std::size_t>(t.numel()) * sizeof(double));
    }
    for (const auto& [name, t] : ints) {
      append_entry(out, name, 1, t.shape(),
                   reinterpret_cast<const char*>(t.data()),
                   static_cast<std::size_t>(t.numel()) * sizeof(std::int64_t));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("TensorArchive: cannot open " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("TensorArchive: write failed for " + path);
  }

  static TensorArchive load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("TensorArchive: cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)),
                            std::istreambuf_iterator<char>());
    Reader r{bytes.data(), bytes.size(), 0};

    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "SLTA", 4) != 0) {
      throw CorruptFile("TensorArchive: bad magic in " + path);
    }
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
      throw VersionMismatch("TensorArchive: unsupported version " +
                            std::to_string(version) + " in " + path);
    }
    const std::uint64_t hdr_len = r.u64();
    std::string hdr(hdr_len, '\0');
    r.read(hdr.data(), hdr_len);
    TensorArchive out;
    try {
      out.header = nlohmann::json::parse(hdr);
    } catch (const nlohmann::json::parse_error&) {
      throw CorruptFile("TensorArchive: unreadable header in " + path);
    }
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t name_len = r.u32();
      std::string name(name_len, '\0');
      r.read(name.data(), name_len);
      const std::uint8_t dtype = r.u8();
      const std::uint32_t ndim = r.u32();
      std::vector<int> shape;
      std::int64_t numel = 1;
      for (std::uint32_t d = 0; d < ndim; ++d) {
        const std::int64_t dim = static_cast<std::int64_t>(r.u64());
        shape.push_back(static_cast<int>(dim));
        numel *= dim;
      }
      if (dtype == 0) {
        RTensor t(shape);
        r.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::size_t>(numel) * sizeof(double));
        out.reals.emplace(std::move(name), std::move(t));
      } else if (dtype == 1) {
        Tensor<std::int64_t> t(shape);
        r.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::size_t>(numel) * sizeof(std::int64_t));
        out.ints.emplace(std::move(name), std::move(t));
      } else {
        throw CorruptFile("TensorArchive: unknown dtype in " + path);
      }
    }
    return out;
  }

  const RTensor& real(const std::string& name) const {
    const auto it = reals.find(name);
    if (it == reals.end()) {
      throw CorruptFile("TensorArchive: missing tensor '" + name + "'");
    }
    return it->second;
  }

  const Tensor<std::int64_t>& integer(const std::string& name) const {
    const auto it = ints.find(name);
    if (it == ints.end()) {
      throw CorruptFile("TensorArchive: missing tensor '" + name + "'");
    }
    return it->second;
  }

 private:
  struct Reader {
    const char* data;
    std::size_t size;
    std::size_t pos;

    void read(char* dst, std::size_t n) {
      if (pos + n > size) throw CorruptFile("TensorArchive: truncated file");
      std::memcpy(dst, data + pos, n);
      pos += n;
    }
    std::uint8_t u8() {
      std::uint8_t v;
      read(reinterpret_cast<char*>(&v), 1);
      return v;
    }
    std::uint32_t u32() {
      std::uint32_t v;
      read(reinterpret_cast<char*>(&v), 4);
      return v;
    }
    std::uint64_t u64() {
      std::uint64_t v;
      read(reinterpret_cast<char*>(&v), 8);
      return v;
    }
  };

  static void append_u32(std::string& s, std::uint32_t v) {
    s.append(reinterpret_cast<const char*>(&v), 4);
  }
  static void append_u64(std::string& s, std::uint64_t v) {
    s.append(reinterpret_cast<const char*>(&v), 8);
  }

  static void append_entry(std::string& s, const std::string& name,
                           std::uint8_t dtype, const std::vector<int>& shape,
                           const char* data, std::size_t bytes) {
    append_u32(s, static_cast<std::uint32_t>(name.size()));
    s += name;
    s.push_back(static_cast<char>(dtype));
    append_u32(s, static_cast<std::uint32_t>(shape.size()));
    for (const int d : shape) {
      append_u64(s, static_cast<std::uint64_t>(d));
    }
    s.append(data, bytes);
  }
};

}  // namespace soundloc
