#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dt/common.hpp"
#include "dt/tensor.hpp"

namespace dt {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Raw payload files are little-endian; we assume an LE host, which the
// dataset format also assumes.

inline void write_bytes(const fs::path& path, const void* data, size_t bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f.write(static_cast<const char*>(data), std::streamsize(bytes));
  if (!f) throw IoError("short write: " + path.string());
}

inline std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open for read: " + path.string());
  auto n = f.tellg();
  f.seekg(0);
  std::vector<char> buf(static_cast<size_t>(n), '\0');
  f.read(buf.data(), n);
  if (!f) throw IoError("short read: " + path.string());
  return buf;
}

inline void write_f32_payload(const fs::path& path, const std::vector<float>& v) {
  write_bytes(path, v.data(), v.size() * sizeof(float));
}

inline std::vector<float> read_f32_payload(const fs::path& path, size_t expected_count,
                                           const std::string& what) {
  auto raw = read_bytes(path);
  if (raw.size() != expected_count * sizeof(float))
    throw IoError("payload size mismatch for " + what + ": got " + std::to_string(raw.size()) +
                  " bytes, expected " + std::to_string(expected_count * sizeof(float)));
  std::vector<float> out(expected_count);
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

inline void write_u8_payload(const fs::path& path, const std::vector<uint8_t>& v) {
  write_bytes(path, v.data(), v.size());
}

inline std::vector<uint8_t> read_u8_payload(const fs::path& path, size_t expected_count,
                                            const std::string& what) {
  auto raw = read_bytes(path);
  if (raw.size() != expected_count)
    throw IoError("payload size mismatch for " + what + ": got " + std::to_string(raw.size()) +
                  " bytes, expected " + std::to_string(expected_count));
  return std::vector<uint8_t>(raw.begin(), raw.end());
}

inline json load_json(const fs::path& path, const std::string& what) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + what + ": " + path.string());
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw IoError("corrupt header in " + what + ": " + e.what());
  }
  return j;
}

inline void save_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f << j.dump(2) << "\n";
}

template <class T>
T json_require(const json& j, const std::string& key, const std::string& ctx) {
  if (!j.contains(key)) throw ConfigError(ctx + ": missing required field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const std::exception&) {
    throw ConfigError(ctx + ": field '" + key + "' has wrong type");
  }
}

template <class T>
T json_get(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

}  // namespace dt
