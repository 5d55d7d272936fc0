#pragma once

// On-disk formats share one scheme: a single JSON header line terminated by
// '\n', followed by raw little-endian blobs. Multi-record text files are JSON
// lines. All writers are deterministic byte-for-byte given identical inputs.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestrq/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

namespace nestrq {

using json = nlohmann::json;

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return content;
}

inline std::uint64_t file_digest(const std::filesystem::path& path) {
  const std::string content = read_file(path);
  return fnv1a64(content.data(), content.size());
}

namespace io_detail {

inline void append_f32(std::string& buf, const std::vector<double>& v) {
  const std::size_t at = buf.size();
  buf.resize(at + v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float f = static_cast<float>(v[i]);
    std::memcpy(buf.data() + at + i * 4, &f, 4);
  }
}

inline void append_f64(std::string& buf, const std::vector<double>& v) {
  const std::size_t at = buf.size();
  buf.resize(at + v.size() * 8);
  std::memcpy(buf.data() + at, v.data(), v.size() * 8);
}

inline std::vector<double> read_f32(const std::string& buf, std::size_t& pos, std::size_t count) {
  if (pos + count * 4 > buf.size()) throw IoError("blob truncated (f32)");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    float f;
    std::memcpy(&f, buf.data() + pos + i * 4, 4);
    out[i] = static_cast<double>(f);
  }
  pos += count * 4;
  return out;
}

inline std::vector<double> read_f64(const std::string& buf, std::size_t& pos, std::size_t count) {
  if (pos + count * 8 > buf.size()) throw IoError("blob truncated (f64)");
  std::vector<double> out(count);
  std::memcpy(out.data(), buf.data() + pos, count * 8);
  pos += count * 8;
  return out;
}

}  // namespace io_detail

// Splits a header-line file into (parsed header, blob offset).
inline std::pair<json, std::size_t> read_header_line(const std::string& content,
                                                     const std::string& what) {
  const std::size_t nl = content.find('\n');
  if (nl == std::string::npos) throw IoError(what + ": missing header line");
  json header;
  try {
    header = json::parse(content.substr(0, nl));
  } catch (const json::exception& e) {
    throw IoError(what + ": bad header: " + e.what());
  }
  return {header, nl + 1};
}

inline std::vector<json> read_jsonl(const std::filesystem::path& path) {
  const std::string content = read_file(path);
  std::vector<json> rows;
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t nl = content.find('\n', pos);
    if (nl == std::string::npos) nl = content.size();
    const std::string line = content.substr(pos, nl - pos);
    if (!line.empty()) {
      try {
        rows.push_back(json::parse(line));
      } catch (const json::exception& e) {
        throw IoError(path.string() + ": bad jsonl row: " + e.what());
      }
    }
    pos = nl + 1;
  }
  return rows;
}

}  // namespace nestrq
