/*
 * Copyright 2026 The TPB Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "tpb/archive.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "tpb/errors.hpp"

namespace tpb::io {

namespace {

constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::string hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

const char* dtype_name(Archive::DType t) {
  switch (t) {
    case Archive::DType::f32: return "f32";
    case Archive::DType::f64: return "f64";
    case Archive::DType::i32: return "i32";
  }
  return "?";
}

Archive::DType parse_dtype(const std::string& s) {
  if (s == "f32") return Archive::DType::f32;
  if (s == "f64") return Archive::DType::f64;
  if (s == "i32") return Archive::DType::i32;
  throw CorruptFileError("unknown array dtype: " + s);
}

std::size_t dtype_size(Archive::DType t) { return t == Archive::DType::f64 ? 8 : 4; }

std::int64_t element_count(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

nlohmann::json table_of(const std::map<std::string, std::vector<std::int64_t>>& shapes,
                        const std::map<std::string, std::string>& dtypes) {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& [name, shape] : shapes) {
    t.push_back({{"name", name}, {"dtype", dtypes.at(name)}, {"shape", shape}});
  }
  return t;
}

}  // namespace

std::string fnv1a_hex(std::string_view bytes, std::uint64_t seed) { return hex(fnv1a(bytes, seed)); }

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DependencyError("cannot open " + path.string());
  }
  std::ostringstream os;
  os << in.rdbuf();
  return fnv1a_hex(os.str());
}

void Archive::put(const std::string& name, const Matrix& m, DType dtype) {
  Entry e;
  e.dtype = dtype;
  e.shape = {m.rows(), m.cols()};
  const auto n = static_cast<std::size_t>(m.size());
  e.bytes.resize(n * dtype_size(dtype));
  if (dtype == DType::f64) {
    std::memcpy(e.bytes.data(), m.data(), n * sizeof(double));
  } else if (dtype == DType::f32) {
    std::vector<float> f(n);
    for (std::size_t i = 0; i < n; ++i) f[i] = static_cast<float>(m.data()[i]);
    std::memcpy(e.bytes.data(), f.data(), n * sizeof(float));
  } else {
    throw Error("Archive::put: matrices are stored as floating point");
  }
  arrays_[name] = std::move(e);
}

void Archive::put_f32(const std::string& name, std::span<const float> data,
                      std::vector<std::int64_t> shape) {
  if (element_count(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("Archive::put_f32: shape does not match data size for " + name);
  }
  Entry e;
  e.dtype = DType::f32;
  e.shape = std::move(shape);
  e.bytes.resize(data.size() * sizeof(float));
  std::memcpy(e.bytes.data(), data.data(), e.bytes.size());
  arrays_[name] = std::move(e);
}

void Archive::put_i32(const std::string& name, std::span<const std::int32_t> data,
                      std::vector<std::int64_t> shape) {
  if (element_count(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("Archive::put_i32: shape does not match data size for " + name);
  }
  Entry e;
  e.dtype = DType::i32;
  e.shape = std::move(shape);
  e.bytes.resize(data.size() * sizeof(std::int32_t));
  std::memcpy(e.bytes.data(), data.data(), e.bytes.size());
  arrays_[name] = std::move(e);
}

const Archive::Entry& Archive::entry(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) {
    throw CorruptFileError("archive has no array named '" + name + "'");
  }
  return it->second;
}

std::vector<std::int64_t> Archive::shape(const std::string& name) const { return entry(name).shape; }

Matrix Archive::matrix(const std::string& name) const {
  const Entry& e = entry(name);
  Eigen::Index rows = 1;
  Eigen::Index cols = 1;
  if (e.shape.size() == 1) {
    cols = e.shape[0];
  } else if (!e.shape.empty()) {
    rows = e.shape[0];
    cols = element_count(e.shape) / std::max<std::int64_t>(e.shape[0], 1);
  }
  Matrix m(rows, cols);
  const auto n = static_cast<std::size_t>(m.size());
  if (e.dtype == DType::f64) {
    std::memcpy(m.data(), e.bytes.data(), n * sizeof(double));
  } else if (e.dtype == DType::f32) {
    std::vector<float> f(n);
    std::memcpy(f.data(), e.bytes.data(), n * sizeof(float));
    for (std::size_t i = 0; i < n; ++i) m.data()[i] = f[i];
  } else {
    std::vector<std::int32_t> v(n);
    std::memcpy(v.data(), e.bytes.data(), n * sizeof(std::int32_t));
    for (std::size_t i = 0; i < n; ++i) m.data()[i] = v[i];
  }
  return m;
}

std::vector<float> Archive::floats(const std::string& name) const {
  const Entry& e = entry(name);
  if (e.dtype != DType::f32) {
    throw CorruptFileError("array '" + name + "' is not float32");
  }
  std::vector<float> out(e.bytes.size() / sizeof(float));
  std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
  return out;
}

std::vector<std::int32_t> Archive::ints(const std::string& name) const {
  const Entry& e = entry(name);
  if (e.dtype != DType::i32) {
    throw CorruptFileError("array '" + name + "' is not int32");
  }
  std::vector<std::int32_t> out(e.bytes.size() / sizeof(std::int32_t));
  std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
  return out;
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : arrays_) out.push_back(name);
  return out;
}

std::string Archive::content_hash() const {
  std::uint64_t h = fnv1a(meta_.dump(), 0xcbf29ce484222325ULL);
  for (const auto& [name, e] : arrays_) {
    h = fnv1a(name, h);
    h = fnv1a(dtype_name(e.dtype), h);
    for (auto s : e.shape) {
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(&s), sizeof(s)), h);
    }
    h = fnv1a(std::string_view(e.bytes.data(), e.bytes.size()), h);
  }
  return hex(h);
}

void Archive::save(const std::filesystem::path& path, std::string_view magic) const {
  if (magic.size() != 8) {
    throw Error("archive magic must be 8 bytes");
  }
  nlohmann::json header;
  header["meta"] = meta_;
  std::map<std::string, std::vector<std::int64_t>> shapes;
  std::map<std::string, std::string> dtypes;
  for (const auto& [name, e] : arrays_) {
    shapes[name] = e.shape;
    dtypes[name] = dtype_name(e.dtype);
  }
  header["arrays"] = table_of(shapes, dtypes);
  header["content_hash"] = content_hash();
  const std::string header_text = header.dump();

  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out.write(magic.data(), 8);
  const std::uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, e] : arrays_) {
    out.write(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()));
  }
  if (!out) {
    throw Error("short write to " + path.string());
  }
}

Archive Archive::load(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DependencyError("cannot open " + path.string());
  }
  std::ostringstream os;
  os << in.rdbuf();
  const std::string blob = os.str();
  const std::string where = " (" + path.string() + ")";

  if (blob.size() < 8) {
    throw CorruptFileError("file too short for a header" + where);
  }
  if (std::string_view(blob.data(), 8) != magic) {
    throw VersionError("unexpected magic bytes, wanted '" + std::string(magic) + "'" + where);
  }
  if (blob.size() < 8 + sizeof(std::uint32_t) + sizeof(std::uint64_t)) {
    throw CorruptFileError("truncated header" + where);
  }
  std::uint32_t version = 0;
  std::memcpy(&version, blob.data() + 8, sizeof(version));
  if (version != kVersion) {
    throw VersionError("unsupported archive version " + std::to_string(version) + where);
  }
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, blob.data() + 12, sizeof(header_len));
  const std::size_t header_at = 20;
  if (header_len > blob.size() - header_at) {
    throw CorruptFileError("truncated header" + where);
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(header_at, header_len));
  } catch (const nlohmann::json::exception& ex) {
    throw CorruptFileError(std::string("unreadable header: ") + ex.what() + where);
  }

  Archive a;
  std::size_t at = header_at + header_len;
  try {
    a.meta_ = header.at("meta");
    for (const auto& item : header.at("arrays")) {
      Entry e;
      e.dtype = parse_dtype(item.at("dtype").get<std::string>());
      e.shape = item.at("shape").get<std::vector<std::int64_t>>();
      const auto count = element_count(e.shape);
      if (count < 0) {
        throw CorruptFileError("negative array shape" + where);
      }
      const std::size_t nbytes = static_cast<std::size_t>(count) * dtype_size(e.dtype);
      if (nbytes > blob.size() - at) {
        throw CorruptFileError("truncated payload" + where);
      }
      e.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(at),
                     blob.begin() + static_cast<std::ptrdiff_t>(at + nbytes));
      at += nbytes;
      a.arrays_[item.at("name").get<std::string>()] = std::move(e);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw CorruptFileError(std::string("malformed header: ") + ex.what() + where);
  }
  if (at != blob.size()) {
    throw CorruptFileError("trailing bytes after payload" + where);
  }
  if (header.value("content_hash", std::string()) != a.content_hash()) {
    throw CorruptFileError("content hash mismatch" + where);
  }
  return a;
}

}  // namespace tpb::io
