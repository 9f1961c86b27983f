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

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tpb/tensor.hpp"

namespace tpb::io {

// Self-describing binary container:
//
//   magic[8] | u32 version | u64 header_bytes | header (JSON) | payload
//
// The header carries caller metadata, the array table (name, dtype, shape,
// offset) and a 64-bit FNV-1a content hash over metadata and payload that is
// re-verified on load. Multi-byte values are little-endian.
class Archive {
 public:
  enum class DType { f32, f64, i32 };

  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  void put(const std::string& name, const Matrix& m, DType dtype = DType::f64);
  void put_f32(const std::string& name, std::span<const float> data, std::vector<std::int64_t> shape);
  void put_i32(const std::string& name, std::span<const std::int32_t> data,
               std::vector<std::int64_t> shape);

  bool has(const std::string& name) const { return arrays_.count(name) != 0; }
  std::vector<std::int64_t> shape(const std::string& name) const;
  // 2-D view of a stored array (1-D arrays become a single row).
  Matrix matrix(const std::string& name) const;
  std::vector<float> floats(const std::string& name) const;
  std::vector<std::int32_t> ints(const std::string& name) const;
  std::vector<std::string> names() const;

  // Hash over metadata, array table and payload; stable across save/load.
  std::string content_hash() const;

  void save(const std::filesystem::path& path, std::string_view magic) const;
  static Archive load(const std::filesystem::path& path, std::string_view magic);

 private:
  struct Entry {
    DType dtype;
    std::vector<std::int64_t> shape;
    std::vector<char> bytes;
  };
  const Entry& entry(const std::string& name) const;

  nlohmann::json meta_ = nlohmann::json::object();
  std::map<std::string, Entry> arrays_;
};

std::string fnv1a_hex(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
// Content hash of a file on disk (whole byte stream).
std::string file_hash(const std::filesystem::path& path);

}  // namespace tpb::io
