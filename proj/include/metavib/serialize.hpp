// Copyright 2026 The MetaVIB Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "metavib/tensor.hpp"

namespace metavib {

// Tensor-record file:
//   "MVIB" | version u32 | count u32 |
//   count x ( name_len u16 | name | rank u8 | rank x extent u32 | f64 data )
// All integers and floats little-endian.
inline constexpr char kTensorFileMagic[4] = {'M', 'V', 'I', 'B'};
inline constexpr std::uint32_t kTensorFileVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

std::vector<std::uint8_t> encode_tensor_records(std::span<const NamedTensor> records);
std::vector<NamedTensor> decode_tensor_records(std::span<const std::uint8_t> bytes);

void write_tensor_file(const std::filesystem::path& path, std::span<const NamedTensor> records);
std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path);

/// Looks a record up by name; throws FormatError when absent.
const Tensor& find_record(std::span<const NamedTensor> records, const std::string& name);
bool has_record(std::span<const NamedTensor> records, const std::string& name);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace metavib
