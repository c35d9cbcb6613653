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

#include "metavib/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "metavib/errors.hpp"

namespace metavib {
namespace {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  template <typename T>
  T get(const char* what) {
    T v;
    get_bytes(&v, sizeof(T), what);
    return v;
  }
  void get_bytes(void* dst, std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw FormatError(std::string("truncated tensor file while reading ") + what,
                        static_cast<long long>(pos_));
    }
    std::memcpy(dst, in_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_tensor_records(std::span<const NamedTensor> records) {
  Writer w;
  w.put_bytes(kTensorFileMagic, 4);
  w.put<std::uint32_t>(kTensorFileVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ParameterError("tensor name too long: " + r.name.substr(0, 32));
    }
    if (r.value.rank() > std::numeric_limits<std::uint8_t>::max()) {
      throw ParameterError("tensor rank too large for " + r.name);
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(r.name.size()));
    w.put_bytes(r.name.data(), r.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.value.rank()));
    for (std::size_t e : r.value.shape()) {
      if (e > std::numeric_limits<std::uint32_t>::max()) throw ParameterError("extent too large in " + r.name);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    }
    w.put_bytes(r.value.data().data(), r.value.numel() * sizeof(double));
  }
  return w.take();
}

std::vector<NamedTensor> decode_tensor_records(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.get_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kTensorFileMagic, 4) != 0) throw FormatError("bad tensor file magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kTensorFileVersion) {
    throw FormatError("unsupported tensor file version " + std::to_string(version), 4);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("name length");
    std::string name(name_len, '\0');
    r.get_bytes(name.data(), name_len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint32_t>("extent");
    const std::size_t n = shape_numel(shape);
    if (n > (bytes.size() - r.pos()) / sizeof(double)) {
      throw FormatError("truncated tensor file in data of " + name, static_cast<long long>(r.pos()));
    }
    std::vector<double> data(n);
    r.get_bytes(data.data(), n * sizeof(double), "tensor data");
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (!r.done()) throw FormatError("trailing bytes after tensor records", static_cast<long long>(r.pos()));
  return out;
}

void write_tensor_file(const std::filesystem::path& path, std::span<const NamedTensor> records) {
  write_file_bytes(path, encode_tensor_records(records));
}

std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path) {
  return decode_tensor_records(read_file_bytes(path));
}

const Tensor& find_record(std::span<const NamedTensor> records, const std::string& name) {
  for (const auto& r : records) {
    if (r.name == name) return r.value;
  }
  throw FormatError("missing tensor record '" + name + "'");
}

bool has_record(std::span<const NamedTensor> records, const std::string& name) {
  for (const auto& r : records) {
    if (r.name == name) return true;
  }
  return false;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Atomic replace via rename.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace metavib
