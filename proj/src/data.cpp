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

#include "metavib/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "metavib/errors.hpp"

namespace metavib {
namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
constexpr std::size_t kGlyphSize = 28;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset, const char* file) {
  if (bytes.size() < offset + 4) {
    throw FormatError(std::string("truncated IDX ") + file + " header", static_cast<long long>(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::size_t pixels_per_image(const Tensor& images) {
  return images.dim(0) == 0 ? shape_numel({images.dim(1), images.dim(2), images.dim(3)})
                            : images.numel() / images.dim(0);
}

std::vector<std::vector<std::size_t>> indices_by_class(const std::vector<std::size_t>& labels,
                                                       std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw DataError("label " + std::to_string(labels[i]) + " out of range");
    by_class[labels[i]].push_back(i);
  }
  return by_class;
}

// Class quotas for consecutive batches: entries [cursor, cursor + n) of the
// cyclic class order.
std::vector<std::size_t> quotas(const std::vector<std::size_t>& order, std::size_t& cursor, std::size_t n) {
  std::vector<std::size_t> q(order.size(), 0);
  for (std::size_t i = 0; i < n; ++i, ++cursor) ++q[order[cursor % order.size()]];
  return q;
}

std::vector<std::size_t> draw_stratified(const Domain& d, const std::vector<std::size_t>& quota, Rng& rng) {
  auto by_class = indices_by_class(d.data.labels, d.num_classes);
  std::vector<std::size_t> picked;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& pool = by_class[c];
    const std::size_t take = std::min(quota[c], pool.size());
    // Partial Fisher-Yates: the first `take` entries become a uniform draw.
    for (std::size_t i = 0; i < take; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
    picked.insert(picked.end(), pool.begin(), pool.begin() + static_cast<long>(take));
  }
  return picked;
}

}  // namespace

LabeledImages LabeledImages::select(std::span<const std::size_t> indices) const {
  const std::size_t per = pixels_per_image(images);
  std::vector<double> out;
  out.reserve(indices.size() * per);
  std::vector<std::size_t> out_labels;
  out_labels.reserve(indices.size());
  auto src = images.data();
  for (std::size_t i : indices) {
    if (i >= labels.size()) throw ParameterError("select: index " + std::to_string(i) + " out of range");
    out.insert(out.end(), src.begin() + static_cast<long>(i * per), src.begin() + static_cast<long>((i + 1) * per));
    out_labels.push_back(labels[i]);
  }
  return {Tensor({indices.size(), images.dim(1), images.dim(2), images.dim(3)}, std::move(out)),
          std::move(out_labels)};
}

LabeledImages LabeledImages::concat(std::span<const LabeledImages> parts) {
  if (parts.empty()) return {};
  Shape shape = parts[0].images.shape();
  std::vector<double> out;
  std::vector<std::size_t> labels;
  shape[0] = 0;
  for (const auto& p : parts) {
    if (p.images.dim(1) != shape[1] || p.images.dim(2) != shape[2] || p.images.dim(3) != shape[3]) {
      throw DimensionError("concat: image shapes differ");
    }
    out.insert(out.end(), p.images.data().begin(), p.images.data().end());
    labels.insert(labels.end(), p.labels.begin(), p.labels.end());
    shape[0] += p.size();
  }
  return {Tensor(shape, std::move(out)), std::move(labels)};
}

void Domain::validate() const {
  if (data.images.rank() != 4 || data.images.dim(0) != data.labels.size()) {
    throw DataError("domain " + id + ": " + std::to_string(data.labels.size()) + " labels for images " +
                    shape_to_string(data.images.shape()));
  }
  for (std::size_t y : data.labels) {
    if (y >= num_classes) throw DataError("domain " + id + ": label " + std::to_string(y) + " >= class count");
  }
}

LabeledImages decode_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
  if (read_be32(image_bytes, 0, "image file") != kIdxImageMagic) throw FormatError("bad IDX image magic", 0);
  if (read_be32(label_bytes, 0, "label file") != kIdxLabelMagic) throw FormatError("bad IDX label magic", 0);
  const std::size_t count = read_be32(image_bytes, 4, "image file");
  const std::size_t rows = read_be32(image_bytes, 8, "image file");
  const std::size_t cols = read_be32(image_bytes, 12, "image file");
  const std::size_t label_count = read_be32(label_bytes, 4, "label file");
  if (label_count != count) {
    throw FormatError("IDX count mismatch: " + std::to_string(count) + " images vs " + std::to_string(label_count) +
                          " labels",
                      4);
  }
  const std::size_t pixels = count * rows * cols;
  if (image_bytes.size() < 16 + pixels) {
    throw FormatError("truncated IDX image payload", static_cast<long long>(image_bytes.size()));
  }
  if (label_bytes.size() < 8 + count) {
    throw FormatError("truncated IDX label payload", static_cast<long long>(label_bytes.size()));
  }
  std::vector<double> data(pixels);
  for (std::size_t i = 0; i < pixels; ++i) data[i] = image_bytes[16 + i] / 255.0;
  std::vector<std::size_t> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = label_bytes[8 + i];
  return {Tensor({count, rows, cols, 1}, std::move(data)), std::move(labels)};
}

LabeledImages load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  return decode_idx(read_file_bytes(images_path), read_file_bytes(labels_path));
}

void save_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
              const LabeledImages& data) {
  const Tensor& im = data.images;
  if (im.rank() != 4 || im.dim(3) != 1) throw DimensionError("save_idx expects single-channel NHWC images");
  std::vector<std::uint8_t> ib;
  put_be32(ib, kIdxImageMagic);
  put_be32(ib, static_cast<std::uint32_t>(im.dim(0)));
  put_be32(ib, static_cast<std::uint32_t>(im.dim(1)));
  put_be32(ib, static_cast<std::uint32_t>(im.dim(2)));
  for (double v : im.data()) ib.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  std::vector<std::uint8_t> lb;
  put_be32(lb, kIdxLabelMagic);
  put_be32(lb, static_cast<std::uint32_t>(data.labels.size()));
  for (std::size_t y : data.labels) {
    if (y > 255) throw ParameterError("IDX labels must fit in a byte");
    lb.push_back(static_cast<std::uint8_t>(y));
  }
  write_file_bytes(images_path, ib);
  write_file_bytes(labels_path, lb);
}

Tensor rotate_images(const Tensor& images, double angle_deg) {
  if (images.rank() != 4) throw DimensionError("rotate_images expects NHWC images");
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  const double theta = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  auto in = images.data();
  std::vector<double> out(images.numel(), 0.0);
  auto pixel = [&](std::size_t b, long y, long x, std::size_t ch) -> double {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0.0;
    return in[((b * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)) * c + ch];
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Inverse map: output pixel -> source location.
      const double u = static_cast<double>(x) - cx;
      const double v = static_cast<double>(y) - cy;
      const double sx = cs * u - sn * v + cx;
      const double sy = sn * u + cs * v + cy;
      const double fx0 = std::floor(sx);
      const double fy0 = std::floor(sy);
      const double fx = sx - fx0;
      const double fy = sy - fy0;
      const long x0 = static_cast<long>(fx0);
      const long y0 = static_cast<long>(fy0);
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double val = pixel(b, y0, x0, ch) * (1.0 - fx) * (1.0 - fy) + pixel(b, y0, x0 + 1, ch) * fx * (1.0 - fy) +
                             pixel(b, y0 + 1, x0, ch) * (1.0 - fx) * fy + pixel(b, y0 + 1, x0 + 1, ch) * fx * fy;
          out[((b * h + y) * w + x) * c + ch] = std::clamp(val, 0.0, 1.0);
        }
      }
    }
  }
  return Tensor(images.shape(), std::move(out));
}

std::string rotation_domain_id(double angle_deg) {
  const double r = std::round(angle_deg);
  if (r == angle_deg) return "M" + std::to_string(static_cast<long>(r));
  return "M" + std::to_string(angle_deg);
}

std::vector<Domain> build_rotation_domains(const LabeledImages& base, std::span<const double> angles,
                                           std::size_t per_domain, std::size_t num_classes, Rng& rng) {
  if (num_classes == 0 || per_domain % num_classes != 0) {
    throw ParameterError("per_domain (" + std::to_string(per_domain) + ") must be a multiple of the class count");
  }
  const std::size_t per_class = per_domain / num_classes;
  const auto by_class = indices_by_class(base.labels, num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (by_class[c].size() < per_class) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                      " base images, need " + std::to_string(per_class));
    }
  }
  std::vector<Domain> domains;
  for (double angle : angles) {
    std::vector<std::size_t> picked;
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::vector<std::size_t> pool = by_class[c];
      for (std::size_t i = 0; i < per_class; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
      picked.insert(picked.end(), pool.begin(), pool.begin() + static_cast<long>(per_class));
    }
    LabeledImages subset = base.select(picked);
    subset.images = rotate_images(subset.images, angle);
    Domain d{rotation_domain_id(angle), angle, std::move(subset), num_classes};
    d.validate();
    domains.push_back(std::move(d));
  }
  return domains;
}

std::vector<double> glyph_prototype(std::size_t c) {
  if (c >= 10) throw ParameterError("glyph prototypes exist for classes 0..9");
  std::vector<double> img(kGlyphSize * kGlyphSize, 0.0);
  const double center = (kGlyphSize - 1) / 2.0;
  for (std::size_t y = 0; y < kGlyphSize; ++y) {
    for (std::size_t x = 0; x < kGlyphSize; ++x) {
      const double u = static_cast<double>(x) - center;
      const double v = static_cast<double>(y) - center;  // grows downwards
      const double r = std::hypot(u, v);
      const double au = std::abs(u);
      const double av = std::abs(v);
      bool on = false;
      switch (c) {
        case 0:  // ring
          on = r >= 6.5 && r <= 9.5;
          break;
        case 1:  // vertical bar
          on = au <= 1.5 && av <= 10.0;
          break;
        case 2:  // plus
          on = (au <= 1.5 && av <= 9.0) || (av <= 1.5 && au <= 9.0);
          break;
        case 3:  // diagonal cross
          on = r <= 10.0 && (std::abs(u - v) <= 2.2 || std::abs(u + v) <= 2.2);
          break;
        case 4:  // filled square
          on = au <= 5.5 && av <= 5.5;
          break;
        case 5:  // L
          on = (std::abs(u + 5.0) <= 1.5 && v >= -9.5 && v <= 9.5) || (std::abs(v - 8.0) <= 1.5 && u >= -6.5 && u <= 7.5);
          break;
        case 6:  // T
          on = (std::abs(v + 8.0) <= 1.5 && au <= 8.5) || (au <= 1.5 && v >= -8.0 && v <= 9.5);
          break;
        case 7: {  // filled triangle, apex up
          const double t = (v + 9.0) / 16.0;  // 0 at apex, 1 at base
          on = t >= 0.0 && t <= 1.0 && au <= 8.5 * t;
          break;
        }
        case 8:  // square frame
          on = std::max(au, av) >= 6.5 && std::max(au, av) <= 9.0;
          break;
        case 9:  // two dots
          on = std::hypot(u + 5.0, v) <= 3.5 || std::hypot(u - 5.0, v) <= 3.5;
          break;
      }
      img[y * kGlyphSize + x] = on ? 1.0 : 0.0;
    }
  }
  return img;
}

LabeledImages synth_glyphs(std::size_t classes, std::size_t per_class, double noise_sigma, Rng& rng) {
  if (classes == 0 || classes > 10) throw ParameterError("synth_glyphs supports 1..10 classes");
  if (noise_sigma < 0.0) throw ParameterError("noise_sigma must be non-negative");
  std::vector<std::vector<double>> protos;
  for (std::size_t c = 0; c < classes; ++c) protos.push_back(glyph_prototype(c));
  for (std::size_t a = 0; a < classes; ++a) {
    for (std::size_t b = a + 1; b < classes; ++b) {
      std::size_t diff = 0;
      for (std::size_t i = 0; i < protos[a].size(); ++i) diff += protos[a][i] != protos[b][i];
      if (diff < 40) {
        throw DataError("glyph prototypes " + std::to_string(a) + " and " + std::to_string(b) + " differ in only " +
                        std::to_string(diff) + " pixels");
      }
    }
  }
  const std::size_t npix = kGlyphSize * kGlyphSize;
  std::vector<double> data;
  data.reserve(classes * per_class * npix);
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t k = 0; k < per_class; ++k) {
      for (double p : protos[c]) {
        data.push_back(noise_sigma > 0.0 ? std::clamp(p + noise_sigma * rng.normal(), 0.0, 1.0) : p);
      }
      labels.push_back(c);
    }
  }
  return {Tensor({classes * per_class, kGlyphSize, kGlyphSize, 1}, std::move(data)), std::move(labels)};
}

Episode sample_episode(std::span<const Domain> sources, std::size_t batch_per_domain, Rng& rng,
                       std::size_t meta_train_domains) {
  if (sources.size() < 2) throw ProtocolError("episodes need at least two source domains");
  if (batch_per_domain == 0) throw ParameterError("batch_per_domain must be positive");
  if (meta_train_domains == 0) throw ParameterError("need at least one meta-train domain");
  const std::size_t num_classes = sources[0].num_classes;

  const std::size_t test_idx = rng.index(sources.size());
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (i != test_idx) rest.push_back(i);
  }
  shuffle(rest, rng);
  rest.resize(std::min(rest.size(), meta_train_domains));

  std::vector<std::size_t> order(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) order[c] = c;

  Episode ep;
  ep.class_count = num_classes;
  ep.meta_test_domain = sources[test_idx].id;

  shuffle(order, rng);
  std::size_t cursor = 0;
  std::vector<LabeledImages> parts;
  for (std::size_t di : rest) {
    const Domain& d = sources[di];
    auto picked = draw_stratified(d, quotas(order, cursor, batch_per_domain), rng);
    parts.push_back(d.data.select(picked));
    ep.meta_train_domains.push_back(d.id);
  }
  ep.meta_train = LabeledImages::concat(parts);

  shuffle(order, rng);
  cursor = 0;
  const Domain& td = sources[test_idx];
  ep.meta_test = td.data.select(draw_stratified(td, quotas(order, cursor, batch_per_domain), rng));

  ep.class_groups.assign(num_classes, {});
  for (std::size_t i = 0; i < ep.meta_train.size(); ++i) ep.class_groups[ep.meta_train.labels[i]].push_back(i);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (ep.class_groups[c].empty()) {
      throw ProtocolError("meta-train batch cannot cover class " + std::to_string(c));
    }
  }
  return ep;
}

SplitPlan make_split(std::span<const std::string> domain_ids, const std::string& target_id,
                     double validation_fraction) {
  if (std::find(domain_ids.begin(), domain_ids.end(), target_id) == domain_ids.end()) {
    throw ParameterError("unknown target domain '" + target_id + "'");
  }
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ParameterError("validation_fraction must lie in (0, 1)");
  }
  SplitPlan plan;
  plan.target_domain = target_id;
  plan.validation_fraction = validation_fraction;
  for (const auto& id : domain_ids) {
    if (id != target_id) plan.source_domains.push_back(id);
  }
  return plan;
}

SplitData apply_split(std::span<const Domain> domains, const SplitPlan& plan, Rng& rng) {
  auto find = [&](const std::string& id) -> const Domain& {
    for (const auto& d : domains) {
      if (d.id == id) return d;
    }
    throw ParameterError("split references unknown domain '" + id + "'");
  };
  SplitData out;
  out.target = find(plan.target_domain);
  for (const auto& id : plan.source_domains) {
    if (id == plan.target_domain) throw ParameterError("target domain listed as a source");
    const Domain& d = find(id);
    auto by_class = indices_by_class(d.data.labels, d.num_classes);
    std::vector<std::size_t> val;
    std::vector<std::size_t> train;
    for (auto& idx : by_class) {
      shuffle(idx, rng);
      std::size_t n_val = static_cast<std::size_t>(std::lround(plan.validation_fraction * idx.size()));
      if (idx.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - 1);
      val.insert(val.end(), idx.begin(), idx.begin() + static_cast<long>(n_val));
      train.insert(train.end(), idx.begin() + static_cast<long>(n_val), idx.end());
    }
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    out.train.push_back({d.id, d.angle_deg, d.data.select(train), d.num_classes});
    out.validation.push_back({d.id, d.angle_deg, d.data.select(val), d.num_classes});
  }
  return out;
}

void save_domain(const std::filesystem::path& path, const Domain& domain) {
  std::vector<double> labels(domain.data.labels.begin(), domain.data.labels.end());
  std::vector<double> id(domain.id.begin(), domain.id.end());
  const NamedTensor records[] = {
      {"id", Tensor({id.size()}, id)},
      {"meta", Tensor({2}, {domain.angle_deg, static_cast<double>(domain.num_classes)})},
      {"images", domain.data.images},
      {"labels", Tensor({labels.size()}, labels)},
  };
  write_tensor_file(path, records);
}

Domain load_domain(const std::filesystem::path& path) {
  const auto records = read_tensor_file(path);
  const Tensor& id = find_record(records, "id");
  const Tensor& meta = find_record(records, "meta");
  const Tensor& labels = find_record(records, "labels");
  if (meta.numel() != 2) throw FormatError("domain meta record must hold [angle, classes]");
  Domain d;
  for (double ch : id.data()) d.id.push_back(static_cast<char>(ch));
  d.angle_deg = meta.at(0);
  d.num_classes = static_cast<std::size_t>(meta.at(1));
  d.data.images = find_record(records, "images");
  for (double y : labels.data()) d.data.labels.push_back(static_cast<std::size_t>(y));
  d.validate();
  for (double v : d.data.images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw FormatError("domain " + d.id + " has pixel values outside [0, 1]");
  }
  return d;
}

}  // namespace metavib
