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

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "metavib/rng.hpp"
#include "metavib/serialize.hpp"
#include "metavib/tensor.hpp"

namespace metavib {

/// Images [n x H x W x 1] in [0, 1] with one class label per image.
struct LabeledImages {
  Tensor images = Tensor::zeros({0, 28, 28, 1});
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  /// Subset in the given order.
  LabeledImages select(std::span<const std::size_t> indices) const;
  static LabeledImages concat(std::span<const LabeledImages> parts);
};

struct Domain {
  std::string id;
  double angle_deg = 0.0;
  LabeledImages data;
  std::size_t num_classes = 10;

  std::size_t size() const { return data.size(); }
  /// Throws DataError when labels or shapes are inconsistent.
  void validate() const;
};

/// One meta-train / meta-test draw of source domains.
struct Episode {
  LabeledImages meta_train;
  LabeledImages meta_test;
  /// class_groups[c] lists meta_train rows of class c.
  std::vector<std::vector<std::size_t>> class_groups;
  std::size_t class_count = 0;
  std::vector<std::string> meta_train_domains;
  std::string meta_test_domain;
};

struct SplitPlan {
  std::vector<std::string> source_domains;
  std::string target_domain;
  double validation_fraction = 0.1;
};

/// Source domains divided into training and validation parts (same order as
/// SplitPlan::source_domains) plus the held-out target.
struct SplitData {
  std::vector<Domain> train;
  std::vector<Domain> validation;
  Domain target;
};

// IDX files (big-endian). Pixels are scaled by 1/255.
LabeledImages load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);
LabeledImages decode_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes);
/// Pixels are quantized with round(255 * v).
void save_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
              const LabeledImages& data);

/// Rotates every image about its center by `angle_deg` (counter-clockwise as
/// displayed) with bilinear interpolation and zero padding.
Tensor rotate_images(const Tensor& images, double angle_deg);

/// Domain id for an angle, e.g. 15 -> "M15".
std::string rotation_domain_id(double angle_deg);

/// For each angle, draws per_domain / num_classes images per class without
/// replacement and rotates them.
std::vector<Domain> build_rotation_domains(const LabeledImages& base, std::span<const double> angles,
                                           std::size_t per_domain, std::size_t num_classes, Rng& rng);

/// Binary 28x28 prototype of class `c` (0 <= c < 10).
std::vector<double> glyph_prototype(std::size_t c);
/// Prototype plus Gaussian pixel noise, clamped to [0, 1]. Classes are laid
/// out contiguously.
LabeledImages synth_glyphs(std::size_t classes, std::size_t per_class, double noise_sigma, Rng& rng);

inline constexpr double kRotationAngles[] = {0.0, 15.0, 30.0, 45.0, 60.0, 75.0};

/// Picks one meta-test domain uniformly, up to `meta_train_domains` meta-train
/// domains from the rest, and draws a class-stratified batch from each.
Episode sample_episode(std::span<const Domain> sources, std::size_t batch_per_domain, Rng& rng,
                       std::size_t meta_train_domains = 2);

SplitPlan make_split(std::span<const std::string> domain_ids, const std::string& target_id,
                     double validation_fraction = 0.1);
/// Reserves, per class of each source domain, round(fraction * count) samples
/// (at least one when the class has two or more) for validation.
SplitData apply_split(std::span<const Domain> domains, const SplitPlan& plan, Rng& rng);

// Domain files share the tensor-record format: "images", "labels", "meta"
// ([angle, num_classes]) plus "id" as character codes.
void save_domain(const std::filesystem::path& path, const Domain& domain);
Domain load_domain(const std::filesystem::path& path);

}  // namespace metavib
