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

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metavib/distributions.hpp"
#include "metavib/ops.hpp"
#include "metavib/rng.hpp"
#include "metavib/serialize.hpp"
#include "metavib/tensor.hpp"

namespace metavib {

enum class LayerKind { kConv, kPool, kDense };
enum class Activation { kNone, kRelu, kElu };

struct LayerSpec {
  std::string name;
  LayerKind kind;
  Shape output;  // per-sample output extents
  Activation activation = Activation::kNone;
  int stride = 1;
  ops::Padding padding = ops::Padding::kValid;
};

/// Architecture of the three networks.
///
/// Feature extractor: two blocks of (conv k x k, stride 1, SAME, ReLU) followed
/// by (max-pool, stride 2, VALID), then a dense ReLU layer to `feature_dim`.
/// Both inference networks: two dense ELU layers of `hidden_dim`, then a
/// linear layer emitting the mean and log-variance of a `feature_dim`
/// Gaussian. Defaults match the 28x28 digit setting.
struct NetworkSpec {
  std::size_t image_size = 28;
  std::size_t image_channels = 1;
  std::size_t conv_channels = 32;
  std::size_t conv_kernel = 3;
  std::size_t pool_window = 3;
  std::size_t pool_stride = 2;
  std::size_t feature_dim = 256;
  std::size_t hidden_dim = 256;
  std::size_t num_classes = 10;
  /// Adds a learned [feature_dim x num_classes] classifier for the ERM objective.
  bool dense_head = false;

  std::vector<LayerSpec> feature_layers() const;
  std::vector<LayerSpec> inference_layers(const std::string& prefix) const;
  /// Throws ParameterError unless consecutive layer shapes compose.
  void validate() const;
  std::size_t flattened_extent() const;

  std::vector<double> to_vector() const;
  static NetworkSpec from_vector(std::span<const double> v);

  bool operator==(const NetworkSpec&) const = default;
};

struct DenseLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct ConvLayer {
  Tensor kernel;  // [k x k x in x out]
  Tensor bias;    // [out]
};

struct FeatureExtractorParams {
  ConvLayer conv1;
  ConvLayer conv2;
  DenseLayer fc;
};

struct InferenceNetParams {
  DenseLayer hidden1;
  DenseLayer hidden2;
  DenseLayer out;  // emits [mu | log_var]
};

/// Trainable parameters: theta (feature extractor), phi1 (classifier-weight
/// inference), phi2 (latent inference) and the optional ERM head.
struct ModelParams {
  NetworkSpec spec;
  FeatureExtractorParams theta;
  InferenceNetParams phi1;
  InferenceNetParams phi2;
  std::optional<Tensor> dense_head;  // [feature_dim x num_classes]

  /// Named views in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> entries();
  std::vector<std::pair<std::string, const Tensor*>> entries() const;

  /// Copy whose tensors are registered as leaves on `tape`.
  ModelParams bind(Tape& tape) const;
  /// Copy with every tensor detached.
  ModelParams detached() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
};

/// Glorot-uniform weights, zero biases.
ModelParams init_params(const NetworkSpec& spec, Rng& rng);

/// Records named "<prefix><entry>" plus "<prefix>spec".
std::vector<NamedTensor> params_to_records(const ModelParams& params, const std::string& prefix = "");
ModelParams params_from_records(std::span<const NamedTensor> records, const std::string& prefix = "");

void save_params(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_params(const std::filesystem::path& path);

/// images [B x S x S x C] -> features [B x feature_dim].
Tensor feature_extract(const ModelParams& params, const Tensor& images);
/// Forward pass without a tape, in chunks of `chunk` images.
Tensor feature_extract_batched(const ModelParams& params, const Tensor& images, std::size_t chunk = 256);

/// Mean over the instance axis of [Mc x F]. Throws ProtocolError when empty.
Tensor instance_pool(const Tensor& features);
/// Per-class instance means as a [C x F] tensor. Throws ProtocolError when a
/// class has no instance.
Tensor class_pool(const Tensor& features, std::span<const std::size_t> labels, std::size_t num_classes);

/// Activations of one inference-network pass.
struct InferenceTrace {
  Tensor hidden1;
  Tensor hidden2;
  DiagGaussian dist;
};

InferenceTrace run_inference_net(const InferenceNetParams& net, const Tensor& input);
/// Distribution over classifier weight vectors, one per row of `pooled`.
DiagGaussian infer_classifier_dist(const ModelParams& params, const Tensor& pooled);
/// Latent distribution for pooled class features (prior) or single features (posterior).
DiagGaussian infer_latent_dist(const ModelParams& params, const Tensor& features);

}  // namespace metavib
