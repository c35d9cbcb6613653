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

#include "metavib/networks.hpp"

#include <cmath>

#include "metavib/errors.hpp"

namespace metavib {
namespace {

std::size_t pooled(std::size_t in, std::size_t window, std::size_t stride) {
  if (in < window) return 0;
  return (in - window) / stride + 1;
}

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(shape_numel(shape));
  for (double& v : w) v = (2.0 * rng.uniform() - 1.0) * limit;
  return Tensor(std::move(shape), std::move(w));
}

DenseLayer dense(std::size_t in, std::size_t out, Rng& rng) {
  return {glorot({in, out}, in, out, rng), Tensor::zeros({out})};
}

ConvLayer conv(std::size_t k, std::size_t in, std::size_t out, Rng& rng) {
  return {glorot({k, k, in, out}, k * k * in, k * k * out, rng), Tensor::zeros({out})};
}

Tensor affine(const DenseLayer& layer, const Tensor& x) {
  return ops::add(ops::matmul(x, layer.weight), layer.bias);
}

template <typename Params, typename Fn>
void for_each_entry(Params& p, Fn fn) {
  fn("theta.conv1.kernel", p.theta.conv1.kernel);
  fn("theta.conv1.bias", p.theta.conv1.bias);
  fn("theta.conv2.kernel", p.theta.conv2.kernel);
  fn("theta.conv2.bias", p.theta.conv2.bias);
  fn("theta.fc.weight", p.theta.fc.weight);
  fn("theta.fc.bias", p.theta.fc.bias);
  const char* nets[] = {"phi1", "phi2"};
  for (int i = 0; i < 2; ++i) {
    auto& net = i == 0 ? p.phi1 : p.phi2;
    const std::string n = nets[i];
    fn(n + ".hidden1.weight", net.hidden1.weight);
    fn(n + ".hidden1.bias", net.hidden1.bias);
    fn(n + ".hidden2.weight", net.hidden2.weight);
    fn(n + ".hidden2.bias", net.hidden2.bias);
    fn(n + ".out.weight", net.out.weight);
    fn(n + ".out.bias", net.out.bias);
  }
  if (p.dense_head) fn("head.weight", *p.dense_head);
}

void check_spec_field(std::size_t v, const char* name) {
  if (v == 0) throw ParameterError(std::string("network spec: ") + name + " must be positive");
}

}  // namespace

std::vector<LayerSpec> NetworkSpec::feature_layers() const {
  const std::size_t p1 = pooled(image_size, pool_window, pool_stride);
  const std::size_t p2 = pooled(p1, pool_window, pool_stride);
  const int ps = static_cast<int>(pool_stride);
  return {
      {"conv1", LayerKind::kConv, {image_size, image_size, conv_channels}, Activation::kRelu, 1, ops::Padding::kSame},
      {"pool1", LayerKind::kPool, {p1, p1, conv_channels}, Activation::kNone, ps, ops::Padding::kValid},
      {"conv2", LayerKind::kConv, {p1, p1, conv_channels}, Activation::kRelu, 1, ops::Padding::kSame},
      {"pool2", LayerKind::kPool, {p2, p2, conv_channels}, Activation::kNone, ps, ops::Padding::kValid},
      {"fc", LayerKind::kDense, {feature_dim}, Activation::kRelu},
  };
}

std::vector<LayerSpec> NetworkSpec::inference_layers(const std::string& prefix) const {
  return {
      {prefix + ".hidden1", LayerKind::kDense, {hidden_dim}, Activation::kElu},
      {prefix + ".hidden2", LayerKind::kDense, {hidden_dim}, Activation::kElu},
      {prefix + ".out", LayerKind::kDense, {2 * feature_dim}, Activation::kNone},
  };
}

void NetworkSpec::validate() const {
  check_spec_field(image_size, "image_size");
  check_spec_field(image_channels, "image_channels");
  check_spec_field(conv_channels, "conv_channels");
  check_spec_field(conv_kernel, "conv_kernel");
  check_spec_field(pool_window, "pool_window");
  check_spec_field(pool_stride, "pool_stride");
  check_spec_field(feature_dim, "feature_dim");
  check_spec_field(hidden_dim, "hidden_dim");
  check_spec_field(num_classes, "num_classes");
  for (const auto& layer : feature_layers()) {
    for (std::size_t e : layer.output) {
      if (e == 0) throw ParameterError("network spec: layer " + layer.name + " has an empty output");
    }
  }
}

std::size_t NetworkSpec::flattened_extent() const {
  const auto layers = feature_layers();
  const Shape& s = layers[3].output;
  return s[0] * s[1] * s[2];
}

std::vector<double> NetworkSpec::to_vector() const {
  return {static_cast<double>(image_size),  static_cast<double>(image_channels), static_cast<double>(conv_channels),
          static_cast<double>(conv_kernel), static_cast<double>(pool_window),    static_cast<double>(pool_stride),
          static_cast<double>(feature_dim), static_cast<double>(hidden_dim),     static_cast<double>(num_classes),
          dense_head ? 1.0 : 0.0};
}

NetworkSpec NetworkSpec::from_vector(std::span<const double> v) {
  if (v.size() != 10) throw FormatError("network spec record has " + std::to_string(v.size()) + " fields");
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(v[i]); };
  NetworkSpec s;
  s.image_size = u(0);
  s.image_channels = u(1);
  s.conv_channels = u(2);
  s.conv_kernel = u(3);
  s.pool_window = u(4);
  s.pool_stride = u(5);
  s.feature_dim = u(6);
  s.hidden_dim = u(7);
  s.num_classes = u(8);
  s.dense_head = v[9] != 0.0;
  s.validate();
  return s;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::entries() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for_each_entry(*this, [&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::entries() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for_each_entry(*this, [&](const std::string& n, const Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

ModelParams ModelParams::bind(Tape& tape) const {
  ModelParams bound = *this;
  for (auto& [name, t] : bound.entries()) *t = tape.variable(*t);
  return bound;
}

ModelParams ModelParams::detached() const {
  ModelParams out = *this;
  for (auto& [name, t] : out.entries()) *t = t->detached();
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries()) n += t->numel();
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& [name, t] : entries()) {
    for (double v : t->data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

ModelParams init_params(const NetworkSpec& spec, Rng& rng) {
  spec.validate();
  ModelParams p;
  p.spec = spec;
  const std::size_t k = spec.conv_kernel;
  p.theta.conv1 = conv(k, spec.image_channels, spec.conv_channels, rng);
  p.theta.conv2 = conv(k, spec.conv_channels, spec.conv_channels, rng);
  p.theta.fc = dense(spec.flattened_extent(), spec.feature_dim, rng);
  for (InferenceNetParams* net : {&p.phi1, &p.phi2}) {
    net->hidden1 = dense(spec.feature_dim, spec.hidden_dim, rng);
    net->hidden2 = dense(spec.hidden_dim, spec.hidden_dim, rng);
    net->out = dense(spec.hidden_dim, 2 * spec.feature_dim, rng);
  }
  if (spec.dense_head) {
    p.dense_head = glorot({spec.feature_dim, spec.num_classes}, spec.feature_dim, spec.num_classes, rng);
  }
  return p;
}

std::vector<NamedTensor> params_to_records(const ModelParams& params, const std::string& prefix) {
  std::vector<NamedTensor> out;
  const auto spec = params.spec.to_vector();
  out.push_back({prefix + "spec", Tensor({spec.size()}, spec)});
  for (const auto& [name, t] : params.entries()) out.push_back({prefix + name, t->detached()});
  return out;
}

ModelParams params_from_records(std::span<const NamedTensor> records, const std::string& prefix) {
  const Tensor& spec_record = find_record(records, prefix + "spec");
  const NetworkSpec spec = NetworkSpec::from_vector(spec_record.data());
  Rng scratch(0);
  ModelParams p = init_params(spec, scratch);
  for (auto& [name, t] : p.entries()) {
    const Tensor& stored = find_record(records, prefix + name);
    if (stored.shape() != t->shape()) {
      throw FormatError("record " + prefix + name + " has shape " + shape_to_string(stored.shape()) +
                        ", expected " + shape_to_string(t->shape()));
    }
    *t = stored;
  }
  return p;
}

void save_params(const std::filesystem::path& path, const ModelParams& params) {
  write_tensor_file(path, params_to_records(params));
}

ModelParams load_params(const std::filesystem::path& path) { return params_from_records(read_tensor_file(path)); }

Tensor feature_extract(const ModelParams& params, const Tensor& images) {
  const NetworkSpec& s = params.spec;
  if (images.rank() != 4 || images.dim(1) != s.image_size || images.dim(2) != s.image_size ||
      images.dim(3) != s.image_channels) {
    throw DimensionError("feature_extract expects [B x " + std::to_string(s.image_size) + " x " +
                         std::to_string(s.image_size) + " x " + std::to_string(s.image_channels) + "], got " +
                         shape_to_string(images.shape()));
  }
  const auto& th = params.theta;
  const int w = static_cast<int>(s.pool_window);
  const int st = static_cast<int>(s.pool_stride);
  Tensor h = ops::relu(ops::conv2d(images, th.conv1.kernel, th.conv1.bias, 1, ops::Padding::kSame));
  h = ops::maxpool2d(h, w, w, st, ops::Padding::kValid);
  h = ops::relu(ops::conv2d(h, th.conv2.kernel, th.conv2.bias, 1, ops::Padding::kSame));
  h = ops::maxpool2d(h, w, w, st, ops::Padding::kValid);
  h = ops::reshape(h, {images.dim(0), s.flattened_extent()});
  return ops::relu(affine(th.fc, h));
}

Tensor feature_extract_batched(const ModelParams& params, const Tensor& images, std::size_t chunk) {
  const ModelParams p = params.detached();
  const Tensor input = images.detached();
  if (input.rank() != 4) throw DimensionError("feature_extract expects NHWC images");
  const std::size_t n = input.dim(0);
  const std::size_t per_image = n == 0 ? 0 : input.numel() / n;
  std::vector<double> out;
  out.reserve(n * p.spec.feature_dim);
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t count = std::min(chunk, n - begin);
    auto data = input.data().subspan(begin * per_image, count * per_image);
    const Tensor part({count, input.dim(1), input.dim(2), input.dim(3)}, {data.begin(), data.end()});
    const Tensor f = feature_extract(p, part);
    out.insert(out.end(), f.data().begin(), f.data().end());
  }
  return Tensor({n, p.spec.feature_dim}, std::move(out));
}

Tensor instance_pool(const Tensor& features) {
  if (features.rank() != 2) throw DimensionError("instance_pool expects [M x F]");
  if (features.dim(0) == 0) throw ProtocolError("instance_pool: empty class group");
  return ops::mean(features, 0);
}

Tensor class_pool(const Tensor& features, std::span<const std::size_t> labels, std::size_t num_classes) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw DimensionError("class_pool: " + std::to_string(labels.size()) + " labels for features " +
                         shape_to_string(features.shape()));
  }
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t y : labels) {
    if (y >= num_classes) throw ParameterError("class_pool: label " + std::to_string(y) + " out of range");
    ++counts[y];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) throw ProtocolError("class " + std::to_string(c) + " has no meta-train instance");
  }
  const std::size_t m = labels.size();
  std::vector<double> pool(num_classes * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) pool[labels[i] * m + i] = 1.0 / static_cast<double>(counts[labels[i]]);
  return ops::matmul(Tensor({num_classes, m}, std::move(pool)), features);
}

InferenceTrace run_inference_net(const InferenceNetParams& net, const Tensor& input) {
  const Tensor x = input.rank() == 1 ? ops::reshape(input, {1, input.dim(0)}) : input;
  Tensor h1 = ops::elu(affine(net.hidden1, x));
  Tensor h2 = ops::elu(affine(net.hidden2, h1));
  const Tensor out = affine(net.out, h2);
  const std::size_t d = out.dim(1) / 2;
  return {std::move(h1), std::move(h2), DiagGaussian(ops::slice_last(out, 0, d), ops::slice_last(out, d, 2 * d))};
}

DiagGaussian infer_classifier_dist(const ModelParams& params, const Tensor& pooled) {
  return run_inference_net(params.phi1, pooled).dist;
}

DiagGaussian infer_latent_dist(const ModelParams& params, const Tensor& features) {
  return run_inference_net(params.phi2, features).dist;
}

}  // namespace metavib
