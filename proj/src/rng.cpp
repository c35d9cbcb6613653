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

#include "metavib/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "metavib/errors.hpp"

namespace metavib {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw ParameterError("Rng::index needs a positive bound");
  const std::uint64_t bound = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(angle);
  has_spare_ = true;
  return r * std::cos(angle);
}

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0xD6E8FEB86659FD93ULL));
}

// Layout: [word count, (hi, lo) 32-bit halves of each engine word..., has_spare, spare].
std::vector<double> Rng::state() const {
  std::ostringstream os;
  os << engine_;
  std::istringstream is(os.str());
  std::vector<std::uint64_t> words;
  for (std::uint64_t w; is >> w;) words.push_back(w);
  std::vector<double> out;
  out.reserve(words.size() * 2 + 3);
  out.push_back(static_cast<double>(words.size()));
  for (std::uint64_t w : words) {
    out.push_back(static_cast<double>(w >> 32));
    out.push_back(static_cast<double>(w & 0xFFFFFFFFULL));
  }
  out.push_back(has_spare_ ? 1.0 : 0.0);
  out.push_back(spare_);
  return out;
}

void Rng::set_state(std::span<const double> state) {
  if (state.empty()) throw FormatError("empty RNG state");
  const auto count = static_cast<std::size_t>(state[0]);
  if (state.size() != count * 2 + 3) throw FormatError("RNG state has wrong length");
  std::ostringstream os;
  for (std::size_t i = 0; i < count; ++i) {
    const auto hi = static_cast<std::uint64_t>(state[1 + 2 * i]);
    const auto lo = static_cast<std::uint64_t>(state[2 + 2 * i]);
    if (i) os << ' ';
    os << ((hi << 32) | lo);
  }
  std::istringstream is(os.str());
  std::mt19937_64 engine;
  if (!(is >> engine)) throw FormatError("RNG state does not parse");
  engine_ = engine;
  has_spare_ = state[count * 2 + 1] != 0.0;
  spare_ = state[count * 2 + 2];
}

bool Rng::operator==(const Rng& other) const {
  return engine_ == other.engine_ && has_spare_ == other.has_spare_ && spare_ == other.spare_;
}

}  // namespace metavib
