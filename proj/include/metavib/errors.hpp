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

#include <stdexcept>
#include <string>

namespace metavib {

/// Root of every error thrown by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not compose.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument is outside its valid range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A pointwise function was applied outside its domain (e.g. log of 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// API misuse, such as calling backward on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Episode structure violates the meta-learning protocol.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, long long offset = -1)
      : Error(offset >= 0 ? what + " (at byte offset " + std::to_string(offset) + ")" : what),
        offset_(offset) {}
  long long offset() const { return offset_; }

 private:
  long long offset_;
};

/// Dataset cannot satisfy a construction request.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure during optimization (NaN/Inf).
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Prediction requested from unusable parameters.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

}  // namespace metavib
