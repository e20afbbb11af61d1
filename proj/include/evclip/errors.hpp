// Copyright 2026 The evclip Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace evclip {

// Error categories. The CLI maps each one onto its own exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or missing key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or out-of-contract input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Shape mismatch between arrays or encoder inputs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Corrupt file, wrong magic, or unsupported container version.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite values during training or evaluation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Metric is undefined for the given input (e.g. AUC with one class).
class UndefinedMetricError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace evclip
