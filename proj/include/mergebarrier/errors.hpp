// Copyright 2026 The MergeBarrier Authors
// SPDX-License-Identifier: Apache-2.0
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

#ifndef MERGEBARRIER_ERRORS_HPP
#define MERGEBARRIER_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace mb {

/// Root of every error thrown by the library. The CLI maps these to exit 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
  using Error::Error;
};
class ConvergenceError : public Error {
  using Error::Error;
};
class ParameterError : public Error {
  using Error::Error;
};
class InputError : public Error {
  using Error::Error;
};
class TrainingError : public Error {
  using Error::Error;
};
class CalibrationError : public Error {
  using Error::Error;
};
class BundleError : public Error {
  using Error::Error;
};
class SchemaError : public Error {
  using Error::Error;
};
class FormatError : public Error {
  using Error::Error;
};
class CorruptionError : public Error {
  using Error::Error;
};
class StagingError : public Error {
  using Error::Error;
};

}  // namespace mb

#endif  // MERGEBARRIER_ERRORS_HPP
