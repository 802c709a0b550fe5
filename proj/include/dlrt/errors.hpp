// Copyright 2026 The dlrt Authors.
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.

#pragma once

#include <stdexcept>
#include <string>

namespace dlrt {

/// Shapes of the operands do not fit together.
struct dimension_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A computation produced NaN/Inf or an iterative method did not converge.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed file contents (bad magic, truncated payload, out-of-range values).
struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct config_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A forward cache used after the network it came from has changed.
struct stale_cache_error : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace dlrt
