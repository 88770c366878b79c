// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#include "mhgd/version.hpp"

namespace mhgd {
const char* version() { return "0.1.0"; }
}  // namespace mhgd
