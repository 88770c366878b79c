// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace mhgd {
const char* version();
}  // namespace mhgd
