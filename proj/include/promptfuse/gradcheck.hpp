// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <vector>

namespace promptfuse {

using ScalarFunction = std::function<double(std::span<const double>)>;

// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate.
// Throws kNumerical naming the coordinate when f is non-finite.
std::vector<double> finite_difference_gradient(const ScalarFunction& function,
                                               std::span<const double> point, double step);

// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace promptfuse
