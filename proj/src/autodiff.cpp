// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <string>

#include "promptfuse/autodiff.hpp"
#include "promptfuse/gradcheck.hpp"

namespace promptfuse {

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<double> finite_difference_gradient(const ScalarFunction& function,
                                               std::span<const double> point, double step) {
  if (!(step > 0.0)) fail(ErrorCategory::kInvalidArgument, "finite difference step must be > 0");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = function(x);
    x[i] = saved - step;
    const double down = function(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      fail(ErrorCategory::kNumerical,
           "non-finite function value at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom == 0.0) return std::sqrt(diff);
  return std::sqrt(diff) / denom;
}

namespace ad {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulNT: return "matmul_nt";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddRow: return "add_row";
    case OpKind::kRepeatRows: return "repeat_rows";
    case OpKind::kMaskedSoftmax: return "masked_softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kMeanRows: return "mean_rows";
    case OpKind::kSum: return "sum";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kLogSoftmaxAt: return "log_softmax_at";
    case OpKind::kGather: return "gather";
  }
  return "unknown";
}

}  // namespace ad
}  // namespace promptfuse
