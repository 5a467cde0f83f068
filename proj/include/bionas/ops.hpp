#pragma once

#include <vector>

#include "bionas/rng.hpp"
#include "bionas/tensor.hpp"

namespace bionas {

// Forward primitives and their analytic input/weight gradients. All kernels
// use a fixed left-to-right summation order, so results are bit-reproducible
// for a given build.

/// a[M,K] x b[K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);

/// 2-D transpose.
Tensor transpose(const Tensor& a);

struct Conv2dSpec {
    index_t stride = 1;
    index_t padding = 0;
    index_t dilation = 1;
    index_t groups = 1;
};

/// Cross-correlation (no kernel flip), zero padding.
/// x[N,C_in,H,W], w[C_out,C_in/groups,k,k] -> [N,C_out,H',W'] with
/// H' = floor((H + 2p - d(k-1) - 1)/s) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Conv2dSpec& spec);

/// dL/dx given dL/dy and the kernel used on the data path. Passing the
/// true forward kernel gives the BP gradient; feedback rules substitute
/// their own matrix here.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Conv2dSpec& spec,
                         const Shape& input_shape);

/// dL/dw given the layer input and dL/dy (the true local correlation).
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Conv2dSpec& spec,
                          const Shape& weight_shape);

enum class PoolKind { max, avg };

struct PoolResult {
    Tensor y;
    // For max pooling: flat input index feeding each output element,
    // needed by the backward pass. Empty for avg.
    std::vector<index_t> argmax;
};

/// 2-D pooling with implicit padding of 1. Average pooling divides by the
/// full window area including padded zeros; max pooling considers only real
/// elements (padding never wins).
PoolResult pool2d(const Tensor& x, PoolKind kind, index_t k = 3, index_t stride = 1);

Tensor pool2d_input_grad(const Tensor& grad_out, PoolKind kind, const Shape& input_shape,
                         const PoolResult& fw, index_t k = 3, index_t stride = 1);

struct ReluResult {
    Tensor y;
    Tensor deriv;  // 1 where z > 0, else 0 (sign(0) convention: 0)
};

ReluResult relu_forward(const Tensor& z);

struct SoftmaxXentResult {
    double loss = 0.0;
    Tensor output_error;  // (softmax - target)/N, the error fed to backward
    Tensor probs;         // softmax(logits), kept for attacks/metrics
};

/// Mean cross-entropy over the batch. label_smoothing mixes the one-hot
/// target with the uniform distribution.
SoftmaxXentResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                        double label_smoothing = 0.0);

/// 0.5 * mean squared error over all elements plus its gradient w.r.t. pred.
struct MseResult {
    double loss = 0.0;
    Tensor grad;
};
MseResult mse_loss(const Tensor& pred, const Tensor& target);

/// Xavier/Glorot uniform draw: U(-a, a) with a = sqrt(6/(fan_in+fan_out)).
Tensor xavier_uniform(const Shape& shape, index_t fan_in, index_t fan_out, RngStream& rng);

/// fan_in/fan_out for dense [out,in] and conv [C_out,C_in/g,k,k] weights.
void weight_fans(const Shape& w_shape, index_t& fan_in, index_t& fan_out);

}  // namespace bionas
