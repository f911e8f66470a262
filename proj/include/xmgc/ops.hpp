#pragma once

#include <vector>

#include "xmgc/tensor.hpp"

namespace xmgc {

// All ops validate shapes in every mode. A node is recorded only when a tape
// is active and some input requires grad. Reductions accumulate in double and
// cache the unrounded scalar (Tensor::item64).

/// Cross-correlation plus per-channel bias.
/// input [N,Cin,H,W], kernel [Cout,Cin,kh,kw], bias [Cout].
/// Output spatial dims: floor((H + 2*padding - kh)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding);

/// Fractionally-strided convolution (the adjoint of conv2d in its spatial
/// map) plus per-channel bias. input [N,Cin,H,W], kernel [Cin,Cout,kh,kw].
/// Output spatial dims: (H-1)*stride - 2*padding + kh.
Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        int stride, int padding);

/// Per-channel batch normalization over N,H,W. Train mode uses batch
/// statistics (biased variance) and folds them into the running buffers with
/// `momentum`; infer mode reads the running buffers. running_mean/var are
/// plain state, not graph participants.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var,
                   bool training, float momentum, float epsilon);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, float slope = 0.2f);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

/// Stacks b's channels after a's. Requires identical N,H,W.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// x [N,F], weight [K,F], bias [K] -> [N,K].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// [N,C,H,W] -> [N,C*H*W].
Tensor flatten2d(const Tensor& x);

/// [N,C,H,W] -> [N,C], mean over H,W.
Tensor global_avg_pool(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Fused sum of elementwise products. Scalar output.
Tensor dot(const Tensor& a, const Tensor& b);

/// Binary cross-entropy of probabilities against a constant 0/1 label,
/// averaged over all elements. Probabilities are clamped to
/// [kBceClamp, 1-kBceClamp] before the logarithm.
inline constexpr double kBceClamp = 1e-7;
Tensor bce_loss(const Tensor& probabilities, int label);

/// Mean absolute difference.
Tensor l1_loss(const Tensor& a, const Tensor& b);

/// logits [N,K], labels[i] in [0,K). Mean negative log-likelihood under the
/// row-wise softmax.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Row-wise softmax of [N,K] logits. Inference-only helper; never recorded.
Tensor softmax(const Tensor& logits);

/// Row-wise argmax of [N,K] logits.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace xmgc
