#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "normshift/autodiff.hpp"

namespace normshift {

// Differentiable primitives. Every function records onto the tape of its
// first argument and rejects shape mismatches with ShapeError.

// Elementwise arithmetic on identically shaped operands.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> x, T factor);
// x * s for a one-element s.
template <typename T> Var<T> mul_scalar(Var<T> x, Var<T> s);
// lambda * a + (1 - lambda) * b for a one-element lambda.
template <typename T> Var<T> lerp(Var<T> a, Var<T> b, Var<T> lambda);

template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);
template <typename T> Var<T> tanh(Var<T> x);

template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);
// One element of a flat vector, as shape {1}.
template <typename T> Var<T> index(Var<T> x, std::size_t i);
// Softmax over a 1-D vector; masked-out entries are exactly zero and carry no gradient.
template <typename T> Var<T> softmax(Var<T> logits, const std::vector<bool>& active = {});

// y = x W^T + b with x (N,D_in), W (D_out,D_in), b (D_out).
template <typename T> Var<T> fully_connected(Var<T> x, Var<T> weight, Var<T> bias);
template <typename T> Var<T> fully_connected(Var<T> x, Var<T> weight);

// Cross-correlation, weight (C_out,C_in,kh,kw), bias (C_out).
template <typename T> Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride, int pad);

// Window maximum; ties go to the first element in row-major window order.
template <typename T> Var<T> maxpool2d(Var<T> x, int k, int stride);

enum class Reduction { Mean, Sum };

template <typename T>
struct CrossEntropy {
  Var<T> loss;
  Tensor<T> probs;  // (N,K), row-stochastic
};

// Max-subtracted softmax followed by -log p(label).
template <typename T>
CrossEntropy<T> softmax_cross_entropy(Var<T> logits, std::span<const std::int32_t> labels,
                                      Reduction reduction = Reduction::Mean);

// Per-sample statistics over groups of C/G channels and all pixels:
// (N,C,H,W) -> (N,G). Population (1/n) variance.
template <typename T> Var<T> group_mean(Var<T> x, std::size_t groups);
template <typename T> Var<T> group_std(Var<T> x, std::size_t groups);
// Batch statistics over (N,H,W) per channel: (N,C,H,W) -> (C).
template <typename T> Var<T> batch_mean(Var<T> x);
template <typename T> Var<T> batch_std(Var<T> x);
// (N,G) -> (N,C), each group value repeated C/G times.
template <typename T> Var<T> expand_groups(Var<T> v, std::size_t channels);
// (D) -> (N,D).
template <typename T> Var<T> broadcast_rows(Var<T> v, std::size_t rows);

// ((x - mu) / (sigma + eps)) * gamma + beta with per-sample, per-channel (N,C)
// statistics broadcast over (H,W). Negative sigma entries are rejected.
template <typename T>
Var<T> standardize_rescale(Var<T> x, Var<T> mu, Var<T> sigma, Var<T> gamma, Var<T> beta, T eps);
// Same without rescaling.
template <typename T> Var<T> standardize(Var<T> x, Var<T> mu, Var<T> sigma, T eps);
// x * gamma + beta with (N,C) gamma and beta.
template <typename T> Var<T> channel_affine(Var<T> x, Var<T> gamma, Var<T> beta);

// 1/2 * sum ||a_i - b_i||^2 over all elements, b treated as a constant.
template <typename T> Var<T> half_squared_distance(Var<T> a, const Tensor<T>& b);

}  // namespace normshift
