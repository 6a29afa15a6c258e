#pragma once

// Forward and hand-derived backward passes for the layer types used by the
// multi-scale classifier. Everything is templated on the scalar type so the
// same code runs in float for training and in double for gradient checks.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "icvseg/tensor.hpp"

namespace icvseg {

enum class Mode { train, infer };

template <typename T>
struct BatchNormParams {
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
    BasicTensor<T> running_mean;
    BasicTensor<T> running_var;
    // False until a train-mode pass updated the running statistics or they
    // were restored from a checkpoint; infer mode refuses to run before that.
    bool stats_ready = false;

    static BatchNormParams identity(std::size_t channels);
};

/// Weights and bias of a conv or dense layer, plus the batch norm that
/// follows conv layers.
template <typename T>
struct LayerParams {
    BasicTensor<T> weights;
    BasicTensor<T> bias;
    std::optional<BatchNormParams<T>> norm;
};

// ---------------------------------------------------------------- conv2d

template <typename T>
struct ConvCache {
    BasicTensor<T> input;
    std::vector<T> columns;  // im2col matrix [C_in*k*k, N*H'*W']
};

template <typename T>
struct ConvGrads {
    BasicTensor<T> input;
    BasicTensor<T> weights;
    BasicTensor<T> bias;
};

std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride);

/// Valid cross-correlation. Input is [C,H,W] or [N,C,H,W], kernels
/// [C_out,C_in,k,k]; output keeps the input's rank.
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const LayerParams<T>& params,
                              std::size_t stride, ConvCache<T>* cache = nullptr);

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& grad_out, const ConvCache<T>& cache,
                             const LayerParams<T>& params, std::size_t stride);

// ------------------------------------------------------------ batch norm

template <typename T>
struct BatchNormCache {
    BasicTensor<T> normalized;  // x-hat
    std::vector<T> inv_std;
};

template <typename T>
struct BatchNormGrads {
    BasicTensor<T> input;
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
};

/// Per-channel normalization of [N,C,...]. Train mode normalizes with the
/// biased batch variance and folds the unbiased variance into the running
/// estimate: running = (1 - momentum) * running + momentum * batch.
template <typename T>
BasicTensor<T> batch_norm_forward(const BasicTensor<T>& input, BatchNormParams<T>& params, Mode mode,
                                  double momentum, double epsilon, BatchNormCache<T>* cache = nullptr);

/// Infer-mode normalization with running statistics; never mutates params.
template <typename T>
BasicTensor<T> batch_norm_infer(const BasicTensor<T>& input, const BatchNormParams<T>& params, double epsilon);

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>& grad_out, const BatchNormCache<T>& cache,
                                      const BatchNormParams<T>& params);

// --------------------------------------------------------------- dropout

/// Inverted dropout. In train mode `mask` receives 0 or 1/(1-rate) per
/// element; in infer mode the input is returned untouched.
template <typename T>
BasicTensor<T> dropout_forward(const BasicTensor<T>& input, double rate, Mode mode, std::mt19937_64& rng,
                               std::vector<T>* mask = nullptr);

template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_out, const std::vector<T>& mask);

// ----------------------------------------------------------------- dense

template <typename T>
struct DenseGrads {
    BasicTensor<T> input;
    BasicTensor<T> weights;
    BasicTensor<T> bias;
};

/// rows * W^T + b for input [N,D_in], W [D_out,D_in].
template <typename T>
BasicTensor<T> dense_forward(const BasicTensor<T>& input, const LayerParams<T>& params);

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                             const LayerParams<T>& params);

// ------------------------------------------------- activations and loss

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input);

/// Gradient gated by the forward input being strictly positive.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& logits);

template <typename T>
struct LossResult {
    T loss;
    BasicTensor<T> grad_logits;  // (probs - targets) / N
};

/// Mean negative log-likelihood of the true class for one-hot targets.
template <typename T>
LossResult<T> cross_entropy(const BasicTensor<T>& probs, const BasicTensor<T>& targets);

template <typename T>
BasicTensor<T> one_hot(const std::vector<int>& labels, std::size_t classes);

}  // namespace icvseg
