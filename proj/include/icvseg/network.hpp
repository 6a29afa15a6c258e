#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "icvseg/adam.hpp"
#include "icvseg/layers.hpp"
#include "icvseg/tensor.hpp"

namespace icvseg {

inline constexpr std::size_t kBranches = 3;
inline constexpr std::size_t kConvPerBranch = 3;
inline constexpr std::size_t kDensePerBranch = 2;
inline constexpr std::size_t kClasses = 2;
/// Layers per branch in traversal order: conv1..3 then dense1..2.
inline constexpr std::size_t kLayersPerBranch = kConvPerBranch + kDensePerBranch;
inline constexpr std::size_t kLayerCount = kBranches * kLayersPerBranch + 1;

struct ConvLayerSpec {
    std::size_t channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;

    bool operator==(const ConvLayerSpec&) const = default;
};

struct BranchSpec {
    std::array<ConvLayerSpec, kConvPerBranch> conv{};
    std::array<std::size_t, kDensePerBranch> dense{};

    bool operator==(const BranchSpec&) const = default;
};

/// Three-branch multi-scale patch classifier. Each branch sees a square
/// single-channel patch, runs three valid strided convolutions (each
/// followed by batch norm and ReLU) and two dense layers (ReLU, dropout);
/// the branch outputs are concatenated into one dense layer over the two
/// classes {background, ICV}.
struct NetworkSpec {
    std::array<std::size_t, kBranches> patch_sizes{};
    std::array<BranchSpec, kBranches> branches{};
    double dropout_rate = 0.5;
    double bn_momentum = 0.1;
    double bn_epsilon = 1e-5;

    /// 51/101/151 patches, conv 24-32-48 (5x5, stride 2), dense 256-64.
    static NetworkSpec full_scale();
    /// Patch sizes scaled to 128x128 slices with a narrow network.
    static NetworkSpec desk();
    /// 11/15/19 patches with a handful of channels, for gradient checks.
    static NetworkSpec tiny();

    /// Throws ConfigError with a per-layer shape trace when invalid.
    void validate() const;
    /// One line per layer: input extent -> output extent.
    std::vector<std::string> shape_trace() const;
    /// Spatial extent after the last conv of `branch` (0 when it collapses).
    std::size_t final_extent(std::size_t branch) const;
    std::size_t branch_feature_size(std::size_t branch) const;
    std::size_t max_patch() const { return patch_sizes.back(); }

    bool operator==(const NetworkSpec&) const = default;
};

/// Trainable weights in traversal order: branch 0 conv1..3, dense1..2,
/// branch 1 ..., branch 2 ..., joint dense. Within a layer the serialized
/// order is weights, bias, then (conv only) gamma, beta, running mean,
/// running variance.
template <typename T>
struct ParameterSet {
    std::vector<LayerParams<T>> layers;

    static std::size_t layer_index(std::size_t branch, std::size_t layer) {
        return branch * kLayersPerBranch + layer;
    }
    static constexpr std::size_t joint_index() { return kLayerCount - 1; }

    /// Pointers to every trainable tensor (weights, bias, gamma, beta).
    std::vector<BasicTensor<T>*> trainable();
    std::vector<const BasicTensor<T>*> trainable() const;
    std::size_t trainable_count() const;

    template <typename U>
    ParameterSet<U> cast() const;

    bool operator==(const ParameterSet& other) const;
};

/// Closed-form trainable parameter count of a spec.
std::size_t parameter_count(const NetworkSpec& spec);

/// He-normal weights scaled by fan-in, zero biases, unit gamma, zero beta.
template <typename T = float>
ParameterSet<T> init_params(const NetworkSpec& spec, std::uint64_t seed);

/// Throws std::invalid_argument naming the first layer whose tensors do not
/// have the shapes `spec` implies.
template <typename T>
void check_params(const ParameterSet<T>& params, const NetworkSpec& spec);

/// One [N,1,s,s] tensor per branch.
template <typename T>
using BranchInputs = std::array<BasicTensor<T>, kBranches>;

template <typename T>
struct BranchTrace {
    std::array<ConvCache<T>, kConvPerBranch> conv;
    std::array<BatchNormCache<T>, kConvPerBranch> norm;
    std::array<BasicTensor<T>, kConvPerBranch> pre_activation;
    std::array<BasicTensor<T>, kDensePerBranch> dense_input;
    std::array<BasicTensor<T>, kDensePerBranch> dense_pre_activation;
    std::array<std::vector<T>, kDensePerBranch> dropout_mask;
};

/// Everything the backward pass needs from a train-mode forward pass.
template <typename T>
struct ForwardTrace {
    std::array<BranchTrace<T>, kBranches> branches;
    BasicTensor<T> joint_input;
    BasicTensor<T> probs;
};

/// Train-mode or infer-mode forward pass returning [N,2] class
/// probabilities (column 0 background, column 1 ICV). Train mode updates
/// batch-norm running statistics and draws dropout masks from `rng`.
template <typename T>
BasicTensor<T> forward(ParameterSet<T>& params, const NetworkSpec& spec, const BranchInputs<T>& inputs, Mode mode,
                       std::mt19937_64& rng, ForwardTrace<T>* trace = nullptr);

/// Infer-mode forward pass over read-only parameters.
template <typename T>
BasicTensor<T> predict(const ParameterSet<T>& params, const NetworkSpec& spec, const BranchInputs<T>& inputs);

/// Gradients of the loss w.r.t. every trainable tensor, aligned with
/// ParameterSet::trainable().
template <typename T>
std::vector<BasicTensor<T>> backward(const ParameterSet<T>& params, const NetworkSpec& spec,
                                     const ForwardTrace<T>& trace, const BasicTensor<T>& grad_logits);

template <typename T>
struct LossAndGradients {
    T loss;
    std::vector<BasicTensor<T>> grads;
};

/// Train-mode forward, softmax cross-entropy against `labels`, backward.
template <typename T>
LossAndGradients<T> loss_and_gradients(ParameterSet<T>& params, const NetworkSpec& spec,
                                       const BranchInputs<T>& inputs, const std::vector<int>& labels,
                                       std::mt19937_64& rng);

// ---------------------------------------------------------------- training

struct Minibatch {
    BranchInputs<float> inputs;
    std::vector<int> labels;  // 0 background, 1 ICV

    std::size_t size() const { return labels.size(); }
};

class MinibatchSource {
public:
    virtual ~MinibatchSource() = default;
    virtual std::optional<Minibatch> next() = 0;
};

struct EpochResult {
    double mean_loss = 0.0;
    std::size_t samples = 0;
    std::size_t updates = 0;
    std::size_t rejected_updates = 0;
};

/// One pass over `source`: one Adam update per minibatch. A trailing
/// batch of a single sample is skipped because batch norm needs two.
/// Throws NumericError on a non-finite loss, DataError on an empty source.
EpochResult train_epoch(ParameterSet<float>& params, const NetworkSpec& spec, MinibatchSource& source,
                        AdamState<float>& adam, std::mt19937_64& rng);

extern template struct ParameterSet<float>;
extern template struct ParameterSet<double>;

}  // namespace icvseg
