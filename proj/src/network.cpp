#include "icvseg/network.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "icvseg/error.hpp"

namespace icvseg {

namespace {

NetworkSpec uniform_spec(std::array<std::size_t, kBranches> patches, BranchSpec branch, double dropout) {
    NetworkSpec spec;
    spec.patch_sizes = patches;
    spec.branches = {branch, branch, branch};
    spec.dropout_rate = dropout;
    return spec;
}

// Extent after each conv layer; stops early (and reports zero) once the
// kernel no longer fits.
std::array<std::size_t, kConvPerBranch> conv_extents(const NetworkSpec& spec, std::size_t branch) {
    std::array<std::size_t, kConvPerBranch> out{};
    std::size_t extent = spec.patch_sizes[branch];
    for (std::size_t l = 0; l < kConvPerBranch; ++l) {
        const ConvLayerSpec& c = spec.branches[branch].conv[l];
        if (extent == 0 || c.kernel == 0 || c.stride == 0 || extent < c.kernel) return out;
        extent = (extent - c.kernel) / c.stride + 1;
        out[l] = extent;
    }
    return out;
}

std::size_t in_channels(const NetworkSpec& spec, std::size_t branch, std::size_t layer) {
    return layer == 0 ? 1 : spec.branches[branch].conv[layer - 1].channels;
}

std::size_t joint_width(const NetworkSpec& spec) {
    std::size_t width = 0;
    for (const auto& b : spec.branches) width += b.dense.back();
    return width;
}

template <typename T>
BasicTensor<T> concat_columns(const std::array<BasicTensor<T>, kBranches>& parts) {
    const std::size_t n = parts[0].dim(0);
    std::size_t width = 0;
    for (const auto& p : parts) width += p.dim(1);
    BasicTensor<T> out({n, width});
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t col = 0;
        for (const auto& p : parts) {
            const std::size_t w = p.dim(1);
            std::copy_n(p.data().data() + r * w, w, out.data().data() + r * width + col);
            col += w;
        }
    }
    return out;
}

template <typename T>
void check_inputs(const NetworkSpec& spec, const BranchInputs<T>& inputs) {
    const std::size_t n = inputs[0].rank() == 4 ? inputs[0].dim(0) : 0;
    for (std::size_t b = 0; b < kBranches; ++b) {
        const std::size_t s = spec.patch_sizes[b];
        const Shape& shape = inputs[b].shape();
        if (shape.size() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s || shape[0] != n || n == 0)
            throw std::invalid_argument("branch " + std::to_string(b) + " expects patches [N,1," + std::to_string(s) +
                                        "," + std::to_string(s) + "], got " + shape_string(shape));
    }
}

// Shared forward pass. `mutable_params` is only touched in train mode.
template <typename T>
BasicTensor<T> run_forward(const ParameterSet<T>& params, ParameterSet<T>* mutable_params, const NetworkSpec& spec,
                           const BranchInputs<T>& inputs, Mode mode, std::mt19937_64* rng, ForwardTrace<T>* trace) {
    check_inputs(spec, inputs);
    if (params.layers.size() != kLayerCount)
        throw std::invalid_argument("parameter set has " + std::to_string(params.layers.size()) + " layers, expected " +
                                    std::to_string(kLayerCount));
    const std::size_t n = inputs[0].dim(0);
    std::array<BasicTensor<T>, kBranches> branch_out;
    for (std::size_t b = 0; b < kBranches; ++b) {
        BranchTrace<T>* bt = trace ? &trace->branches[b] : nullptr;
        BasicTensor<T> x = inputs[b];
        for (std::size_t l = 0; l < kConvPerBranch; ++l) {
            const std::size_t idx = ParameterSet<T>::layer_index(b, l);
            const LayerParams<T>& lp = params.layers[idx];
            BasicTensor<T> z = conv2d_forward(x, lp, spec.branches[b].conv[l].stride, bt ? &bt->conv[l] : nullptr);
            BasicTensor<T> zn;
            if (mode == Mode::train) {
                zn = batch_norm_forward(z, *mutable_params->layers[idx].norm, Mode::train, spec.bn_momentum,
                                        spec.bn_epsilon, bt ? &bt->norm[l] : nullptr);
            } else {
                zn = batch_norm_infer(z, *lp.norm, spec.bn_epsilon);
            }
            x = relu_forward(zn);
            if (bt) bt->pre_activation[l] = std::move(zn);
        }
        BasicTensor<T> h = x.reshaped({n, x.size() / n});
        for (std::size_t d = 0; d < kDensePerBranch; ++d) {
            const LayerParams<T>& lp = params.layers[ParameterSet<T>::layer_index(b, kConvPerBranch + d)];
            BasicTensor<T> a = dense_forward(h, lp);
            if (bt) bt->dense_input[d] = h;
            BasicTensor<T> r = relu_forward(a);
            if (mode == Mode::train) {
                h = dropout_forward(r, spec.dropout_rate, Mode::train, *rng, bt ? &bt->dropout_mask[d] : nullptr);
            } else {
                h = std::move(r);
            }
            if (bt) {
                bt->dense_pre_activation[d] = std::move(a);
            }
        }
        branch_out[b] = std::move(h);
    }
    BasicTensor<T> joint = concat_columns(branch_out);
    BasicTensor<T> probs = softmax_rows(dense_forward(joint, params.layers[ParameterSet<T>::joint_index()]));
    if (trace) {
        trace->joint_input = std::move(joint);
        trace->probs = probs;
    }
    return probs;
}

}  // namespace

NetworkSpec NetworkSpec::full_scale() {
    BranchSpec branch;
    branch.conv = {ConvLayerSpec{24, 5, 2}, ConvLayerSpec{32, 5, 2}, ConvLayerSpec{48, 5, 2}};
    branch.dense = {256, 64};
    return uniform_spec({51, 101, 151}, branch, 0.5);
}

NetworkSpec NetworkSpec::desk() {
    NetworkSpec spec;
    spec.patch_sizes = {13, 25, 37};
    spec.branches[0].conv = {ConvLayerSpec{8, 3, 1}, ConvLayerSpec{16, 3, 2}, ConvLayerSpec{16, 3, 1}};
    spec.branches[1].conv = {ConvLayerSpec{8, 5, 2}, ConvLayerSpec{16, 3, 2}, ConvLayerSpec{16, 3, 1}};
    spec.branches[2].conv = {ConvLayerSpec{8, 5, 2}, ConvLayerSpec{16, 3, 2}, ConvLayerSpec{16, 3, 2}};
    for (auto& b : spec.branches) b.dense = {64, 32};
    spec.dropout_rate = 0.3;
    return spec;
}

NetworkSpec NetworkSpec::tiny() {
    NetworkSpec spec;
    spec.patch_sizes = {11, 15, 19};
    spec.branches[0].conv = {ConvLayerSpec{2, 3, 2}, ConvLayerSpec{3, 3, 1}, ConvLayerSpec{3, 2, 1}};
    spec.branches[1].conv = {ConvLayerSpec{2, 3, 2}, ConvLayerSpec{3, 3, 2}, ConvLayerSpec{3, 2, 1}};
    spec.branches[2].conv = {ConvLayerSpec{2, 5, 2}, ConvLayerSpec{3, 3, 2}, ConvLayerSpec{3, 2, 1}};
    for (auto& b : spec.branches) b.dense = {6, 4};
    spec.dropout_rate = 0.5;
    return spec;
}

std::vector<std::string> NetworkSpec::shape_trace() const {
    std::vector<std::string> lines;
    for (std::size_t b = 0; b < kBranches; ++b) {
        std::size_t extent = patch_sizes[b];
        std::size_t channels = 1;
        for (std::size_t l = 0; l < kConvPerBranch; ++l) {
            const ConvLayerSpec& c = branches[b].conv[l];
            std::ostringstream os;
            os << "branch " << b << " conv" << l + 1 << ": " << channels << "x" << extent << "x" << extent << " -> ";
            if (extent == 0 || c.kernel == 0 || c.stride == 0 || extent < c.kernel) {
                os << "invalid (kernel " << c.kernel << ", stride " << c.stride << ")";
                lines.push_back(os.str());
                extent = 0;
                continue;
            }
            extent = (extent - c.kernel) / c.stride + 1;
            channels = c.channels;
            os << channels << "x" << extent << "x" << extent;
            lines.push_back(os.str());
        }
        std::size_t width = channels * extent * extent;
        for (std::size_t d = 0; d < kDensePerBranch; ++d) {
            std::ostringstream os;
            os << "branch " << b << " dense" << d + 1 << ": " << width << " -> " << branches[b].dense[d];
            width = branches[b].dense[d];
            lines.push_back(os.str());
        }
    }
    std::ostringstream os;
    os << "joint dense: " << joint_width(*this) << " -> " << kClasses;
    lines.push_back(os.str());
    return lines;
}

void NetworkSpec::validate() const {
    std::vector<std::string> problems;
    for (std::size_t b = 0; b < kBranches; ++b) {
        const std::size_t s = patch_sizes[b];
        if (s == 0 || s % 2 == 0) problems.push_back("patch size " + std::to_string(s) + " must be odd and positive");
        if (b > 0 && s <= patch_sizes[b - 1]) problems.push_back("patch sizes must be strictly increasing");
        for (const auto& c : branches[b].conv)
            if (c.channels == 0 || c.kernel == 0 || c.stride == 0)
                problems.push_back("branch " + std::to_string(b) + " has a conv layer with a zero extent");
        for (std::size_t w : branches[b].dense)
            if (w == 0) problems.push_back("branch " + std::to_string(b) + " has a zero-width dense layer");
        if (final_extent(b) == 0)
            problems.push_back("branch " + std::to_string(b) + " conv chain collapses below 1x1");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) problems.push_back("dropout rate must lie in [0,1)");
    if (!(bn_epsilon > 0.0)) problems.push_back("batch norm epsilon must be positive");
    if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) problems.push_back("batch norm momentum must lie in [0,1]");
    if (problems.empty()) return;
    std::string msg = "invalid network spec:";
    for (const auto& p : problems) msg += "\n  " + p;
    msg += "\nshape trace:";
    for (const auto& line : shape_trace()) msg += "\n  " + line;
    throw ConfigError(msg);
}

std::size_t NetworkSpec::final_extent(std::size_t branch) const {
    return conv_extents(*this, branch).back();
}

std::size_t NetworkSpec::branch_feature_size(std::size_t branch) const {
    const std::size_t e = final_extent(branch);
    return branches[branch].conv.back().channels * e * e;
}

std::size_t parameter_count(const NetworkSpec& spec) {
    std::size_t total = 0;
    for (std::size_t b = 0; b < kBranches; ++b) {
        for (std::size_t l = 0; l < kConvPerBranch; ++l) {
            const ConvLayerSpec& c = spec.branches[b].conv[l];
            // kernels + bias + gamma + beta
            total += c.channels * in_channels(spec, b, l) * c.kernel * c.kernel + 3 * c.channels;
        }
        std::size_t width = spec.branch_feature_size(b);
        for (std::size_t d : spec.branches[b].dense) {
            total += d * width + d;
            width = d;
        }
    }
    return total + kClasses * joint_width(spec) + kClasses;
}

template <typename T>
std::vector<BasicTensor<T>*> ParameterSet<T>::trainable() {
    std::vector<BasicTensor<T>*> out;
    for (auto& layer : layers) {
        out.push_back(&layer.weights);
        out.push_back(&layer.bias);
        if (layer.norm) {
            out.push_back(&layer.norm->gamma);
            out.push_back(&layer.norm->beta);
        }
    }
    return out;
}

template <typename T>
std::vector<const BasicTensor<T>*> ParameterSet<T>::trainable() const {
    std::vector<const BasicTensor<T>*> out;
    for (const auto& p : const_cast<ParameterSet*>(this)->trainable()) out.push_back(p);
    return out;
}

template <typename T>
std::size_t ParameterSet<T>::trainable_count() const {
    std::size_t n = 0;
    for (const auto* p : trainable()) n += p->size();
    return n;
}

template <typename T>
template <typename U>
ParameterSet<U> ParameterSet<T>::cast() const {
    ParameterSet<U> out;
    for (const auto& layer : layers) {
        LayerParams<U> l;
        l.weights = layer.weights.template cast<U>();
        l.bias = layer.bias.template cast<U>();
        if (layer.norm) {
            BatchNormParams<U> n;
            n.gamma = layer.norm->gamma.template cast<U>();
            n.beta = layer.norm->beta.template cast<U>();
            n.running_mean = layer.norm->running_mean.template cast<U>();
            n.running_var = layer.norm->running_var.template cast<U>();
            n.stats_ready = layer.norm->stats_ready;
            l.norm = std::move(n);
        }
        out.layers.push_back(std::move(l));
    }
    return out;
}

template <typename T>
bool ParameterSet<T>::operator==(const ParameterSet& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& a = layers[i];
        const auto& b = other.layers[i];
        if (a.weights != b.weights || a.bias != b.bias || a.norm.has_value() != b.norm.has_value()) return false;
        if (a.norm && (a.norm->gamma != b.norm->gamma || a.norm->beta != b.norm->beta ||
                       a.norm->running_mean != b.norm->running_mean || a.norm->running_var != b.norm->running_var))
            return false;
    }
    return true;
}

template <typename T>
ParameterSet<T> init_params(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    auto he_tensor = [&rng](Shape shape, std::size_t fan_in) {
        BasicTensor<T> t(std::move(shape));
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = T(dist(rng));
        return t;
    };
    ParameterSet<T> params;
    for (std::size_t b = 0; b < kBranches; ++b) {
        for (std::size_t l = 0; l < kConvPerBranch; ++l) {
            const ConvLayerSpec& c = spec.branches[b].conv[l];
            const std::size_t cin = in_channels(spec, b, l);
            LayerParams<T> lp;
            lp.weights = he_tensor({c.channels, cin, c.kernel, c.kernel}, cin * c.kernel * c.kernel);
            lp.bias = BasicTensor<T>({c.channels});
            lp.norm = BatchNormParams<T>::identity(c.channels);
            params.layers.push_back(std::move(lp));
        }
        std::size_t width = spec.branch_feature_size(b);
        for (std::size_t d : spec.branches[b].dense) {
            LayerParams<T> lp;
            lp.weights = he_tensor({d, width}, width);
            lp.bias = BasicTensor<T>({d});
            params.layers.push_back(std::move(lp));
            width = d;
        }
    }
    LayerParams<T> joint;
    joint.weights = he_tensor({kClasses, joint_width(spec)}, joint_width(spec));
    joint.bias = BasicTensor<T>({kClasses});
    params.layers.push_back(std::move(joint));
    return params;
}

template <typename T>
void check_params(const ParameterSet<T>& params, const NetworkSpec& spec) {
    spec.validate();
    if (params.layers.size() != kLayerCount)
        throw std::invalid_argument("parameter set has " + std::to_string(params.layers.size()) + " layers, spec needs " +
                                    std::to_string(kLayerCount));
    auto expect = [&](std::size_t idx, Shape weights, bool norm) {
        const LayerParams<T>& lp = params.layers[idx];
        const std::size_t out = weights[0];
        const bool ok = lp.weights.shape() == weights && lp.bias.shape() == Shape{out} &&
                        lp.norm.has_value() == norm &&
                        (!norm || (lp.norm->gamma.size() == out && lp.norm->beta.size() == out &&
                                   lp.norm->running_mean.size() == out && lp.norm->running_var.size() == out));
        if (!ok)
            throw std::invalid_argument("layer " + std::to_string(idx) + " weights " +
                                        shape_string(lp.weights.shape()) + " do not match spec " +
                                        shape_string(weights));
    };
    for (std::size_t b = 0; b < kBranches; ++b) {
        for (std::size_t l = 0; l < kConvPerBranch; ++l) {
            const ConvLayerSpec& c = spec.branches[b].conv[l];
            expect(ParameterSet<T>::layer_index(b, l), {c.channels, in_channels(spec, b, l), c.kernel, c.kernel}, true);
        }
        std::size_t width = spec.branch_feature_size(b);
        for (std::size_t d = 0; d < kDensePerBranch; ++d) {
            const std::size_t w = spec.branches[b].dense[d];
            expect(ParameterSet<T>::layer_index(b, kConvPerBranch + d), {w, width}, false);
            width = w;
        }
    }
    expect(ParameterSet<T>::joint_index(), {kClasses, joint_width(spec)}, false);
}

template <typename T>
BasicTensor<T> forward(ParameterSet<T>& params, const NetworkSpec& spec, const BranchInputs<T>& inputs, Mode mode,
                       std::mt19937_64& rng, ForwardTrace<T>* trace) {
    return run_forward(params, &params, spec, inputs, mode, &rng, trace);
}

template <typename T>
BasicTensor<T> predict(const ParameterSet<T>& params, const NetworkSpec& spec, const BranchInputs<T>& inputs) {
    return run_forward<T>(params, nullptr, spec, inputs, Mode::infer, nullptr, nullptr);
}

template <typename T>
std::vector<BasicTensor<T>> backward(const ParameterSet<T>& params, const NetworkSpec& spec,
                                     const ForwardTrace<T>& trace, const BasicTensor<T>& grad_logits) {
    if (trace.joint_input.empty()) throw std::logic_error("backward called without a train-mode forward trace");
    const std::size_t n = trace.joint_input.dim(0);
    // Per-layer gradients collected in traversal order, flattened at the end.
    std::vector<std::vector<BasicTensor<T>>> per_layer(kLayerCount);

    DenseGrads<T> jg = dense_backward(grad_logits, trace.joint_input, params.layers[ParameterSet<T>::joint_index()]);
    per_layer[ParameterSet<T>::joint_index()] = {std::move(jg.weights), std::move(jg.bias)};

    std::size_t col = 0;
    for (std::size_t b = 0; b < kBranches; ++b) {
        const BranchTrace<T>& bt = trace.branches[b];
        const std::size_t width = spec.branches[b].dense.back();
        BasicTensor<T> g({n, width});
        for (std::size_t r = 0; r < n; ++r)
            std::copy_n(jg.input.data().data() + r * jg.input.dim(1) + col, width, g.data().data() + r * width);
        col += width;

        for (std::size_t d = kDensePerBranch; d-- > 0;) {
            const std::size_t idx = ParameterSet<T>::layer_index(b, kConvPerBranch + d);
            g = relu_backward(dropout_backward(g, bt.dropout_mask[d]), bt.dense_pre_activation[d]);
            DenseGrads<T> dg = dense_backward(g, bt.dense_input[d], params.layers[idx]);
            per_layer[idx] = {std::move(dg.weights), std::move(dg.bias)};
            g = std::move(dg.input);
        }
        g = g.reshaped(bt.pre_activation.back().shape());
        for (std::size_t l = kConvPerBranch; l-- > 0;) {
            const std::size_t idx = ParameterSet<T>::layer_index(b, l);
            const LayerParams<T>& lp = params.layers[idx];
            g = relu_backward(g, bt.pre_activation[l]);
            BatchNormGrads<T> ng = batch_norm_backward(g, bt.norm[l], *lp.norm);
            ConvGrads<T> cg = conv2d_backward(ng.input, bt.conv[l], lp, spec.branches[b].conv[l].stride);
            per_layer[idx] = {std::move(cg.weights), std::move(cg.bias), std::move(ng.gamma), std::move(ng.beta)};
            g = std::move(cg.input);
        }
    }
    std::vector<BasicTensor<T>> grads;
    for (auto& layer : per_layer)
        for (auto& t : layer) grads.push_back(std::move(t));
    return grads;
}

template <typename T>
LossAndGradients<T> loss_and_gradients(ParameterSet<T>& params, const NetworkSpec& spec,
                                       const BranchInputs<T>& inputs, const std::vector<int>& labels,
                                       std::mt19937_64& rng) {
    ForwardTrace<T> trace;
    BasicTensor<T> probs = forward(params, spec, inputs, Mode::train, rng, &trace);
    if (labels.size() != probs.dim(0))
        throw std::invalid_argument("got " + std::to_string(labels.size()) + " labels for a batch of " +
                                    std::to_string(probs.dim(0)));
    LossResult<T> ce = cross_entropy(probs, one_hot<T>(labels, kClasses));
    return {ce.loss, backward(params, spec, trace, ce.grad_logits)};
}

EpochResult train_epoch(ParameterSet<float>& params, const NetworkSpec& spec, MinibatchSource& source,
                        AdamState<float>& adam, std::mt19937_64& rng) {
    EpochResult result;
    double loss_sum = 0.0;
    bool saw_batch = false;
    auto slots = params.trainable();
    while (auto batch = source.next()) {
        saw_batch = true;
        if (batch->size() < 2) continue;
        LossAndGradients<float> lg = loss_and_gradients(params, spec, batch->inputs, batch->labels, rng);
        if (!std::isfinite(lg.loss))
            throw NumericError("non-finite training loss after " + std::to_string(result.updates) + " updates");
        AdamStepResult step = adam_step<float>(slots, lg.grads, adam);
        if (step.applied) {
            ++result.updates;
        } else {
            ++result.rejected_updates;
        }
        loss_sum += double(lg.loss) * double(batch->size());
        result.samples += batch->size();
    }
    if (!saw_batch) throw DataError("train_epoch: empty sample stream");
    if (result.samples > 0) result.mean_loss = loss_sum / double(result.samples);
    return result;
}

template struct ParameterSet<float>;
template struct ParameterSet<double>;
template ParameterSet<double> ParameterSet<float>::cast<double>() const;
template ParameterSet<float> ParameterSet<double>::cast<float>() const;
template ParameterSet<float> init_params<float>(const NetworkSpec&, std::uint64_t);
template ParameterSet<double> init_params<double>(const NetworkSpec&, std::uint64_t);

#define ICVSEG_INSTANTIATE(T)                                                                                   \
    template void check_params(const ParameterSet<T>&, const NetworkSpec&);                                    \
    template BasicTensor<T> forward(ParameterSet<T>&, const NetworkSpec&, const BranchInputs<T>&, Mode,        \
                                    std::mt19937_64&, ForwardTrace<T>*);                                        \
    template BasicTensor<T> predict(const ParameterSet<T>&, const NetworkSpec&, const BranchInputs<T>&);        \
    template std::vector<BasicTensor<T>> backward(const ParameterSet<T>&, const NetworkSpec&,                   \
                                                  const ForwardTrace<T>&, const BasicTensor<T>&);               \
    template LossAndGradients<T> loss_and_gradients(ParameterSet<T>&, const NetworkSpec&, const BranchInputs<T>&, \
                                                    const std::vector<int>&, std::mt19937_64&);

ICVSEG_INSTANTIATE(float)
ICVSEG_INSTANTIATE(double)

#undef ICVSEG_INSTANTIATE

}  // namespace icvseg
