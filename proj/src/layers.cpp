#include "icvseg/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "gemm.hpp"

namespace icvseg {

namespace {

struct ConvGeometry {
    std::size_t batch, in_channels, height, width;
    std::size_t out_channels, kernel, out_height, out_width;

    std::size_t patch_len() const { return in_channels * kernel * kernel; }
    std::size_t positions() const { return out_height * out_width; }
};

template <typename T>
ConvGeometry conv_geometry(const Shape& input_shape, const LayerParams<T>& params, std::size_t stride) {
    if (stride == 0) throw std::invalid_argument("conv2d stride must be positive");
    if (input_shape.size() != 3 && input_shape.size() != 4)
        throw std::invalid_argument("conv2d expects [C,H,W] or [N,C,H,W] input, got " + shape_string(input_shape));
    const Shape& ks = params.weights.shape();
    if (ks.size() != 4 || ks[2] != ks[3])
        throw std::invalid_argument("conv2d expects square kernels [C_out,C_in,k,k], got " + shape_string(ks));
    const std::size_t off = input_shape.size() == 4 ? 1 : 0;
    ConvGeometry g{};
    g.batch = off ? input_shape[0] : 1;
    g.in_channels = input_shape[off];
    g.height = input_shape[off + 1];
    g.width = input_shape[off + 2];
    if (g.in_channels != ks[1])
        throw std::invalid_argument("conv2d channel mismatch: input " + shape_string(input_shape) + " vs kernel " +
                                    shape_string(ks));
    if (params.bias.size() != ks[0])
        throw std::invalid_argument("conv2d bias " + shape_string(params.bias.shape()) + " does not match kernel " +
                                    shape_string(ks));
    g.out_channels = ks[0];
    g.kernel = ks[2];
    g.out_height = conv_output_extent(g.height, g.kernel, stride);
    g.out_width = conv_output_extent(g.width, g.kernel, stride);
    return g;
}

Shape conv_output_shape(const Shape& input_shape, const ConvGeometry& g) {
    if (input_shape.size() == 4) return {g.batch, g.out_channels, g.out_height, g.out_width};
    return {g.out_channels, g.out_height, g.out_width};
}

template <typename T>
void im2col(const T* input, const ConvGeometry& g, std::size_t stride, T* columns) {
    const std::size_t cols = g.batch * g.positions();
    const std::size_t plane = g.height * g.width;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                T* row = columns + ((c * g.kernel + ky) * g.kernel + kx) * cols;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    const T* src = input + (n * g.in_channels + c) * plane;
                    T* dst = row + n * g.positions();
                    for (std::size_t oy = 0; oy < g.out_height; ++oy) {
                        const T* line = src + (oy * stride + ky) * g.width + kx;
                        if (stride == 1) {
                            std::copy(line, line + g.out_width, dst);
                        } else {
                            for (std::size_t ox = 0; ox < g.out_width; ++ox) dst[ox] = line[ox * stride];
                        }
                        dst += g.out_width;
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* columns, const ConvGeometry& g, std::size_t stride, T* input_grad) {
    const std::size_t cols = g.batch * g.positions();
    const std::size_t plane = g.height * g.width;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const T* row = columns + ((c * g.kernel + ky) * g.kernel + kx) * cols;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    T* dst = input_grad + (n * g.in_channels + c) * plane;
                    const T* src = row + n * g.positions();
                    for (std::size_t oy = 0; oy < g.out_height; ++oy) {
                        T* line = dst + (oy * stride + ky) * g.width + kx;
                        for (std::size_t ox = 0; ox < g.out_width; ++ox) line[ox * stride] += src[ox];
                        src += g.out_width;
                    }
                }
            }
        }
    }
}

struct ChannelLayout {
    std::size_t batch, channels, inner;
};

ChannelLayout channel_layout(const Shape& shape) {
    if (shape.size() < 2)
        throw std::invalid_argument("batch norm expects [N,C,...] input, got " + shape_string(shape));
    ChannelLayout l{shape[0], shape[1], 1};
    for (std::size_t i = 2; i < shape.size(); ++i) l.inner *= shape[i];
    return l;
}

}  // namespace

std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride) {
    if (kernel == 0 || stride == 0) throw std::invalid_argument("kernel and stride must be positive");
    if (extent < kernel)
        throw std::invalid_argument("conv2d input extent " + std::to_string(extent) + " smaller than kernel " +
                                    std::to_string(kernel));
    return (extent - kernel) / stride + 1;
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(std::size_t channels) {
    BatchNormParams p;
    p.gamma = BasicTensor<T>({channels}, T{1});
    p.beta = BasicTensor<T>({channels}, T{0});
    p.running_mean = BasicTensor<T>({channels}, T{0});
    p.running_var = BasicTensor<T>({channels}, T{1});
    return p;
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const LayerParams<T>& params, std::size_t stride,
                              ConvCache<T>* cache) {
    const ConvGeometry g = conv_geometry(input.shape(), params, stride);
    const std::size_t cols = g.batch * g.positions();
    // Inference reuses per-thread buffers; resize only touches new elements.
    thread_local std::vector<T> scratch_columns, scratch_product;
    std::vector<T> owned_columns;
    std::vector<T>& columns = cache ? owned_columns : scratch_columns;
    columns.resize(g.patch_len() * cols);
    im2col(input.data().data(), g, stride, columns.data());

    std::vector<T>& product = scratch_product;
    product.resize(g.out_channels * cols);
    detail::gemm(false, false, g.out_channels, cols, g.patch_len(), T{1}, params.weights.data().data(),
                 g.patch_len(), columns.data(), cols, T{0}, product.data(), cols);

    BasicTensor<T> out(conv_output_shape(input.shape(), g));
    T* dst = out.data().data();
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t co = 0; co < g.out_channels; ++co) {
            const T* src = product.data() + co * cols + n * g.positions();
            const T b = params.bias[co];
            for (std::size_t p = 0; p < g.positions(); ++p) *dst++ = src[p] + b;
        }
    }
    if (cache) {
        cache->input = input;
        cache->columns = std::move(columns);
    }
    return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& grad_out, const ConvCache<T>& cache, const LayerParams<T>& params,
                             std::size_t stride) {
    if (cache.input.empty()) throw std::logic_error("conv2d_backward called without a forward cache");
    const ConvGeometry g = conv_geometry(cache.input.shape(), params, stride);
    const Shape expected = conv_output_shape(cache.input.shape(), g);
    if (grad_out.shape() != expected)
        throw std::invalid_argument("conv2d_backward gradient " + shape_string(grad_out.shape()) +
                                    " does not match forward output " + shape_string(expected));
    const std::size_t cols = g.batch * g.positions();
    if (cache.columns.size() != g.patch_len() * cols)
        throw std::logic_error("conv2d_backward cache does not match the layer geometry");

    // [N,C_out,P] -> [C_out,N*P]
    std::vector<T> grad_mat(g.out_channels * cols);
    const T* src = grad_out.data().data();
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t co = 0; co < g.out_channels; ++co) {
            T* dst = grad_mat.data() + co * cols + n * g.positions();
            std::copy(src, src + g.positions(), dst);
            src += g.positions();
        }

    ConvGrads<T> grads;
    grads.bias = BasicTensor<T>({g.out_channels});
    for (std::size_t co = 0; co < g.out_channels; ++co) {
        T sum{0};
        const T* row = grad_mat.data() + co * cols;
        for (std::size_t i = 0; i < cols; ++i) sum += row[i];
        grads.bias[co] = sum;
    }

    grads.weights = BasicTensor<T>(params.weights.shape());
    detail::gemm(false, true, g.out_channels, g.patch_len(), cols, T{1}, grad_mat.data(), cols,
                 cache.columns.data(), cols, T{0}, grads.weights.data().data(), g.patch_len());

    std::vector<T> grad_cols(g.patch_len() * cols);
    detail::gemm(true, false, g.patch_len(), cols, g.out_channels, T{1}, params.weights.data().data(),
                 g.patch_len(), grad_mat.data(), cols, T{0}, grad_cols.data(), cols);
    grads.input = BasicTensor<T>(cache.input.shape());
    col2im(grad_cols.data(), g, stride, grads.input.data().data());
    return grads;
}

template <typename T>
BasicTensor<T> batch_norm_forward(const BasicTensor<T>& input, BatchNormParams<T>& params, Mode mode,
                                  double momentum, double epsilon, BatchNormCache<T>* cache) {
    const ChannelLayout l = channel_layout(input.shape());
    if (params.gamma.size() != l.channels || params.beta.size() != l.channels ||
        params.running_mean.size() != l.channels || params.running_var.size() != l.channels)
        throw std::invalid_argument("batch norm parameters do not match " + std::to_string(l.channels) +
                                    " channels of input " + shape_string(input.shape()));
    const std::size_t count = l.batch * l.inner;
    BasicTensor<T> out(input.shape());
    const T* x = input.data().data();
    T* y = out.data().data();

    if (mode == Mode::infer) return batch_norm_infer(input, std::as_const(params), epsilon);

    if (count < 2)
        throw std::invalid_argument("batch norm train mode needs at least 2 values per channel, input " +
                                    shape_string(input.shape()));
    BasicTensor<T> normalized(input.shape());
    std::vector<T> inv_std(l.channels);
    for (std::size_t c = 0; c < l.channels; ++c) {
        double sum = 0.0;
        for (std::size_t n = 0; n < l.batch; ++n) {
            const T* p = x + (n * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) sum += p[i];
        }
        const double mean = sum / double(count);
        double sq = 0.0;
        for (std::size_t n = 0; n < l.batch; ++n) {
            const T* p = x + (n * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) sq += (p[i] - mean) * (p[i] - mean);
        }
        const double var = sq / double(count);
        const double istd = 1.0 / std::sqrt(var + epsilon);
        inv_std[c] = T(istd);
        for (std::size_t n = 0; n < l.batch; ++n) {
            const std::size_t base = (n * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) {
                const double xhat = (x[base + i] - mean) * istd;
                normalized[base + i] = T(xhat);
                y[base + i] = T(params.gamma[c] * xhat + params.beta[c]);
            }
        }
        const double unbiased = sq / double(count - 1);
        params.running_mean[c] = T((1.0 - momentum) * params.running_mean[c] + momentum * mean);
        params.running_var[c] = T((1.0 - momentum) * params.running_var[c] + momentum * unbiased);
    }
    params.stats_ready = true;
    if (cache) {
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

template <typename T>
BasicTensor<T> batch_norm_infer(const BasicTensor<T>& input, const BatchNormParams<T>& params, double epsilon) {
    const ChannelLayout l = channel_layout(input.shape());
    if (params.gamma.size() != l.channels || params.running_var.size() != l.channels)
        throw std::invalid_argument("batch norm parameters do not match " + std::to_string(l.channels) +
                                    " channels of input " + shape_string(input.shape()));
    if (!params.stats_ready)
        throw std::logic_error("batch norm in infer mode before running statistics were estimated or loaded");
    BasicTensor<T> out(input.shape());
    const T* x = input.data().data();
    T* y = out.data().data();
    for (std::size_t c = 0; c < l.channels; ++c) {
        const double scale = params.gamma[c] / std::sqrt(double(params.running_var[c]) + epsilon);
        const double shift = params.beta[c] - scale * params.running_mean[c];
        for (std::size_t n = 0; n < l.batch; ++n) {
            const std::size_t base = (n * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) y[base + i] = T(scale * x[base + i] + shift);
        }
    }
    return out;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>& grad_out, const BatchNormCache<T>& cache,
                                      const BatchNormParams<T>& params) {
    if (cache.normalized.empty()) throw std::logic_error("batch_norm_backward called without a forward cache");
    if (grad_out.shape() != cache.normalized.shape())
        throw std::invalid_argument("batch_norm_backward gradient " + shape_string(grad_out.shape()) +
                                    " does not match forward output " + shape_string(cache.normalized.shape()));
    const ChannelLayout l = channel_layout(grad_out.shape());
    const double count = double(l.batch * l.inner);
    BatchNormGrads<T> grads;
    grads.input = BasicTensor<T>(grad_out.shape());
    grads.gamma = BasicTensor<T>({l.channels});
    grads.beta = BasicTensor<T>({l.channels});
    const T* dy = grad_out.data().data();
    const T* xhat = cache.normalized.data().data();
    T* dx = grads.input.data().data();
    for (std::size_t c = 0; c < l.channels; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t n = 0; n < l.batch; ++n) {
            const std::size_t base = (n * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) {
                sum_dy += dy[base + i];
                sum_dy_xhat += double(dy[base + i]) * xhat[base + i];
            }
        }
        grads.beta[c] = T(sum_dy);
        grads.gamma[c] = T(sum_dy_xhat);
        const double scale = double(params.gamma[c]) * cache.inv_std[c] / count;
        for (std::size_t n = 0; n < l.batch; ++n) {
            const std::size_t base = (n * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i)
                dx[base + i] = T(scale * (count * dy[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat));
        }
    }
    return grads;
}

template <typename T>
BasicTensor<T> dropout_forward(const BasicTensor<T>& input, double rate, Mode mode, std::mt19937_64& rng,
                               std::vector<T>* mask) {
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must lie in [0,1)");
    if (mode == Mode::infer || rate == 0.0) {
        if (mask) mask->assign(input.size(), T{1});
        return input;
    }
    const T keep_scale = T(1.0 / (1.0 - rate));
    std::bernoulli_distribution drop(rate);
    std::vector<T> m(input.size());
    BasicTensor<T> out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) {
        m[i] = drop(rng) ? T{0} : keep_scale;
        out[i] = input[i] * m[i];
    }
    if (mask) *mask = std::move(m);
    return out;
}

template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_out, const std::vector<T>& mask) {
    if (mask.size() != grad_out.size()) throw std::invalid_argument("dropout mask does not match gradient");
    BasicTensor<T> out(grad_out.shape());
    for (std::size_t i = 0; i < mask.size(); ++i) out[i] = grad_out[i] * mask[i];
    return out;
}

template <typename T>
BasicTensor<T> dense_forward(const BasicTensor<T>& input, const LayerParams<T>& params) {
    const Shape& ws = params.weights.shape();
    if (ws.size() != 2) throw std::invalid_argument("dense weights must be [D_out,D_in], got " + shape_string(ws));
    if (input.rank() != 2 || input.dim(1) != ws[1])
        throw std::invalid_argument("dense input " + shape_string(input.shape()) + " does not match weights " +
                                    shape_string(ws));
    if (params.bias.size() != ws[0])
        throw std::invalid_argument("dense bias " + shape_string(params.bias.shape()) + " does not match weights " +
                                    shape_string(ws));
    const std::size_t n = input.dim(0), d_in = ws[1], d_out = ws[0];
    BasicTensor<T> out({n, d_out});
    for (std::size_t r = 0; r < n; ++r)
        std::copy(params.bias.data().begin(), params.bias.data().end(), out.data().begin() + r * d_out);
    detail::gemm(false, true, n, d_out, d_in, T{1}, input.data().data(), d_in, params.weights.data().data(), d_in,
                 T{1}, out.data().data(), d_out);
    return out;
}

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                             const LayerParams<T>& params) {
    const Shape& ws = params.weights.shape();
    const std::size_t n = input.dim(0), d_in = ws[1], d_out = ws[0];
    if (grad_out.shape() != Shape{n, d_out})
        throw std::invalid_argument("dense_backward gradient " + shape_string(grad_out.shape()) +
                                    " does not match output [" + std::to_string(n) + "x" + std::to_string(d_out) + "]");
    DenseGrads<T> grads;
    grads.input = BasicTensor<T>({n, d_in});
    grads.weights = BasicTensor<T>(ws);
    grads.bias = BasicTensor<T>({d_out});
    detail::gemm(false, false, n, d_in, d_out, T{1}, grad_out.data().data(), d_out, params.weights.data().data(),
                 d_in, T{0}, grads.input.data().data(), d_in);
    detail::gemm(true, false, d_out, d_in, n, T{1}, grad_out.data().data(), d_out, input.data().data(), d_in, T{0},
                 grads.weights.data().data(), d_in);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d_out; ++j) grads.bias[j] += grad_out[r * d_out + j];
    return grads;
}

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input) {
    BasicTensor<T> out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
    return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input) {
    if (grad_out.shape() != input.shape()) throw std::invalid_argument("relu_backward shape mismatch");
    BasicTensor<T> out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? grad_out[i] : T{0};
    return out;
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& logits) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax expects [N,K], got " + shape_string(logits.shape()));
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    BasicTensor<T> out(logits.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const T* row = logits.data().data() + r * k;
        T* dst = out.data().data() + r * k;
        const T peak = *std::max_element(row, row + k);
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) total += std::exp(double(row[j] - peak));
        for (std::size_t j = 0; j < k; ++j) dst[j] = T(std::exp(double(row[j] - peak)) / total);
    }
    return out;
}

template <typename T>
LossResult<T> cross_entropy(const BasicTensor<T>& probs, const BasicTensor<T>& targets) {
    if (probs.rank() != 2 || probs.shape() != targets.shape())
        throw std::invalid_argument("cross_entropy shape mismatch: probs " + shape_string(probs.shape()) +
                                    " targets " + shape_string(targets.shape()));
    const std::size_t n = probs.dim(0), k = probs.dim(1);
    constexpr double kLogFloor = 1e-12;
    double loss = 0.0;
    LossResult<T> result{T{0}, BasicTensor<T>(probs.shape())};
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t i = r * k + j;
            if (targets[i] != T{0}) loss -= targets[i] * std::log(std::max(double(probs[i]), kLogFloor));
            result.grad_logits[i] = T((double(probs[i]) - targets[i]) / double(n));
        }
    }
    result.loss = T(loss / double(n));
    return result;
}

template <typename T>
BasicTensor<T> one_hot(const std::vector<int>& labels, std::size_t classes) {
    BasicTensor<T> out({labels.size(), classes});
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] < 0 || std::size_t(labels[r]) >= classes)
            throw std::invalid_argument("label " + std::to_string(labels[r]) + " outside [0," +
                                        std::to_string(classes) + ")");
        out[r * classes + std::size_t(labels[r])] = T{1};
    }
    return out;
}

#define ICVSEG_INSTANTIATE(T)                                                                                        \
    template struct BatchNormParams<T>;                                                                              \
    template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const LayerParams<T>&, std::size_t, ConvCache<T>*); \
    template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const ConvCache<T>&, const LayerParams<T>&,         \
                                          std::size_t);                                                              \
    template BasicTensor<T> batch_norm_forward(const BasicTensor<T>&, BatchNormParams<T>&, Mode, double, double,     \
                                               BatchNormCache<T>*);                                                  \
    template BasicTensor<T> batch_norm_infer(const BasicTensor<T>&, const BatchNormParams<T>&, double);              \
    template BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>&, const BatchNormCache<T>&,                 \
                                                   const BatchNormParams<T>&);                                       \
    template BasicTensor<T> dropout_forward(const BasicTensor<T>&, double, Mode, std::mt19937_64&, std::vector<T>*); \
    template BasicTensor<T> dropout_backward(const BasicTensor<T>&, const std::vector<T>&);                          \
    template BasicTensor<T> dense_forward(const BasicTensor<T>&, const LayerParams<T>&);                             \
    template DenseGrads<T> dense_backward(const BasicTensor<T>&, const BasicTensor<T>&, const LayerParams<T>&);      \
    template BasicTensor<T> relu_forward(const BasicTensor<T>&);                                                     \
    template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                             \
    template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                                                     \
    template LossResult<T> cross_entropy(const BasicTensor<T>&, const BasicTensor<T>&);                              \
    template BasicTensor<T> one_hot(const std::vector<int>&, std::size_t);

ICVSEG_INSTANTIATE(float)
ICVSEG_INSTANTIATE(double)

#undef ICVSEG_INSTANTIATE

}  // namespace icvseg
