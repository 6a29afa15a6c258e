#include "icvseg/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace icvseg {

template <typename T>
AdamState<T> AdamState<T>::zeros_like(std::span<BasicTensor<T>* const> params, AdamConfig config) {
    AdamState state;
    state.config = config;
    for (const BasicTensor<T>* p : params) {
        state.m.emplace_back(p->shape());
        state.v.emplace_back(p->shape());
    }
    return state;
}

template <typename T>
AdamStepResult adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>> grads,
                         AdamState<T>& state) {
    if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size())
        throw std::invalid_argument("adam_step: parameter, gradient and moment lists differ in length");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape() ||
            state.v[i].shape() != grads[i].shape())
            throw std::invalid_argument("adam_step: gradient " + shape_string(grads[i].shape()) + " for parameter " +
                                        std::to_string(i) + " " + shape_string(params[i]->shape()));
        if (!grads[i].all_finite())
            return {false, "non-finite gradient in parameter tensor " + std::to_string(i)};
    }

    const AdamConfig& c = state.config;
    const double t = double(state.step_count + 1);
    const double correction1 = 1.0 - std::pow(c.beta1, t);
    const double correction2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        T* p = params[i]->data().data();
        const T* g = grads[i].data().data();
        T* m = state.m[i].data().data();
        T* v = state.v[i].data().data();
        for (std::size_t j = 0; j < grads[i].size(); ++j) {
            const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * double(g[j]) * g[j];
            m[j] = T(mj);
            v[j] = T(vj);
            p[j] = T(p[j] - c.lr * (mj / correction1) / (std::sqrt(vj / correction2) + c.epsilon));
        }
    }
    ++state.step_count;
    return {true, {}};
}

template struct AdamState<float>;
template struct AdamState<double>;
template AdamStepResult adam_step(std::span<BasicTensor<float>* const>, std::span<const BasicTensor<float>>,
                                  AdamState<float>&);
template AdamStepResult adam_step(std::span<BasicTensor<double>* const>, std::span<const BasicTensor<double>>,
                                  AdamState<double>&);

}  // namespace icvseg
