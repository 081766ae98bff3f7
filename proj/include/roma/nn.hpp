#pragma once

// Parameter bookkeeping, weight init, and the Adam optimizer.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "roma/autodiff.hpp"
#include "roma/random.hpp"

namespace roma {

// Ordered named parameters of one trainable component. Order is the contract
// for checkpoints and optimizer state.
class ParamStore {
public:
    ad::Var add(const std::string& name, Tensor init) {
        items_.emplace_back(name, ad::Var::param(std::move(init)));
        return items_.back().second;
    }

    std::size_t count() const { return items_.size(); }
    const std::string& name(std::size_t i) const { return items_[i].first; }
    ad::Var var(std::size_t i) const { return items_[i].second; }

    ad::Var find(const std::string& name) const {
        for (const auto& [n, v] : items_)
            if (n == name) return v;
        throw ArgumentError("ParamStore: no parameter named " + name);
    }

    void zero_grad() {
        for (auto& [n, v] : items_) v.zero_grad();
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, v] : items_) n += v.value().size();
        return n;
    }

private:
    std::vector<std::pair<std::string, ad::Var>> items_;
};

namespace init {

inline Tensor kaiming(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    double stddev = std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

inline Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

inline Tensor ones(std::vector<int> shape) { return Tensor(std::move(shape), 1.0); }

} // namespace init

// y = x W^T + b for row-major token matrices [n, in] -> [n, out]
struct Linear {
    ad::Var weight; // [in, out] stored pre-transposed
    ad::Var bias;   // [out]

    static Linear make(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
        Linear l;
        l.weight = store.add(name + ".w", init::kaiming({in, out}, in, rng));
        l.bias = store.add(name + ".b", init::zeros({out}));
        return l;
    }

    ad::Var forward(const ad::Var& x) const {
        return ad::add_rowvec(ad::matmul(x, weight), bias);
    }
};

struct Conv2d {
    ad::Var weight; // [O,C,k,k]
    ad::Var bias;   // [O]
    int stride = 1;
    int pad = 0;

    static Conv2d make(ParamStore& store, const std::string& name, int in, int out, int k,
                       int stride, int pad, Rng& rng) {
        Conv2d c;
        c.weight = store.add(name + ".w", init::kaiming({out, in, k, k}, in * k * k, rng));
        c.bias = store.add(name + ".b", init::zeros({out}));
        c.stride = stride;
        c.pad = pad;
        return c;
    }

    ad::Var forward(const ad::Var& x) const { return ad::conv2d(x, weight, bias, stride, pad); }
};

struct InstanceNorm {
    ad::Var gamma;
    ad::Var beta;

    static InstanceNorm make(ParamStore& store, const std::string& name, int channels) {
        InstanceNorm n;
        n.gamma = store.add(name + ".g", init::ones({channels}));
        n.beta = store.add(name + ".b", init::zeros({channels}));
        return n;
    }

    ad::Var forward(const ad::Var& x) const { return ad::instance_norm(x, gamma, beta); }
};

// Adam with bias correction. State tensors live here and are checkpointed.
class AdamOptimizer {
public:
    AdamOptimizer(ParamStore& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (std::size_t i = 0; i < params.count(); ++i) {
            m_.emplace_back(params.var(i).value().shape());
            v_.emplace_back(params.var(i).value().shape());
        }
    }

    void zero_grad() { params_.zero_grad(); }

    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params_.count(); ++i) {
            ad::Var p = params_.var(i);
            const Tensor& g = p.grad();
            Tensor& val = p.value_mut();
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::size_t j = 0; j < val.size(); ++j) {
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
                val[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
            }
        }
    }

    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }
    std::vector<Tensor>& moment1() { return m_; }
    std::vector<Tensor>& moment2() { return v_; }

private:
    ParamStore& params_;
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

} // namespace roma
