#pragma once

#include <cstddef>
#include <vector>

#include "paradis/autodiff.hpp"

namespace paradis {

struct SgdOptions {
    double momentum = 0.9;
    double weight_decay = 1e-4;
    bool nesterov = true;
};

// SGD with (Nesterov) momentum, no dampening, L2 weight decay folded into the
// gradient. Buffers start empty and are seeded with the first gradient.
template <typename T>
class Sgd {
public:
    explicit Sgd(SgdOptions opt = {}) : opt_(opt) {}

    void step(std::vector<Parameter<T>>& params, double lr) {
        if (buffers_.empty()) {
            for (const auto& p : params) buffers_.emplace_back(p.value.shape());
            seeded_ = false;
        }
        const T mu = static_cast<T>(opt_.momentum), wd = static_cast<T>(opt_.weight_decay), rate = static_cast<T>(lr);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& w = params[i].value;
            const auto& g = params[i].grad;
            auto& buf = buffers_[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                T d = g[k] + wd * w[k];
                if (mu != T(0)) {
                    buf[k] = seeded_ ? mu * buf[k] + d : d;
                    d = opt_.nesterov ? d + mu * buf[k] : buf[k];
                }
                w[k] -= rate * d;
            }
        }
        seeded_ = true;
    }

    const std::vector<Tensor<T>>& buffers() const { return buffers_; }
    bool seeded() const { return seeded_; }
    void restore(std::vector<Tensor<T>> buffers, bool seeded) {
        buffers_ = std::move(buffers);
        seeded_ = seeded;
    }
    const SgdOptions& options() const { return opt_; }

private:
    SgdOptions opt_;
    std::vector<Tensor<T>> buffers_;
    bool seeded_ = false;
};

}  // namespace paradis
