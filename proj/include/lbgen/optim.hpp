#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lbgen/autodiff.hpp"
#include "lbgen/checkpoint.hpp"
#include "lbgen/errors.hpp"
#include "lbgen/tensor.hpp"

namespace lbgen::optim {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // 0 disables clipping
};

inline double grad_global_norm(const std::vector<ad::Var>& params) {
    double s = 0.0;
    for (const auto& p : params)
        for (double g : p.grad().data) s += g * g;
    return std::sqrt(s);
}

// In-place global-norm clip of the accumulated gradients. Returns the norm
// measured after rescaling (recomputed, not inferred), so callers can assert
// the post-clip contract directly.
inline double clip_global_norm(std::vector<ad::Var>& params, double max_norm) {
    require(max_norm > 0.0, "clip_global_norm: max_norm must be positive");
    double gn = grad_global_norm(params);
    if (gn <= max_norm) return gn;
    double k = max_norm / gn;
    for (auto& p : params)
        for (double& g : p.node()->grad.data) g *= k;
    return grad_global_norm(params);
}

// AdamW with optional global-norm gradient clipping. Clipping is applied to
// the concatenated gradient of all parameters before the moment updates.
class AdamW {
public:
    AdamW() = default;
    AdamW(std::vector<ad::Var> params, AdamWConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p.value().shape);
            v_.emplace_back(p.value().shape);
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    long step_count() const { return step_count_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    double grad_global_norm() const {
        double s = 0.0;
        for (const auto& p : params_)
            for (double g : p.grad().data) s += g * g;
        return std::sqrt(s);
    }

    void step() {
        double clip_scale = 1.0;
        if (cfg_.clip_norm > 0.0) {
            double gn = grad_global_norm();
            if (gn > cfg_.clip_norm) clip_scale = cfg_.clip_norm / gn;
        }
        ++step_count_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
        for (std::size_t p = 0; p < params_.size(); ++p) {
            auto& w = params_[p].mutable_value().data;
            const auto& g = params_[p].grad().data;
            auto& m = m_[p].data;
            auto& v = v_[p].data;
            for (std::size_t i = 0; i < w.size(); ++i) {
                double gi = g[i] * clip_scale;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                   cfg_.weight_decay * w[i]);
            }
        }
    }

    // Moment buffers and step counter; needed for bit-exact resume.
    void collect(const std::string& prefix, Checkpoint& ck) const {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            ck.add(prefix + ".m" + std::to_string(i), m_[i]);
            ck.add(prefix + ".v" + std::to_string(i), v_[i]);
        }
        ck.meta[prefix + "_step_count"] = step_count_;
    }

    void restore(const std::string& prefix, const Checkpoint& ck) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i] = ck.tensor(prefix + ".m" + std::to_string(i));
            v_[i] = ck.tensor(prefix + ".v" + std::to_string(i));
            require(m_[i].shape == params_[i].value().shape &&
                        v_[i].shape == params_[i].value().shape,
                    "checkpoint: optimizer moment shape mismatch at " + prefix);
        }
        require(ck.meta.contains(prefix + "_step_count"),
                "checkpoint: missing optimizer step count for " + prefix);
        step_count_ = ck.meta.at(prefix + "_step_count").get<long>();
    }

private:
    std::vector<ad::Var> params_;
    AdamWConfig cfg_;
    std::vector<Tensor> m_, v_;
    long step_count_ = 0;
};

}  // namespace lbgen::optim
