#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "lbgen/autodiff.hpp"
#include "lbgen/errors.hpp"
#include "lbgen/tensor.hpp"
#include "lbgen/types.hpp"

namespace lbgen::quality {

// Rating levels in ascending order; level i carries score i + 1.
inline constexpr std::array<const char*, 5> kLevelNames = {"bad", "poor", "fair", "good",
                                                           "excellent"};

struct LevelLogits {
    std::array<double, 5> values{};
};

struct LevelDistribution {
    std::array<double, 5> probs{};

    void validate() const {
        double s = 0.0;
        for (double p : probs) {
            require(std::isfinite(p) && p >= 0.0,
                    "LevelDistribution: probabilities must be finite and non-negative");
            s += p;
        }
        require(std::fabs(s - 1.0) <= 1e-9, "LevelDistribution: probabilities must sum to 1");
    }
};

// ---------------------------------------------------------------------------
// Level softmax, score expectation and quality loss
// ---------------------------------------------------------------------------

inline LevelDistribution level_probabilities(const LevelLogits& logits) {
    double mx = logits.values[0];
    for (double v : logits.values) {
        require(std::isfinite(v), "level_probabilities: non-finite logit");
        mx = std::max(mx, v);
    }
    LevelDistribution d;
    double z = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        d.probs[i] = std::exp(logits.values[i] - mx);
        z += d.probs[i];
    }
    for (double& p : d.probs) p /= z;
    return d;
}

inline ad::Var level_probabilities_var(const ad::Var& logits) {
    require(logits.numel() == 5, "level_probabilities: expected five logits");
    return ad::softmax(logits);
}

// Expected level score: sum_i i * p_i with level scores 1..5.
inline double quality_score(const LevelDistribution& dist) {
    dist.validate();
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += static_cast<double>(i + 1) * dist.probs[i];
    return s;
}

inline ad::Var quality_score_var(const ad::Var& probs) {
    require(probs.numel() == 5, "quality_score: expected five probabilities");
    return ad::dot(probs, ad::Var::constant(Tensor::from_vector({1.0, 2.0, 3.0, 4.0, 5.0})));
}

// L_q = 1 - S_q / 5, so a perfect score costs nothing and the worst score 0.8.
inline double quality_loss(double score) {
    require(score >= 1.0 && score <= 5.0, "quality_loss: score outside [1,5]");
    return 1.0 - score / 5.0;
}

inline ad::Var quality_loss_var(const ad::Var& score) {
    return ad::sub(ad::Var::constant(1.0), ad::scale(score, 1.0 / 5.0));
}

// ---------------------------------------------------------------------------
// Mock scorer (stand-in for the MLLM quality model)
// ---------------------------------------------------------------------------

// Rates an image by its total-variation statistic: flat, clean renders sit
// near zero and score "excellent", heavy per-pixel noise drives the statistic
// toward the "bad" center. Centers are on the tv scale, descending from bad
// to excellent; beta controls how sharply the softmax picks the nearest one.
struct MockScorerConfig {
    std::array<double, 5> centers = {0.50, 0.35, 0.22, 0.12, 0.04};
    double beta = 200.0;

    void validate() const {
        require(beta > 0.0, "mock scorer: beta must be positive");
        for (double c : centers) require(std::isfinite(c), "mock scorer: non-finite center");
    }
};

inline double total_variation(const ToyImage& img) {
    ad::NoGradGuard guard;
    return ad::tv2d(ad::Var::constant(Tensor::from_vector(img.pixels)), img.height, img.width,
                    3)
        .scalar();
}

// logits_i = -beta * (tv - mu_i)^2; differentiable down to the pixels.
inline ad::Var mock_score_logits_var(const ad::Var& pixels, std::size_t height,
                                     std::size_t width, const MockScorerConfig& cfg = {}) {
    cfg.validate();
    ad::Var tv = ad::tv2d(pixels, height, width, 3);
    std::vector<ad::Var> ls;
    ls.reserve(5);
    for (double mu : cfg.centers)
        ls.push_back(ad::scale(ad::square(ad::add_const(tv, -mu)), -cfg.beta));
    return ad::concat(ls);
}

inline LevelLogits mock_score_image(const ToyImage& img, const MockScorerConfig& cfg = {}) {
    ad::NoGradGuard guard;
    ad::Var logits = mock_score_logits_var(ad::Var::constant(Tensor::from_vector(img.pixels)),
                                           img.height, img.width, cfg);
    LevelLogits out;
    for (std::size_t i = 0; i < 5; ++i) out.values[i] = logits.value().data[i];
    return out;
}

inline double mock_quality_score(const ToyImage& img, const MockScorerConfig& cfg = {}) {
    return quality_score(level_probabilities(mock_score_image(img, cfg)));
}

// Full differentiable chain pixels -> logits -> softmax -> score -> loss.
inline ad::Var mock_quality_loss_var(const ad::Var& pixels, std::size_t height,
                                     std::size_t width, const MockScorerConfig& cfg = {}) {
    ad::Var probs = level_probabilities_var(mock_score_logits_var(pixels, height, width, cfg));
    return quality_loss_var(quality_score_var(probs));
}

// ---------------------------------------------------------------------------
// Pluggable scorer interface
// ---------------------------------------------------------------------------

// Anything mapping an image to level logits can stand in for the quality
// model; the graph form is what fine-tuning differentiates through.
using ScorerFn = std::function<LevelLogits(const ToyImage&)>;
using ScorerVarFn =
    std::function<ad::Var(const ad::Var& pixels, std::size_t height, std::size_t width)>;

inline ScorerFn make_mock_scorer(const MockScorerConfig& cfg = {}) {
    cfg.validate();
    return [cfg](const ToyImage& img) { return mock_score_image(img, cfg); };
}

inline ScorerVarFn make_mock_scorer_var(const MockScorerConfig& cfg = {}) {
    cfg.validate();
    return [cfg](const ad::Var& pixels, std::size_t height, std::size_t width) {
        return mock_score_logits_var(pixels, height, width, cfg);
    };
}

}  // namespace lbgen::quality
