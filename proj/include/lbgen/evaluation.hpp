#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lbgen/encoder.hpp"
#include "lbgen/errors.hpp"
#include "lbgen/rng.hpp"
#include "lbgen/types.hpp"
#include "lbgen/worldgen.hpp"

namespace lbgen::evaluation {

// Bias metrics (texture inclination, context bias, background gap) with
// hand-checkable kernels, plus the linear-probe transfer harness and
// few-shot scaling curves. Kernels consume labels and accuracies only —
// never raw scores — so any monotone transform of classifier logits that
// preserves the argmax leaves every metric unchanged.

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

// Accuracy per uncommon-attribute partition P_k, k in 0..3.
struct PartitionAccuracyTable {
    std::array<double, 4> acc{};
    std::array<std::size_t, 4> counts{};

    void validate() const {
        for (std::size_t k = 0; k < 4; ++k)
            if (counts[k] > 0)
                require(acc[k] >= 0.0 && acc[k] <= 1.0,
                        "partition table: acc[" + std::to_string(k) + "] = " +
                            std::to_string(acc[k]) + " outside [0, 1]");
    }

    std::size_t total() const { return counts[0] + counts[1] + counts[2] + counts[3]; }
};

struct CueConflictDecision {
    std::size_t shape_class = 0;
    std::size_t texture_class = 0;
    std::size_t predicted_class = 0;
};

struct CueConflictDecisions {
    std::vector<CueConflictDecision> records;

    void validate() const {
        for (const auto& r : records)
            require(r.shape_class != r.texture_class,
                    "cue conflict: shape and texture class must differ, got both " +
                        std::to_string(r.shape_class));
    }
};

struct ProbeResult {
    double accuracy = 0.0;
    double train_fraction = 1.0;
    std::int64_t seed = 0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"accuracy", accuracy},
                              {"train_fraction", train_fraction},
                              {"seed", seed}};
    }

    bool operator==(const ProbeResult&) const = default;
};

inline ProbeResult probe_result_from_json(const nlohmann::json& j) {
    require(j.is_object(), "probe result: JSON value must be an object");
    for (const char* k : {"accuracy", "train_fraction", "seed"})
        require(j.contains(k), std::string("probe result: missing key '") + k + "'");
    ProbeResult r;
    try {
        r.accuracy = j.at("accuracy").get<double>();
        r.train_fraction = j.at("train_fraction").get<double>();
        r.seed = j.at("seed").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("probe result: field has wrong type: ") + e.what());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Metric kernels
// ---------------------------------------------------------------------------

// Cue-conflict community convention: texture decisions over texture + shape
// decisions; predictions matching neither cue drop out of both numerator and
// denominator. Harness reports flag this exclusion in their metadata.
inline constexpr const char* kTiConventionNote =
    "predictions matching neither the shape nor the texture cue are excluded "
    "from the texture-inclination numerator and denominator";

inline double texture_inclination(const CueConflictDecisions& decisions) {
    decisions.validate();
    std::size_t texture = 0, shape = 0;
    for (const auto& r : decisions.records) {
        if (r.predicted_class == r.texture_class) ++texture;
        else if (r.predicted_class == r.shape_class) ++shape;
    }
    require(texture + shape > 0,
            "texture inclination: no decision matched either cue; undefined");
    return 100.0 * static_cast<double>(texture) / static_cast<double>(texture + shape);
}

// CB_avg = 100 * (1/3) * sum_{k=1..3} acc_k / acc_0. Scale-free in the
// accuracies; undefined when a partition is missing or acc_0 = 0.
inline double context_bias_avg(const PartitionAccuracyTable& table) {
    table.validate();
    for (std::size_t k = 0; k < 4; ++k)
        require(table.counts[k] > 0, "context bias: partition " + std::to_string(k) +
                                         " has no samples; CB_avg undefined");
    require(table.acc[0] > 0.0,
            "context bias: accuracy on partition 0 is zero; ratio undefined");
    double s = 0.0;
    for (std::size_t k = 1; k < 4; ++k) s += table.acc[k] / table.acc[0];
    return 100.0 * s / 3.0;
}

// Percentage points lost when class-consistent backgrounds are replaced by
// other classes' backgrounds; negative if the swap helps.
inline double background_gap(double acc_mixed_same, double acc_mixed_rand) {
    require(acc_mixed_same >= 0.0 && acc_mixed_same <= 1.0,
            "background gap: acc_mixed_same outside [0, 1]");
    require(acc_mixed_rand >= 0.0 && acc_mixed_rand <= 1.0,
            "background gap: acc_mixed_rand outside [0, 1]");
    return 100.0 * (acc_mixed_same - acc_mixed_rand);
}

inline double accuracy(const std::vector<std::size_t>& truth,
                       const std::vector<std::size_t>& predicted) {
    require(truth.size() == predicted.size(),
            "accuracy: truth and prediction lengths differ");
    require(!truth.empty(), "accuracy: empty inputs");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (truth[i] == predicted[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(truth.size());
}

inline PartitionAccuracyTable partition_by_uncommon(
    const std::vector<worldgen::LabeledImage>& images,
    const std::vector<std::size_t>& predictions) {
    require(images.size() == predictions.size(),
            "partition: images (" + std::to_string(images.size()) +
                ") and predictions (" + std::to_string(predictions.size()) +
                ") lengths differ");
    PartitionAccuracyTable t;
    std::array<std::size_t, 4> correct{};
    for (std::size_t i = 0; i < images.size(); ++i) {
        int k = images[i].uncommon_count;
        require(k >= 0 && k <= 3, "partition: uncommon_count " + std::to_string(k) +
                                      " outside [0, 3] at item " + std::to_string(i));
        auto kk = static_cast<std::size_t>(k);
        ++t.counts[kk];
        if (predictions[i] == images[i].class_id) ++correct[kk];
    }
    for (std::size_t k = 0; k < 4; ++k)
        if (t.counts[k] > 0)
            t.acc[k] = static_cast<double>(correct[k]) / static_cast<double>(t.counts[k]);
    return t;
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeConfig {
    double regularization = 1.0;  // L2 strength on weights (bias unpenalized)
    double tolerance = 1e-6;      // sup-norm of the objective gradient
    int max_iterations = 2000;    // full-batch iterations; the few-shot budget

    void validate() const {
        require(regularization >= 0.0, "probe: regularization must be >= 0");
        require(tolerance > 0.0, "probe: tolerance must be > 0");
        require(max_iterations >= 1, "probe: max_iterations must be >= 1");
    }
};

// Trained multinomial logistic classifier: logits = W x + b.
struct LinearModel {
    std::size_t num_classes = 0;
    std::size_t feature_dim = 0;
    std::vector<double> weights;  // num_classes x feature_dim, row-major
    std::vector<double> bias;     // num_classes

    std::size_t predict(const FeatureVector& f) const {
        require(f.dim() == feature_dim, "probe: feature dim mismatch at predict");
        std::size_t best = 0;
        double best_z = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < num_classes; ++c) {
            double z = bias[c];
            const double* w = weights.data() + c * feature_dim;
            for (std::size_t d = 0; d < feature_dim; ++d) z += w[d] * f.values[d];
            if (z > best_z) {
                best_z = z;
                best = c;
            }
        }
        return best;
    }

    std::vector<std::size_t> predict(const std::vector<FeatureVector>& fs) const {
        std::vector<std::size_t> out;
        out.reserve(fs.size());
        for (const auto& f : fs) out.push_back(predict(f));
        return out;
    }
};

namespace detail {

// Mean cross-entropy of softmax(W x + b) plus reg/(2N) * ||W||^2; the bias
// column is not penalized. theta = [W rows..., b].
struct ProbeProblem {
    const std::vector<FeatureVector>* x = nullptr;
    const std::vector<std::size_t>* y = nullptr;
    std::size_t N = 0, D = 0, C = 0;
    double reg = 1.0;

    std::size_t dim() const { return C * D + C; }

    // Returns the objective; fills grad when non-null.
    double eval(const std::vector<double>& theta, std::vector<double>* grad) const {
        const double* W = theta.data();
        const double* b = theta.data() + C * D;
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);
        double loss = 0.0;
        std::vector<double> z(C);
        for (std::size_t i = 0; i < N; ++i) {
            const auto& xi = (*x)[i].values;
            for (std::size_t c = 0; c < C; ++c) {
                double s = b[c];
                const double* w = W + c * D;
                for (std::size_t d = 0; d < D; ++d) s += w[d] * xi[d];
                z[c] = s;
            }
            double m = *std::max_element(z.begin(), z.end());
            double sum = 0.0;
            for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - m);
            double lse = m + std::log(sum);
            loss += lse - z[(*y)[i]];
            if (grad) {
                for (std::size_t c = 0; c < C; ++c) {
                    double p = std::exp(z[c] - lse);
                    double coeff = p - (c == (*y)[i] ? 1.0 : 0.0);
                    (*grad)[C * D + c] += coeff;
                    double* g = grad->data() + c * D;
                    for (std::size_t d = 0; d < D; ++d) g[d] += coeff * xi[d];
                }
            }
        }
        double n = static_cast<double>(N);
        loss /= n;
        double sq = 0.0;
        for (std::size_t k = 0; k < C * D; ++k) sq += W[k] * W[k];
        loss += 0.5 * reg * sq / n;
        if (grad) {
            for (double& g : *grad) g /= n;
            for (std::size_t k = 0; k < C * D; ++k) (*grad)[k] += reg * W[k] / n;
        }
        return loss;
    }
};

inline double sup_norm(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::fabs(x));
    return m;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

struct SolveStats {
    std::size_t iterations = 0;
    double grad_norm = 0.0;
    bool converged = false;
};

// Limited-memory BFGS with Armijo backtracking. Deterministic: zero history,
// fixed order of operations, no randomness anywhere; the convex objective
// has a unique optimum regardless.
inline SolveStats lbfgs_minimize(const ProbeProblem& prob, std::vector<double>& theta,
                                 double tol, int max_iters) {
    const std::size_t m = 10;
    std::deque<std::vector<double>> s_hist, y_hist;
    std::deque<double> rho_hist;

    std::vector<double> grad(prob.dim()), next_grad(prob.dim());
    double f = prob.eval(theta, &grad);
    SolveStats stats;
    for (int it = 0; it < max_iters; ++it) {
        stats.grad_norm = sup_norm(grad);
        if (stats.grad_norm < tol) {
            stats.converged = true;
            return stats;
        }

        // Two-loop recursion for the search direction.
        std::vector<double> q = grad;
        std::vector<double> alpha(s_hist.size());
        for (std::size_t j = s_hist.size(); j-- > 0;) {
            alpha[j] = rho_hist[j] * dot(s_hist[j], q);
            for (std::size_t k = 0; k < q.size(); ++k) q[k] -= alpha[j] * y_hist[j][k];
        }
        double gamma = 1.0;
        if (!s_hist.empty()) {
            const auto& s = s_hist.back();
            const auto& yv = y_hist.back();
            gamma = dot(s, yv) / std::max(dot(yv, yv), 1e-300);
        } else {
            gamma = 1.0 / std::max(1.0, sup_norm(grad));
        }
        for (double& v : q) v *= gamma;
        for (std::size_t j = 0; j < s_hist.size(); ++j) {
            double beta = rho_hist[j] * dot(y_hist[j], q);
            for (std::size_t k = 0; k < q.size(); ++k)
                q[k] += (alpha[j] - beta) * s_hist[j][k];
        }
        // q approximates H * grad; descend along -q.
        double dir_dot_grad = -dot(q, grad);
        if (dir_dot_grad >= 0.0) {  // not a descent direction; fall back
            q = grad;
            for (double& v : q) v *= 1.0 / std::max(1.0, sup_norm(grad));
            dir_dot_grad = -dot(q, grad);
        }

        // Armijo backtracking along theta - t * q.
        double t = 1.0;
        std::vector<double> trial(theta.size());
        double f_new = f;
        bool accepted = false;
        for (int ls = 0; ls < 50; ++ls) {
            for (std::size_t k = 0; k < theta.size(); ++k) trial[k] = theta[k] - t * q[k];
            f_new = prob.eval(trial, &next_grad);
            if (f_new <= f + 1e-4 * t * dir_dot_grad) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        ++stats.iterations;
        if (!accepted) {  // flat to machine precision; report where we stand
            stats.grad_norm = sup_norm(grad);
            stats.converged = stats.grad_norm < tol;
            return stats;
        }

        std::vector<double> s(theta.size()), yv(theta.size());
        for (std::size_t k = 0; k < theta.size(); ++k) {
            s[k] = trial[k] - theta[k];
            yv[k] = next_grad[k] - grad[k];
        }
        double ys = dot(yv, s);
        if (ys > 1e-12 * std::sqrt(dot(s, s)) * std::sqrt(dot(yv, yv))) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(yv));
            rho_hist.push_back(1.0 / ys);
            if (s_hist.size() > m) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        theta = trial;
        grad = next_grad;
        f = f_new;
    }
    stats.grad_norm = sup_norm(grad);
    stats.converged = stats.grad_norm < tol;
    return stats;
}

}  // namespace detail

struct TrainedProbe {
    LinearModel model;
    ProbeResult result;
    std::size_t iterations = 0;
    double grad_norm = 0.0;
    bool converged = false;
};

// Multinomial logistic regression on frozen features. The objective is
// convex and the start is the zero vector, so the result is deterministic
// for any seed; the seed tags the result (it drives subsampling upstream).
inline TrainedProbe train_probe(const std::vector<FeatureVector>& features_train,
                                const std::vector<std::size_t>& labels_train,
                                const std::vector<FeatureVector>& features_test,
                                const std::vector<std::size_t>& labels_test,
                                std::int64_t seed = 0, const ProbeConfig& config = {}) {
    config.validate();
    require(!features_train.empty(), "probe: empty training set");
    require(features_train.size() == labels_train.size(),
            "probe: training features and labels lengths differ");
    require(!features_test.empty(), "probe: empty test set");
    require(features_test.size() == labels_test.size(),
            "probe: test features and labels lengths differ");

    std::size_t D = features_train[0].dim();
    require(D >= 1, "probe: zero-dimensional features");
    for (const auto& f : features_train)
        require(f.dim() == D, "probe: inconsistent training feature dims");
    for (const auto& f : features_test)
        require(f.dim() == D, "probe: inconsistent test feature dims");

    std::size_t C = 0;
    std::size_t distinct_check = labels_train[0];
    bool multi = false;
    for (std::size_t y : labels_train) {
        C = std::max(C, y + 1);
        if (y != distinct_check) multi = true;
    }
    require(multi, "probe: training labels contain a single class; probe undefined");

    detail::ProbeProblem prob;
    prob.x = &features_train;
    prob.y = &labels_train;
    prob.N = features_train.size();
    prob.D = D;
    prob.C = C;
    prob.reg = config.regularization;

    std::vector<double> theta(prob.dim(), 0.0);
    auto stats = detail::lbfgs_minimize(prob, theta, config.tolerance,
                                        config.max_iterations);

    TrainedProbe out;
    out.model.num_classes = C;
    out.model.feature_dim = D;
    out.model.weights.assign(theta.begin(), theta.begin() + static_cast<long>(C * D));
    out.model.bias.assign(theta.begin() + static_cast<long>(C * D), theta.end());
    out.iterations = stats.iterations;
    out.grad_norm = stats.grad_norm;
    out.converged = stats.converged;

    std::size_t correct = 0;
    for (std::size_t i = 0; i < features_test.size(); ++i)
        if (out.model.predict(features_test[i]) == labels_test[i]) ++correct;
    out.result.accuracy =
        static_cast<double>(correct) / static_cast<double>(features_test.size());
    out.result.train_fraction = 1.0;
    out.result.seed = seed;
    return out;
}

inline ProbeResult linear_probe(const std::vector<FeatureVector>& features_train,
                                const std::vector<std::size_t>& labels_train,
                                const std::vector<FeatureVector>& features_test,
                                const std::vector<std::size_t>& labels_test,
                                std::int64_t seed = 0, const ProbeConfig& config = {}) {
    return train_probe(features_train, labels_train, features_test, labels_test, seed,
                       config)
        .result;
}

inline ProbeResult linear_probe(const std::vector<FeatureVector>& features_train,
                                const std::vector<std::size_t>& labels_train,
                                const std::vector<FeatureVector>& features_test,
                                const std::vector<std::size_t>& labels_test,
                                std::int64_t seed, double regularization) {
    ProbeConfig cfg;
    cfg.regularization = regularization;
    return linear_probe(features_train, labels_train, features_test, labels_test, seed,
                        cfg);
}

// ---------------------------------------------------------------------------
// Few-shot curves
// ---------------------------------------------------------------------------

inline std::vector<double> default_fewshot_fractions() { return {1.0, 0.5, 0.2, 0.1}; }

namespace detail {

// Class-stratified subset: per class, round(fraction * count) indices chosen
// by partial shuffle, returned in ascending dataset order. fraction = 1
// reproduces the identity permutation, so downstream arithmetic matches the
// unsubsampled run bit for bit.
inline std::vector<std::size_t> stratified_subsample(const std::vector<std::size_t>& labels,
                                                     double fraction, std::int64_t seed) {
    require(fraction > 0.0 && fraction <= 1.0,
            "fewshot: fraction must be in (0, 1], got " + std::to_string(fraction));
    std::vector<std::size_t> out;
    if (fraction == 1.0) {
        out.resize(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) out[i] = i;
        return out;
    }
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    for (auto& [c, idxs] : by_class) {
        auto n = static_cast<double>(idxs.size());
        auto k = static_cast<std::size_t>(std::llround(fraction * n));
        require(k >= 1, "fewshot: fraction " + std::to_string(fraction) +
                            " yields zero samples for class " + std::to_string(c));
        RngStream rng(static_cast<std::uint64_t>(seed),
                      "eval/fewshot/class" + std::to_string(c));
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t j = i + rng.uniform_int(idxs.size() - i);
            std::swap(idxs[i], idxs[j]);
        }
        out.insert(out.end(), idxs.begin(), idxs.begin() + static_cast<long>(k));
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

// One probe per (fraction, seed), each on a stratified subsample of the
// training set. Every probe runs under the same ProbeConfig — in particular
// the same full-batch iteration cap — so the optimization budget does not
// shrink with the subset (the epochs-consistent rule).
inline std::vector<ProbeResult> fewshot_curve(
    const std::vector<FeatureVector>& features_train,
    const std::vector<std::size_t>& labels_train,
    const std::vector<FeatureVector>& features_test,
    const std::vector<std::size_t>& labels_test,
    const std::vector<double>& fractions = default_fewshot_fractions(),
    const std::vector<std::int64_t>& seeds = {0}, const ProbeConfig& config = {}) {
    require(!fractions.empty(), "fewshot: no fractions given");
    require(!seeds.empty(), "fewshot: no seeds given");
    std::vector<ProbeResult> out;
    out.reserve(fractions.size() * seeds.size());
    for (double f : fractions)
        for (std::int64_t s : seeds) {
            auto idx = detail::stratified_subsample(labels_train, f, s);
            std::vector<FeatureVector> sub_x;
            std::vector<std::size_t> sub_y;
            sub_x.reserve(idx.size());
            sub_y.reserve(idx.size());
            for (std::size_t i : idx) {
                sub_x.push_back(features_train[i]);
                sub_y.push_back(labels_train[i]);
            }
            ProbeResult r =
                linear_probe(sub_x, sub_y, features_test, labels_test, s, config);
            r.train_fraction = f;
            r.seed = s;
            out.push_back(r);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Prediction records and metric reports (the on-disk interchange formats)
// ---------------------------------------------------------------------------

// One classifier decision. item_id is the 0-based position within the file;
// the optional fields carry whatever ground truth the probe set defines.
struct PredictionRecord {
    std::size_t item_id = 0;
    std::size_t predicted_class = 0;
    std::optional<std::size_t> shape_class;
    std::optional<std::size_t> texture_class;
    std::optional<int> uncommon_count;
    std::optional<std::string> split;

    nlohmann::json to_json() const {
        nlohmann::json j{{"item_id", item_id}, {"predicted_class", predicted_class}};
        if (shape_class) j["shape_class"] = *shape_class;
        if (texture_class) j["texture_class"] = *texture_class;
        if (uncommon_count) j["uncommon_count"] = *uncommon_count;
        if (split) j["split"] = *split;
        return j;
    }

    bool operator==(const PredictionRecord&) const = default;
};

inline PredictionRecord prediction_from_json(const nlohmann::json& j) {
    require(j.is_object(), "predictions: record must be a JSON object");
    const std::array<const char*, 6> allowed = {"item_id",       "predicted_class",
                                               "shape_class",   "texture_class",
                                               "uncommon_count", "split"};
    for (auto it = j.begin(); it != j.end(); ++it)
        require(std::find_if(allowed.begin(), allowed.end(),
                             [&](const char* k) { return it.key() == k; }) != allowed.end(),
                "predictions: unknown key '" + it.key() + "'");
    for (const char* k : {"item_id", "predicted_class"})
        require(j.contains(k), std::string("predictions: missing key '") + k + "'");
    PredictionRecord r;
    try {
        r.item_id = j.at("item_id").get<std::size_t>();
        r.predicted_class = j.at("predicted_class").get<std::size_t>();
        if (j.contains("shape_class")) r.shape_class = j.at("shape_class").get<std::size_t>();
        if (j.contains("texture_class"))
            r.texture_class = j.at("texture_class").get<std::size_t>();
        if (j.contains("uncommon_count"))
            r.uncommon_count = j.at("uncommon_count").get<int>();
        if (j.contains("split")) r.split = j.at("split").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("predictions: field has wrong type: ") + e.what());
    }
    return r;
}

inline void write_predictions(const std::vector<PredictionRecord>& records,
                              const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "predictions: cannot write file: " + path.string());
    for (const auto& r : records) out << r.to_json().dump() << "\n";
    require(out.good(), "predictions: write failed: " + path.string());
}

inline std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "predictions: cannot open file: " + path.string());
    std::vector<PredictionRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DomainError("predictions: line " + std::to_string(lineno) +
                              " is not valid JSON: " + e.what());
        }
        out.push_back(prediction_from_json(j));
    }
    return out;
}

// Records carrying both cue labels, in file order.
inline CueConflictDecisions decisions_from_predictions(
    const std::vector<PredictionRecord>& records) {
    CueConflictDecisions d;
    for (const auto& r : records)
        if (r.shape_class && r.texture_class)
            d.records.push_back({*r.shape_class, *r.texture_class, r.predicted_class});
    d.validate();
    return d;
}

// Aggregate metric report; absent metrics serialize as null so a report over
// an empty measurement set is still well-formed JSON.
struct MetricsReport {
    std::optional<double> TI;
    std::optional<double> CB_avg;
    std::optional<double> BG_Gap;
    std::vector<ProbeResult> probe;
    std::vector<std::string> warnings;
    nlohmann::json metadata = nlohmann::json::object();

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["TI"] = TI ? nlohmann::json(*TI) : nlohmann::json(nullptr);
        j["CB_avg"] = CB_avg ? nlohmann::json(*CB_avg) : nlohmann::json(nullptr);
        j["BG_Gap"] = BG_Gap ? nlohmann::json(*BG_Gap) : nlohmann::json(nullptr);
        j["probe"] = nlohmann::json::array();
        for (const auto& p : probe) j["probe"].push_back(p.to_json());
        j["warnings"] = warnings;
        j["metadata"] = metadata;
        return j;
    }
};

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
    require(j.is_object(), "metrics: JSON value must be an object");
    for (const char* k : {"TI", "CB_avg", "BG_Gap", "probe"})
        require(j.contains(k), std::string("metrics: missing key '") + k + "'");
    MetricsReport r;
    try {
        if (!j.at("TI").is_null()) r.TI = j.at("TI").get<double>();
        if (!j.at("CB_avg").is_null()) r.CB_avg = j.at("CB_avg").get<double>();
        if (!j.at("BG_Gap").is_null()) r.BG_Gap = j.at("BG_Gap").get<double>();
        for (const auto& p : j.at("probe")) r.probe.push_back(probe_result_from_json(p));
        if (j.contains("warnings"))
            r.warnings = j.at("warnings").get<std::vector<std::string>>();
        if (j.contains("metadata")) r.metadata = j.at("metadata");
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("metrics: field has wrong type: ") + e.what());
    }
    return r;
}

inline void write_metrics(const MetricsReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "metrics: cannot write file: " + path.string());
    out << report.to_json().dump(2) << "\n";
    require(out.good(), "metrics: write failed: " + path.string());
}

inline MetricsReport read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "metrics: cannot open file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DomainError("metrics: malformed JSON in " + path.string() + ": " + e.what());
    }
    return metrics_from_json(j);
}

// ---------------------------------------------------------------------------
// Worldgen harnesses
// ---------------------------------------------------------------------------

// Full bias measurement for one classifier: TI on the all-pairs cue-conflict
// set, CB_avg on a balanced partition probe, BG_Gap on paired background
// splits. `predict` maps an image to a class id. When out_predictions is
// given, every decision is appended with its split tag and ground truth.
template <typename PredictFn>
inline MetricsReport measure_bias(const worldgen::World& world, PredictFn&& predict,
                                  std::size_t per_class, std::uint64_t seed,
                                  std::vector<PredictionRecord>* out_predictions = nullptr) {
    require(per_class >= 1, "measure_bias: per_class must be >= 1");
    MetricsReport report;
    report.metadata["ti_convention"] = kTiConventionNote;
    std::size_t item_id = 0;
    auto record = [&](std::size_t pred, const char* split) -> PredictionRecord* {
        if (!out_predictions) return nullptr;
        PredictionRecord r;
        r.item_id = item_id++;
        r.predicted_class = pred;
        r.split = split;
        out_predictions->push_back(r);
        return &out_predictions->back();
    };

    auto conflict = worldgen::make_cue_conflict_set(world, seed);
    CueConflictDecisions decisions;
    for (const auto& cc : conflict) {
        std::size_t pred = predict(cc.image);
        decisions.records.push_back({cc.shape_class, cc.texture_class, pred});
        if (auto* r = record(pred, "cue_conflict")) {
            r->shape_class = cc.shape_class;
            r->texture_class = cc.texture_class;
        }
    }
    report.TI = texture_inclination(decisions);

    auto partitions = worldgen::build_partition_probe(world, per_class, seed);
    std::vector<std::size_t> preds;
    preds.reserve(partitions.size());
    for (const auto& li : partitions) {
        std::size_t pred = predict(li.image);
        preds.push_back(pred);
        if (auto* r = record(pred, "partitions")) r->uncommon_count = li.uncommon_count;
    }
    report.CB_avg = context_bias_avg(partition_by_uncommon(partitions, preds));

    auto splits = worldgen::build_background_splits(world, per_class, seed);
    auto run_split = [&](const std::vector<worldgen::LabeledImage>& set,
                         const char* name) {
        std::size_t correct = 0;
        for (const auto& li : set) {
            std::size_t pred = predict(li.image);
            if (pred == li.class_id) ++correct;
            record(pred, name);
        }
        return static_cast<double>(correct) / static_cast<double>(set.size());
    };
    double acc_same = run_split(splits.mixed_same, "mixed_same");
    double acc_rand = run_split(splits.mixed_rand, "mixed_rand");
    report.BG_Gap = background_gap(acc_same, acc_rand);
    report.metadata["acc_mixed_same"] = acc_same;
    report.metadata["acc_mixed_rand"] = acc_rand;
    return report;
}

// Few-shot transfer over worldgen analogs: encode independent train/eval
// draws with the frozen encoder, then sweep (fraction, seed) probes.
inline MetricsReport measure_transfer(const encoder::DualEncoder& enc,
                                      const worldgen::World& world,
                                      std::size_t train_per_class,
                                      std::size_t test_per_class, std::uint64_t seed,
                                      const std::vector<double>& fractions =
                                          default_fewshot_fractions(),
                                      const std::vector<std::int64_t>& seeds = {0},
                                      const ProbeConfig& config = {}) {
    require(train_per_class >= 1 && test_per_class >= 1,
            "measure_transfer: per-class counts must be >= 1");
    auto train = worldgen::sample_dataset(world, train_per_class, seed, "probe-train");
    auto test = worldgen::sample_dataset(world, test_per_class, seed, "probe-test");
    std::vector<ToyImage> train_imgs, test_imgs;
    std::vector<std::size_t> train_y, test_y;
    for (const auto& li : train) {
        train_imgs.push_back(li.image);
        train_y.push_back(li.class_id);
    }
    for (const auto& li : test) {
        test_imgs.push_back(li.image);
        test_y.push_back(li.class_id);
    }
    auto train_x = enc.encode_image(train_imgs);
    auto test_x = enc.encode_image(test_imgs);

    MetricsReport report;
    report.probe = fewshot_curve(train_x, train_y, test_x, test_y, fractions, seeds,
                                 config);
    report.metadata["train_per_class"] = train_per_class;
    report.metadata["test_per_class"] = test_per_class;
    report.metadata["regularization"] = config.regularization;
    return report;
}

}  // namespace lbgen::evaluation
