#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "lbgen/errors.hpp"
#include "lbgen/tensor.hpp"

namespace lbgen {

// Unit-norm embedding in the shared image/text space.
struct FeatureVector {
    std::vector<double> values;

    std::size_t dim() const { return values.size(); }

    double norm() const {
        double s = 0.0;
        for (double v : values) s += v * v;
        return std::sqrt(s);
    }

    bool is_unit(double tol = 1e-6) const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return std::fabs(norm() - 1.0) <= tol;
    }

    void check_unit(double tol = 1e-6) const {
        require(is_unit(tol), "FeatureVector: expected finite unit-norm vector");
    }
};

inline double cosine(const FeatureVector& a, const FeatureVector& b) {
    require(a.dim() == b.dim(), "cosine: dimension mismatch");
    double na = a.norm(), nb = b.norm();
    require(na > 0.0 && nb > 0.0, "cosine: zero-norm input");
    return dot(a.values, b.values) / (na * nb);
}

// H x W x 3 image with values in [0, 1], row-major, channel-last.
struct ToyImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;  // height * width * 3

    ToyImage() = default;
    ToyImage(std::size_t h, std::size_t w, double fill = 0.0)
        : height(h), width(w), pixels(h * w * 3, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) {
        return pixels[(y * width + x) * 3 + c];
    }
    double at(std::size_t y, std::size_t x, std::size_t c) const {
        return pixels[(y * width + x) * 3 + c];
    }

    bool in_range(double tol = 1e-9) const {
        for (double v : pixels)
            if (!(v >= -tol && v <= 1.0 + tol)) return false;
        return true;
    }

    void check(std::size_t expected_resolution) const {
        require(height == expected_resolution && width == expected_resolution,
                "ToyImage: resolution mismatch");
        require(in_range(), "ToyImage: pixel value outside [0,1]");
    }
};

// Generator-side latent paired with its chain position.
struct Latent {
    std::vector<double> values;
    int timestep = 0;
};

// Ordered class names plus the prompt template used for descriptions.
// The template must contain exactly one "{name}" placeholder.
struct ClassVocabulary {
    std::vector<std::string> class_names;
    std::string prompt_template = "photo of {name}";

    std::size_t size() const { return class_names.size(); }

    std::string prompt_for(std::size_t class_id) const {
        require(class_id < class_names.size(), "ClassVocabulary: class_id out of range");
        std::string out = prompt_template;
        auto pos = out.find("{name}");
        require(pos != std::string::npos, "ClassVocabulary: template missing {name}");
        out.replace(pos, 6, class_names[class_id]);
        return out;
    }

    void validate() const {
        require(!class_names.empty(), "ClassVocabulary: empty vocabulary");
        std::set<std::string> seen;
        for (const auto& n : class_names) {
            require(!n.empty(), "ClassVocabulary: empty class name");
            require(seen.insert(n).second, "ClassVocabulary: duplicate class name: " + n);
        }
        auto pos = prompt_template.find("{name}");
        require(pos != std::string::npos, "ClassVocabulary: template missing {name}");
        require(prompt_template.find("{name}", pos + 1) == std::string::npos,
                "ClassVocabulary: template has more than one {name}");
    }
};

inline ClassVocabulary make_default_vocab(std::size_t num_classes) {
    ClassVocabulary v;
    for (std::size_t i = 0; i < num_classes; ++i)
        v.class_names.push_back("class_" + std::to_string(i));
    v.validate();
    return v;
}

}  // namespace lbgen
