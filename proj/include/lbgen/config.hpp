#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "lbgen/errors.hpp"
#include "lbgen/hashing.hpp"

namespace lbgen {

// Run configuration. Defaults are the desk-scale settings; the loss weights,
// step counts, optimizer rates and guidance scale follow the reference
// training recipe, while resolution / latent size / adapter rank are scaled
// down so a full run fits on one CPU. Paper-scale values stay legal inputs.
struct RunConfig {
    std::int64_t seed = 0;
    int T = 10;                      // sampling steps
    int grad_steps = 5;              // k: gradient-enabled steps per iteration
    double guidance_scale = 2.0;
    double lambda_q = 0.1;           // quality assurance loss weight
    double generator_lr = 2e-3;      // desk-scale default (reference recipe: 2e-5)
    double discriminator_lr = 1e-3;  // desk-scale default (reference recipe: 1e-5)
    int adapter_rank = 4;
    int epochs = 3;
    int batch_size = 4;
    int feature_dim = 32;
    int latent_shape = 16;
    int image_resolution = 16;

    void validate() const {
        require(T >= 1, "config: T must be >= 1");
        require(grad_steps >= 1, "config: grad_steps must be >= 1");
        require(grad_steps <= T, "config: grad_steps (" + std::to_string(grad_steps) +
                                     ") must be <= T (" + std::to_string(T) + ")");
        require(guidance_scale >= 0.0, "config: guidance_scale must be >= 0");
        require(lambda_q >= 0.0, "config: lambda_q must be >= 0");
        require(generator_lr > 0.0, "config: generator_lr must be > 0");
        require(discriminator_lr > 0.0, "config: discriminator_lr must be > 0");
        require(adapter_rank >= 1, "config: adapter_rank must be >= 1");
        require(epochs >= 1, "config: epochs must be >= 1");
        require(batch_size >= 1, "config: batch_size must be >= 1");
        require(feature_dim >= 1, "config: feature_dim must be >= 1");
        require(latent_shape >= 1, "config: latent_shape must be >= 1");
        require(image_resolution >= 2, "config: image_resolution must be >= 2");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"seed", seed},
                              {"T", T},
                              {"grad_steps", grad_steps},
                              {"guidance_scale", guidance_scale},
                              {"lambda_q", lambda_q},
                              {"generator_lr", generator_lr},
                              {"discriminator_lr", discriminator_lr},
                              {"adapter_rank", adapter_rank},
                              {"epochs", epochs},
                              {"batch_size", batch_size},
                              {"feature_dim", feature_dim},
                              {"latent_shape", latent_shape},
                              {"image_resolution", image_resolution}};
    }

    // Stable hash over the canonical JSON form.
    std::string hash() const { return content_hash(to_json().dump()); }

    bool operator==(const RunConfig&) const = default;
};

namespace detail {

template <typename T>
T get_key(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    try {
        return v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw DomainError(std::string("config: key '") + key + "' has wrong type");
    }
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
    require(j.is_object(), "config: top-level JSON value must be an object");
    RunConfig c;
    const std::set<std::string> allowed = {
        "seed",         "T",          "grad_steps",   "guidance_scale", "lambda_q",
        "generator_lr", "discriminator_lr",           "adapter_rank",   "epochs",
        "batch_size",   "feature_dim", "latent_shape", "image_resolution"};
    for (auto it = j.begin(); it != j.end(); ++it)
        require(allowed.count(it.key()) > 0, "config: unknown key '" + it.key() + "'");
    c.seed = detail::get_key<std::int64_t>(j, "seed", c.seed);
    c.T = detail::get_key<int>(j, "T", c.T);
    c.grad_steps = detail::get_key<int>(j, "grad_steps", c.grad_steps);
    c.guidance_scale = detail::get_key<double>(j, "guidance_scale", c.guidance_scale);
    c.lambda_q = detail::get_key<double>(j, "lambda_q", c.lambda_q);
    c.generator_lr = detail::get_key<double>(j, "generator_lr", c.generator_lr);
    c.discriminator_lr = detail::get_key<double>(j, "discriminator_lr", c.discriminator_lr);
    c.adapter_rank = detail::get_key<int>(j, "adapter_rank", c.adapter_rank);
    c.epochs = detail::get_key<int>(j, "epochs", c.epochs);
    c.batch_size = detail::get_key<int>(j, "batch_size", c.batch_size);
    c.feature_dim = detail::get_key<int>(j, "feature_dim", c.feature_dim);
    c.latent_shape = detail::get_key<int>(j, "latent_shape", c.latent_shape);
    c.image_resolution = detail::get_key<int>(j, "image_resolution", c.image_resolution);
    c.validate();
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot open file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DomainError("config: malformed JSON in " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const RunConfig& c, const std::filesystem::path& path) {
    std::ofstream out(path);
    require(out.good(), "config: cannot write file: " + path.string());
    out << c.to_json().dump(2) << "\n";
}

}  // namespace lbgen
