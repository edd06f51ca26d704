#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lbgen/autodiff.hpp"
#include "lbgen/checkpoint.hpp"
#include "lbgen/errors.hpp"
#include "lbgen/nn.hpp"
#include "lbgen/optim.hpp"
#include "lbgen/rng.hpp"
#include "lbgen/tensor.hpp"
#include "lbgen/types.hpp"
#include "lbgen/worldgen.hpp"

namespace lbgen::generator {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

struct NoiseSchedule {
    std::vector<double> betas;       // beta_t, index t-1
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // prod_{s<=t} alpha_s

    int T() const { return static_cast<int>(betas.size()); }

    double alpha_bar_prev(int t) const {  // abar_{t-1}, abar_0 = 1
        return t >= 2 ? alpha_bars[t - 2] : 1.0;
    }

    // Posterior noise scale for the ancestral update; zero at the final step.
    double sigma(int t) const {
        if (t <= 1) return 0.0;
        return std::sqrt((1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bars[t - 1]) * betas[t - 1]);
    }

    void validate() const {
        require(!betas.empty(), "schedule: empty");
        double prev = 0.0;
        for (double b : betas) {
            require(b > 0.0 && b < 1.0, "schedule: betas must lie in (0,1)");
            require(b >= prev, "schedule: betas must be non-decreasing");
            prev = b;
        }
        for (double ab : alpha_bars)
            require(ab > 0.0 && ab < 1.0, "schedule: alpha_bars must lie in (0,1)");
    }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> betas) {
    NoiseSchedule s;
    s.betas = std::move(betas);
    double prod = 1.0;
    for (double b : s.betas) {
        s.alphas.push_back(1.0 - b);
        prod *= 1.0 - b;
        s.alpha_bars.push_back(prod);
    }
    s.validate();
    return s;
}

// Cosine alpha-bar schedule: abar(t) ~ cos^2((t/T + s)/(1 + s) * pi/2).
inline NoiseSchedule make_schedule(int T) {
    require(T >= 1, "schedule: T must be >= 1");
    const double s = 0.008;
    auto abar = [&](double t) {
        double x = (t / T + s) / (1.0 + s) * (3.14159265358979323846 / 2.0);
        double c = std::cos(x);
        return c * c;
    };
    double a0 = abar(0.0);
    std::vector<double> betas;
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
        double cur = abar(static_cast<double>(t)) / a0;
        double beta = 1.0 - cur / prev;
        betas.push_back(std::clamp(beta, 1e-6, 0.999));
        prev = cur;
    }
    return schedule_from_betas(std::move(betas));
}

// ---------------------------------------------------------------------------
// Fixed pixel decoder (frozen-VAE stand-in)
// ---------------------------------------------------------------------------

// Latents are 3-channel grids of side latent_side, interleaved like pixels
// and expressed in scaled logit space. Decoding bilinearly upsamples to the
// pixel grid, multiplies by a fixed gain and saturates with a sigmoid — a
// fixed affine map plus a smooth clamp to [0,1]. With latent_side equal to
// the image resolution the codec is exactly invertible up to the clamp
// margin, mirroring the frozen-autoencoder pattern of latent diffusion. The
// gain keeps well-formed latents at roughly unit scale so the diffusion
// noise actually corrupts them.
struct PixelDecoder {
    int resolution = 0;
    int latent_side = 0;
    double gain = 4.0;
    double clamp_delta = 0.01;
    Tensor up;  // (3R^2 x 3L^2) bilinear interpolation; empty when L == R

    std::size_t latent_dim() const {
        return static_cast<std::size_t>(latent_side) * latent_side * 3;
    }
    std::size_t pixel_dim() const {
        return static_cast<std::size_t>(resolution) * resolution * 3;
    }

    ad::Var decode_var(const ad::Var& latent) const {
        require(latent.numel() == latent_dim(), "decoder: latent size mismatch");
        ad::Var lifted = latent_side == resolution
                             ? latent
                             : ad::matvec(ad::Var::constant(up), latent);
        return ad::sigmoid(ad::scale(lifted, gain));
    }

    ToyImage decode(const Tensor& latent) const {
        ad::NoGradGuard guard;
        ad::Var px = decode_var(ad::Var::constant(latent));
        ToyImage img(static_cast<std::size_t>(resolution), static_cast<std::size_t>(resolution));
        img.pixels = px.value().data;
        return img;
    }

    // Pre-image of the decoder: clamped logit of the pixels divided by the
    // gain, area-averaged down to the latent grid when the sides differ.
    Tensor encode_latent(const ToyImage& img) const {
        img.check(static_cast<std::size_t>(resolution));
        std::vector<double> logit(img.pixels.size());
        for (std::size_t i = 0; i < logit.size(); ++i) {
            double p = std::clamp(img.pixels[i], clamp_delta, 1.0 - clamp_delta);
            logit[i] = std::log(p / (1.0 - p)) / gain;
        }
        if (latent_side == resolution) return Tensor::from_vector(std::move(logit));
        int R = resolution, L = latent_side;
        Tensor z({latent_dim()});
        // Fractional box overlap between latent cells and pixel cells.
        double cell = static_cast<double>(R) / L;
        for (int ly = 0; ly < L; ++ly)
            for (int lx = 0; lx < L; ++lx)
                for (int c = 0; c < 3; ++c) {
                    double y0 = ly * cell, y1 = (ly + 1) * cell;
                    double x0 = lx * cell, x1 = (lx + 1) * cell;
                    double acc = 0.0, wsum = 0.0;
                    for (int py = static_cast<int>(y0); py < R && py < y1; ++py)
                        for (int px = static_cast<int>(x0); px < R && px < x1; ++px) {
                            double wy = std::min<double>(py + 1, y1) - std::max<double>(py, y0);
                            double wx = std::min<double>(px + 1, x1) - std::max<double>(px, x0);
                            double w = wy * wx;
                            acc += w * logit[(static_cast<std::size_t>(py) * R + px) * 3 + c];
                            wsum += w;
                        }
                    z.data[(static_cast<std::size_t>(ly) * L + lx) * 3 + c] = acc / wsum;
                }
        return z;
    }
};

inline PixelDecoder make_decoder(int resolution, int latent_side) {
    require(resolution >= 2, "decoder: resolution must be >= 2");
    require(latent_side >= 1, "decoder: latent_side must be >= 1");
    require(latent_side <= resolution, "decoder: latent_side must be <= resolution");
    PixelDecoder d;
    d.resolution = resolution;
    d.latent_side = latent_side;
    if (latent_side == resolution) return d;
    int R = resolution, L = latent_side;
    d.up = Tensor({d.pixel_dim(), d.latent_dim()});
    for (int py = 0; py < R; ++py)
        for (int px = 0; px < R; ++px) {
            // Continuous latent coordinate of this pixel center.
            double v = (py + 0.5) * L / R - 0.5;
            double u = (px + 0.5) * L / R - 0.5;
            int v0 = static_cast<int>(std::floor(v)), u0 = static_cast<int>(std::floor(u));
            double fv = v - v0, fu = u - u0;
            for (int dy = 0; dy <= 1; ++dy)
                for (int dx = 0; dx <= 1; ++dx) {
                    int ly = std::clamp(v0 + dy, 0, L - 1);
                    int lx = std::clamp(u0 + dx, 0, L - 1);
                    double w = (dy ? fv : 1.0 - fv) * (dx ? fu : 1.0 - fu);
                    for (int c = 0; c < 3; ++c) {
                        std::size_t row = (static_cast<std::size_t>(py) * R + px) * 3 +
                                          static_cast<std::size_t>(c);
                        std::size_t col = (static_cast<std::size_t>(ly) * L + lx) * 3 +
                                          static_cast<std::size_t>(c);
                        d.up.data[row * d.latent_dim() + col] += w;
                    }
                }
        }
    return d;
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

struct DenoiserSpec {
    int latent_side = 16;  // latent grid side; 3 channels, like the pixels
    int cond_dim = 8;
    int time_dim = 4;
    int hidden = 64;
    int num_classes = 10;
    int image_resolution = 16;

    int latent_dim() const { return 3 * latent_side * latent_side; }
    int input_dim() const { return latent_dim() + cond_dim + time_dim + 2; }

    void validate() const {
        require(latent_side >= 1, "denoiser: latent_side must be >= 1");
        require(cond_dim >= 1, "denoiser: cond_dim must be >= 1");
        require(time_dim >= 2 && time_dim % 2 == 0, "denoiser: time_dim must be even and >= 2");
        require(hidden >= 1, "denoiser: hidden must be >= 1");
        require(num_classes >= 1, "denoiser: num_classes must be >= 1");
        require(image_resolution >= 2, "denoiser: image_resolution must be >= 2");
    }

    bool operator==(const DenoiserSpec&) const = default;
};

// Fixed sinusoidal embedding of the chain position tau = t/T.
inline Tensor time_embedding(int t, int T, int dim) {
    Tensor e({static_cast<std::size_t>(dim)});
    double tau = static_cast<double>(t) / static_cast<double>(T);
    for (int p = 0; p < dim / 2; ++p) {
        double w = 3.14159265358979323846 * std::ldexp(1.0, p);  // pi * 2^p
        e.data[2 * p] = std::sin(w * tau);
        e.data[2 * p + 1] = std::cos(w * tau);
    }
    return e;
}

// Timestep- and class-conditioned noise predictor. Class condition comes from
// a learned embedding table with one extra row, the null token, used for the
// unconditional guidance branch. Besides the sinusoidal position embedding,
// the input carries the schedule values sqrt(abar_t) and sqrt(1-abar_t), and
// the output adds a zero-initialized gated skip g * z_t / sqrt(1-abar_t) —
// the analytically dominant component of the optimal noise prediction — so
// the network only has to learn the data-dependent remainder. All three
// linear layers accept low-rank adapters; with a zero adapter the forward
// equals the base network exactly.
struct Denoiser {
    DenoiserSpec spec;
    nn::AdaptedLinear l0, l1, l2;
    ad::Var skip_gain;                      // scalar, starts at zero
    std::vector<ad::Var> class_embeddings;  // num_classes + 1 rows; last = null
    PixelDecoder decoder;

    std::size_t null_class_token() const { return static_cast<std::size_t>(spec.num_classes); }

    bool has_adapter() const { return l0.has_adapter; }

    ad::Var forward(const ad::Var& z, const NoiseSchedule& schedule, int t,
                    std::size_t cond) const {
        require(z.numel() == static_cast<std::size_t>(spec.latent_dim()),
                "denoiser: latent size mismatch");
        require(cond < class_embeddings.size(), "denoiser: condition index out of range");
        require(t >= 1 && t <= schedule.T(), "denoiser: t out of range");
        double ab = schedule.alpha_bars[static_cast<std::size_t>(t - 1)];
        Tensor tf = time_embedding(t, schedule.T(), spec.time_dim);
        Tensor xt({static_cast<std::size_t>(spec.time_dim) + 2});
        std::copy(tf.data.begin(), tf.data.end(), xt.data.begin());
        xt.data[static_cast<std::size_t>(spec.time_dim)] = std::sqrt(ab);
        xt.data[static_cast<std::size_t>(spec.time_dim) + 1] = std::sqrt(1.0 - ab);
        ad::Var x = ad::concat({z, ad::Var::constant(std::move(xt)), class_embeddings[cond]});
        ad::Var h = ad::tanh(l0(x));
        h = ad::tanh(l1(h));
        ad::Var out = l2(h);
        return ad::add(out, ad::mul(skip_gain, ad::scale(z, 1.0 / std::sqrt(1.0 - ab))));
    }

    void base_params(std::vector<ad::Var>& out) const {
        l0.base.params(out);
        l1.base.params(out);
        l2.base.params(out);
        out.push_back(skip_gain);
        for (const auto& e : class_embeddings) out.push_back(e);
    }

    void adapter_params(std::vector<ad::Var>& out) const {
        require(has_adapter(), "denoiser: no adapter attached");
        l0.adapter.params(out);
        l1.adapter.params(out);
        l2.adapter.params(out);
    }

    std::vector<ad::Var> trainable_params() const {
        std::vector<ad::Var> out;
        if (has_adapter())
            adapter_params(out);
        else
            base_params(out);
        return out;
    }

    void set_base_trainable(bool t) {
        l0.base.set_trainable(t);
        l1.base.set_trainable(t);
        l2.base.set_trainable(t);
        skip_gain.node()->requires_grad = t;
        for (auto& e : class_embeddings) e.node()->requires_grad = t;
    }
};

inline Denoiser make_denoiser(const DenoiserSpec& spec, std::uint64_t seed) {
    spec.validate();
    Denoiser d;
    d.spec = spec;
    RngStream rng(seed, "generator/init");
    d.l0 = nn::AdaptedLinear(nn::Linear(spec.input_dim(), spec.hidden, rng));
    d.l1 = nn::AdaptedLinear(nn::Linear(spec.hidden, spec.hidden, rng));
    d.l2 = nn::AdaptedLinear(nn::Linear(spec.hidden, spec.latent_dim(), rng));
    d.skip_gain = ad::Var::param(Tensor::scalar(0.0));
    RngStream erng(seed, "generator/init/embed");
    for (int c = 0; c <= spec.num_classes; ++c) {
        Tensor e({static_cast<std::size_t>(spec.cond_dim)});
        for (double& v : e.data) v = erng.gaussian();
        d.class_embeddings.push_back(ad::Var::param(std::move(e)));
    }
    d.decoder = make_decoder(spec.image_resolution, spec.latent_side);
    return d;
}

// Attaches low-rank factors to every linear layer; freezes the base weights
// and the class-embedding table so only the factors remain trainable.
inline void apply_adapter(Denoiser& d, std::size_t rank, double alpha, std::uint64_t seed) {
    require(!d.has_adapter(), "denoiser: adapter already attached");
    RngStream rng(seed, "generator/adapter-init");
    d.l0.attach_adapter(rank, alpha, rng);
    d.l1.attach_adapter(rank, alpha, rng);
    d.l2.attach_adapter(rank, alpha, rng);
    d.skip_gain.node()->requires_grad = false;
    for (auto& e : d.class_embeddings) e.node()->requires_grad = false;
}

// ---------------------------------------------------------------------------
// Checkpointing and deep copies
// ---------------------------------------------------------------------------

inline Checkpoint collect_generator(const Denoiser& d) {
    Checkpoint ck;
    ck.kind = "generator";
    ck.dtype = "f64";
    ck.meta["latent_side"] = d.spec.latent_side;
    ck.meta["cond_dim"] = d.spec.cond_dim;
    ck.meta["time_dim"] = d.spec.time_dim;
    ck.meta["hidden"] = d.spec.hidden;
    ck.meta["num_classes"] = d.spec.num_classes;
    ck.meta["image_resolution"] = d.spec.image_resolution;
    d.l0.base.collect("l0", ck);
    d.l1.base.collect("l1", ck);
    d.l2.base.collect("l2", ck);
    ck.add("skip_gain", d.skip_gain.value());
    for (std::size_t i = 0; i < d.class_embeddings.size(); ++i)
        ck.add("embed." + std::to_string(i), d.class_embeddings[i].value());
    return ck;
}

inline Denoiser generator_from_checkpoint(const Checkpoint& ck) {
    require(ck.kind == "generator", "generator: checkpoint kind is '" + ck.kind + "'");
    DenoiserSpec spec;
    spec.latent_side = ck.meta.at("latent_side").get<int>();
    spec.cond_dim = ck.meta.at("cond_dim").get<int>();
    spec.time_dim = ck.meta.at("time_dim").get<int>();
    spec.hidden = ck.meta.at("hidden").get<int>();
    spec.num_classes = ck.meta.at("num_classes").get<int>();
    spec.image_resolution = ck.meta.at("image_resolution").get<int>();
    Denoiser d = make_denoiser(spec, 0);
    d.l0.base.restore("l0", ck);
    d.l1.base.restore("l1", ck);
    d.l2.base.restore("l2", ck);
    d.skip_gain.mutable_value() = ck.tensor("skip_gain");
    for (std::size_t i = 0; i < d.class_embeddings.size(); ++i) {
        const Tensor& t = ck.tensor("embed." + std::to_string(i));
        require(t.shape == d.class_embeddings[i].value().shape,
                "generator: embedding shape mismatch in checkpoint");
        d.class_embeddings[i].mutable_value() = t;
    }
    return d;
}

inline void save_generator(const Denoiser& d, const std::filesystem::path& path) {
    save_checkpoint(collect_generator(d), path);
}

inline Denoiser load_generator(const std::filesystem::path& path) {
    return generator_from_checkpoint(load_checkpoint(path));
}

inline Checkpoint collect_adapter(const Denoiser& d) {
    require(d.has_adapter(), "adapter: none attached");
    Checkpoint ck;
    ck.kind = "adapter";
    ck.dtype = "f64";
    ck.meta["rank"] = d.l0.adapter.rank;
    ck.meta["alpha"] = d.l0.adapter.alpha;
    d.l0.adapter.collect("l0", ck);
    d.l1.adapter.collect("l1", ck);
    d.l2.adapter.collect("l2", ck);
    return ck;
}

inline void restore_adapter(Denoiser& d, const Checkpoint& ck) {
    require(ck.kind == "adapter", "adapter: checkpoint kind is '" + ck.kind + "'");
    std::size_t rank = ck.meta.at("rank").get<std::size_t>();
    double alpha = ck.meta.at("alpha").get<double>();
    if (!d.has_adapter()) apply_adapter(d, rank, alpha, 0);
    require(d.l0.adapter.rank == rank, "adapter: rank mismatch with attached adapter");
    d.l0.adapter.restore("l0", ck);
    d.l1.adapter.restore("l1", ck);
    d.l2.adapter.restore("l2", ck);
}

inline void save_adapter(const Denoiser& d, const std::filesystem::path& path) {
    save_checkpoint(collect_adapter(d), path);
}

inline void load_adapter(Denoiser& d, const std::filesystem::path& path) {
    restore_adapter(d, load_checkpoint(path));
}

// Deep copy with independent parameter storage (copying the struct directly
// would share parameter nodes between the two models).
inline Denoiser clone(const Denoiser& d) {
    Denoiser out = generator_from_checkpoint(collect_generator(d));
    if (d.has_adapter()) restore_adapter(out, collect_adapter(d));
    return out;
}

// Returns a model whose base weights absorb (alpha/rank) * B * A; the input
// keeps its adapter. The merged forward equals the adapted forward.
inline Denoiser merge_adapter(const Denoiser& d) {
    require(d.has_adapter(), "merge: no adapter attached");
    Denoiser out = clone(d);
    out.l0.merge();
    out.l1.merge();
    out.l2.merge();
    return out;
}

// ---------------------------------------------------------------------------
// Guidance and gradient masks
// ---------------------------------------------------------------------------

inline ad::Var cfg_combine(const ad::Var& uncond, const ad::Var& cond, double s) {
    require(uncond.numel() == cond.numel(), "cfg_combine: shape mismatch");
    return ad::add(uncond, ad::scale(ad::sub(cond, uncond), s));
}

inline Tensor cfg_combine(const Tensor& uncond, const Tensor& cond, double s) {
    require(uncond.shape == cond.shape, "cfg_combine: shape mismatch");
    Tensor out = uncond;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] += s * (cond.data[i] - uncond.data[i]);
    return out;
}

struct GradMask {
    std::vector<bool> flags;  // length T, true = gradient-enabled

    std::size_t count_true() const {
        std::size_t n = 0;
        for (bool f : flags)
            if (f) ++n;
        return n;
    }
};

// Uniformly random k-subset of the T steps; draw one fresh per iteration.
inline GradMask make_grad_mask(int T, int k, RngStream& rng) {
    require(k >= 1, "grad_mask: k must be >= 1");
    require(k <= T, "grad_mask: k must be <= T");
    std::vector<int> idx(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i) idx[static_cast<std::size_t>(i)] = i;
    // Partial Fisher-Yates: the first k entries become the chosen subset.
    for (int i = 0; i < k; ++i) {
        std::size_t j = static_cast<std::size_t>(i) +
                        rng.uniform_int(static_cast<std::uint64_t>(T - i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }
    GradMask m;
    m.flags.assign(static_cast<std::size_t>(T), false);
    for (int i = 0; i < k; ++i) m.flags[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = true;
    return m;
}

// Alternative deterministic rule: enable the final k chain steps (t = k..1).
inline GradMask make_grad_mask_suffix(int T, int k) {
    require(k >= 1 && k <= T, "grad_mask: k must be in [1, T]");
    GradMask m;
    m.flags.assign(static_cast<std::size_t>(T), false);
    for (int i = 0; i < k; ++i) m.flags[static_cast<std::size_t>(i)] = true;
    return m;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SampleResult {
    ToyImage image;
    ad::Var image_var;               // differentiable pixels when grad mode is on
    std::vector<Latent> trajectory;  // z_T down to z_0
};

struct SampleOptions {
    const GradMask* mask = nullptr;  // null = gradients enabled at every step
    // Test hooks for the finite-difference oracle: record captures each
    // gradient-disabled step's guided noise prediction; replay substitutes
    // recorded values so a perturbed run keeps the stop-gradient semantics of
    // the base run (disabled steps stay constant under perturbation).
    std::vector<Tensor>* record_detached = nullptr;
    const std::vector<Tensor>* replay_detached = nullptr;
};

namespace detail {

inline ad::Var guided_eps(const Denoiser& d, const ad::Var& z, const NoiseSchedule& schedule,
                          int t, std::optional<std::size_t> class_id, double s) {
    if (!class_id.has_value()) return d.forward(z, schedule, t, d.null_class_token());
    ad::Var cond = d.forward(z, schedule, t, *class_id);
    ad::Var uncond = d.forward(z, schedule, t, d.null_class_token());
    return cfg_combine(uncond, cond, s);
}

}  // namespace detail

// DDPM-style ancestral sampling with classifier-free guidance, written in
// the x0 form of the posterior mean: the clean-latent estimate implied by
// the noise prediction is softly saturated to the codec's valid range
// (B * tanh(x0 / B), smooth everywhere) before the update — this tames
// guidance extrapolation at the short toy chain length. Without the
// saturation the update is algebraically the plain ancestral step. Gradient
// masking follows the deep-reward recipe: at a disabled step the denoiser
// application is treated as a constant for differentiation (no gradient
// reaches the network there), while the arithmetic of the update stays
// connected so gradients still reach enabled steps earlier in the chain.
// All noise is drawn up front in a fixed order, so stream consumption is
// identical for every mask and adapter configuration.
inline SampleResult sample(const Denoiser& d, std::optional<std::size_t> class_id,
                           const NoiseSchedule& schedule, double guidance_scale,
                           RngStream& noise_rng, const SampleOptions& opts = {}) {
    schedule.validate();
    int T = schedule.T();
    if (class_id.has_value())
        require(*class_id < static_cast<std::size_t>(d.spec.num_classes),
                "sample: class_id out of range");
    if (opts.mask)
        require(opts.mask->flags.size() == static_cast<std::size_t>(T),
                "sample: mask length must equal T");

    std::size_t L = static_cast<std::size_t>(d.spec.latent_dim());
    Tensor z_init({L});
    for (double& v : z_init.data) v = noise_rng.gaussian();
    std::vector<Tensor> xi;  // ancestral noise for t = T .. 2
    for (int t = T; t >= 2; --t) {
        Tensor x({L});
        for (double& v : x.data) v = noise_rng.gaussian();
        xi.push_back(std::move(x));
    }

    // Saturation bound: latents of images already at the clamp margin sit at
    // about 1.15, so the soft clip is gentle there and only bites on wild
    // guidance extrapolations.
    const double bound = std::log(0.999 / 0.001) / d.decoder.gain;

    SampleResult res;
    ad::Var z = ad::Var::constant(z_init);
    res.trajectory.push_back({z.value().data, T});
    std::size_t replay_idx = 0;
    for (int t = T; t >= 1; --t) {
        bool enabled = !opts.mask || opts.mask->flags[static_cast<std::size_t>(t - 1)];
        ad::Var eps;
        if (enabled) {
            eps = detail::guided_eps(d, z, schedule, t, class_id, guidance_scale);
        } else {
            Tensor ev;
            if (opts.replay_detached) {
                require(replay_idx < opts.replay_detached->size(),
                        "sample: replay buffer shorter than disabled-step count");
                ev = (*opts.replay_detached)[replay_idx++];
            } else {
                ad::NoGradGuard guard;
                ev = detail::guided_eps(d, ad::Var::constant(z.value()), schedule, t,
                                        class_id, guidance_scale)
                         .value();
            }
            if (opts.record_detached) opts.record_detached->push_back(ev);
            eps = ad::Var::constant(std::move(ev));
        }
        double ab = schedule.alpha_bars[static_cast<std::size_t>(t - 1)];
        double abp = schedule.alpha_bar_prev(t);
        double a = schedule.alphas[static_cast<std::size_t>(t - 1)];
        double bt = schedule.betas[static_cast<std::size_t>(t - 1)];
        ad::Var x0 = ad::scale(ad::sub(z, ad::scale(eps, std::sqrt(1.0 - ab))),
                               1.0 / std::sqrt(ab));
        x0 = ad::scale(ad::tanh(ad::scale(x0, 1.0 / bound)), bound);
        z = ad::add(ad::scale(x0, std::sqrt(abp) * bt / (1.0 - ab)),
                    ad::scale(z, std::sqrt(a) * (1.0 - abp) / (1.0 - ab)));
        if (t >= 2) {
            Tensor noise = xi[static_cast<std::size_t>(T - t)];
            double sg = schedule.sigma(t);
            for (double& v : noise.data) v *= sg;
            z = ad::add(z, ad::Var::constant(std::move(noise)));
        }
        res.trajectory.push_back({z.value().data, t - 1});
    }
    res.image_var = d.decoder.decode_var(z);
    res.image = ToyImage(static_cast<std::size_t>(d.spec.image_resolution),
                         static_cast<std::size_t>(d.spec.image_resolution));
    res.image.pixels = res.image_var.value().data;
    return res;
}

// ---------------------------------------------------------------------------
// Base pre-training (denoising loss)
// ---------------------------------------------------------------------------

// Per-element denoising loss mean((eps_hat - eps)^2) for one forward-noised
// draw z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps.
inline ad::Var denoising_loss_sample(const Denoiser& d, const NoiseSchedule& schedule,
                                     const Tensor& z0, int t, const Tensor& eps,
                                     std::size_t cond) {
    require(t >= 1 && t <= schedule.T(), "denoising_loss: t out of range");
    double ab = schedule.alpha_bars[static_cast<std::size_t>(t - 1)];
    Tensor zt = z0;
    for (std::size_t i = 0; i < zt.data.size(); ++i)
        zt.data[i] = std::sqrt(ab) * zt.data[i] + std::sqrt(1.0 - ab) * eps.data[i];
    ad::Var pred = d.forward(ad::Var::constant(std::move(zt)), schedule, t, cond);
    return ad::mean(ad::square(ad::sub(pred, ad::Var::constant(eps))));
}

struct PretrainBaseResult {
    Denoiser denoiser;
    double initial_loss = 0.0;  // mean over the first window of steps
    double final_loss = 0.0;    // mean over the last window of steps
    std::size_t steps = 0;
};

// Step count at which the windowed denoising loss falls well under half its
// initial value on the default ten-class world (oracle run measured ~0.35x).
inline constexpr std::size_t kDefaultBasePretrainSteps = 3000;

// Trains the class-conditional denoiser on biased worldgen draws
// (rho_train = 0.9 by default at call sites). Each step averages the loss
// over a small batch; the condition is replaced by the null token with
// probability p_drop to enable classifier-free guidance later.
inline PretrainBaseResult pretrain_base(const worldgen::World& world, double rho_train,
                                        const NoiseSchedule& schedule, const DenoiserSpec& spec,
                                        std::size_t steps, std::uint64_t seed,
                                        std::size_t batch = 8, double p_drop = 0.1,
                                        double lr = 2e-3) {
    require(steps >= 1, "pretrain_base: steps must be >= 1");
    require(batch >= 1, "pretrain_base: batch must be >= 1");
    require(spec.num_classes == static_cast<int>(world.num_classes()),
            "pretrain_base: spec classes must match world classes");
    require(spec.image_resolution == static_cast<int>(world.spec.resolution),
            "pretrain_base: spec resolution must match world resolution");
    schedule.validate();

    PretrainBaseResult res;
    res.denoiser = make_denoiser(spec, seed);
    res.steps = steps;
    Denoiser& d = res.denoiser;

    std::vector<ad::Var> params;
    d.base_params(params);
    optim::AdamWConfig ocfg;
    ocfg.lr = lr;
    optim::AdamW opt(params, ocfg);

    RngStream rng(seed, "generator/pretrain");
    std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(50, steps / 2));
    double head = 0.0, tail = 0.0;
    std::vector<double> recent;
    for (std::size_t step = 0; step < steps; ++step) {
        std::vector<ad::Var> terms;
        for (std::size_t b = 0; b < batch; ++b) {
            std::size_t c = rng.uniform_int(world.num_classes());
            worldgen::LabeledImage li = worldgen::sample_biased(world, c, rho_train, rng);
            Tensor z0 = d.decoder.encode_latent(li.image);
            int t = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(schedule.T())));
            Tensor eps({static_cast<std::size_t>(spec.latent_dim())});
            for (double& v : eps.data) v = rng.gaussian();
            std::size_t cond = rng.uniform() < p_drop ? d.null_class_token() : c;
            terms.push_back(denoising_loss_sample(d, schedule, z0, t, eps, cond));
        }
        ad::Var loss = ad::mean(ad::concat(terms));
        require(std::isfinite(loss.scalar()),
                "pretrain_base: non-finite loss at step " + std::to_string(step));
        if (step < window) head += loss.scalar();
        recent.push_back(loss.scalar());
        if (recent.size() > window) recent.erase(recent.begin());
        opt.zero_grad();
        ad::backward(loss);
        opt.step();
    }
    res.initial_loss = head / static_cast<double>(window);
    for (double v : recent) tail += v;
    res.final_loss = tail / static_cast<double>(recent.size());
    return res;
}

}  // namespace lbgen::generator
