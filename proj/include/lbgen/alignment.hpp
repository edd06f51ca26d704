#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lbgen/autodiff.hpp"
#include "lbgen/checkpoint.hpp"
#include "lbgen/errors.hpp"
#include "lbgen/nn.hpp"
#include "lbgen/rng.hpp"
#include "lbgen/tensor.hpp"
#include "lbgen/types.hpp"

namespace lbgen::alignment {

// Keeps the discriminator output strictly inside (0,1) so both log terms of
// the entire-alignment loss stay finite.
inline constexpr double kEpsClamp = 1e-7;

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

// Linear-ReLU-Linear scorer over the shared feature space with a logistic
// output stage. The final layer starts at zero, so a fresh discriminator
// outputs exactly 0.5 everywhere.
struct Discriminator {
    int feature_dim = 0;
    int hidden = 0;
    nn::Linear l1, l2;

    ad::Var discriminate_var(const ad::Var& f) const {
        require(f.numel() == static_cast<std::size_t>(feature_dim),
                "discriminator: feature dimension mismatch");
        ad::Var y = ad::sigmoid(l2(ad::relu(l1(f))));
        return ad::clamp(y, kEpsClamp, 1.0 - kEpsClamp);
    }

    double discriminate(const FeatureVector& f) const {
        ad::NoGradGuard guard;
        return discriminate_var(ad::Var::constant(Tensor::from_vector(f.values))).scalar();
    }

    void params(std::vector<ad::Var>& out) const {
        l1.params(out);
        l2.params(out);
    }

    void set_trainable(bool t) {
        l1.set_trainable(t);
        l2.set_trainable(t);
    }
};

// hidden = 0 picks the default width of 4x the feature dimension.
inline Discriminator make_discriminator(int feature_dim, std::uint64_t seed, int hidden = 0) {
    require(feature_dim >= 1, "discriminator: feature_dim must be >= 1");
    if (hidden == 0) hidden = 4 * feature_dim;
    require(hidden >= 1, "discriminator: hidden must be >= 1");
    Discriminator d;
    d.feature_dim = feature_dim;
    d.hidden = hidden;
    RngStream rng(seed, "discriminator/init");
    d.l1 = nn::Linear(static_cast<std::size_t>(feature_dim),
                      static_cast<std::size_t>(hidden), rng);
    d.l2 = nn::Linear(static_cast<std::size_t>(hidden), 1, rng);
    for (double& v : d.l2.W.mutable_value().data) v = 0.0;  // output starts at 0.5
    return d;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Entire-dataset alignment loss: log D(f_text) + log(1 - D(f_image)). The
// text feature enters as a plain tensor, so by construction no gradient ever
// flows from this loss into whatever produced it; only the image branch is
// differentiable.
inline ad::Var entire_alignment_loss_var(const Discriminator& disc, const Tensor& f_text,
                                         const ad::Var& f_image) {
    ad::Var dt = disc.discriminate_var(ad::Var::constant(f_text));
    ad::Var di = disc.discriminate_var(f_image);
    return ad::add(ad::log(dt), ad::log(ad::sub(ad::Var::constant(1.0), di)));
}

inline double entire_alignment_loss(const Discriminator& disc, const FeatureVector& f_text,
                                    const FeatureVector& f_image) {
    ad::NoGradGuard guard;
    return entire_alignment_loss_var(disc, Tensor::from_vector(f_text.values),
                                     ad::Var::constant(Tensor::from_vector(f_image.values)))
        .scalar();
}

// Uniform draw over all classes except the excluded one.
inline std::size_t select_negative_class(std::size_t num_classes, std::size_t exclude,
                                         RngStream& rng) {
    require(num_classes >= 2, "select_negative_class: need at least two classes");
    require(exclude < num_classes, "select_negative_class: exclude out of range");
    std::size_t pick = rng.uniform_int(num_classes - 1);
    return pick >= exclude ? pick + 1 : pick;
}

inline std::size_t select_negative_class(const ClassVocabulary& vocab, std::size_t exclude,
                                         RngStream& rng) {
    return select_negative_class(vocab.size(), exclude, rng);
}

// Individual alignment loss: 1 - cos(f_im, f_pc). Divides by the norms even
// though inputs are nominally unit-norm, so positive rescaling of either raw
// feature leaves the value unchanged.
inline ad::Var individual_alignment_loss_var(const ad::Var& f_image, const Tensor& f_pc) {
    require(f_image.numel() == f_pc.numel(),
            "individual_alignment_loss: dimension mismatch");
    ad::Var p = ad::Var::constant(f_pc);
    ad::Var cos = ad::div(ad::dot(f_image, p), ad::mul(ad::norm(f_image), ad::norm(p)));
    return ad::sub(ad::Var::constant(1.0), cos);
}

inline double individual_alignment_loss(const FeatureVector& f_im, const FeatureVector& f_pc) {
    return 1.0 - cosine(f_im, f_pc);  // cosine validates dims and norms
}

inline double bi_level_loss(double l_en, double l_in) { return l_en + l_in; }

inline ad::Var bi_level_loss(const ad::Var& l_en, const ad::Var& l_in) {
    return ad::add(l_en, l_in);
}

// Discriminator loss to minimize: the negated entire-alignment loss, so a
// descent step on this objective is an ascent step on L_en.
inline ad::Var discriminator_objective_var(const Discriminator& disc, const Tensor& f_text,
                                           const Tensor& f_image) {
    return ad::scale(
        entire_alignment_loss_var(disc, f_text, ad::Var::constant(f_image)), -1.0);
}

inline double discriminator_objective(const Discriminator& disc, const FeatureVector& f_text,
                                      const FeatureVector& f_image) {
    return -entire_alignment_loss(disc, f_text, f_image);
}

// Generator-side adversarial term. The literal Eq.-5 form minimizes
// log(1 - D(f_im)); the non-saturating alternative minimizes -log D(f_im)
// instead (same fixed points, stronger gradient when D rejects the image).
inline ad::Var adversarial_generator_term(const Discriminator& disc, const ad::Var& f_image,
                                          bool non_saturating = false) {
    ad::Var di = disc.discriminate_var(f_image);
    if (non_saturating) return ad::scale(ad::log(di), -1.0);
    return ad::log(ad::sub(ad::Var::constant(1.0), di));
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline Checkpoint collect_discriminator(const Discriminator& d) {
    Checkpoint ck;
    ck.kind = "discriminator";
    ck.dtype = "f64";
    ck.meta["feature_dim"] = d.feature_dim;
    ck.meta["hidden"] = d.hidden;
    d.l1.collect("l1", ck);
    d.l2.collect("l2", ck);
    return ck;
}

inline Discriminator discriminator_from_checkpoint(const Checkpoint& ck) {
    require(ck.kind == "discriminator",
            "discriminator: checkpoint kind is '" + ck.kind + "'");
    int fd = ck.meta.at("feature_dim").get<int>();
    int hidden = ck.meta.at("hidden").get<int>();
    Discriminator d = make_discriminator(fd, 0, hidden);
    d.l1.restore("l1", ck);
    d.l2.restore("l2", ck);
    return d;
}

inline void save_discriminator(const Discriminator& d, const std::filesystem::path& path) {
    save_checkpoint(collect_discriminator(d), path);
}

inline Discriminator load_discriminator(const std::filesystem::path& path) {
    return discriminator_from_checkpoint(load_checkpoint(path));
}

}  // namespace lbgen::alignment
