#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lbgen/errors.hpp"
#include "lbgen/rng.hpp"
#include "lbgen/types.hpp"

namespace lbgen::worldgen {

// Synthetic image world with controllable spurious correlations.
//
// Every class has a shape (an 8x8 glyph) plus a "common" value for each of
// three nuisance attributes: background colour, surface texture, and
// position. During sampling each attribute takes its common value with
// probability rho and otherwise a uniform draw over all values, so
// P(observed = common) = rho + (1 - rho) / V for an attribute with V values.
// rho therefore dials the strength of the shortcut from attribute to label.

constexpr std::size_t kMaxClasses = 16;
constexpr std::size_t kGlyphSize = 8;

struct WorldSpec {
    std::size_t num_classes = 8;
    double rho = 0.9;
    std::size_t resolution = 16;
    std::uint64_t seed = 0;

    void validate() const {
        require(num_classes >= 2 && num_classes <= kMaxClasses,
                "world: num_classes must be in [2, 16], got " + std::to_string(num_classes));
        require(rho >= 0.0 && rho <= 1.0,
                "world: rho must be in [0, 1], got " + std::to_string(rho));
        require(resolution >= 8,
                "world: resolution must be >= 8, got " + std::to_string(resolution));
    }
};

// Oriented sinusoid painted inside the glyph.
struct TexturePattern {
    double fx = 0.0;
    double fy = 0.0;
    double phase = 0.0;
};

struct AttributeAssignment {
    std::size_t background = 0;
    std::size_t texture = 0;
    std::size_t position = 0;
};

struct LabeledImage {
    ToyImage image;
    std::size_t class_id = 0;
    AttributeAssignment attrs;
    int uncommon_count = 0;  // 0..3; partition index for context-bias tests
};

namespace detail {

inline const std::array<std::array<std::uint8_t, 8>, kMaxClasses>& glyph_bank() {
    static const std::array<std::array<std::uint8_t, 8>, kMaxClasses> bank = {{
        {0x00, 0x7E, 0x7E, 0x7E, 0x7E, 0x7E, 0x7E, 0x00},  // filled square
        {0xFF, 0x81, 0x81, 0x81, 0x81, 0x81, 0x81, 0xFF},  // square outline
        {0x81, 0x42, 0x24, 0x18, 0x18, 0x24, 0x42, 0x81},  // X
        {0x18, 0x18, 0x18, 0xFF, 0xFF, 0x18, 0x18, 0x18},  // plus
        {0x18, 0x3C, 0x7E, 0xFF, 0xFF, 0x7E, 0x3C, 0x18},  // diamond
        {0x3C, 0x42, 0x81, 0x81, 0x81, 0x81, 0x42, 0x3C},  // ring
        {0x18, 0x18, 0x3C, 0x3C, 0x7E, 0x7E, 0xFF, 0xFF},  // triangle up
        {0xFF, 0xFF, 0x7E, 0x7E, 0x3C, 0x3C, 0x18, 0x18},  // triangle down
        {0xFF, 0xFF, 0x00, 0x00, 0xFF, 0xFF, 0x00, 0x00},  // horizontal bars
        {0xCC, 0xCC, 0xCC, 0xCC, 0xCC, 0xCC, 0xCC, 0xCC},  // vertical bars
        {0xF0, 0xF0, 0xF0, 0xF0, 0x0F, 0x0F, 0x0F, 0x0F},  // coarse checker
        {0xC0, 0xC0, 0xC0, 0xC0, 0xC0, 0xC0, 0xFF, 0xFF},  // L
        {0xFF, 0xFF, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18},  // T
        {0xFF, 0xFF, 0x06, 0x0C, 0x30, 0x60, 0xFF, 0xFF},  // Z
        {0x00, 0x66, 0x66, 0x00, 0x00, 0x66, 0x66, 0x00},  // four dots
        {0xFF, 0x81, 0x81, 0x99, 0x99, 0x81, 0x81, 0xFF},  // frame with dot
    }};
    return bank;
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1)      { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else             { r = c; b = x; }
    double m = v - c;
    return {r + m, g + m, b + m};
}

inline std::vector<std::size_t> permutation(std::size_t n, RngStream& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = rng.uniform_int(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace detail

struct World {
    WorldSpec spec;
    std::vector<std::array<std::uint8_t, 8>> glyphs;            // per class
    std::vector<std::array<double, 3>> background_palette;      // C + 1 (last = neutral)
    std::vector<TexturePattern> textures;                       // per value, C entries
    std::vector<std::size_t> common_background;                 // per class
    std::vector<std::size_t> common_texture;
    std::vector<std::size_t> common_position;

    std::size_t num_classes() const { return spec.num_classes; }
    std::size_t num_backgrounds() const { return spec.num_classes; }
    std::size_t num_textures() const { return spec.num_classes; }
    static constexpr std::size_t num_positions() { return 5; }
    std::size_t neutral_background() const { return spec.num_classes; }
};

inline World make_world(const WorldSpec& spec) {
    spec.validate();
    World w;
    w.spec = spec;
    std::size_t C = spec.num_classes;

    for (std::size_t c = 0; c < C; ++c) w.glyphs.push_back(detail::glyph_bank()[c]);

    // Muted evenly spaced hues keep the achromatic glyph legible on any
    // background; the extra slot is neutral gray for cue-conflict renders.
    for (std::size_t v = 0; v < C; ++v)
        w.background_palette.push_back(
            detail::hsv_to_rgb(static_cast<double>(v) / static_cast<double>(C), 0.45, 0.85));
    w.background_palette.push_back({0.5, 0.5, 0.5});

    for (std::size_t v = 0; v < C; ++v) {
        double theta = 3.14159265358979323846 * static_cast<double>(v) /
                           static_cast<double>(C) +
                       0.3;
        double f = 2.0 + static_cast<double>(v % 3);
        w.textures.push_back({f * std::cos(theta), f * std::sin(theta),
                              0.7 * static_cast<double>(v)});
    }

    RngStream bg_rng(spec.seed, "worldgen/common/background");
    RngStream tx_rng(spec.seed, "worldgen/common/texture");
    RngStream ps_rng(spec.seed, "worldgen/common/position");
    w.common_background = detail::permutation(C, bg_rng);
    w.common_texture = detail::permutation(C, tx_rng);
    w.common_position.resize(C);
    for (std::size_t c = 0; c < C; ++c)
        w.common_position[c] = ps_rng.uniform_int(World::num_positions());
    return w;
}

// Top-left corners of the glyph box for the five anchor positions.
inline std::array<std::pair<std::size_t, std::size_t>, 5> position_anchors(std::size_t R,
                                                                           std::size_t box) {
    std::size_t pad = (R - box) / 8;
    std::size_t far = R - box - pad;
    std::size_t mid = (R - box) / 2;
    return {{{pad, pad}, {pad, far}, {far, pad}, {far, far}, {mid, mid}}};
}

// Deterministic rasteriser: background colour fill, glyph interior painted
// with its texture sinusoid in grayscale.
inline ToyImage render_image(const World& w, std::size_t glyph_class,
                             const AttributeAssignment& attrs) {
    require(glyph_class < w.num_classes(), "render: glyph class out of range");
    require(attrs.background < w.background_palette.size(), "render: background out of range");
    require(attrs.texture < w.textures.size(), "render: texture out of range");
    require(attrs.position < World::num_positions(), "render: position out of range");

    std::size_t R = w.spec.resolution;
    std::size_t box = R / 2;
    auto anchors = position_anchors(R, box);
    auto [oy, ox] = anchors[attrs.position];
    const auto& bg = w.background_palette[attrs.background];
    const auto& tex = w.textures[attrs.texture];
    const auto& glyph = w.glyphs[glyph_class];

    ToyImage img(R, R);
    for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < R; ++x) {
            bool inside = false;
            if (y >= oy && y < oy + box && x >= ox && x < ox + box) {
                std::size_t gy = (y - oy) * kGlyphSize / box;
                std::size_t gx = (x - ox) * kGlyphSize / box;
                inside = (glyph[gy] >> (7 - gx)) & 1;
            }
            if (inside) {
                double t = 0.5 + 0.5 * std::sin(2.0 * 3.14159265358979323846 *
                                                    (tex.fx * static_cast<double>(x) +
                                                     tex.fy * static_cast<double>(y)) /
                                                    static_cast<double>(R) +
                                                tex.phase);
                double g = 0.15 + 0.7 * t;
                img.at(y, x, 0) = g;
                img.at(y, x, 1) = g;
                img.at(y, x, 2) = g;
            } else {
                img.at(y, x, 0) = bg[0];
                img.at(y, x, 1) = bg[1];
                img.at(y, x, 2) = bg[2];
            }
        }
    return img;
}

// Biased draw: each attribute keeps its class-common value with probability
// rho, otherwise re-draws uniformly over all values (common included), so
// P(common) = rho + (1 - rho)/V.
inline AttributeAssignment sample_attributes_at(const World& w, std::size_t class_id,
                                                double rho, RngStream& rng) {
    require(class_id < w.num_classes(), "sample: class out of range");
    require(rho >= 0.0 && rho <= 1.0,
            "sample: rho must be in [0, 1], got " + std::to_string(rho));
    auto draw = [&](std::size_t common, std::size_t V) {
        if (rng.uniform() < rho) return common;
        return static_cast<std::size_t>(rng.uniform_int(V));
    };
    AttributeAssignment a;
    a.background = draw(w.common_background[class_id], w.num_backgrounds());
    a.texture = draw(w.common_texture[class_id], w.num_textures());
    a.position = draw(w.common_position[class_id], World::num_positions());
    return a;
}

inline AttributeAssignment sample_attributes(const World& w, std::size_t class_id,
                                             RngStream& rng) {
    return sample_attributes_at(w, class_id, w.spec.rho, rng);
}

inline int count_uncommon(const World& w, std::size_t class_id,
                          const AttributeAssignment& a) {
    int n = 0;
    if (a.background != w.common_background[class_id]) ++n;
    if (a.texture != w.common_texture[class_id]) ++n;
    if (a.position != w.common_position[class_id]) ++n;
    return n;
}

// Single biased draw with an explicit bias strength; the labelled result
// carries the attribute assignment and its uncommon count.
inline LabeledImage sample_biased(const World& w, std::size_t class_id, double rho,
                                  RngStream& rng) {
    LabeledImage li;
    li.class_id = class_id;
    li.attrs = sample_attributes_at(w, class_id, rho, rng);
    li.uncommon_count = count_uncommon(w, class_id, li.attrs);
    li.image = render_image(w, class_id, li.attrs);
    return li;
}

// Draw with exactly k of the three attributes forced away from their common
// values; which attributes flip is a uniform size-k subset, and each flipped
// attribute is uniform over its remaining V-1 values. uncommon_count == k by
// construction, so partition probes cover every k even when rho is high.
inline LabeledImage sample_with_uncommon(const World& w, std::size_t class_id, int k,
                                         RngStream& rng) {
    require(class_id < w.num_classes(), "sample: class out of range");
    require(k >= 0 && k <= 3, "sample: uncommon count must be in [0, 3], got " +
                                  std::to_string(k));
    std::array<std::size_t, 3> order = {0, 1, 2};
    for (std::size_t i = 3; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    std::array<bool, 3> flip = {false, false, false};
    for (int i = 0; i < k; ++i) flip[order[static_cast<std::size_t>(i)]] = true;

    auto pick_other = [&](std::size_t common, std::size_t V) {
        std::size_t p = rng.uniform_int(V - 1);
        return p >= common ? p + 1 : p;
    };
    AttributeAssignment a;
    a.background = flip[0] ? pick_other(w.common_background[class_id], w.num_backgrounds())
                           : w.common_background[class_id];
    a.texture = flip[1] ? pick_other(w.common_texture[class_id], w.num_textures())
                        : w.common_texture[class_id];
    a.position = flip[2] ? pick_other(w.common_position[class_id], World::num_positions())
                         : w.common_position[class_id];

    LabeledImage li;
    li.class_id = class_id;
    li.attrs = a;
    li.uncommon_count = count_uncommon(w, class_id, a);
    li.image = render_image(w, class_id, a);
    return li;
}

// Balanced partition probe: per_class images per class for every k in 0..3.
inline std::vector<LabeledImage> build_partition_probe(const World& w, std::size_t per_class,
                                                       std::uint64_t seed) {
    std::vector<LabeledImage> out;
    out.reserve(4 * per_class * w.num_classes());
    for (std::size_t c = 0; c < w.num_classes(); ++c) {
        RngStream rng(seed, "worldgen/partition/class" + std::to_string(c));
        for (int k = 0; k <= 3; ++k)
            for (std::size_t i = 0; i < per_class; ++i)
                out.push_back(sample_with_uncommon(w, c, k, rng));
    }
    return out;
}

// per_class images for every class; `tag` separates independent datasets
// drawn from the same seed (e.g. "train" vs "eval").
inline std::vector<LabeledImage> sample_dataset(const World& w, std::size_t per_class,
                                                std::uint64_t seed, const std::string& tag) {
    std::vector<LabeledImage> out;
    out.reserve(per_class * w.num_classes());
    for (std::size_t c = 0; c < w.num_classes(); ++c) {
        RngStream rng(seed, "worldgen/sample/" + tag + "/class" + std::to_string(c));
        for (std::size_t i = 0; i < per_class; ++i) {
            LabeledImage li;
            li.class_id = c;
            li.attrs = sample_attributes(w, c, rng);
            li.uncommon_count = count_uncommon(w, c, li.attrs);
            li.image = render_image(w, c, li.attrs);
            out.push_back(std::move(li));
        }
    }
    return out;
}

// Shape of one class, common texture of another, neutral background.
// A texture-driven classifier reads `texture_class`; a shape-driven one
// reads `shape_class`.
struct CueConflictImage {
    ToyImage image;
    std::size_t shape_class = 0;
    std::size_t texture_class = 0;
};

inline std::vector<CueConflictImage> build_cue_conflict(
    const World& w, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
    RngStream& rng) {
    std::vector<CueConflictImage> out;
    out.reserve(pairs.size());
    for (auto [a, b] : pairs) {
        require(a != b, "cue conflict: shape and texture class must differ, got (" +
                            std::to_string(a) + ", " + std::to_string(b) + ")");
        require(a < w.num_classes() && b < w.num_classes(),
                "cue conflict: class out of range");
        AttributeAssignment attrs;
        attrs.background = w.neutral_background();
        attrs.texture = w.common_texture[b];
        attrs.position = rng.uniform_int(World::num_positions());
        out.push_back({render_image(w, a, attrs), a, b});
    }
    return out;
}

// All ordered class pairs, one conflict image each.
inline std::vector<CueConflictImage> make_cue_conflict_set(const World& w,
                                                           std::uint64_t seed) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t a = 0; a < w.num_classes(); ++a)
        for (std::size_t b = 0; b < w.num_classes(); ++b)
            if (a != b) pairs.emplace_back(a, b);
    RngStream rng(seed, "worldgen/cueconflict");
    return build_cue_conflict(w, pairs, rng);
}

// Paired splits that differ only in background: index i of each list shares
// texture and position. mixed_same uses the class's own common background;
// mixed_rand swaps in a uniformly chosen different class's common background.
struct BackgroundSplits {
    std::vector<LabeledImage> mixed_same;
    std::vector<LabeledImage> mixed_rand;
};

inline BackgroundSplits build_background_splits(const World& w, std::size_t per_class,
                                                std::uint64_t seed) {
    require(w.num_classes() >= 2, "background splits need >= 2 classes");
    BackgroundSplits out;
    for (std::size_t c = 0; c < w.num_classes(); ++c) {
        RngStream rng(seed, "worldgen/bgsplits/class" + std::to_string(c));
        for (std::size_t i = 0; i < per_class; ++i) {
            AttributeAssignment attrs;
            attrs.texture = w.common_texture[c];
            attrs.position = rng.uniform_int(World::num_positions());
            attrs.background = w.common_background[c];

            LabeledImage same;
            same.class_id = c;
            same.attrs = attrs;
            same.uncommon_count = count_uncommon(w, c, attrs);
            same.image = render_image(w, c, attrs);
            out.mixed_same.push_back(std::move(same));

            std::size_t other = rng.uniform_int(w.num_classes() - 1);
            if (other >= c) ++other;
            attrs.background = w.common_background[other];
            LabeledImage rand;
            rand.class_id = c;
            rand.attrs = attrs;
            rand.uncommon_count = count_uncommon(w, c, attrs);
            rand.image = render_image(w, c, attrs);
            out.mixed_rand.push_back(std::move(rand));
        }
    }
    return out;
}

// Mutual information (nats) between class label and one attribute under the
// sampling law, assuming every class has a distinct common value (true for
// background and texture, whose value count equals the class count).
inline double analytic_attribute_mi(std::size_t C, std::size_t V, double rho) {
    require(V >= C, "analytic MI assumes injective common assignment");
    double pc = 1.0 / static_cast<double>(C);
    double base = (1.0 - rho) / static_cast<double>(V);
    double mi = 0.0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t v = 0; v < V; ++v) {
            bool is_common = (v == c);  // any injective labelling gives the same MI
            double pvc = base + (is_common ? rho : 0.0);
            if (pvc <= 0.0) continue;
            // p(v): covered values get rho/C extra mass
            double pv = base + (v < C ? rho * pc : 0.0);
            double joint = pc * pvc;
            mi += joint * std::log(pvc / pv);
        }
    return mi;
}

// Plug-in MI estimate from attribute observations.
inline double empirical_mi(const std::vector<LabeledImage>& data, std::size_t C,
                           std::size_t V,
                           std::size_t (*attr_of)(const LabeledImage&)) {
    std::vector<double> joint(C * V, 0.0), pc(C, 0.0), pv(V, 0.0);
    double n = static_cast<double>(data.size());
    for (const auto& d : data) {
        std::size_t v = attr_of(d);
        joint[d.class_id * V + v] += 1.0;
        pc[d.class_id] += 1.0;
        pv[v] += 1.0;
    }
    double mi = 0.0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t v = 0; v < V; ++v) {
            double j = joint[c * V + v] / n;
            if (j <= 0.0) continue;
            mi += j * std::log(j * n * n / (pc[c] * pv[v]));
        }
    return mi;
}

}  // namespace lbgen::worldgen
