#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lbgen/alignment.hpp"
#include "lbgen/autodiff.hpp"
#include "lbgen/checkpoint.hpp"
#include "lbgen/config.hpp"
#include "lbgen/encoder.hpp"
#include "lbgen/errors.hpp"
#include "lbgen/generator.hpp"
#include "lbgen/optim.hpp"
#include "lbgen/quality.hpp"
#include "lbgen/rng.hpp"
#include "lbgen/tensor.hpp"
#include "lbgen/types.hpp"

namespace lbgen::trainer {

// ---------------------------------------------------------------------------
// Loss bookkeeping
// ---------------------------------------------------------------------------

// Components of one complete loss computation. The derived fields are plain
// double arithmetic over the stored components, so L_bi == L_en + L_in and
// L_total == L_bi + lambda_q * L_q hold bit-exactly by construction.
struct LossBreakdown {
    double L_en = 0.0;
    double L_in = 0.0;
    double L_bi = 0.0;
    double L_q = 0.0;
    double L_total = 0.0;
    std::size_t sampled_negative_class = 0;
    generator::GradMask grad_mask;
};

inline LossBreakdown make_breakdown(double l_en, double l_in, double l_q, double lambda_q,
                                    std::size_t neg, generator::GradMask mask) {
    LossBreakdown b;
    b.L_en = l_en;
    b.L_in = l_in;
    b.L_bi = l_en + l_in;
    b.L_q = l_q;
    b.L_total = b.L_bi + lambda_q * l_q;
    b.sampled_negative_class = neg;
    b.grad_mask = std::move(mask);
    return b;
}

// Per-network optimizer settings. Defaults are the reference recipe values;
// the learning rates are overridden from RunConfig for desk-scale runs. The
// clip is enforced by the training loop itself (one explicit, observable
// rescale per update), so AdamW instances are constructed with their internal
// clipping disabled.
struct OptimizerSettings {
    optim::AdamWConfig generator{2e-5, 0.9, 0.999, 1e-8, 0.0, 0.1};
    optim::AdamWConfig discriminator{1e-5, 0.0, 0.999, 1e-8, 0.0, 1.0};

    void validate() const {
        require(generator.lr > 0.0 && discriminator.lr > 0.0,
                "optimizer settings: learning rates must be positive");
        require(generator.clip_norm > 0.0 && discriminator.clip_norm > 0.0,
                "optimizer settings: gradient clips must be positive");
    }
};

inline OptimizerSettings optimizer_settings_for(const RunConfig& config) {
    OptimizerSettings s;
    s.generator.lr = config.generator_lr;
    s.discriminator.lr = config.discriminator_lr;
    s.validate();
    return s;
}

// The three independent random streams a training run consumes. Serialized
// with trainer state so a resumed run draws the same sequences.
struct StepRngs {
    RngStream mask;
    RngStream noise;
    RngStream negative;
};

inline StepRngs make_step_rngs(std::uint64_t seed) {
    return StepRngs{RngStream(seed, "trainer/mask"), RngStream(seed, "trainer/noise"),
                    RngStream(seed, "trainer/negative")};
}

// ---------------------------------------------------------------------------
// Single loss step
// ---------------------------------------------------------------------------

struct StepOutput {
    LossBreakdown breakdown;  // batch means; derived fields recomputed from them
    ToyImage image;           // first image of the batch
    ad::Var loss;             // batch-mean L_total, literal adversarial form
    ad::Var generator_objective;         // equals `loss` unless non-saturating
    std::vector<Tensor> image_features;  // per-image encoder features (values)
};

namespace detail {

inline StepOutput batch_loss_step(const generator::Denoiser& gen,
                                  const encoder::DualEncoder& enc,
                                  const alignment::Discriminator& disc,
                                  const quality::ScorerVarFn& scorer, std::size_t class_id,
                                  const std::vector<FeatureVector>& class_features,
                                  const RunConfig& config,
                                  const generator::NoiseSchedule& schedule, StepRngs& rngs,
                                  int batch, bool non_saturating) {
    require(enc.frozen, "loss step: encoder must be frozen");
    std::size_t C = class_features.size();
    require(C == static_cast<std::size_t>(gen.spec.num_classes),
            "loss step: class feature count must match generator classes");
    require(class_id < C, "loss step: class_id out of range");
    require(enc.spec.image_resolution ==
                static_cast<std::size_t>(gen.spec.image_resolution),
            "loss step: encoder and generator resolutions differ");
    require(disc.feature_dim == static_cast<int>(enc.spec.feature_dim),
            "loss step: discriminator width must match encoder features");
    require(batch >= 1, "loss step: batch must be >= 1");

    // Line 1: generate. One gradient mask per step, shared across the batch.
    generator::GradMask mask =
        generator::make_grad_mask(config.T, config.grad_steps, rngs.mask);
    generator::SampleOptions opts;
    opts.mask = &mask;
    std::vector<generator::SampleResult> samples;
    samples.reserve(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i)
        samples.push_back(generator::sample(gen, class_id, schedule,
                                            config.guidance_scale, rngs.noise, opts));

    // Line 2: one negative description per step (a single random selection).
    std::size_t neg = alignment::select_negative_class(C, class_id, rngs.negative);
    Tensor f_text_neg = Tensor::from_vector(class_features[neg].values);
    Tensor f_text_pos = Tensor::from_vector(class_features[class_id].values);

    std::size_t res = static_cast<std::size_t>(gen.spec.image_resolution);
    double log_d_text = 0.0;
    if (non_saturating) log_d_text = std::log(disc.discriminate(class_features[neg]));

    StepOutput out;
    double sum_en = 0.0, sum_in = 0.0, sum_q = 0.0;
    std::vector<ad::Var> totals, surrogates;
    for (int i = 0; i < batch; ++i) {
        const auto& s = samples[static_cast<std::size_t>(i)];
        // Line 3: encode the image; descriptions are pre-encoded class features.
        ad::Var f_im = enc.encode_image_var(s.image_var);
        out.image_features.push_back(f_im.value());
        // Lines 4-6: entire, individual and bi-level alignment losses.
        ad::Var l_en = alignment::entire_alignment_loss_var(disc, f_text_neg, f_im);
        ad::Var l_in = alignment::individual_alignment_loss_var(f_im, f_text_pos);
        ad::Var l_bi = alignment::bi_level_loss(l_en, l_in);
        // Line 7: quality-assurance loss through the scorer.
        ad::Var logits = scorer(s.image_var, res, res);
        ad::Var l_q = quality::quality_loss_var(
            quality::quality_score_var(quality::level_probabilities_var(logits)));
        // Line 8: total.
        totals.push_back(ad::add(l_bi, ad::scale(l_q, config.lambda_q)));
        if (non_saturating) {
            // Same fixed points, stronger early gradient: -log D(f_im) stands in
            // for log(1 - D(f_im)); the constant text term keeps the magnitude
            // comparable to the literal objective.
            ad::Var surr_en = ad::add_const(
                alignment::adversarial_generator_term(disc, f_im, true), log_d_text);
            surrogates.push_back(ad::add(alignment::bi_level_loss(surr_en, l_in),
                                         ad::scale(l_q, config.lambda_q)));
        }
        sum_en += l_en.scalar();
        sum_in += l_in.scalar();
        sum_q += l_q.scalar();
    }
    auto mean_of = [batch](std::vector<ad::Var>& vs) {
        ad::Var acc = vs.front();
        for (std::size_t i = 1; i < vs.size(); ++i) acc = ad::add(acc, vs[i]);
        return ad::scale(acc, 1.0 / static_cast<double>(batch));
    };
    out.loss = mean_of(totals);
    out.generator_objective = non_saturating ? mean_of(surrogates) : out.loss;
    double n = static_cast<double>(batch);
    out.breakdown =
        make_breakdown(sum_en / n, sum_in / n, sum_q / n, config.lambda_q, neg, std::move(mask));
    out.image = samples.front().image;
    return out;
}

}  // namespace detail

// One full loss computation at batch size 1, in line order: generate with a
// fresh gradient mask, pick the negative class, encode, then assemble every
// loss component. The returned graph root differentiates into the adapter
// through the gradient-enabled sampling steps only.
inline StepOutput compute_loss_step(const generator::Denoiser& gen,
                                    const encoder::DualEncoder& enc,
                                    const alignment::Discriminator& disc,
                                    const quality::ScorerVarFn& scorer, std::size_t class_id,
                                    const std::vector<FeatureVector>& class_features,
                                    const RunConfig& config, StepRngs& rngs) {
    config.validate();
    generator::NoiseSchedule schedule = generator::make_schedule(config.T);
    return detail::batch_loss_step(gen, enc, disc, scorer, class_id, class_features, config,
                                   schedule, rngs, 1, false);
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

// One log record. `step` indexes the G/D pair; the two clip diagnostics are
// kept in memory only and never serialized.
struct StepRecord {
    std::size_t step = 0;
    std::string type;  // "G" or "D"
    std::size_t class_id = 0;
    std::size_t neg_class = 0;
    double L_en = 0.0;
    double L_in = 0.0;
    double L_bi = 0.0;
    double L_q = 0.0;
    double L_total = 0.0;
    double pre_clip_norm = 0.0;
    double post_clip_norm = 0.0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"step", step},         {"type", type},
                              {"class_id", class_id}, {"neg_class", neg_class},
                              {"L_en", L_en},         {"L_in", L_in},
                              {"L_bi", L_bi},         {"L_q", L_q},
                              {"L_total", L_total}};
    }
};

inline StepRecord record_from_json(const nlohmann::json& j) {
    StepRecord r;
    try {
        r.step = j.at("step").get<std::size_t>();
        r.type = j.at("type").get<std::string>();
        r.class_id = j.at("class_id").get<std::size_t>();
        r.neg_class = j.at("neg_class").get<std::size_t>();
        r.L_en = j.at("L_en").get<double>();
        r.L_in = j.at("L_in").get<double>();
        r.L_bi = j.at("L_bi").get<double>();
        r.L_q = j.at("L_q").get<double>();
        r.L_total = j.at("L_total").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("training log: malformed record: ") + e.what());
    }
    require(r.type == "G" || r.type == "D", "training log: record type must be G or D");
    return r;
}

inline std::vector<StepRecord> read_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), "training log: cannot open " + path.string());
    std::vector<StepRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DomainError("training log: bad JSONL line in " + path.string() + ": " +
                              e.what());
        }
        out.push_back(record_from_json(j));
    }
    return out;
}

// Mean L_in over the first and last `window` generator records.
inline std::pair<double, double> l_in_window_means(const std::vector<StepRecord>& records,
                                                   std::size_t window) {
    std::vector<double> xs;
    for (const auto& r : records)
        if (r.type == "G") xs.push_back(r.L_in);
    require(window >= 1 && xs.size() >= window,
            "window means: need at least `window` generator records");
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
        first += xs[i];
        last += xs[xs.size() - window + i];
    }
    return {first / static_cast<double>(window), last / static_cast<double>(window)};
}

// ---------------------------------------------------------------------------
// Trainer state
// ---------------------------------------------------------------------------

// Everything a resumable run carries. Var handles share storage, so the
// optimizers stay bound to the generator/discriminator parameters they were
// constructed with; build states with make_trainer_state or the loader rather
// than assembling the fields by hand.
struct TrainerState {
    generator::Denoiser generator;  // adapter attached
    alignment::Discriminator discriminator;
    optim::AdamW generator_opt;
    optim::AdamW discriminator_opt;
    OptimizerSettings settings;
    RunConfig config;
    StepRngs rngs;
    std::size_t next_step = 0;  // G/D pairs completed
};

inline TrainerState make_trainer_state(const generator::Denoiser& base,
                                       const alignment::Discriminator& disc,
                                       const RunConfig& config) {
    config.validate();
    TrainerState st;
    st.config = config;
    st.settings = optimizer_settings_for(config);
    st.generator = generator::clone(base);
    if (!st.generator.has_adapter())
        generator::apply_adapter(st.generator, static_cast<std::size_t>(config.adapter_rank),
                                 static_cast<double>(config.adapter_rank),
                                 static_cast<std::uint64_t>(config.seed));
    st.discriminator =
        alignment::discriminator_from_checkpoint(alignment::collect_discriminator(disc));
    optim::AdamWConfig gcfg = st.settings.generator;
    optim::AdamWConfig dcfg = st.settings.discriminator;
    gcfg.clip_norm = 0.0;  // the loop clips explicitly before each step
    dcfg.clip_norm = 0.0;
    st.generator_opt = optim::AdamW(st.generator.trainable_params(), gcfg);
    std::vector<ad::Var> dp;
    st.discriminator.params(dp);
    st.discriminator_opt = optim::AdamW(std::move(dp), dcfg);
    st.rngs = make_step_rngs(static_cast<std::uint64_t>(config.seed));
    return st;
}

inline Checkpoint collect_trainer_state(const TrainerState& st) {
    require(st.generator.has_adapter(), "trainer-state: generator must carry an adapter");
    Checkpoint ck;
    ck.kind = "trainer-state";
    ck.dtype = "f64";
    ck.meta["config"] = st.config.to_json();
    ck.meta["next_step"] = st.next_step;
    ck.meta["rng_mask"] = st.rngs.mask.state();
    ck.meta["rng_noise"] = st.rngs.noise.state();
    ck.meta["rng_negative"] = st.rngs.negative.state();
    const generator::DenoiserSpec& gs = st.generator.spec;
    ck.meta["generator"] = nlohmann::json{{"latent_side", gs.latent_side},
                                          {"cond_dim", gs.cond_dim},
                                          {"time_dim", gs.time_dim},
                                          {"hidden", gs.hidden},
                                          {"num_classes", gs.num_classes},
                                          {"image_resolution", gs.image_resolution}};
    ck.meta["adapter"] = nlohmann::json{{"rank", st.generator.l0.adapter.rank},
                                        {"alpha", st.generator.l0.adapter.alpha}};
    ck.meta["discriminator"] = nlohmann::json{{"feature_dim", st.discriminator.feature_dim},
                                              {"hidden", st.discriminator.hidden}};
    st.generator.l0.base.collect("gen.l0", ck);
    st.generator.l1.base.collect("gen.l1", ck);
    st.generator.l2.base.collect("gen.l2", ck);
    ck.add("gen.skip_gain", st.generator.skip_gain.value());
    for (std::size_t i = 0; i < st.generator.class_embeddings.size(); ++i)
        ck.add("gen.embed." + std::to_string(i), st.generator.class_embeddings[i].value());
    st.generator.l0.adapter.collect("gen.adapter.l0", ck);
    st.generator.l1.adapter.collect("gen.adapter.l1", ck);
    st.generator.l2.adapter.collect("gen.adapter.l2", ck);
    st.discriminator.l1.collect("disc.l1", ck);
    st.discriminator.l2.collect("disc.l2", ck);
    st.generator_opt.collect("g_opt", ck);
    st.discriminator_opt.collect("d_opt", ck);
    return ck;
}

inline TrainerState trainer_state_from_checkpoint(const Checkpoint& ck) {
    require(ck.kind == "trainer-state",
            "trainer-state: checkpoint kind is '" + ck.kind + "'");
    RunConfig config;
    generator::DenoiserSpec gs;
    std::size_t rank = 0, next_step = 0;
    double alpha = 0.0;
    int d_feature = 0, d_hidden = 0;
    std::uint64_t rng_mask = 0, rng_noise = 0, rng_negative = 0;
    try {
        config = config_from_json(ck.meta.at("config"));
        const auto& g = ck.meta.at("generator");
        gs.latent_side = g.at("latent_side").get<int>();
        gs.cond_dim = g.at("cond_dim").get<int>();
        gs.time_dim = g.at("time_dim").get<int>();
        gs.hidden = g.at("hidden").get<int>();
        gs.num_classes = g.at("num_classes").get<int>();
        gs.image_resolution = g.at("image_resolution").get<int>();
        rank = ck.meta.at("adapter").at("rank").get<std::size_t>();
        alpha = ck.meta.at("adapter").at("alpha").get<double>();
        d_feature = ck.meta.at("discriminator").at("feature_dim").get<int>();
        d_hidden = ck.meta.at("discriminator").at("hidden").get<int>();
        next_step = ck.meta.at("next_step").get<std::size_t>();
        rng_mask = ck.meta.at("rng_mask").get<std::uint64_t>();
        rng_noise = ck.meta.at("rng_noise").get<std::uint64_t>();
        rng_negative = ck.meta.at("rng_negative").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("trainer-state: malformed metadata: ") + e.what());
    }

    TrainerState st;
    st.config = config;
    st.settings = optimizer_settings_for(config);
    st.generator = generator::make_denoiser(gs, 0);
    generator::apply_adapter(st.generator, rank, alpha, 0);
    st.generator.l0.base.restore("gen.l0", ck);
    st.generator.l1.base.restore("gen.l1", ck);
    st.generator.l2.base.restore("gen.l2", ck);
    st.generator.skip_gain.mutable_value() = ck.tensor("gen.skip_gain");
    for (std::size_t i = 0; i < st.generator.class_embeddings.size(); ++i)
        st.generator.class_embeddings[i].mutable_value() =
            ck.tensor("gen.embed." + std::to_string(i));
    st.generator.l0.adapter.restore("gen.adapter.l0", ck);
    st.generator.l1.adapter.restore("gen.adapter.l1", ck);
    st.generator.l2.adapter.restore("gen.adapter.l2", ck);
    st.discriminator = alignment::make_discriminator(d_feature, 0, d_hidden);
    st.discriminator.l1.restore("disc.l1", ck);
    st.discriminator.l2.restore("disc.l2", ck);
    optim::AdamWConfig gcfg = st.settings.generator;
    optim::AdamWConfig dcfg = st.settings.discriminator;
    gcfg.clip_norm = 0.0;
    dcfg.clip_norm = 0.0;
    st.generator_opt = optim::AdamW(st.generator.trainable_params(), gcfg);
    std::vector<ad::Var> dp;
    st.discriminator.params(dp);
    st.discriminator_opt = optim::AdamW(std::move(dp), dcfg);
    st.generator_opt.restore("g_opt", ck);
    st.discriminator_opt.restore("d_opt", ck);
    st.rngs = make_step_rngs(static_cast<std::uint64_t>(config.seed));
    st.rngs.mask.set_state(rng_mask);
    st.rngs.noise.set_state(rng_noise);
    st.rngs.negative.set_state(rng_negative);
    st.next_step = next_step;
    return st;
}

inline void save_trainer_state(const TrainerState& st, const std::filesystem::path& path) {
    save_checkpoint(collect_trainer_state(st), path);  // atomic: temp + rename
}

inline TrainerState load_trainer_state(const std::filesystem::path& path) {
    return trainer_state_from_checkpoint(load_checkpoint(path, "trainer-state"));
}

// Save-then-load; the returned state resumes with the identical next-step
// loss as the uninterrupted run (optimizer moments and stream positions ride
// along in the file).
inline TrainerState checkpoint_roundtrip(const TrainerState& st,
                                         const std::filesystem::path& path) {
    save_trainer_state(st, path);
    return load_trainer_state(path);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// One epoch visits every class this many times (desk-scale choice: the
// default three-epoch run on ten classes yields 120 generator updates).
inline constexpr int kBatchesPerClassPerEpoch = 4;

struct FinetuneOptions {
    std::filesystem::path log_path;  // JSONL training log; empty skips the file
    std::size_t max_steps = 0;       // cap on G/D pairs (0 = run all epochs)
    int batches_per_epoch = 0;       // 0 = kBatchesPerClassPerEpoch * num_classes
    int d_steps_per_g = 1;           // alternation ratio, 1:1 by default
    bool non_saturating = false;     // generator minimizes -log D instead of log(1-D)
    bool freeze_generator = false;   // evaluate G losses but skip the G update
    std::function<void(const StepRecord&, const TrainerState&)> observer;
};

inline std::size_t total_steps(const RunConfig& config, std::size_t num_classes,
                               const FinetuneOptions& opts) {
    std::size_t per = opts.batches_per_epoch > 0
                          ? static_cast<std::size_t>(opts.batches_per_epoch)
                          : static_cast<std::size_t>(kBatchesPerClassPerEpoch) * num_classes;
    std::size_t total = per * static_cast<std::size_t>(config.epochs);
    if (opts.max_steps > 0 && opts.max_steps < total) total = opts.max_steps;
    return total;
}

// Runs G/D pairs until `until_step`. Classes cycle in id order; each pair is
// one generator update on the batch-mean total loss through the masked
// sampling chain, then discriminator update(s) on the negated entire-
// alignment loss with the just-generated image features held constant.
inline void advance(TrainerState& st, const encoder::DualEncoder& enc,
                    const quality::ScorerVarFn& scorer,
                    const std::vector<FeatureVector>& class_features,
                    std::size_t until_step, const FinetuneOptions& opts,
                    std::vector<StepRecord>& records, std::ostream* log) {
    require(opts.d_steps_per_g >= 1, "finetune: d_steps_per_g must be >= 1");
    std::size_t C = class_features.size();
    require(C >= 2, "finetune: need at least two classes");
    generator::NoiseSchedule schedule = generator::make_schedule(st.config.T);
    std::vector<ad::Var> g_params = st.generator.trainable_params();
    std::vector<ad::Var> d_params;
    st.discriminator.params(d_params);

    auto emit = [&](const StepRecord& r) {
        records.push_back(r);
        if (log) *log << r.to_json().dump() << "\n";
        if (opts.observer) opts.observer(r, st);
    };
    auto check_finite = [](double v, std::size_t step) {
        if (!std::isfinite(v))
            throw DomainError("finetune: non-finite loss at step " + std::to_string(step));
    };

    for (; st.next_step < until_step; ++st.next_step) {
        std::size_t s = st.next_step;
        std::size_t cid = s % C;

        StepOutput out = detail::batch_loss_step(
            st.generator, enc, st.discriminator, scorer, cid, class_features, st.config,
            schedule, st.rngs, st.config.batch_size, opts.non_saturating);
        const LossBreakdown& b = out.breakdown;
        check_finite(b.L_en, s);
        check_finite(b.L_in, s);
        check_finite(b.L_q, s);
        check_finite(b.L_total, s);

        StepRecord gr;
        gr.step = s;
        gr.type = "G";
        gr.class_id = cid;
        gr.neg_class = b.sampled_negative_class;
        gr.L_en = b.L_en;
        gr.L_in = b.L_in;
        gr.L_bi = b.L_bi;
        gr.L_q = b.L_q;
        gr.L_total = b.L_total;
        if (!opts.freeze_generator) {
            st.generator_opt.zero_grad();
            ad::backward(out.generator_objective);
            gr.pre_clip_norm = optim::grad_global_norm(g_params);
            gr.post_clip_norm =
                optim::clip_global_norm(g_params, st.settings.generator.clip_norm);
            st.generator_opt.step();
        }
        emit(gr);

        for (int r = 0; r < opts.d_steps_per_g; ++r) {
            // Fresh negative description for the discriminator's side.
            std::size_t neg2 = alignment::select_negative_class(C, cid, st.rngs.negative);
            Tensor f_text2 = Tensor::from_vector(class_features[neg2].values);
            ad::Var obj = alignment::discriminator_objective_var(st.discriminator, f_text2,
                                                                 out.image_features.front());
            for (std::size_t i = 1; i < out.image_features.size(); ++i)
                obj = ad::add(obj, alignment::discriminator_objective_var(
                                       st.discriminator, f_text2, out.image_features[i]));
            obj = ad::scale(obj, 1.0 / static_cast<double>(out.image_features.size()));
            double obj_value = obj.scalar();
            check_finite(obj_value, s);
            st.discriminator_opt.zero_grad();
            ad::backward(obj);

            StepRecord dr;
            dr.step = s;
            dr.type = "D";
            dr.class_id = cid;
            dr.neg_class = neg2;
            dr.L_en = -obj_value;  // the objective is the negated L_en
            dr.L_in = b.L_in;      // image features unchanged on the D side
            dr.L_bi = dr.L_en + dr.L_in;
            dr.L_q = b.L_q;
            dr.L_total = dr.L_bi + st.config.lambda_q * dr.L_q;
            dr.pre_clip_norm = optim::grad_global_norm(d_params);
            dr.post_clip_norm =
                optim::clip_global_norm(d_params, st.settings.discriminator.clip_norm);
            st.discriminator_opt.step();
            emit(dr);
        }
    }
}

struct FinetuneResult {
    TrainerState state;
    std::vector<StepRecord> records;
};

inline FinetuneResult finetune_resume(TrainerState st, const encoder::DualEncoder& enc,
                                      const quality::ScorerVarFn& scorer,
                                      const ClassVocabulary& vocab,
                                      const FinetuneOptions& opts = {}) {
    require(enc.frozen, "finetune: encoder must be frozen");
    require(vocab.size() == static_cast<std::size_t>(st.generator.spec.num_classes),
            "finetune: vocabulary size must match generator classes");
    std::vector<FeatureVector> class_features = enc.build_class_features(vocab);
    std::size_t until = total_steps(st.config, class_features.size(), opts);
    std::vector<StepRecord> records;
    std::ofstream log_file;
    std::ostream* log = nullptr;
    if (!opts.log_path.empty()) {
        log_file.open(opts.log_path,
                      st.next_step == 0 ? std::ios::trunc : std::ios::app);
        require(log_file.good(), "finetune: cannot write log " + opts.log_path.string());
        log = &log_file;
    }
    advance(st, enc, scorer, class_features, until, opts, records, log);
    return FinetuneResult{std::move(st), std::move(records)};
}

// Full fine-tuning run: attach a fresh zero-initialized adapter to a copy of
// the base generator, deep-copy the discriminator, then alternate G/D updates
// for the configured epochs.
inline FinetuneResult finetune(const generator::Denoiser& base,
                               const encoder::DualEncoder& enc,
                               const alignment::Discriminator& disc,
                               const quality::ScorerVarFn& scorer,
                               const ClassVocabulary& vocab, const RunConfig& config,
                               const FinetuneOptions& opts = {}) {
    return finetune_resume(make_trainer_state(base, disc, config), enc, scorer, vocab, opts);
}

// ---------------------------------------------------------------------------
// Discriminator-only probe training
// ---------------------------------------------------------------------------

// Repeated ascent on L_en for a fixed probe batch of text/image feature pairs
// (the generator-frozen special case of the alternating game). `curve` holds
// the mean L_en before each update; `final_L_en` is measured after the last.
struct ProbeTrainResult {
    double initial_L_en = 0.0;
    double final_L_en = 0.0;
    std::vector<double> curve;
};

inline ProbeTrainResult train_discriminator_on_probe(
    alignment::Discriminator& disc, const std::vector<FeatureVector>& text_features,
    const std::vector<FeatureVector>& image_features, std::size_t steps,
    const optim::AdamWConfig& cfg) {
    require(!text_features.empty() && text_features.size() == image_features.size(),
            "probe training: need matched, non-empty feature lists");
    require(steps >= 1, "probe training: steps must be >= 1");
    std::size_t n = text_features.size();
    std::vector<Tensor> texts, images;
    for (std::size_t i = 0; i < n; ++i) {
        texts.push_back(Tensor::from_vector(text_features[i].values));
        images.push_back(Tensor::from_vector(image_features[i].values));
    }
    double clip = cfg.clip_norm;
    optim::AdamWConfig c = cfg;
    c.clip_norm = 0.0;  // clipped explicitly below, as in advance()
    std::vector<ad::Var> params;
    disc.params(params);
    optim::AdamW opt(params, c);

    auto mean_objective = [&]() {
        ad::Var obj = alignment::discriminator_objective_var(disc, texts[0], images[0]);
        for (std::size_t i = 1; i < n; ++i)
            obj = ad::add(obj,
                          alignment::discriminator_objective_var(disc, texts[i], images[i]));
        return ad::scale(obj, 1.0 / static_cast<double>(n));
    };

    ProbeTrainResult out;
    for (std::size_t s = 0; s < steps; ++s) {
        ad::Var obj = mean_objective();
        out.curve.push_back(-obj.scalar());
        opt.zero_grad();
        ad::backward(obj);
        if (clip > 0.0) optim::clip_global_norm(params, clip);
        opt.step();
    }
    out.initial_L_en = out.curve.front();
    {
        ad::NoGradGuard guard;
        out.final_L_en = -mean_objective().scalar();
    }
    return out;
}

}  // namespace lbgen::trainer
