#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lbgen/autodiff.hpp"
#include "lbgen/config.hpp"
#include "lbgen/errors.hpp"
#include "lbgen/generator.hpp"
#include "lbgen/hashing.hpp"
#include "lbgen/png_io.hpp"
#include "lbgen/quality.hpp"
#include "lbgen/rng.hpp"
#include "lbgen/types.hpp"

namespace lbgen::synthesis {

// Dataset synthesis: sample per_class images for every vocabulary class from
// a frozen generator, score each one, and write PNGs plus a JSONL manifest.
// Every image draws its noise from an RngStream keyed by
// seed_base ^ mix(class_id, index), so the output bytes depend only on the
// generator weights, the vocabulary, and the config — never on worker count
// or scheduling.

struct SynthConfig {
    int steps = 10;
    double guidance_scale = 2.0;
    int resolution = 16;
    int per_class = 8;
    std::uint64_t seed_base = 0;
    int workers = 1;

    void validate() const {
        require(steps >= 1, "synth config: steps must be >= 1");
        require(guidance_scale >= 0.0, "synth config: guidance_scale must be >= 0");
        require(resolution >= 2, "synth config: resolution must be >= 2");
        require(per_class >= 1, "synth config: per_class must be >= 1");
        require(workers >= 1, "synth config: workers must be >= 1");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"steps", steps},
                              {"guidance_scale", guidance_scale},
                              {"resolution", resolution},
                              {"per_class", per_class},
                              {"seed_base", seed_base},
                              {"workers", workers}};
    }

    std::string hash() const { return content_hash(to_json().dump()); }

    bool operator==(const SynthConfig&) const = default;
};

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    require(j.is_object(), "synth config: top-level JSON value must be an object");
    SynthConfig c;
    const std::set<std::string> allowed = {"steps",     "guidance_scale", "resolution",
                                           "per_class", "seed_base",      "workers"};
    for (auto it = j.begin(); it != j.end(); ++it)
        require(allowed.count(it.key()) > 0, "synth config: unknown key '" + it.key() + "'");
    c.steps = lbgen::detail::get_key<int>(j, "steps", c.steps);
    c.guidance_scale = lbgen::detail::get_key<double>(j, "guidance_scale", c.guidance_scale);
    c.resolution = lbgen::detail::get_key<int>(j, "resolution", c.resolution);
    c.per_class = lbgen::detail::get_key<int>(j, "per_class", c.per_class);
    c.seed_base = lbgen::detail::get_key<std::uint64_t>(j, "seed_base", c.seed_base);
    c.workers = lbgen::detail::get_key<int>(j, "workers", c.workers);
    c.validate();
    return c;
}

inline SynthConfig load_synth_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), "synth config: cannot open file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DomainError("synth config: malformed JSON in " + path.string() + ": " + e.what());
    }
    return synth_config_from_json(j);
}

inline void save_synth_config(const SynthConfig& c, const std::filesystem::path& path) {
    std::ofstream out(path);
    require(out.good(), "synth config: cannot write file: " + path.string());
    out << c.to_json().dump(2) << "\n";
}

// Stable per-image seed. The (class_id, index) pair goes through a full
// avalanche mix before the xor so nearby pairs land on unrelated streams.
inline std::uint64_t image_seed(std::uint64_t seed_base, std::size_t class_id,
                                std::size_t index) {
    std::uint64_t key = mix64(static_cast<std::uint64_t>(class_id)) +
                        static_cast<std::uint64_t>(index);
    return seed_base ^ mix64(key);
}

inline std::string image_relpath(std::size_t class_id, std::size_t index) {
    return std::to_string(class_id) + "/" + std::to_string(index) + ".png";
}

// One manifest line. `file` is relative to the manifest's directory.
struct ManifestRecord {
    std::string file;
    std::size_t class_id = 0;
    std::string class_name;
    std::uint64_t seed = 0;
    double guidance_scale = 0.0;
    int steps = 0;
    double quality_score = 0.0;  // [1, 5]

    nlohmann::json to_json() const {
        return nlohmann::json{{"file", file},
                              {"class_id", class_id},
                              {"class_name", class_name},
                              {"seed", seed},
                              {"guidance_scale", guidance_scale},
                              {"steps", steps},
                              {"quality_score", quality_score}};
    }

    bool operator==(const ManifestRecord&) const = default;
};

inline ManifestRecord manifest_record_from_json(const nlohmann::json& j) {
    require(j.is_object(), "manifest: record must be a JSON object");
    const char* keys[] = {"file",           "class_id", "class_name",
                          "seed",           "steps",    "guidance_scale",
                          "quality_score"};
    for (const char* k : keys)
        require(j.contains(k), std::string("manifest: record missing key '") + k + "'");
    ManifestRecord r;
    try {
        r.file = j.at("file").get<std::string>();
        r.class_id = j.at("class_id").get<std::size_t>();
        r.class_name = j.at("class_name").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.guidance_scale = j.at("guidance_scale").get<double>();
        r.steps = j.at("steps").get<int>();
        r.quality_score = j.at("quality_score").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("manifest: record field has wrong type: ") + e.what());
    }
    return r;
}

inline void write_manifest(const std::vector<ManifestRecord>& records,
                           const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "manifest: cannot write file: " + path.string());
    for (const auto& r : records) out << r.to_json().dump() << "\n";
    require(out.good(), "manifest: write failed: " + path.string());
}

// Strict reader: any malformed line is an error. validate_manifest below is
// the lenient counterpart that reports problems instead of throwing.
inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "manifest: cannot open file: " + path.string());
    std::vector<ManifestRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DomainError("manifest: line " + std::to_string(lineno) +
                              " is not valid JSON: " + e.what());
        }
        out.push_back(manifest_record_from_json(j));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct GenerateResult {
    std::filesystem::path manifest_path;
    std::vector<ManifestRecord> records;
};

namespace detail {

// Renders one (class_id, index) cell: sample, score the 8-bit view (what the
// PNG will hold after round-trip), write the PNG, build the record.
inline ManifestRecord synthesize_one(const generator::Denoiser& gen,
                                     const generator::NoiseSchedule& schedule,
                                     const ClassVocabulary& vocab, const SynthConfig& cfg,
                                     const std::filesystem::path& out_dir,
                                     std::size_t class_id, std::size_t index,
                                     const quality::ScorerFn& scorer) {
    std::uint64_t seed = image_seed(cfg.seed_base, class_id, index);
    RngStream noise(seed, "synth/image");
    ad::NoGradGuard guard;
    auto res = generator::sample(gen, class_id, schedule, cfg.guidance_scale, noise);
    ToyImage quantized = quantized_view(res.image);

    ManifestRecord rec;
    rec.file = image_relpath(class_id, index);
    rec.class_id = class_id;
    rec.class_name = vocab.class_names[class_id];
    rec.seed = seed;
    rec.guidance_scale = cfg.guidance_scale;
    rec.steps = cfg.steps;
    rec.quality_score =
        quality::quality_score(quality::level_probabilities(scorer(quantized)));
    write_png(res.image, out_dir / rec.file);
    return rec;
}

}  // namespace detail

// Emits C x per_class PNGs named {class_id}/{index}.png under out_dir plus
// manifest.jsonl, one line per image in (class_id, index) order. Workers
// split the flat cell range; every cell owns its seed, so the bytes written
// are identical for any worker count.
inline GenerateResult generate_dataset(const generator::Denoiser& gen,
                                       const ClassVocabulary& vocab, const SynthConfig& cfg,
                                       const std::filesystem::path& out_dir,
                                       const quality::ScorerFn& scorer =
                                           quality::make_mock_scorer()) {
    cfg.validate();
    vocab.validate();
    require(vocab.size() == static_cast<std::size_t>(gen.spec.num_classes),
            "synth: vocabulary size (" + std::to_string(vocab.size()) +
                ") must match generator classes (" + std::to_string(gen.spec.num_classes) +
                ")");
    require(cfg.resolution == gen.spec.image_resolution,
            "synth: config resolution (" + std::to_string(cfg.resolution) +
                ") must match generator resolution (" +
                std::to_string(gen.spec.image_resolution) + ")");
    require(scorer != nullptr, "synth: scorer must be set");

    std::size_t C = vocab.size();
    std::size_t per = static_cast<std::size_t>(cfg.per_class);
    std::size_t total = C * per;
    auto schedule = generator::make_schedule(cfg.steps);

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    require(!ec, "synth: cannot create output dir: " + out_dir.string());
    for (std::size_t c = 0; c < C; ++c) {
        std::filesystem::create_directories(out_dir / std::to_string(c), ec);
        require(!ec, "synth: cannot create class dir under: " + out_dir.string());
    }

    std::vector<ManifestRecord> records(total);
    std::size_t W = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), total);
    std::vector<std::exception_ptr> errors(W);

    auto run_shard = [&](std::size_t w, const generator::Denoiser& local) {
        try {
            for (std::size_t item = w; item < total; item += W) {
                std::size_t class_id = item / per;
                std::size_t index = item % per;
                records[item] = detail::synthesize_one(local, schedule, vocab, cfg, out_dir,
                                                       class_id, index, scorer);
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };

    if (W <= 1) {
        run_shard(0, gen);
    } else {
        // Each worker samples from its own deep copy; cells never share state.
        std::vector<generator::Denoiser> locals;
        locals.reserve(W);
        for (std::size_t w = 0; w < W; ++w) locals.push_back(generator::clone(gen));
        std::vector<std::thread> threads;
        threads.reserve(W);
        for (std::size_t w = 0; w < W; ++w)
            threads.emplace_back([&, w] { run_shard(w, locals[w]); });
        for (auto& t : threads) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    GenerateResult out;
    out.manifest_path = out_dir / "manifest.jsonl";
    out.records = std::move(records);
    write_manifest(out.records, out.manifest_path);
    return out;
}

inline GenerateResult generate_dataset(const std::filesystem::path& generator_checkpoint,
                                       const ClassVocabulary& vocab, const SynthConfig& cfg,
                                       const std::filesystem::path& out_dir,
                                       const quality::ScorerFn& scorer =
                                           quality::make_mock_scorer()) {
    generator::Denoiser gen = generator::load_generator(generator_checkpoint);
    return generate_dataset(gen, vocab, cfg, out_dir, scorer);
}

// Re-evaluate one record's score from its PNG on disk. Scores in the
// manifest are computed on the 8-bit quantized view, so this reproduces them
// exactly up to float noise.
inline double rescore_record(const std::filesystem::path& manifest_dir,
                             const ManifestRecord& rec,
                             const quality::ScorerFn& scorer = quality::make_mock_scorer()) {
    ToyImage img = read_png(manifest_dir / rec.file);
    return quality::quality_score(quality::level_probabilities(scorer(img)));
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

// A problem found while checking a manifest. `line` is the 1-based manifest
// line (0 for dataset-wide problems); `kind` is a stable machine tag.
struct ManifestIssue {
    std::size_t line = 0;
    std::string kind;  // parse | missing-file | score-range | field-range | balance | coverage
    std::string message;

    nlohmann::json to_json() const {
        return nlohmann::json{{"line", line}, {"kind", kind}, {"message", message}};
    }
};

struct ManifestReport {
    std::size_t total_records = 0;
    std::map<std::size_t, std::size_t> per_class_counts;
    std::vector<ManifestIssue> issues;

    bool clean() const { return issues.empty(); }

    std::size_t count_kind(const std::string& kind) const {
        std::size_t n = 0;
        for (const auto& i : issues)
            if (i.kind == kind) ++n;
        return n;
    }

    nlohmann::json to_json() const {
        nlohmann::json counts = nlohmann::json::object();
        for (const auto& [c, n] : per_class_counts) counts[std::to_string(c)] = n;
        nlohmann::json iss = nlohmann::json::array();
        for (const auto& i : issues) iss.push_back(i.to_json());
        return nlohmann::json{{"total_records", total_records},
                              {"per_class_counts", counts},
                              {"issues", iss},
                              {"clean", clean()}};
    }
};

// Lenient audit: malformed lines, missing image files, out-of-range fields,
// class imbalance and coverage gaps all become report entries, never errors.
// Only a missing manifest file itself throws.
inline ManifestReport validate_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path, std::ios::binary);
    require(in.good(), "manifest: cannot open file: " + manifest_path.string());
    std::filesystem::path dir = manifest_path.parent_path();

    ManifestReport rep;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        ManifestRecord rec;
        try {
            rec = manifest_record_from_json(nlohmann::json::parse(line));
        } catch (const std::exception& e) {
            rep.issues.push_back({lineno, "parse", e.what()});
            continue;
        }
        ++rep.total_records;
        ++rep.per_class_counts[rec.class_id];
        if (!std::filesystem::exists(dir / rec.file))
            rep.issues.push_back(
                {lineno, "missing-file", "image file not found: " + rec.file});
        if (!(rec.quality_score >= 1.0 && rec.quality_score <= 5.0))
            rep.issues.push_back({lineno, "score-range",
                                  "quality_score " + std::to_string(rec.quality_score) +
                                      " outside [1, 5]"});
        if (rec.steps < 1)
            rep.issues.push_back(
                {lineno, "field-range", "steps " + std::to_string(rec.steps) + " < 1"});
        if (!(rec.guidance_scale >= 0.0))
            rep.issues.push_back({lineno, "field-range",
                                  "guidance_scale " + std::to_string(rec.guidance_scale) +
                                      " < 0"});
        if (rec.class_name.empty())
            rep.issues.push_back({lineno, "field-range", "class_name is empty"});
    }

    if (!rep.per_class_counts.empty()) {
        std::size_t max_class = rep.per_class_counts.rbegin()->first;
        for (std::size_t c = 0; c <= max_class; ++c)
            if (rep.per_class_counts.find(c) == rep.per_class_counts.end())
                rep.issues.push_back(
                    {0, "coverage", "class " + std::to_string(c) + " has no records"});
        std::size_t expect = rep.per_class_counts.begin()->second;
        bool balanced = true;
        for (const auto& [c, n] : rep.per_class_counts)
            if (n != expect) balanced = false;
        if (!balanced) {
            std::ostringstream msg;
            msg << "per-class counts differ:";
            for (const auto& [c, n] : rep.per_class_counts) msg << " " << c << ":" << n;
            rep.issues.push_back({0, "balance", msg.str()});
        }
    }
    return rep;
}

}  // namespace lbgen::synthesis
