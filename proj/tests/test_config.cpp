#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "lbgen/config.hpp"
#include "lbgen/errors.hpp"

using namespace lbgen;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / "lbgen_test_config";
    fs::create_directories(d);
    return d;
}

}  // namespace

TEST_CASE("default config validates", "[config]") {
    RunConfig c;
    REQUIRE_NOTHROW(c.validate());
    CHECK(c.grad_steps <= c.T);
}

TEST_CASE("validation failures name the offending key", "[config]") {
    RunConfig c;

    SECTION("grad_steps above T") {
        c.T = 50;
        c.grad_steps = 60;
        try {
            c.validate();
            FAIL("expected DomainError");
        } catch (const DomainError& e) {
            std::string msg = e.what();
            CHECK(msg.find("grad_steps") != std::string::npos);
            CHECK(msg.find("60") != std::string::npos);
            CHECK(msg.find("50") != std::string::npos);
        }
    }
    SECTION("non-positive T") {
        c.T = 0;
        c.grad_steps = 0;
        CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("T"));
    }
    SECTION("negative lambda_q") {
        c.lambda_q = -0.5;
        CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("lambda_q"));
    }
    SECTION("zero learning rate") {
        c.generator_lr = 0.0;
        CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("generator_lr"));
    }
    SECTION("zero rank") {
        c.adapter_rank = 0;
        CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("adapter_rank"));
    }
    SECTION("negative guidance") {
        c.guidance_scale = -1.0;
        CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("guidance_scale"));
    }
}

TEST_CASE("json round trip preserves every field", "[config]") {
    RunConfig c;
    c.seed = 99;
    c.T = 25;
    c.grad_steps = 7;
    c.guidance_scale = 3.5;
    c.lambda_q = 0.25;
    c.generator_lr = 1e-4;
    c.discriminator_lr = 5e-5;
    c.adapter_rank = 8;
    c.epochs = 2;
    c.batch_size = 3;
    c.feature_dim = 24;
    c.latent_shape = 12;
    c.image_resolution = 20;

    json j = c.to_json();
    RunConfig back = config_from_json(j);
    CHECK(back == c);
    CHECK(back.hash() == c.hash());
}

TEST_CASE("serialized key spelling follows the file format", "[config]") {
    RunConfig c;
    json j = c.to_json();
    // "T" is uppercase; everything else snake_case.
    CHECK(j.contains("T"));
    CHECK(j.contains("grad_steps"));
    CHECK(j.contains("guidance_scale"));
    CHECK(j.contains("lambda_q"));
    CHECK(j.contains("generator_lr"));
    CHECK(j.contains("discriminator_lr"));
    CHECK(j.contains("adapter_rank"));
    CHECK(j.contains("image_resolution"));
    CHECK(j.contains("latent_shape"));
    CHECK(j.contains("feature_dim"));
    CHECK(j.contains("batch_size"));
    CHECK(j.contains("epochs"));
    CHECK(j.contains("seed"));
    CHECK(j.size() == 13);
}

TEST_CASE("unknown keys are rejected", "[config]") {
    json j = RunConfig{}.to_json();
    j["noise_schedule"] = "linear";
    try {
        config_from_json(j);
        FAIL("expected DomainError");
    } catch (const DomainError& e) {
        CHECK(std::string(e.what()).find("noise_schedule") != std::string::npos);
    }
}

TEST_CASE("partial json fills remaining fields with defaults", "[config]") {
    json j;
    j["seed"] = 5;
    j["T"] = 12;
    RunConfig c = config_from_json(j);
    CHECK(c.seed == 5);
    CHECK(c.T == 12);
    CHECK(c.lambda_q == RunConfig{}.lambda_q);
    CHECK(c.feature_dim == RunConfig{}.feature_dim);
}

TEST_CASE("wrong-typed field is rejected with its key name", "[config]") {
    json j;
    j["T"] = "ten";
    CHECK_THROWS_WITH(config_from_json(j), Catch::Matchers::ContainsSubstring("T"));
}

TEST_CASE("load_config errors name the path", "[config]") {
    auto dir = temp_dir();

    SECTION("missing file") {
        auto p = dir / "definitely_missing.json";
        fs::remove(p);
        CHECK_THROWS_WITH(load_config(p.string()),
                          Catch::Matchers::ContainsSubstring(p.string()));
    }
    SECTION("malformed json") {
        auto p = dir / "broken.json";
        std::ofstream(p) << "{ not json";
        CHECK_THROWS_WITH(load_config(p.string()),
                          Catch::Matchers::ContainsSubstring(p.string()));
    }
}

TEST_CASE("save then load round trips through disk", "[config]") {
    auto dir = temp_dir();
    auto p = dir / "cfg.json";
    RunConfig c;
    c.seed = 31;
    c.guidance_scale = 1.25;
    save_config(c, p.string());
    RunConfig back = load_config(p.string());
    CHECK(back == c);
}

TEST_CASE("config hash is sensitive to each field", "[config]") {
    RunConfig base;
    auto h0 = base.hash();

    RunConfig c = base;
    c.seed = base.seed + 1;
    CHECK(c.hash() != h0);

    c = base;
    c.lambda_q = base.lambda_q + 0.001;
    CHECK(c.hash() != h0);

    c = base;
    c.T = base.T + 1;
    c.grad_steps = std::min(c.grad_steps, c.T);
    CHECK(c.hash() != h0);
}
