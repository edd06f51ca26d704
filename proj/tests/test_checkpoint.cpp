#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "lbgen/checkpoint.hpp"
#include "lbgen/errors.hpp"
#include "lbgen/rng.hpp"

using namespace lbgen;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / "lbgen_test_ckpt";
    fs::create_directories(d);
    return d;
}

Checkpoint sample_checkpoint(const std::string& dtype) {
    Checkpoint ck;
    ck.kind = "generator";
    ck.dtype = dtype;
    ck.meta["note"] = "fixture";
    RngStream rng(5, "ckpt/fixture");
    Tensor w({3, 4});
    for (double& v : w.data) v = rng.gaussian();
    Tensor b({3});
    for (double& v : b.data) v = rng.gaussian() * 0.01;
    ck.add("layer0.W", w);
    ck.add("layer0.b", b);
    return ck;
}

}  // namespace

TEST_CASE("f64 checkpoint round-trips bit-exactly", "[checkpoint]") {
    auto p = temp_dir() / "f64.ckpt";
    Checkpoint ck = sample_checkpoint("f64");
    save_checkpoint(ck, p.string());
    Checkpoint back = load_checkpoint(p.string(), "generator");
    REQUIRE(back.tensors.size() == 2);
    CHECK(back.kind == "generator");
    CHECK(back.meta.at("note") == "fixture");
    for (std::size_t t = 0; t < ck.tensors.size(); ++t) {
        CHECK(back.tensors[t].first == ck.tensors[t].first);
        REQUIRE(back.tensors[t].second.shape == ck.tensors[t].second.shape);
        for (std::size_t i = 0; i < ck.tensors[t].second.numel(); ++i)
            CHECK(back.tensors[t].second.data[i] == ck.tensors[t].second.data[i]);
    }
}

TEST_CASE("f32 checkpoint round-trips within float precision", "[checkpoint]") {
    auto p = temp_dir() / "f32.ckpt";
    Checkpoint ck = sample_checkpoint("f32");
    ck.kind = "encoder";
    save_checkpoint(ck, p.string());
    Checkpoint back = load_checkpoint(p.string(), "encoder");
    for (std::size_t t = 0; t < ck.tensors.size(); ++t)
        for (std::size_t i = 0; i < ck.tensors[t].second.numel(); ++i) {
            double a = ck.tensors[t].second.data[i];
            double b = back.tensors[t].second.data[i];
            CHECK(std::fabs(a - b) <= 1.2e-7 * std::max(1.0, std::fabs(a)));
        }
}

TEST_CASE("identical content produces identical bytes and hash", "[checkpoint]") {
    auto p1 = temp_dir() / "h1.ckpt";
    auto p2 = temp_dir() / "h2.ckpt";
    save_checkpoint(sample_checkpoint("f64"), p1.string());
    save_checkpoint(sample_checkpoint("f64"), p2.string());
    CHECK(file_hash(p1.string()) == file_hash(p2.string()));

    Checkpoint ck = sample_checkpoint("f64");
    ck.tensors[0].second.data[0] += 1e-9;
    auto p3 = temp_dir() / "h3.ckpt";
    save_checkpoint(ck, p3.string());
    CHECK(file_hash(p1.string()) != file_hash(p3.string()));
}

TEST_CASE("corrupted magic is rejected", "[checkpoint]") {
    auto p = temp_dir() / "bad_magic.ckpt";
    save_checkpoint(sample_checkpoint("f64"), p.string());
    {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXX", 4);
    }
    CHECK_THROWS_AS(load_checkpoint(p.string()), DomainError);
}

TEST_CASE("unsupported version tag is named in the error", "[checkpoint]") {
    auto p = temp_dir() / "bad_ver.ckpt";
    save_checkpoint(sample_checkpoint("f64"), p.string());
    {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        f.write("9999", 4);
    }
    try {
        load_checkpoint(p.string());
        FAIL("expected DomainError");
    } catch (const DomainError& e) {
        CHECK(std::string(e.what()).find("LBTD0001") != std::string::npos);
    }
}

TEST_CASE("truncated payload is rejected", "[checkpoint]") {
    auto p = temp_dir() / "trunc.ckpt";
    save_checkpoint(sample_checkpoint("f64"), p.string());
    auto size = fs::file_size(p);
    fs::resize_file(p, size - 8);
    CHECK_THROWS_AS(load_checkpoint(p.string()), DomainError);
}

TEST_CASE("kind mismatch is rejected", "[checkpoint]") {
    auto p = temp_dir() / "kind.ckpt";
    save_checkpoint(sample_checkpoint("f64"), p.string());
    CHECK_THROWS_AS(load_checkpoint(p.string(), "trainer_state"), DomainError);
    CHECK_NOTHROW(load_checkpoint(p.string(), "generator"));
}

TEST_CASE("missing tensor lookup names the tensor", "[checkpoint]") {
    Checkpoint ck = sample_checkpoint("f64");
    try {
        ck.tensor("does.not.exist");
        FAIL("expected DomainError");
    } catch (const DomainError& e) {
        CHECK(std::string(e.what()).find("does.not.exist") != std::string::npos);
    }
}

TEST_CASE("save leaves no temp file behind", "[checkpoint]") {
    auto dir = temp_dir() / "atomic";
    fs::create_directories(dir);
    auto p = dir / "x.ckpt";
    save_checkpoint(sample_checkpoint("f64"), p.string());
    int entries = 0;
    for (auto& e : fs::directory_iterator(dir)) {
        ++entries;
        CHECK(e.path().filename() == "x.ckpt");
    }
    CHECK(entries == 1);
}

TEST_CASE("invalid dtype is rejected at save time", "[checkpoint]") {
    Checkpoint ck = sample_checkpoint("f64");
    ck.dtype = "f16";
    auto p = temp_dir() / "baddtype.ckpt";
    CHECK_THROWS_AS(save_checkpoint(ck, p.string()), DomainError);
}
