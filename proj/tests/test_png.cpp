#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "lbgen/png_io.hpp"
#include "lbgen/rng.hpp"
#include "lbgen/worldgen.hpp"

using namespace lbgen;
namespace fs = std::filesystem;

namespace {

fs::path data_dir() { return fs::path(LBGEN_TEST_DATA); }

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / "lbgen_test_png";
    fs::create_directories(d);
    return d;
}

// Pixel bytes of the two golden fixtures (written by an independent
// stdlib-Python PNG writer): row0 = pure R, G, B; row1 = arbitrary values.
const std::uint8_t kGolden[2][9] = {
    {255, 0, 0, 0, 255, 0, 0, 0, 255},
    {10, 20, 30, 40, 50, 60, 200, 150, 100},
};

void check_matches_golden(const ToyImage& img) {
    REQUIRE(img.height == 2);
    REQUIRE(img.width == 3);
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 3; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                double expect = static_cast<double>(kGolden[y][x * 3 + c]) / 255.0;
                CHECK(img.at(y, x, c) == expect);
            }
}

}  // namespace

TEST_CASE("reader decodes an externally written file", "[png]") {
    check_matches_golden(read_png(data_dir() / "golden_rgb_3x2.png"));
}

TEST_CASE("reader handles the Up scanline filter", "[png]") {
    check_matches_golden(read_png(data_dir() / "golden_up_3x2.png"));
}

TEST_CASE("write-read round trip is exact after quantisation", "[png]") {
    RngStream rng(1, "png/roundtrip");
    ToyImage img(7, 5);
    for (double& v : img.pixels) v = rng.uniform();

    auto p = temp_dir() / "rt.png";
    write_png(img, p);
    ToyImage back = read_png(p);
    REQUIRE(back.height == img.height);
    REQUIRE(back.width == img.width);
    ToyImage expect = quantized_view(img);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        CHECK(back.pixels[i] == expect.pixels[i]);
        CHECK(std::fabs(back.pixels[i] - img.pixels[i]) <= 0.5 / 255.0 + 1e-12);
    }
}

TEST_CASE("second encode of decoded image is byte-identical", "[png]") {
    worldgen::WorldSpec spec;
    auto w = worldgen::make_world(spec);
    worldgen::AttributeAssignment attrs;
    ToyImage img = worldgen::render_image(w, 2, attrs);
    auto bytes1 = encode_png(img);
    ToyImage dec = decode_png(bytes1);
    auto bytes2 = encode_png(dec);
    REQUIRE(bytes1.size() == bytes2.size());
    CHECK(bytes1 == bytes2);
}

TEST_CASE("out-of-range values clamp on write", "[png]") {
    ToyImage img(1, 2);
    img.pixels = {-0.5, 2.0, 0.5, 1.0, 0.0, 0.9999};
    auto bytes = encode_png(img);
    ToyImage back = decode_png(bytes);
    CHECK(back.at(0, 0, 0) == 0.0);
    CHECK(back.at(0, 0, 1) == 1.0);
    CHECK(back.at(0, 1, 0) == 1.0);
}

TEST_CASE("malformed input is rejected with the origin named", "[png]") {
    SECTION("bad signature") {
        std::vector<unsigned char> junk = {1, 2, 3, 4, 5, 6, 7, 8, 9};
        CHECK_THROWS_WITH(decode_png(junk, "junk.bin"),
                          Catch::Matchers::ContainsSubstring("junk.bin"));
    }
    SECTION("truncated file") {
        ToyImage img(4, 4);
        auto bytes = encode_png(img);
        bytes.resize(bytes.size() / 2);
        CHECK_THROWS_AS(decode_png(bytes), DomainError);
    }
    SECTION("corrupted chunk crc") {
        ToyImage img(4, 4);
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
            img.pixels[i] = static_cast<double>(i) / 48.0;
        auto bytes = encode_png(img);
        bytes[40] ^= 0xFF;  // inside IDAT
        CHECK_THROWS_AS(decode_png(bytes), DomainError);
    }
    SECTION("missing file") {
        auto p = temp_dir() / "missing.png";
        fs::remove(p);
        CHECK_THROWS_WITH(read_png(p), Catch::Matchers::ContainsSubstring("missing.png"));
    }
}

TEST_CASE("atomic write leaves no temp file", "[png]") {
    auto dir = temp_dir() / "atomic";
    fs::create_directories(dir);
    for (auto& e : fs::directory_iterator(dir)) fs::remove(e.path());
    ToyImage img(3, 3);
    write_png(img, dir / "a.png");
    int n = 0;
    for (auto& e : fs::directory_iterator(dir)) {
        ++n;
        CHECK(e.path().filename() == "a.png");
    }
    CHECK(n == 1);
}
