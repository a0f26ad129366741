#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "stylefuse/image.hpp"
#include "stylefuse/random.hpp"

using namespace stylefuse;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir() {
    auto p = fs::temp_directory_path() / "stylefuse_image_test";
    fs::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("png round trip preserves 8-bit quantized pixels") {
    Rng rng(1);
    Tensor img = rng.uniform_tensor({3, 7, 5});
    // quantize to the 8-bit grid so the round trip is exact
    for (int64_t i = 0; i < img.numel(); ++i)
        img[i] = std::round(img[i] * 255.0) / 255.0;

    auto path = (temp_dir() / "rt.png").string();
    save_png(path, img);
    Tensor back = load_png(path);
    REQUIRE(back.shape() == img.shape());
    REQUIRE(max_abs_diff(back, img) < 1e-9);
}

TEST_CASE("grayscale png and mask io") {
    Tensor mask({4, 6}, 0.0);
    mask.at(1, 2) = 1.0;
    mask.at(3, 5) = 1.0;
    auto path = (temp_dir() / "m.mask.png").string();
    save_mask_png(path, mask);
    Tensor back = load_mask_png(path);
    REQUIRE(bit_equal(back, mask));
    for (int64_t i = 0; i < back.numel(); ++i)
        REQUIRE((back[i] == 0.0 || back[i] == 1.0));
}

TEST_CASE("png writer is deterministic") {
    Rng rng(2);
    Tensor img = rng.uniform_tensor({1, 9, 9});
    auto a = (temp_dir() / "a.png").string();
    auto b = (temp_dir() / "b.png").string();
    save_png(a, img);
    save_png(b, img);
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::vector<char> ba((std::istreambuf_iterator<char>(fa)), {});
    std::vector<char> bb((std::istreambuf_iterator<char>(fb)), {});
    REQUIRE(ba == bb);
}

TEST_CASE("loader errors") {
    REQUIRE_THROWS_AS(load_png((temp_dir() / "missing.png").string()), ValidationError);
    auto garbage = (temp_dir() / "garbage.png").string();
    {
        std::ofstream f(garbage, std::ios::binary);
        f << "not a png at all";
    }
    REQUIRE_THROWS_AS(load_png(garbage), ValidationError);
}

TEST_CASE("save clamps out-of-range values") {
    Tensor img({1, 2, 2});
    img[0] = -0.5;
    img[1] = 1.5;
    img[2] = 0.0;
    img[3] = 1.0;
    auto path = (temp_dir() / "clamp.png").string();
    save_png(path, img);
    Tensor back = load_png(path);
    REQUIRE(back[0] == 0.0);
    REQUIRE(back[1] == 1.0);
}
