#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "latentdyn/data.hpp"
#include "test_util.hpp"

using namespace latentdyn;
using namespace latentdyn::testutil;

namespace {

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Minimal independent PNG decoder for 16-bit grayscale, used as the
// byte-level oracle against the libpng-backed loader: parses chunks by hand,
// inflates IDAT with raw zlib, undoes the per-row filters.
struct OraclePng {
    int width = 0, height = 0, bit_depth = 0, color_type = 0;
    std::vector<std::uint16_t> samples;
};

OraclePng oracle_decode_png(const std::vector<unsigned char>& bytes) {
    OraclePng png;
    REQUIRE(bytes.size() > 8);
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    REQUIRE(std::memcmp(bytes.data(), sig, 8) == 0);

    auto be32 = [&](std::size_t off) {
        return (static_cast<std::uint32_t>(bytes[off]) << 24) | (bytes[off + 1] << 16) |
               (bytes[off + 2] << 8) | bytes[off + 3];
    };

    std::vector<unsigned char> idat;
    std::size_t off = 8;
    while (off + 8 <= bytes.size()) {
        const std::uint32_t len = be32(off);
        const std::string type(reinterpret_cast<const char*>(bytes.data() + off + 4), 4);
        const std::size_t data = off + 8;
        if (type == "IHDR") {
            png.width = static_cast<int>(be32(data));
            png.height = static_cast<int>(be32(data + 4));
            png.bit_depth = bytes[data + 8];
            png.color_type = bytes[data + 9];
        } else if (type == "IDAT") {
            idat.insert(idat.end(), bytes.begin() + static_cast<long>(data),
                        bytes.begin() + static_cast<long>(data + len));
        } else if (type == "IEND") {
            break;
        }
        off = data + len + 4; // skip CRC
    }
    REQUIRE(png.bit_depth == 16);
    REQUIRE(png.color_type == 0);

    const int bpp = 2; // bytes per pixel, grayscale 16-bit
    const std::size_t stride = static_cast<std::size_t>(png.width) * bpp;
    std::vector<unsigned char> raw((stride + 1) * static_cast<std::size_t>(png.height));
    z_stream zs{};
    REQUIRE(inflateInit(&zs) == Z_OK);
    zs.next_in = idat.data();
    zs.avail_in = static_cast<uInt>(idat.size());
    zs.next_out = raw.data();
    zs.avail_out = static_cast<uInt>(raw.size());
    const int rc = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    REQUIRE(rc == Z_STREAM_END);

    // Undo PNG filters (types 0-4) per row.
    std::vector<unsigned char> out(stride * static_cast<std::size_t>(png.height));
    for (int y = 0; y < png.height; ++y) {
        const unsigned char filter = raw[(stride + 1) * static_cast<std::size_t>(y)];
        const unsigned char* src = raw.data() + (stride + 1) * static_cast<std::size_t>(y) + 1;
        unsigned char* dst = out.data() + stride * static_cast<std::size_t>(y);
        const unsigned char* up = y > 0 ? out.data() + stride * static_cast<std::size_t>(y - 1) : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= bpp ? dst[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= bpp) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: {
                    const int p = a + b - c;
                    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: REQUIRE(false);
            }
            dst[x] = static_cast<unsigned char>(v & 0xff);
        }
    }

    png.samples.resize(static_cast<std::size_t>(png.width) * png.height);
    for (std::size_t i = 0; i < png.samples.size(); ++i)
        png.samples[i] = static_cast<std::uint16_t>((out[2 * i] << 8) | out[2 * i + 1]);
    return png;
}

} // namespace

TEST_CASE("8-bit PGM decodes with linear scaling") {
    TempDir dir;
    const std::string path = dir.file("t.pgm");
    std::vector<unsigned char> bytes = {'P', '5', '\n', '2', ' ', '2', '\n', '2', '5', '5', '\n',
                                        0, 255, 128, 64};
    write_bytes(path, bytes);
    const Tensor img = load_image(path);
    CHECK(img.shape() == std::vector<int>{2, 2, 1});
    CHECK(img[0] == doctest::Approx(0.0));
    CHECK(img[1] == doctest::Approx(1.0));
    CHECK(img[2] == doctest::Approx(0.502).epsilon(1e-3));
    CHECK(img[3] == doctest::Approx(0.251).epsilon(1e-3));
}

TEST_CASE("16-bit PGM decodes big-endian samples") {
    TempDir dir;
    const std::string path = dir.file("wide.pgm");
    std::vector<unsigned char> bytes = {'P', '5', '\n', '1', ' ', '2', '\n', '6', '5', '5', '3', '5', '\n',
                                        0xff, 0xff, 0x00, 0x01};
    write_bytes(path, bytes);
    const Tensor img = load_image(path);
    CHECK(img[0] == doctest::Approx(1.0));
    CHECK(img[1] == doctest::Approx(1.0 / 65535.0).epsilon(1e-9));
}

TEST_CASE("PGM comments and junk are handled") {
    TempDir dir;
    const std::string path = dir.file("c.pgm");
    std::string header = "P5\n# a comment\n2 1\n255\n";
    std::vector<unsigned char> bytes(header.begin(), header.end());
    bytes.push_back(7);
    bytes.push_back(9);
    write_bytes(path, bytes);
    const Tensor img = load_image(path);
    CHECK(img.shape() == std::vector<int>{1, 2, 1});

    std::ofstream(dir.file("junk.img")) << "garbage";
    CHECK_THROWS_AS(load_image(dir.file("junk.img")), io_error);
    CHECK_THROWS_AS(load_image(dir.file("missing.png")), io_error);
}

TEST_CASE("PNG save/load round trip is idempotent after one quantization") {
    TempDir dir;
    Rng rng(1);
    const Tensor img = random_tensor({9, 7, 1}, rng, 0.0, 1.0);
    const std::string p1 = dir.file("a.png"), p2 = dir.file("b.png");
    save_png16(p1, img);
    const Tensor once = load_image(p1);
    CHECK(max_abs_diff(once, img) <= 0.5 / 65535.0 + 1e-12);
    save_png16(p2, once);
    const Tensor twice = load_image(p2);
    CHECK(bitwise_equal(once, twice));
}

TEST_CASE("PNG loader matches the independent byte-level decoder") {
    TempDir dir;
    const int h = 12, w = 17;
    Tensor ramp({h, w, 1});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            ramp.at({i, j, 0}) = (i * w + j) / static_cast<double>(h * w - 1);
    const std::string path = dir.file("ramp.png");
    save_png16(path, ramp);

    const OraclePng oracle = oracle_decode_png(read_bytes(path));
    CHECK(oracle.width == w);
    CHECK(oracle.height == h);

    const Tensor loaded = load_image(path);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double want = oracle.samples[static_cast<std::size_t>(i) * w + j] / 65535.0;
            CHECK(loaded.at({i, j, 0}) == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("normalize_pair maps the shared range onto [-1,1]") {
    Tensor a({2, 1, 1}, {0.0, 1.0});
    Tensor b({2, 1, 1}, {0.25, 0.75});
    Tensor na, nb;
    const NormRange r = normalize_pair(a, b, na, nb);
    CHECK_FALSE(r.degenerate);
    CHECK(na[0] == doctest::Approx(-1.0));
    CHECK(na[1] == doctest::Approx(1.0));
    CHECK(nb[0] == doctest::Approx(-0.5));
    CHECK(nb[1] == doctest::Approx(0.5));

    SUBCASE("denormalize inverts") {
        const Tensor back = denormalize(na, r);
        CHECK(max_abs_diff(back, a) < 1e-6);
    }

    SUBCASE("constant pairs map to zeros and are flagged") {
        Tensor c0 = Tensor::full({3, 3, 1}, 0.4), c1 = Tensor::full({3, 3, 1}, 0.4);
        Tensor n0, n1;
        const NormRange d = normalize_pair(c0, c1, n0, n1);
        CHECK(d.degenerate);
        for (long long i = 0; i < n0.size(); ++i) CHECK(n0[i] == 0.0);
        const Tensor back = denormalize(n0, d);
        CHECK(max_abs_diff(back, c0) == 0.0);
    }
}

TEST_CASE("window counts reproduce the reference scan totals") {
    CHECK(window_count(256, 256, 1) == 1);
    CHECK(window_count(1024, 256, 1) == 768);
    CHECK(window_count(1024, 256, 10) == 76);
    CHECK(window_count(256, 256, 10) == 1);
    CHECK(window_count(256, 256, 1) * window_count(1024, 256, 1) == 768);
    CHECK(window_count(1024, 256, 10) * window_count(1024, 256, 10) == 5776);
    CHECK_THROWS_AS(window_count(100, 128, 1), shape_error);
}

TEST_CASE("scan_patches windows stay in bounds and share origins") {
    Rng rng(3);
    ImagePair pair;
    pair.x0 = random_tensor({20, 30, 2}, rng, 0.0, 1.0);
    pair.x1 = random_tensor({20, 30, 2}, rng, 0.0, 1.0);
    const auto patches = scan_patches(pair, 8, 8, 4, 6);
    CHECK(patches.size() == static_cast<std::size_t>(window_count(20, 8, 4) * window_count(30, 8, 6)));
    for (const PatchPair& p : patches) {
        CHECK(p.row + 8 <= 20);
        CHECK(p.col + 8 <= 30);
        CHECK(p.x0.shape() == std::vector<int>{8, 8, 2});
        for (long long i = 0; i < p.x0.size(); ++i) {
            CHECK(p.x0[i] >= -1.0);
            CHECK(p.x0[i] <= 1.0);
        }
        // De-normalizing recovers the window content of both endpoints.
        const Tensor back = denormalize(p.x0, p.range);
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j)
                for (int c = 0; c < 2; ++c)
                    CHECK(back.at({i, j, c}) ==
                          doctest::Approx(pair.x0.at({p.row + i, p.col + j, c})).epsilon(1e-9));
    }
}

TEST_CASE("patch equal to the image yields exactly one pair") {
    Rng rng(4);
    ImagePair pair;
    pair.x0 = random_tensor({16, 16, 1}, rng, 0.0, 1.0);
    pair.x1 = random_tensor({16, 16, 1}, rng, 0.0, 1.0);
    CHECK(scan_patches(pair, 16, 16, 7, 3).size() == 1);
}

TEST_CASE("synthetic scenes are reproducible and self-consistent") {
    const SyntheticScene a = make_synthetic(SyntheticKind::translation, 32, 32, 5, 0.1, 99);
    const SyntheticScene b = make_synthetic(SyntheticKind::translation, 32, 32, 5, 0.1, 99);
    CHECK(bitwise_equal(a.x0, b.x0));
    CHECK(bitwise_equal(a.x1, b.x1));
    CHECK(bitwise_equal(a.true_fields.fields[0], b.true_fields.fields[0]));
    CHECK_FALSE(bitwise_equal(a.x1, make_synthetic(SyntheticKind::translation, 32, 32, 5, 0.1, 100).x1));

    // (x0, x1, true_fields) is self-consistent under the advection module.
    Tensor z0({1, 32, 32, 1}, std::vector<double>(a.x0.data(), a.x0.data() + a.x0.size()));
    Tape tape;
    const Tensor zN = advect_rollout(tape, z0, a.true_fields).back();
    double diff = 0.0;
    for (long long i = 0; i < a.x1.size(); ++i) diff = std::max(diff, std::abs(zN[i] - a.x1[i]));
    CHECK(diff == 0.0);

    // Per-step displacement honors the two-cell cap.
    const Tensor& f = a.true_fields.fields[0];
    double worst = 0.0;
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) {
            worst = std::max(worst, std::abs(f.at({0, i, j, 0})) * 0.1 * 31);
            worst = std::max(worst, std::abs(f.at({0, i, j, 1})) * 0.1 * 31);
        }
    CHECK(worst <= 2.0);
}

TEST_CASE("zero fields leave the synthetic terminal state equal to the texture") {
    SyntheticScene scene = make_synthetic(SyntheticKind::rotation, 24, 24, 3, 0.1, 5);
    FieldSequence zeros;
    zeros.dt = 0.1;
    for (int s = 0; s < 3; ++s) zeros.fields.push_back(Tensor({1, 24, 24, 2}));
    Tensor z0({1, 24, 24, 1}, std::vector<double>(scene.x0.data(), scene.x0.data() + scene.x0.size()));
    Tape tape;
    const Tensor zN = advect_rollout(tape, z0, zeros).back();
    for (long long i = 0; i < scene.x0.size(); ++i) CHECK(zN[i] == scene.x0[i]);
}

TEST_CASE("translation scene: cross-correlation peak sits at the analytic displacement") {
    const int n = 48, steps = 8;
    const SyntheticScene scene = make_synthetic(SyntheticKind::translation, n, n, steps, 0.1, 7);
    const Tensor& f = scene.true_fields.fields[0];
    // Expected pixel shift of image content: features move +w * total_time.
    const double dx = f.at({0, 0, 0, 0}) * 0.1 * steps * (n - 1);
    const double dy = f.at({0, 0, 0, 1}) * 0.1 * steps * (n - 1);

    // Zero-mean correlation normalized by overlap, so the peak tracks the
    // texture shift rather than the raw intensity overlap.
    double mean0 = 0.0, mean1 = 0.0;
    for (long long i = 0; i < scene.x0.size(); ++i) {
        mean0 += scene.x0[i];
        mean1 += scene.x1[i];
    }
    mean0 /= scene.x0.size();
    mean1 /= scene.x1.size();

    double best = -1e300;
    int best_dx = 0, best_dy = 0;
    for (int sy = -16; sy <= 16; ++sy)
        for (int sx = -16; sx <= 16; ++sx) {
            double corr = 0.0;
            long long count = 0;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    const int ii = i + sy, jj = j + sx;
                    if (ii < 0 || ii >= n || jj < 0 || jj >= n) continue;
                    corr += (scene.x0.at({i, j, 0}) - mean0) * (scene.x1.at({ii, jj, 0}) - mean1);
                    ++count;
                }
            corr /= static_cast<double>(count);
            if (corr > best) {
                best = corr;
                best_dx = sx;
                best_dy = sy;
            }
        }
    CHECK(std::abs(best_dx - dx) <= 1.0);
    CHECK(std::abs(best_dy - dy) <= 1.0);
}

TEST_CASE("manifest round trip and pair loading") {
    TempDir dir;
    Rng rng(8);
    const Tensor img0 = random_tensor({10, 12, 1}, rng, 0.0, 1.0);
    const Tensor img1 = random_tensor({10, 12, 1}, rng, 0.0, 1.0);
    save_png16(dir.file("a.png"), img0);
    save_png16(dir.file("b.png"), img1);

    Manifest m;
    m.t0 = {"a.png"};
    m.t1 = {"b.png"};
    m.pixel_scale = 500.0;
    write_manifest(m, dir.file("manifest.txt"));

    const Manifest back = read_manifest(dir.file("manifest.txt"));
    CHECK(back.t0 == m.t0);
    CHECK(back.t1 == m.t1);
    CHECK(back.pixel_scale == 500.0);

    const ImagePair pair = load_pair(dir.file("manifest.txt"));
    CHECK(pair.x0.shape() == std::vector<int>{10, 12, 1});
    CHECK(pair.pixel_scale == 500.0);

    std::ofstream(dir.file("bad.txt")) << "t0 a.png\n";
    CHECK_THROWS_AS(read_manifest(dir.file("bad.txt")), io_error);
}

TEST_CASE("multi-channel assembly requires equal extents") {
    TempDir dir;
    Rng rng(9);
    save_png16(dir.file("c0.png"), random_tensor({6, 6, 1}, rng, 0.0, 1.0));
    save_png16(dir.file("c1.png"), random_tensor({6, 6, 1}, rng, 0.0, 1.0));
    save_png16(dir.file("c2.png"), random_tensor({5, 6, 1}, rng, 0.0, 1.0));
    const Tensor two = load_image_channels({dir.file("c0.png"), dir.file("c1.png")});
    CHECK(two.shape() == std::vector<int>{6, 6, 2});
    CHECK_THROWS_AS(load_image_channels({dir.file("c0.png"), dir.file("c2.png")}), io_error);
}
