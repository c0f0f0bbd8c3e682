#include "latentdyn/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "latentdyn/kvconfig.hpp"

namespace latentdyn {

namespace {

Tensor drop_batch(const Tensor& t) {
    // [1,H,W,C] -> [H,W,C]
    return Tensor({t.extent(1), t.extent(2), t.extent(3)},
                  std::vector<double>(t.data(), t.data() + t.size()));
}

Tensor add_batch(const Tensor& t) {
    // [H,W,C] -> [1,H,W,C]
    return Tensor({1, t.extent(0), t.extent(1), t.extent(2)},
                  std::vector<double>(t.data(), t.data() + t.size()));
}

} // namespace

PatchInference infer_patch(const Tensor& x0_normalized, const ModelBundle& bundle) {
    if (x0_normalized.rank() != 3)
        throw shape_error("infer_patch: expected [Hp,Wp,C], got " + shape_str(x0_normalized.shape()));
    const Tensor x0 = add_batch(x0_normalized);

    Tape tape;
    const Tensor z0 = encode(tape, bundle, x0);
    const FieldSequence fields = extract_fields(tape, bundle, x0);
    const std::vector<Tensor> latents = advect_rollout(tape, z0, fields);

    PatchInference out;
    out.fields.dt = bundle.dt;
    for (const Tensor& w : fields.fields) out.fields.fields.push_back(w.detached());
    for (const Tensor& z : latents) {
        out.latents.push_back(drop_batch(z));
        out.frames.push_back(drop_batch(decode(tape, bundle, z)));
    }
    return out;
}

namespace {

// Reflect-pad an image on the bottom/right so extents become multiples of the
// tile size.
Tensor reflect_pad(const Tensor& img, int target_h, int target_w) {
    const int h = img.extent(0), w = img.extent(1), c = img.extent(2);
    if (h == target_h && w == target_w) return img;
    Tensor out({target_h, target_w, c});
    for (int i = 0; i < target_h; ++i) {
        int si = i < h ? i : 2 * h - 2 - i;
        si = std::clamp(si, 0, h - 1);
        for (int j = 0; j < target_w; ++j) {
            int sj = j < w ? j : 2 * w - 2 - j;
            sj = std::clamp(sj, 0, w - 1);
            for (int ch = 0; ch < c; ++ch)
                out.at({i, j, ch}) = img.at({si, sj, ch});
        }
    }
    return out;
}

} // namespace

ImageInference infer_image(const ImagePair& pair, const ModelBundle& bundle, int patch_h, int patch_w) {
    if (pair.x0.rank() != 3 || pair.x0.shape() != pair.x1.shape())
        throw shape_error("infer_image: endpoints must be equal-shape [H,W,C]");
    if (patch_h % 8 != 0 || patch_w % 8 != 0)
        throw shape_error("infer_image: patch extents must be divisible by 8");
    const int h = pair.x0.extent(0), w = pair.x0.extent(1), c = pair.x0.extent(2);
    validate_shapes(bundle, patch_h, patch_w, c);

    const int tiles_i = (h + patch_h - 1) / patch_h;
    const int tiles_j = (w + patch_w - 1) / patch_w;
    const int ph = tiles_i * patch_h, pw = tiles_j * patch_w;
    const Tensor padded0 = reflect_pad(pair.x0, ph, pw);
    const Tensor padded1 = reflect_pad(pair.x1, ph, pw);

    const int n_frames = bundle.n_evolution + 1;
    ImageInference out;
    out.dt = bundle.dt;
    out.tile_h = patch_h;
    out.tile_w = patch_w;
    for (int f = 0; f < n_frames; ++f) out.frames.emplace_back(std::vector<int>{h, w, c});
    for (int s = 0; s < bundle.n_evolution; ++s) out.fields.emplace_back(std::vector<int>{h, w, 2});

    for (int ti = 0; ti < tiles_i; ++ti) {
        for (int tj = 0; tj < tiles_j; ++tj) {
            const int r0 = ti * patch_h, c0 = tj * patch_w;
            Tensor t0({patch_h, patch_w, c}), t1({patch_h, patch_w, c});
            for (int i = 0; i < patch_h; ++i)
                for (int j = 0; j < patch_w; ++j)
                    for (int ch = 0; ch < c; ++ch) {
                        t0.at({i, j, ch}) = padded0.at({r0 + i, c0 + j, ch});
                        t1.at({i, j, ch}) = padded1.at({r0 + i, c0 + j, ch});
                    }
            Tensor n0, n1;
            const NormRange range = normalize_pair(t0, t1, n0, n1);
            out.tile_ranges.push_back(range);

            const PatchInference tile = infer_patch(n0, bundle);

            // Disjoint placement: each output pixel belongs to exactly one
            // tile; padded regions are cropped away here.
            for (int f = 0; f < n_frames; ++f) {
                const Tensor frame = denormalize(tile.frames[static_cast<std::size_t>(f)], range);
                for (int i = 0; i < patch_h && r0 + i < h; ++i)
                    for (int j = 0; j < patch_w && c0 + j < w; ++j)
                        for (int ch = 0; ch < c; ++ch)
                            out.frames[static_cast<std::size_t>(f)].at({r0 + i, c0 + j, ch}) =
                                frame.at({i, j, ch});
            }
            for (int s = 0; s < bundle.n_evolution; ++s) {
                const Tensor& field = tile.fields.fields[static_cast<std::size_t>(s)];
                for (int i = 0; i < patch_h && r0 + i < h; ++i)
                    for (int j = 0; j < patch_w && c0 + j < w; ++j)
                        for (int ch = 0; ch < 2; ++ch)
                            out.fields[static_cast<std::size_t>(s)].at({r0 + i, c0 + j, ch}) =
                                field.at({0, i, j, ch});
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Field binary format
// ---------------------------------------------------------------------------

namespace {

constexpr char kFieldMagic[4] = {'L', 'A', 'D', 'V'};
constexpr std::uint32_t kFieldVersion = 1;

} // namespace

void write_field_bin(const std::string& path, const std::vector<Tensor>& fields) {
    if (fields.empty()) throw shape_error("write_field_bin: no fields");
    const int h = fields.front().extent(0), w = fields.front().extent(1);
    for (const Tensor& f : fields)
        if (f.rank() != 3 || f.extent(0) != h || f.extent(1) != w || f.extent(2) != 2)
            throw shape_error("write_field_bin: fields must all be [H,W,2]");

    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write field file: " + path);
    out.write(kFieldMagic, 4);
    const std::uint32_t header[4] = {kFieldVersion, static_cast<std::uint32_t>(fields.size()),
                                     static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    std::vector<float> buf(static_cast<std::size_t>(h) * w * 2);
    for (const Tensor& f : fields) {
        const double* d = f.data();
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(d[i]);
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    }
    if (!out) throw io_error("failed writing field file: " + path);
}

std::vector<Tensor> read_field_bin(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open field file: " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kFieldMagic, 4) != 0)
        throw io_error("not a field file (bad magic): " + path);
    std::uint32_t header[4];
    if (!in.read(reinterpret_cast<char*>(header), sizeof(header))) throw io_error("truncated field file: " + path);
    if (header[0] != kFieldVersion)
        throw io_error("unsupported field file version " + std::to_string(header[0]) + ": " + path);
    const int n = static_cast<int>(header[1]), h = static_cast<int>(header[2]), w = static_cast<int>(header[3]);
    if (n < 1 || h < 1 || w < 1) throw io_error("bad field file header: " + path);

    std::vector<Tensor> fields;
    std::vector<float> buf(static_cast<std::size_t>(h) * w * 2);
    for (int s = 0; s < n; ++s) {
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4)))
            throw io_error("truncated field payload: " + path);
        Tensor f({h, w, 2});
        double* d = f.data();
        for (std::size_t i = 0; i < buf.size(); ++i) d[i] = static_cast<double>(buf[i]);
        fields.push_back(std::move(f));
    }
    return fields;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

namespace {

std::string numbered(const std::string& stem, int i, const std::string& ext) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%03d", i);
    return stem + buf + ext;
}

Tensor channel0(const Tensor& img) {
    const int h = img.extent(0), w = img.extent(1);
    Tensor out({h, w, 1});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) out.at({i, j, 0}) = img.at({i, j, 0});
    return out;
}

} // namespace

double relative_l2(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw shape_error("relative_l2: shape mismatch");
    double num = 0.0, den = 0.0;
    for (long long i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        num += d * d;
        den += b[i] * b[i];
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

double psnr(const Tensor& a, const Tensor& b, const Tensor& mask) {
    if (a.shape() != b.shape()) throw shape_error("psnr: shape mismatch");
    double mse = 0.0;
    long long count = 0;
    for (long long i = 0; i < a.size(); ++i) {
        if (!mask.empty() && mask[i] == 0.0) continue;
        const double d = a[i] - b[i];
        mse += d * d;
        ++count;
    }
    if (count == 0) throw shape_error("psnr: empty mask");
    mse /= static_cast<double>(count);
    if (mse == 0.0) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

void export_artifacts(const ImageInference& result, const ImagePair& pair, const std::string& out_dir,
                      const ExportOptions& options) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw io_error("cannot create output directory: " + out_dir);
    const fs::path base(out_dir);

    const int h = pair.x0.extent(0), w = pair.x0.extent(1);
    const int n_steps = static_cast<int>(result.fields.size());

    for (std::size_t f = 0; f < result.frames.size(); ++f)
        save_png16((base / numbered("frame_", static_cast<int>(f), ".png")).string(),
                   channel0(result.frames[f]));

    for (int s = 0; s < n_steps; ++s) {
        const Tensor& field = result.fields[static_cast<std::size_t>(s)];
        write_field_bin((base / numbered("field_", s, ".bin")).string(), {field});

        std::ofstream csv(base / numbered("field_", s, ".csv"));
        if (!csv) throw io_error("cannot write quiver csv in " + out_dir);
        csv << "row,col,wx,wy\n";
        for (int i = 0; i < h; i += options.quiver_stride)
            for (int j = 0; j < w; j += options.quiver_stride)
                csv << i << ',' << j << ',' << format_double(field.at({i, j, 0})) << ','
                    << format_double(field.at({i, j, 1})) << '\n';
    }

    // Streamlines per tile, seeded on a uniform interior grid and reported in
    // global normalized image coordinates. Trajectories stay inside their
    // tile, matching the disjoint-tile inference.
    {
        std::ofstream csv(base / "streamlines.csv");
        if (!csv) throw io_error("cannot write streamlines.csv in " + out_dir);
        csv << "id,step,x,y\n";
        int id = 0;
        const int tiles_i = (h + result.tile_h - 1) / result.tile_h;
        const int tiles_j = (w + result.tile_w - 1) / result.tile_w;
        for (int ti = 0; ti < tiles_i; ++ti)
            for (int tj = 0; tj < tiles_j; ++tj) {
                const int r0 = ti * result.tile_h, c0 = tj * result.tile_w;
                const int th = std::min(result.tile_h, h - r0), tw = std::min(result.tile_w, w - c0);
                if (th < 2 || tw < 2) continue;
                FieldSequence seq;
                seq.dt = result.dt;
                for (const Tensor& mosaic : result.fields) {
                    Tensor f({1, th, tw, 2});
                    for (int i = 0; i < th; ++i)
                        for (int j = 0; j < tw; ++j)
                            for (int ch = 0; ch < 2; ++ch)
                                f.at({0, i, j, ch}) = mosaic.at({r0 + i, c0 + j, ch});
                    seq.fields.push_back(std::move(f));
                }
                std::vector<Point> seeds;
                for (int a = 1; a <= options.streamline_grid; ++a)
                    for (int b = 1; b <= options.streamline_grid; ++b)
                        seeds.push_back({static_cast<double>(b) / (options.streamline_grid + 1),
                                         static_cast<double>(a) / (options.streamline_grid + 1)});
                const std::vector<Polyline> lines = streamlines(seq, seeds);
                for (const Polyline& line : lines) {
                    int step = 0;
                    for (const Point& p : line.points) {
                        const double gx = (c0 + p[0] * (tw - 1)) / std::max(w - 1, 1);
                        const double gy = (r0 + p[1] * (th - 1)) / std::max(h - 1, 1);
                        csv << id << ',' << step++ << ',' << format_double(gx) << ',' << format_double(gy)
                            << '\n';
                    }
                    ++id;
                }
            }
    }

    {
        std::ofstream js(base / "metrics.json");
        if (!js) throw io_error("cannot write metrics.json in " + out_dir);
        js << "{\n";
        js << "  \"frames\": " << result.frames.size() << ",\n";
        js << "  \"steps\": " << n_steps << ",\n";
        js << "  \"frame0_rel_l2_vs_x0\": " << format_double(relative_l2(result.frames.front(), pair.x0))
           << ",\n";
        js << "  \"terminal_rel_l2_vs_x1\": " << format_double(relative_l2(result.frames.back(), pair.x1))
           << ",\n";
        js << "  \"terminal_psnr_vs_x1\": " << format_double(psnr(result.frames.back(), pair.x1)) << "\n";
        js << "}\n";
    }
}

} // namespace latentdyn
