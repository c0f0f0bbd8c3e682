#include "latentdyn/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "latentdyn/rng.hpp"

namespace latentdyn {

namespace {

// ---------------------------------------------------------------------------
// PGM (P5), 8- or 16-bit, 16-bit samples big-endian per the format.
// ---------------------------------------------------------------------------

int pgm_token(std::istream& in, const std::string& path) {
    // Skips whitespace and '#' comments between header tokens.
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    if (c == EOF) throw io_error("truncated PGM header: " + path);
    int value = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any) throw io_error("malformed PGM header: " + path);
    return value;
}

Tensor load_pgm(std::istream& in, const std::string& path) {
    char p = 0, five = 0;
    in.get(p);
    in.get(five);
    if (p != 'P' || five != '5') throw io_error("not a P5 PGM: " + path);
    const int w = pgm_token(in, path);
    const int h = pgm_token(in, path);
    const int maxval = pgm_token(in, path);
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw io_error("bad PGM dimensions: " + path);
    // pgm_token consumed exactly one whitespace byte after maxval via get().

    const bool wide = maxval > 255;
    const std::size_t n = static_cast<std::size_t>(w) * h;
    std::vector<unsigned char> raw(n * (wide ? 2 : 1));
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw io_error("truncated PGM payload: " + path);

    Tensor img({h, w, 1});
    double* d = img.data();
    const double scale = 1.0 / maxval;
    for (std::size_t i = 0; i < n; ++i) {
        const int v = wide ? (raw[2 * i] << 8 | raw[2 * i + 1]) : raw[i];
        d[i] = v * scale;
    }
    return img;
}

// ---------------------------------------------------------------------------
// Grayscale PNG via libpng.
// ---------------------------------------------------------------------------

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngReader() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

Tensor load_png(const std::string& path) {
    PngReader r;
    r.fp = std::fopen(path.c_str(), "rb");
    if (!r.fp) throw io_error("cannot open image: " + path);
    r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!r.png) throw io_error("libpng init failed: " + path);
    r.info = png_create_info_struct(r.png);
    if (!r.info) throw io_error("libpng init failed: " + path);
    if (setjmp(png_jmpbuf(r.png))) throw io_error("failed to decode PNG: " + path);

    png_init_io(r.png, r.fp);
    png_read_info(r.png, r.info);

    const png_uint_32 w = png_get_image_width(r.png, r.info);
    const png_uint_32 h = png_get_image_height(r.png, r.info);
    const int depth = png_get_bit_depth(r.png, r.info);
    const int color = png_get_color_type(r.png, r.info);
    if (color != PNG_COLOR_TYPE_GRAY)
        throw io_error("only grayscale PNG is supported: " + path);
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
    png_read_update_info(r.png, r.info);

    const std::size_t rowbytes = png_get_rowbytes(r.png, r.info);
    std::vector<unsigned char> rows(rowbytes * h);
    std::vector<png_bytep> row_ptrs(h);
    for (png_uint_32 i = 0; i < h; ++i) row_ptrs[i] = rows.data() + i * rowbytes;
    png_read_image(r.png, row_ptrs.data());
    png_read_end(r.png, nullptr);

    Tensor img({static_cast<int>(h), static_cast<int>(w), 1});
    double* d = img.data();
    if (depth == 16) {
        // PNG stores 16-bit samples most-significant byte first.
        for (png_uint_32 i = 0; i < h; ++i) {
            const unsigned char* row = row_ptrs[i];
            for (png_uint_32 j = 0; j < w; ++j)
                d[i * w + j] = (row[2 * j] << 8 | row[2 * j + 1]) / 65535.0;
        }
    } else {
        for (png_uint_32 i = 0; i < h; ++i) {
            const unsigned char* row = row_ptrs[i];
            for (png_uint_32 j = 0; j < w; ++j) d[i * w + j] = row[j] / 255.0;
        }
    }
    return img;
}

struct PngWriter {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngWriter() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

} // namespace

Tensor load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open image: " + path);
    const int c0 = in.peek();
    if (c0 == 'P') return load_pgm(in, path);
    in.close();
    if (c0 == 0x89) return load_png(path);
    throw io_error("unrecognized image format (expected PGM or PNG): " + path);
}

void save_png16(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.extent(2) != 1)
        throw shape_error("save_png16: expected [H,W,1], got " + shape_str(image.shape()));
    const int h = image.extent(0), w = image.extent(1);

    PngWriter wr;
    wr.fp = std::fopen(path.c_str(), "wb");
    if (!wr.fp) throw io_error("cannot write image: " + path);
    wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!wr.png) throw io_error("libpng init failed: " + path);
    wr.info = png_create_info_struct(wr.png);
    if (!wr.info) throw io_error("libpng init failed: " + path);
    if (setjmp(png_jmpbuf(wr.png))) throw io_error("failed to encode PNG: " + path);

    png_init_io(wr.png, wr.fp);
    png_set_IHDR(wr.png, wr.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 16,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(wr.png, wr.info);

    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 2);
    const double* d = image.data();
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const double v = std::clamp(d[static_cast<long long>(i) * w + j], 0.0, 1.0);
            const int q = static_cast<int>(std::lround(v * 65535.0));
            row[static_cast<std::size_t>(2 * j)] = static_cast<unsigned char>(q >> 8);
            row[static_cast<std::size_t>(2 * j + 1)] = static_cast<unsigned char>(q & 0xff);
        }
        png_write_row(wr.png, row.data());
    }
    png_write_end(wr.png, nullptr);
}

void save_pgm(const std::string& path, const Tensor& image, int maxval) {
    if (image.rank() != 3 || image.extent(2) != 1)
        throw shape_error("save_pgm: expected [H,W,1], got " + shape_str(image.shape()));
    if (maxval < 1 || maxval > 65535) throw shape_error("save_pgm: maxval out of range");
    const int h = image.extent(0), w = image.extent(1);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write image: " + path);
    out << "P5\n" << w << " " << h << "\n" << maxval << "\n";
    const double* d = image.data();
    const bool wide = maxval > 255;
    for (long long i = 0; i < static_cast<long long>(h) * w; ++i) {
        const double v = std::clamp(d[i], 0.0, 1.0);
        const int q = static_cast<int>(std::lround(v * maxval));
        if (wide) {
            out.put(static_cast<char>(q >> 8));
            out.put(static_cast<char>(q & 0xff));
        } else {
            out.put(static_cast<char>(q));
        }
    }
    if (!out) throw io_error("failed writing image: " + path);
}

Tensor load_image_channels(const std::vector<std::string>& paths) {
    if (paths.empty()) throw shape_error("load_image_channels: no files");
    std::vector<Tensor> channels;
    channels.reserve(paths.size());
    for (const std::string& p : paths) channels.push_back(load_image(p));
    const int h = channels.front().extent(0), w = channels.front().extent(1);
    for (std::size_t c = 1; c < channels.size(); ++c)
        if (channels[c].extent(0) != h || channels[c].extent(1) != w)
            throw io_error("channel extents differ: " + paths[c] + " is " + shape_str(channels[c].shape()) +
                           ", expected " + std::to_string(h) + "x" + std::to_string(w));
    const int C = static_cast<int>(channels.size());
    Tensor out({h, w, C});
    double* od = out.data();
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < C; ++c)
                od[(static_cast<long long>(i) * w + j) * C + c] = channels[static_cast<std::size_t>(c)][static_cast<long long>(i) * w + j];
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and patch scanning
// ---------------------------------------------------------------------------

NormRange normalize_pair(const Tensor& x0, const Tensor& x1, Tensor& out0, Tensor& out1) {
    if (x0.shape() != x1.shape()) throw shape_error("normalize_pair: shapes differ");
    double lo = x0[0], hi = x0[0];
    for (const Tensor* t : {&x0, &x1}) {
        const double* d = t->data();
        for (long long i = 0; i < t->size(); ++i) {
            lo = std::min(lo, d[i]);
            hi = std::max(hi, d[i]);
        }
    }
    NormRange r{lo, hi, hi == lo};
    out0 = Tensor(x0.shape());
    out1 = Tensor(x1.shape());
    if (r.degenerate) return r; // all zeros
    const double s = 2.0 / (hi - lo);
    for (int which = 0; which < 2; ++which) {
        const double* src = (which ? x1 : x0).data();
        double* dst = (which ? out1 : out0).data();
        for (long long i = 0; i < x0.size(); ++i) dst[i] = (src[i] - lo) * s - 1.0;
    }
    return r;
}

Tensor denormalize(const Tensor& t, const NormRange& range) {
    Tensor out(t.shape());
    const double* src = t.data();
    double* dst = out.data();
    if (range.degenerate) {
        for (long long i = 0; i < t.size(); ++i) dst[i] = range.lo;
        return out;
    }
    const double s = 0.5 * (range.hi - range.lo);
    for (long long i = 0; i < t.size(); ++i) dst[i] = (src[i] + 1.0) * s + range.lo;
    return out;
}

int window_count(int length, int patch, int stride) {
    if (patch > length) throw shape_error("window_count: patch exceeds image extent");
    if (stride < 1) throw shape_error("window_count: stride must be >= 1");
    return std::max(1, (length - patch) / stride);
}

long long scan_patch_count(int h, int w, int hp, int wp, int stride_h, int stride_w) {
    return static_cast<long long>(window_count(h, hp, stride_h)) * window_count(w, wp, stride_w);
}

std::vector<PatchPair> scan_patches(const ImagePair& pair, int hp, int wp, int stride_h, int stride_w) {
    if (pair.x0.rank() != 3 || pair.x0.shape() != pair.x1.shape())
        throw shape_error("scan_patches: endpoints must be equal-shape [H,W,C]");
    const int h = pair.x0.extent(0), w = pair.x0.extent(1), c = pair.x0.extent(2);
    const int nh = window_count(h, hp, stride_h);
    const int nw = window_count(w, wp, stride_w);

    std::vector<PatchPair> out;
    out.reserve(static_cast<std::size_t>(nh) * nw);
    for (int wi = 0; wi < nh; ++wi) {
        for (int wj = 0; wj < nw; ++wj) {
            const int r0 = wi * stride_h, c0 = wj * stride_w;
            Tensor p0({hp, wp, c}), p1({hp, wp, c});
            for (int i = 0; i < hp; ++i)
                for (int j = 0; j < wp; ++j)
                    for (int ch = 0; ch < c; ++ch) {
                        const long long src = (static_cast<long long>(r0 + i) * w + (c0 + j)) * c + ch;
                        const long long dst = (static_cast<long long>(i) * wp + j) * c + ch;
                        p0[dst] = pair.x0[src];
                        p1[dst] = pair.x1[src];
                    }
            PatchPair pp;
            pp.row = r0;
            pp.col = c0;
            pp.range = normalize_pair(p0, p1, pp.x0, pp.x1);
            out.push_back(std::move(pp));
        }
    }
    return out;
}

Tensor stack_patches(const std::vector<PatchPair>& pairs, const std::vector<int>& indices, bool use_x1) {
    if (indices.empty()) throw shape_error("stack_patches: empty batch");
    const Tensor& first = use_x1 ? pairs[static_cast<std::size_t>(indices[0])].x1
                                 : pairs[static_cast<std::size_t>(indices[0])].x0;
    const int hp = first.extent(0), wp = first.extent(1), c = first.extent(2);
    Tensor out({static_cast<int>(indices.size()), hp, wp, c});
    double* od = out.data();
    const long long per = static_cast<long long>(hp) * wp * c;
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const PatchPair& pp = pairs[static_cast<std::size_t>(indices[b])];
        const Tensor& src = use_x1 ? pp.x1 : pp.x0;
        if (src.extent(0) != hp || src.extent(1) != wp || src.extent(2) != c)
            throw shape_error("stack_patches: inconsistent patch shapes");
        std::memcpy(od + b * per, src.data(), static_cast<std::size_t>(per) * sizeof(double));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

SyntheticKind synthetic_kind_from_string(const std::string& s) {
    if (s == "translation") return SyntheticKind::translation;
    if (s == "rotation") return SyntheticKind::rotation;
    if (s == "source-sink") return SyntheticKind::source_sink;
    throw config_error("unknown synthetic kind '" + s + "' (translation|rotation|source-sink)");
}

std::string to_string(SyntheticKind k) {
    switch (k) {
        case SyntheticKind::translation: return "translation";
        case SyntheticKind::rotation: return "rotation";
        case SyntheticKind::source_sink: return "source-sink";
    }
    return "?";
}

namespace {

Tensor random_texture(Rng& rng, int h, int w) {
    struct Blob {
        double cx, cy, sigma, amp;
    };
    std::vector<Blob> blobs;
    for (int k = 0; k < 20; ++k)
        blobs.push_back({rng.uniform(), rng.uniform(), rng.uniform(0.05, 0.22), rng.uniform(-1.0, 1.0)});

    Tensor t({h, w, 1});
    double* d = t.data();
    for (int i = 0; i < h; ++i) {
        const double y = h > 1 ? static_cast<double>(i) / (h - 1) : 0.0;
        for (int j = 0; j < w; ++j) {
            const double x = w > 1 ? static_cast<double>(j) / (w - 1) : 0.0;
            double v = 0.0;
            for (const Blob& b : blobs) {
                const double dx = x - b.cx, dy = y - b.cy;
                v += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
            }
            d[static_cast<long long>(i) * w + j] = v;
        }
    }
    double lo = d[0], hi = d[0];
    for (long long i = 0; i < t.size(); ++i) {
        lo = std::min(lo, d[i]);
        hi = std::max(hi, d[i]);
    }
    if (hi > lo)
        for (long long i = 0; i < t.size(); ++i) d[i] = (d[i] - lo) / (hi - lo);
    else
        for (long long i = 0; i < t.size(); ++i) d[i] = 0.5;
    return t;
}

// Largest per-step displacement measured in grid cells.
double max_cell_displacement(const Tensor& w, double dt) {
    const int H = w.extent(1), W = w.extent(2);
    const double* d = w.data();
    double worst = 0.0;
    for (long long p = 0; p < static_cast<long long>(H) * W; ++p) {
        const double dx = std::abs(d[2 * p]) * dt * (W - 1);
        const double dy = std::abs(d[2 * p + 1]) * dt * (H - 1);
        worst = std::max({worst, dx, dy});
    }
    return worst;
}

} // namespace

SyntheticScene make_synthetic(SyntheticKind kind, int h, int w, int n, double dt, std::uint64_t seed) {
    if (n < 1) throw shape_error("make_synthetic: need at least one step");
    if (h < 2 || w < 2) throw shape_error("make_synthetic: scene must be at least 2x2");
    Rng rng(seed);

    SyntheticScene scene;
    scene.kind = kind;
    scene.texture = random_texture(rng, h, w);

    // Target per-step displacement in cells, capped well below the 2-cell
    // bound so multi-step backtraces stay interpolation-friendly.
    const double target_cells = rng.uniform(1.0, 1.8);

    Tensor field({1, h, w, 2});
    double* fd = field.data();
    if (kind == SyntheticKind::translation) {
        const double theta = rng.uniform(0.0, 6.283185307179586);
        const double ux = std::cos(theta), uy = std::sin(theta);
        for (long long p = 0; p < static_cast<long long>(h) * w; ++p) {
            fd[2 * p] = ux;
            fd[2 * p + 1] = uy;
        }
    } else if (kind == SyntheticKind::rotation) {
        const double cx = rng.uniform(0.35, 0.65), cy = rng.uniform(0.35, 0.65);
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        for (int i = 0; i < h; ++i) {
            const double y = static_cast<double>(i) / (h - 1);
            for (int j = 0; j < w; ++j) {
                const double x = static_cast<double>(j) / (w - 1);
                const long long p = static_cast<long long>(i) * w + j;
                fd[2 * p] = -sign * (y - cy);
                fd[2 * p + 1] = sign * (x - cx);
            }
        }
    } else {
        struct Pot {
            double cx, cy, sigma, amp;
        };
        std::vector<Pot> pots;
        for (int k = 0; k < 4; ++k)
            pots.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.12, 0.3),
                            rng.uniform() < 0.5 ? -1.0 : 1.0});
        for (int i = 0; i < h; ++i) {
            const double y = static_cast<double>(i) / (h - 1);
            for (int j = 0; j < w; ++j) {
                const double x = static_cast<double>(j) / (w - 1);
                double gx = 0.0, gy = 0.0;
                for (const Pot& q : pots) {
                    const double dx = x - q.cx, dy = y - q.cy;
                    const double g = q.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * q.sigma * q.sigma)) /
                                     (q.sigma * q.sigma);
                    gx += -dx * g;
                    gy += -dy * g;
                }
                const long long p = static_cast<long long>(i) * w + j;
                fd[2 * p] = gx;
                fd[2 * p + 1] = gy;
            }
        }
    }

    const double current = max_cell_displacement(field, dt);
    if (current > 0.0) {
        const double s = target_cells / current;
        for (long long i = 0; i < field.size(); ++i) field[i] *= s;
    }

    scene.true_fields.dt = dt;
    for (int s = 0; s < n; ++s) scene.true_fields.fields.push_back(field);

    scene.x0 = scene.texture.clone();
    Tensor z0({1, h, w, 1}, std::vector<double>(scene.texture.data(), scene.texture.data() + scene.texture.size()));
    Tape tape;
    const std::vector<Tensor> states = advect_rollout(tape, z0, scene.true_fields);
    const Tensor& zN = states.back();
    scene.x1 = Tensor({h, w, 1}, std::vector<double>(zN.data(), zN.data() + zN.size()));
    return scene;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open manifest: " + path);
    Manifest m;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag)) continue;
        std::string rest;
        std::getline(ls, rest);
        const std::size_t a = rest.find_first_not_of(" \t");
        rest = a == std::string::npos ? "" : rest.substr(a);
        while (!rest.empty() && (rest.back() == ' ' || rest.back() == '\t' || rest.back() == '\r')) rest.pop_back();
        if (tag == "t0" || tag == "t1") {
            if (rest.empty()) throw io_error(path + ":" + std::to_string(lineno) + ": missing file path");
            (tag == "t0" ? m.t0 : m.t1).push_back(rest);
        } else if (tag == "pixel_scale") {
            try {
                m.pixel_scale = std::stod(rest);
            } catch (const std::exception&) {
                throw io_error(path + ":" + std::to_string(lineno) + ": bad pixel_scale");
            }
        } else {
            throw io_error(path + ":" + std::to_string(lineno) + ": unknown manifest tag '" + tag + "'");
        }
    }
    if (m.t0.empty() || m.t1.empty()) throw io_error("manifest lists no images: " + path);
    if (m.t0.size() != m.t1.size())
        throw io_error("manifest endpoint channel counts differ: " + path);
    return m;
}

void write_manifest(const Manifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write manifest: " + path);
    for (const std::string& f : m.t0) out << "t0 " << f << "\n";
    for (const std::string& f : m.t1) out << "t1 " << f << "\n";
    if (m.pixel_scale != 1.0) out << "pixel_scale " << m.pixel_scale << "\n";
    if (!out) throw io_error("failed writing manifest: " + path);
}

ImagePair load_pair(const std::string& manifest_path) {
    const Manifest m = read_manifest(manifest_path);
    const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
    auto resolve = [&](const std::vector<std::string>& names) {
        std::vector<std::string> out;
        for (const std::string& n : names) {
            const std::filesystem::path p(n);
            out.push_back(p.is_absolute() ? p.string() : (base / p).string());
        }
        return out;
    };
    ImagePair pair;
    pair.x0 = load_image_channels(resolve(m.t0));
    pair.x1 = load_image_channels(resolve(m.t1));
    pair.pixel_scale = m.pixel_scale;
    if (pair.x0.shape() != pair.x1.shape())
        throw io_error("endpoint images have different extents in " + manifest_path);
    return pair;
}

} // namespace latentdyn
