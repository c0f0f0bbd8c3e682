#include "latentdyn/networks.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "latentdyn/kvconfig.hpp"
#include "latentdyn/rng.hpp"

namespace latentdyn {

void UNetConfig::validate() const {
    if (down.size() != 3 || up.size() != 3)
        throw shape_error("UNetConfig: expected 3 down and 3 up stages");
    for (std::size_t i = 0; i < 3; ++i)
        if (up[i] != down[2 - i])
            throw shape_error("UNetConfig: up stages must mirror down stages");
    if (kernel % 2 != 1 || kernel < 1) throw shape_error("UNetConfig: kernel must be odd");
    if (in_channels < 1 || input_channels < 1 || bottleneck < 1 || output_channels < 1 || out_channels < 1)
        throw shape_error("UNetConfig: channel counts must be >= 1");
}

namespace {

ConvParams init_conv(Rng& rng, int k, int cin, int cout) {
    ConvParams p;
    p.kernel = Tensor({k, k, cin, cout});
    p.bias = Tensor({cout});
    // He-style fan-in scaling, uniform.
    const double bound = std::sqrt(6.0 / (static_cast<double>(k) * k * cin));
    double* d = p.kernel.data();
    const long long n = p.kernel.size();
    for (long long i = 0; i < n; ++i) d[i] = rng.uniform(-bound, bound);
    return p;
}

EncoderParams init_encoder(Rng& rng, const EncoderConfig& cfg) {
    if (cfg.hidden.empty()) throw shape_error("EncoderConfig: need at least one hidden layer");
    EncoderParams p;
    int cin = cfg.in_channels;
    for (int h : cfg.hidden) {
        p.layers.push_back(init_conv(rng, cfg.kernel, cin, h));
        cin = h;
    }
    p.layers.push_back(init_conv(rng, cfg.kernel, cin, cfg.out_channels));
    return p;
}

UNetParams init_unet(Rng& rng, const UNetConfig& cfg) {
    cfg.validate();
    UNetParams p;
    const int k = cfg.kernel;
    p.input = init_conv(rng, k, cfg.in_channels, cfg.input_channels);
    int cin = cfg.input_channels;
    for (int c : cfg.down) {
        p.down.push_back({init_conv(rng, k, cin, c), init_conv(rng, k, c, c)});
        cin = c;
    }
    p.bottleneck = init_conv(rng, k, cin, cfg.bottleneck);
    cin = cfg.bottleneck;
    for (std::size_t s = 0; s < cfg.up.size(); ++s) {
        const int c = cfg.up[s];
        const int skip = cfg.down[cfg.down.size() - 1 - s];
        p.up.push_back({init_conv(rng, k, cin, c), init_conv(rng, k, c + skip, c)});
        cin = c;
    }
    p.output = init_conv(rng, k, cin, cfg.output_channels);
    p.head = init_conv(rng, k, cfg.output_channels, cfg.out_channels);
    return p;
}

void each_conv(UNetParams& p, const std::function<void(ConvParams&)>& fn) {
    fn(p.input);
    for (auto& s : p.down) {
        fn(s[0]);
        fn(s[1]);
    }
    fn(p.bottleneck);
    for (auto& s : p.up) {
        fn(s[0]);
        fn(s[1]);
    }
    fn(p.output);
    fn(p.head);
}

Tensor unet_forward(Tape& tape, const UNetParams& p, const UNetConfig& cfg, const Tensor& x) {
    if (x.rank() != 4) throw shape_error("unet: input must be [B,H,W,C]");
    if (x.extent(3) != cfg.in_channels)
        throw shape_error("unet: input has " + std::to_string(x.extent(3)) + " channels, config expects " +
                          std::to_string(cfg.in_channels));
    if (x.extent(1) % 8 != 0 || x.extent(2) % 8 != 0)
        throw shape_error("unet: spatial extents must be divisible by 8, got " + shape_str(x.shape()));

    const double slope = cfg.slope;
    Tensor h = tape.leaky_relu(tape.conv2d(x, p.input.kernel, p.input.bias), slope);

    std::vector<Tensor> skips;
    for (const auto& s : p.down) {
        h = tape.leaky_relu(tape.conv2d(h, s[0].kernel, s[0].bias), slope);
        h = tape.leaky_relu(tape.conv2d(h, s[1].kernel, s[1].bias), slope);
        skips.push_back(h);
        h = tape.max_pool2(h);
    }

    h = tape.leaky_relu(tape.conv2d(h, p.bottleneck.kernel, p.bottleneck.bias), slope);

    for (std::size_t s = 0; s < p.up.size(); ++s) {
        const Tensor& skip = skips[skips.size() - 1 - s];
        h = tape.resize_bilinear(h, 2 * h.extent(1), 2 * h.extent(2));
        h = tape.leaky_relu(tape.conv2d(h, p.up[s][0].kernel, p.up[s][0].bias), slope);
        // Resize-concatenation: the skip tensor is resized to the upsampled
        // extents (an exact identity when they already agree) and stacked on
        // the channel axis.
        Tensor sk = tape.resize_bilinear(skip, h.extent(1), h.extent(2));
        h = tape.concat_channels(h, sk);
        h = tape.leaky_relu(tape.conv2d(h, p.up[s][1].kernel, p.up[s][1].bias), slope);
    }

    h = tape.leaky_relu(tape.conv2d(h, p.output.kernel, p.output.bias), slope);
    return tape.conv2d(h, p.head.kernel, p.head.bias); // linear head
}

} // namespace

ModelBundle ModelBundle::create(const EncoderConfig& enc, const UNetConfig& dec, const UNetConfig& field,
                                int n_evolution, double dt, std::uint64_t seed) {
    if (n_evolution < 1) throw shape_error("ModelBundle: n_evolution must be >= 1");
    if (enc.out_channels != 1) throw shape_error("ModelBundle: encoder must emit 1 latent channel");
    if (dec.in_channels != 1) throw shape_error("ModelBundle: decoder consumes the 1-channel latent");
    if (field.out_channels != 2 * n_evolution)
        throw shape_error("ModelBundle: field extractor must emit 2*n_evolution channels");
    ModelBundle b;
    b.enc_cfg = enc;
    b.dec_cfg = dec;
    b.field_cfg = field;
    b.n_evolution = n_evolution;
    b.dt = dt;
    Rng rng(seed);
    b.encoder = init_encoder(rng, enc);
    b.decoder = init_unet(rng, dec);
    b.field_net = init_unet(rng, field);
    return b;
}

ModelBundle ModelBundle::identity(const UNetConfig& field, int n_evolution, double dt, std::uint64_t seed) {
    if (n_evolution < 1) throw shape_error("ModelBundle: n_evolution must be >= 1");
    if (field.in_channels != 1)
        throw shape_error("identity-codec bundle requires single-channel input");
    if (field.out_channels != 2 * n_evolution)
        throw shape_error("ModelBundle: field extractor must emit 2*n_evolution channels");
    ModelBundle b;
    b.identity_codecs = true;
    b.enc_cfg = EncoderConfig{};
    b.enc_cfg.hidden = {1};
    b.dec_cfg = UNetConfig{};
    b.field_cfg = field;
    b.n_evolution = n_evolution;
    b.dt = dt;
    Rng rng(seed);
    b.field_net = init_unet(rng, field);
    return b;
}

void for_each_param(ModelBundle& b, const std::function<void(Tensor&)>& fn) {
    auto conv = [&](ConvParams& c) {
        fn(c.kernel);
        fn(c.bias);
    };
    if (!b.identity_codecs) {
        for (auto& l : b.encoder.layers) conv(l);
        each_conv(b.decoder, conv);
    }
    each_conv(b.field_net, conv);
}

void for_each_param(const ModelBundle& b, const std::function<void(const Tensor&)>& fn) {
    for_each_param(const_cast<ModelBundle&>(b), [&](Tensor& t) { fn(t); });
}

long long param_count(const ModelBundle& b) {
    long long n = 0;
    for_each_param(b, [&](const Tensor& t) { n += t.size(); });
    return n;
}

ModelBundle watch(Tape& tape, const ModelBundle& b) {
    ModelBundle w = b;
    for_each_param(w, [&](Tensor& t) { t = tape.watch(t); });
    return w;
}

Tensor encode(Tape& tape, const ModelBundle& b, const Tensor& x) {
    if (x.rank() != 4) throw shape_error("encode: input must be [B,Hp,Wp,C]");
    if (b.identity_codecs) {
        if (x.extent(3) != 1) throw shape_error("encode: identity codec requires 1 channel");
        return x;
    }
    if (x.extent(3) != b.enc_cfg.in_channels)
        throw shape_error("encode: input has " + std::to_string(x.extent(3)) + " channels, config expects " +
                          std::to_string(b.enc_cfg.in_channels));
    Tensor h = x;
    const std::size_t n = b.encoder.layers.size();
    for (std::size_t i = 0; i + 1 < n; ++i)
        h = tape.leaky_relu(tape.conv2d(h, b.encoder.layers[i].kernel, b.encoder.layers[i].bias), b.enc_cfg.slope);
    return tape.conv2d(h, b.encoder.layers[n - 1].kernel, b.encoder.layers[n - 1].bias);
}

Tensor decode(Tape& tape, const ModelBundle& b, const Tensor& z) {
    if (b.identity_codecs) return z;
    return unet_forward(tape, b.decoder, b.dec_cfg, z);
}

FieldSequence extract_fields(Tape& tape, const ModelBundle& b, const Tensor& x) {
    const Tensor raw = unet_forward(tape, b.field_net, b.field_cfg, x);
    FieldSequence seq;
    seq.dt = b.dt;
    seq.fields.reserve(static_cast<std::size_t>(b.n_evolution));
    for (int s = 0; s < b.n_evolution; ++s) seq.fields.push_back(tape.slice_channels(raw, 2 * s, 2 * s + 2));
    return seq;
}

int encoder_receptive_field(const EncoderConfig& cfg) {
    const int layers = static_cast<int>(cfg.hidden.size()) + 1;
    return 1 + layers * (cfg.kernel - 1);
}

namespace {

void expect_shape(const Tensor& t, const std::vector<int>& want, const std::string& what) {
    if (t.shape() != want)
        throw shape_error("validate_shapes: " + what + " is " + shape_str(t.shape()) + ", expected " +
                          shape_str(want));
}

void validate_unet(const UNetParams& p, const UNetConfig& cfg, const std::string& name) {
    cfg.validate();
    const int k = cfg.kernel;
    expect_shape(p.input.kernel, {k, k, cfg.in_channels, cfg.input_channels}, name + " input kernel");
    expect_shape(p.input.bias, {cfg.input_channels}, name + " input bias");
    int cin = cfg.input_channels;
    for (std::size_t s = 0; s < 3; ++s) {
        const int c = cfg.down[s];
        expect_shape(p.down[s][0].kernel, {k, k, cin, c}, name + " down kernel");
        expect_shape(p.down[s][1].kernel, {k, k, c, c}, name + " down kernel");
        cin = c;
    }
    expect_shape(p.bottleneck.kernel, {k, k, cin, cfg.bottleneck}, name + " bottleneck kernel");
    cin = cfg.bottleneck;
    for (std::size_t s = 0; s < 3; ++s) {
        const int c = cfg.up[s];
        const int skip = cfg.down[2 - s];
        expect_shape(p.up[s][0].kernel, {k, k, cin, c}, name + " up kernel");
        expect_shape(p.up[s][1].kernel, {k, k, c + skip, c}, name + " up kernel");
        cin = c;
    }
    expect_shape(p.output.kernel, {k, k, cin, cfg.output_channels}, name + " output kernel");
    expect_shape(p.head.kernel, {k, k, cfg.output_channels, cfg.out_channels}, name + " head kernel");
}

} // namespace

void validate_shapes(const ModelBundle& b, int hp, int wp, int channels) {
    if (hp % 8 != 0 || wp % 8 != 0)
        throw shape_error("validate_shapes: patch extents must be divisible by 8, got " + std::to_string(hp) +
                          "x" + std::to_string(wp));
    if (b.identity_codecs) {
        if (channels != 1) throw shape_error("validate_shapes: identity codecs require 1 channel");
    } else {
        if (b.enc_cfg.in_channels != channels)
            throw shape_error("validate_shapes: encoder expects " + std::to_string(b.enc_cfg.in_channels) +
                              " channels, data has " + std::to_string(channels));
        if (b.dec_cfg.out_channels != channels)
            throw shape_error("validate_shapes: decoder emits " + std::to_string(b.dec_cfg.out_channels) +
                              " channels, data has " + std::to_string(channels));
        int cin = b.enc_cfg.in_channels;
        for (std::size_t i = 0; i < b.encoder.layers.size(); ++i) {
            const int cout = i + 1 < b.encoder.layers.size() ? b.enc_cfg.hidden[i] : b.enc_cfg.out_channels;
            expect_shape(b.encoder.layers[i].kernel, {b.enc_cfg.kernel, b.enc_cfg.kernel, cin, cout},
                         "encoder kernel " + std::to_string(i));
            expect_shape(b.encoder.layers[i].bias, {cout}, "encoder bias " + std::to_string(i));
            cin = cout;
        }
        validate_unet(b.decoder, b.dec_cfg, "decoder");
    }
    if (b.field_cfg.in_channels != channels)
        throw shape_error("validate_shapes: field extractor expects " + std::to_string(b.field_cfg.in_channels) +
                          " channels, data has " + std::to_string(channels));
    if (b.field_cfg.out_channels != 2 * b.n_evolution)
        throw shape_error("validate_shapes: field extractor emits " + std::to_string(b.field_cfg.out_channels) +
                          " channels, expected " + std::to_string(2 * b.n_evolution));
    validate_unet(b.field_net, b.field_cfg, "field extractor");
}

// ---------------------------------------------------------------------------
// Serialization: magic, version, key=value config block, then the raw
// little-endian float32 parameter payload in declaration order.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'L', 'D', 'Y', 'N'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "bundle payload is little-endian");

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t get_u32(std::istream& in, const std::string& path) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw io_error("truncated bundle: " + path);
    return v;
}

std::uint64_t get_u64(std::istream& in, const std::string& path) {
    std::uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 8)) throw io_error("truncated bundle: " + path);
    return v;
}

KvMap encoder_cfg_kv(const EncoderConfig& c) {
    KvMap kv;
    kv["enc_in"] = std::to_string(c.in_channels);
    kv["enc_hidden"] = format_int_list(c.hidden);
    kv["enc_out"] = std::to_string(c.out_channels);
    kv["enc_kernel"] = std::to_string(c.kernel);
    kv["enc_slope"] = format_double(c.slope);
    return kv;
}

KvMap unet_cfg_kv(const UNetConfig& c, const std::string& prefix) {
    KvMap kv;
    kv[prefix + "_in"] = std::to_string(c.in_channels);
    kv[prefix + "_input"] = std::to_string(c.input_channels);
    kv[prefix + "_down"] = format_int_list(c.down);
    kv[prefix + "_bottleneck"] = std::to_string(c.bottleneck);
    kv[prefix + "_up"] = format_int_list(c.up);
    kv[prefix + "_output"] = std::to_string(c.output_channels);
    kv[prefix + "_out"] = std::to_string(c.out_channels);
    kv[prefix + "_kernel"] = std::to_string(c.kernel);
    kv[prefix + "_slope"] = format_double(c.slope);
    return kv;
}

EncoderConfig encoder_cfg_from_kv(const KvMap& kv) {
    EncoderConfig c;
    c.in_channels = static_cast<int>(kv_get_int(kv, "enc_in"));
    c.hidden = kv_get_int_list(kv, "enc_hidden");
    c.out_channels = static_cast<int>(kv_get_int(kv, "enc_out"));
    c.kernel = static_cast<int>(kv_get_int(kv, "enc_kernel"));
    c.slope = kv_get_double(kv, "enc_slope");
    return c;
}

UNetConfig unet_cfg_from_kv(const KvMap& kv, const std::string& prefix) {
    UNetConfig c;
    c.in_channels = static_cast<int>(kv_get_int(kv, prefix + "_in"));
    c.input_channels = static_cast<int>(kv_get_int(kv, prefix + "_input"));
    c.down = kv_get_int_list(kv, prefix + "_down");
    c.bottleneck = static_cast<int>(kv_get_int(kv, prefix + "_bottleneck"));
    c.up = kv_get_int_list(kv, prefix + "_up");
    c.output_channels = static_cast<int>(kv_get_int(kv, prefix + "_output"));
    c.out_channels = static_cast<int>(kv_get_int(kv, prefix + "_out"));
    c.kernel = static_cast<int>(kv_get_int(kv, prefix + "_kernel"));
    c.slope = kv_get_double(kv, prefix + "_slope");
    return c;
}

} // namespace

void save_bundle(const ModelBundle& b, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write bundle: " + path);

    KvMap kv;
    kv["identity"] = b.identity_codecs ? "1" : "0";
    kv["n_evolution"] = std::to_string(b.n_evolution);
    kv["dt"] = format_double(b.dt);
    for (const auto& [k, v] : encoder_cfg_kv(b.enc_cfg)) kv[k] = v;
    for (const auto& [k, v] : unet_cfg_kv(b.dec_cfg, "dec")) kv[k] = v;
    for (const auto& [k, v] : unet_cfg_kv(b.field_cfg, "field")) kv[k] = v;
    const std::string cfg = kv_to_text(kv);

    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    put_u64(out, static_cast<std::uint64_t>(param_count(b)));
    std::vector<float> buf;
    for_each_param(b, [&](const Tensor& t) {
        buf.resize(static_cast<std::size_t>(t.size()));
        const double* d = t.data();
        for (long long i = 0; i < t.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(d[i]);
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    });
    if (!out) throw io_error("failed writing bundle: " + path);
}

ModelBundle load_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open bundle: " + path);

    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw io_error("not a model bundle (bad magic): " + path);
    const std::uint32_t version = get_u32(in, path);
    if (version != kVersion)
        throw io_error("unsupported bundle version " + std::to_string(version) + ": " + path);

    const std::uint32_t cfg_len = get_u32(in, path);
    std::string cfg(cfg_len, '\0');
    if (!in.read(cfg.data(), cfg_len)) throw io_error("truncated bundle: " + path);
    const KvMap kv = parse_kv_text(cfg);

    const int n_evolution = static_cast<int>(kv_get_int(kv, "n_evolution"));
    const double dt = kv_get_double(kv, "dt");
    const bool identity = kv_get_int(kv, "identity") != 0;

    ModelBundle b;
    if (identity) {
        b = ModelBundle::identity(unet_cfg_from_kv(kv, "field"), n_evolution, dt, 0);
    } else {
        b = ModelBundle::create(encoder_cfg_from_kv(kv), unet_cfg_from_kv(kv, "dec"),
                                unet_cfg_from_kv(kv, "field"), n_evolution, dt, 0);
    }

    const std::uint64_t count = get_u64(in, path);
    if (count != static_cast<std::uint64_t>(param_count(b)))
        throw io_error("bundle parameter count mismatch: " + path);
    std::vector<float> buf;
    for_each_param(b, [&](Tensor& t) {
        buf.resize(static_cast<std::size_t>(t.size()));
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4)))
            throw io_error("truncated bundle payload: " + path);
        double* d = t.data();
        for (long long i = 0; i < t.size(); ++i) d[i] = static_cast<double>(buf[static_cast<std::size_t>(i)]);
    });
    return b;
}

} // namespace latentdyn
