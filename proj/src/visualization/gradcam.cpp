#include <algorithm>
#include <cmath>
#include <fstream>

#include "neuromatch/visualization.hpp"

namespace neuromatch {

namespace fs = std::filesystem;

CamChannel parse_cam_channel(const std::string& name) {
    if (name == "local") return CamChannel::local;
    if (name == "global") return CamChannel::global;
    throw ConfigError("unknown Grad-CAM channel \"" + name + "\" (expected local or global)");
}

const char* cam_channel_name(CamChannel c) { return c == CamChannel::local ? "local" : "global"; }

namespace {

// ReLU(features . token-mean(gradients)) as a grid x grid lattice.
Tensor lattice_map(const Tensor& features, const Tensor& gradients, std::size_t grid) {
    if (features.rank() != 2 || features.shape() != gradients.shape())
        throw ShapeError("grad_cam: features and gradients must share an n x d shape");
    if (features.rows() != grid * grid)
        throw ShapeError("grad_cam: " + std::to_string(features.rows()) + " tokens do not form a " +
                         std::to_string(grid) + " x " + std::to_string(grid) + " grid");
    const std::size_t n = features.rows(), d = features.cols();
    std::vector<double> w(d, 0.0);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t c = 0; c < d; ++c) w[c] += gradients.at(t, c);
    for (double& v : w) v /= static_cast<double>(n);
    Tensor map({grid, grid});
    for (std::size_t t = 0; t < n; ++t) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += w[c] * features.at(t, c);
        map[t] = std::max(0.0, s);
    }
    return map;
}

// Bilinear resize with pixel centres aligned, clamping at the borders.
Tensor resize_bilinear(const Tensor& src, std::size_t side) {
    const std::size_t g = src.rows();
    const double scale = static_cast<double>(g) / static_cast<double>(side);
    auto coord = [&](std::size_t i, std::size_t& lo, std::size_t& hi, double& frac) {
        const double x = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, static_cast<double>(g - 1));
        lo = static_cast<std::size_t>(std::floor(x));
        hi = std::min(lo + 1, g - 1);
        frac = x - static_cast<double>(lo);
    };
    Tensor out({side, side});
    for (std::size_t r = 0; r < side; ++r) {
        std::size_t r0, r1;
        double fr;
        coord(r, r0, r1, fr);
        for (std::size_t c = 0; c < side; ++c) {
            std::size_t c0, c1;
            double fc;
            coord(c, c0, c1, fc);
            const double top = src.at(r0, c0) * (1.0 - fc) + src.at(r0, c1) * fc;
            const double bottom = src.at(r1, c0) * (1.0 - fc) + src.at(r1, c1) * fc;
            out.at(r, c) = top * (1.0 - fr) + bottom * fr;
        }
    }
    return out;
}

bool is_constant(const Tensor& t) {
    const auto [lo, hi] = std::minmax_element(t.values().begin(), t.values().end());
    return *lo == *hi;
}

void normalize_in_place(Tensor& t) {
    const auto [lo_it, hi_it] = std::minmax_element(t.values().begin(), t.values().end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi == lo) {
        std::fill(t.values().begin(), t.values().end(), 0.0);
        return;
    }
    for (double& v : t.values()) v = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
}

}  // namespace

Tensor grad_cam_map(const Tensor& features, const Tensor& gradients, std::size_t grid, std::size_t side) {
    const Tensor lattice = lattice_map(features, gradients, grid);
    if (is_constant(lattice)) return Tensor({side, side}, 0.0);
    Tensor out = resize_bilinear(lattice, side);
    normalize_in_place(out);
    return out;
}

Tensor grad_cam(const DualEncoder& model, const Tensor& image, CamChannel channel) {
    const EncoderConfig& config = model.config;
    if (channel == CamChannel::local && !config.uses_local())
        throw ConfigError("grad_cam: model has no local channel");
    if (channel == CamChannel::global && !config.uses_global())
        throw ConfigError("grad_cam: model has no global channel");

    Tape tape;
    TapeScope scope(&tape);
    ModelParams params = model.params;
    for (auto& [name, value] : params) value = tape.watch(std::move(value));
    ForwardTrace trace;
    embed(image, params, config, model.lora, &trace);
    const Tensor objective = sum_all(mul(trace.fused, trace.fused));
    const Gradients grads = tape.backprop(objective);

    const Tensor& features = channel == CamChannel::local ? trace.local_tokens : trace.global_tokens;
    const std::size_t input_side = channel == CamChannel::local ? config.local_crop : config.image_size;
    const std::size_t grid = input_side / config.patch_size;
    const Tensor lattice = lattice_map(features.detach(), grads.of(features), grid);
    Tensor canvas({config.image_size, config.image_size}, 0.0);
    if (is_constant(lattice)) return canvas;
    const Tensor resized = resize_bilinear(lattice, input_side);
    const std::size_t offset = (config.image_size - input_side) / 2;
    for (std::size_t r = 0; r < input_side; ++r)
        for (std::size_t c = 0; c < input_side; ++c) canvas.at(offset + r, offset + c) = resized.at(r, c);
    normalize_in_place(canvas);
    return canvas;
}

const std::vector<std::array<double, 3>>& heat_colormap() {
    static const std::vector<std::array<double, 3>> lut = [] {
        std::vector<std::array<double, 3>> out(256);
        for (std::size_t i = 0; i < 256; ++i) {
            const double t = static_cast<double>(i) / 255.0;
            out[i] = {t, 0.0, 1.0 - t};
        }
        return out;
    }();
    return lut;
}

RgbImage overlay(const Tensor& heatmap, const Tensor& image, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("overlay alpha must lie in [0, 1]");
    if (heatmap.shape() != image.shape() || heatmap.rank() != 2)
        throw ShapeError("overlay: heatmap " + shape_string(heatmap.shape()) + " vs image " +
                         shape_string(image.shape()));
    const auto& lut = heat_colormap();
    RgbImage out{image.rows(), image.cols(), std::vector<double>(image.size() * 3)};
    for (std::size_t i = 0; i < image.size(); ++i) {
        const auto idx = static_cast<std::size_t>(std::lround(std::clamp(heatmap[i], 0.0, 1.0) * 255.0));
        const double gray = image[i];
        for (std::size_t ch = 0; ch < 3; ++ch) out.rgb[3 * i + ch] = alpha * lut[idx][ch] + (1.0 - alpha) * gray;
    }
    return out;
}

void write_ppm(const fs::path& path, const RgbImage& image) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "P6\n" << image.cols << ' ' << image.rows << "\n255\n";
    std::vector<unsigned char> raw(image.rgb.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        raw[i] = static_cast<unsigned char>(std::lround(std::clamp(image.rgb[i], 0.0, 1.0) * 255.0));
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace neuromatch
