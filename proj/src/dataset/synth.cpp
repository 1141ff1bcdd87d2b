#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "neuromatch/dataset.hpp"

namespace neuromatch {

namespace {

constexpr double background_level = 0.08;

struct Blob {
    double cx, cy, ra, rb, angle, intensity;
};

struct Fiber {
    std::vector<std::array<double, 2>> points;
    double width;
    double intensity;
};

struct NeuronGeometry {
    Blob soma;
    std::vector<Fiber> fibers;
    std::vector<Blob> neighbors;
};

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::mt19937_64 stream(std::uint64_t seed, std::int64_t pair_id, std::uint64_t purpose) {
    return std::mt19937_64(splitmix64(splitmix64(seed) ^ splitmix64(static_cast<std::uint64_t>(pair_id) * 4 + purpose)));
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Fiber walk(std::mt19937_64& rng, double x, double y, double heading, int steps, double wander, double width,
           double intensity) {
    std::normal_distribution<double> turn(0.0, wander * 0.1);
    Fiber f{{}, width, intensity};
    double curvature = 0.0;
    for (int s = 0; s < steps; ++s) {
        f.points.push_back({x, y});
        curvature = 0.9 * curvature + turn(rng);
        heading += curvature;
        x += std::cos(heading);
        y += std::sin(heading);
    }
    return f;
}

NeuronGeometry sample_geometry(const SynthesisParams& p, std::int64_t pair_id) {
    auto rng = stream(p.seed, pair_id, 0);
    constexpr double pi = std::numbers::pi;
    const double centre = static_cast<double>(image_side) / 2.0;

    NeuronGeometry g;
    g.soma.cx = centre + uniform(rng, -p.soma_jitter, p.soma_jitter);
    g.soma.cy = centre + uniform(rng, -p.soma_jitter, p.soma_jitter);
    g.soma.ra = uniform(rng, p.soma_radius.lo, p.soma_radius.hi);
    g.soma.rb = uniform(rng, p.soma_radius.lo, p.soma_radius.hi);
    g.soma.angle = uniform(rng, 0.0, pi);
    g.soma.intensity = uniform(rng, 0.85, 1.0);

    const int n_fibers = uniform_int(rng, p.fiber_count.lo, p.fiber_count.hi);
    for (int i = 0; i < n_fibers; ++i) {
        const double phi = uniform(rng, 0.0, 2.0 * pi);
        // Boundary point of the rotated ellipse in direction phi.
        const double local = phi - g.soma.angle;
        const double r = 1.0 / std::sqrt(std::pow(std::cos(local) / g.soma.ra, 2) + std::pow(std::sin(local) / g.soma.rb, 2));
        const double sx = g.soma.cx + r * std::cos(phi);
        const double sy = g.soma.cy + r * std::sin(phi);
        const double width = uniform(rng, 0.8, 1.6);
        const double intensity = uniform(rng, 0.45, 0.8);
        const int steps = uniform_int(rng, 35, 100);
        Fiber trunk = walk(rng, sx, sy, phi + std::normal_distribution<double>(0.0, 0.2)(rng), steps, p.fiber_wander,
                           width, intensity);
        if (uniform(rng, 0.0, 1.0) < 0.5 && trunk.points.size() > 20) {
            const auto& at = trunk.points[trunk.points.size() / 2];
            const double side = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
            const auto& prev = trunk.points[trunk.points.size() / 2 - 1];
            const double heading = std::atan2(at[1] - prev[1], at[0] - prev[0]) + side * uniform(rng, 0.4, 1.0);
            g.fibers.push_back(walk(rng, at[0], at[1], heading, uniform_int(rng, 15, 45), p.fiber_wander, width * 0.8,
                                    intensity * 0.9));
        }
        g.fibers.push_back(std::move(trunk));
    }

    const int n_neighbors = uniform_int(rng, p.neighbor_count.lo, p.neighbor_count.hi);
    for (int i = 0; i < n_neighbors; ++i) {
        const double dist = uniform(rng, 28.0, 68.0);
        const double dir = uniform(rng, 0.0, 2.0 * pi);
        Blob b;
        b.cx = centre + dist * std::cos(dir);
        b.cy = centre + dist * std::sin(dir);
        b.ra = uniform(rng, 4.0, 9.0);
        b.rb = uniform(rng, 4.0, 9.0);
        b.angle = uniform(rng, 0.0, pi);
        b.intensity = uniform(rng, 0.35, 0.8);
        g.neighbors.push_back(b);
    }
    return g;
}

class Canvas {
public:
    Canvas(double dx, double dy) : dx_(dx), dy_(dy), pixels_(image_side * image_side, background_level) {}

    void blob(const Blob& b) {
        const double cx = b.cx + dx_, cy = b.cy + dy_;
        const double reach = std::max(b.ra, b.rb) + 1.5;
        const double ca = std::cos(b.angle), sa = std::sin(b.angle);
        const double rmin = std::min(b.ra, b.rb);
        for_box(cx, cy, reach, [&](std::size_t x, std::size_t y) {
            const double u = (static_cast<double>(x) - cx) * ca + (static_cast<double>(y) - cy) * sa;
            const double v = -(static_cast<double>(x) - cx) * sa + (static_cast<double>(y) - cy) * ca;
            const double rho = std::sqrt((u / b.ra) * (u / b.ra) + (v / b.rb) * (v / b.rb));
            return std::clamp((1.0 - rho) * rmin + 0.5, 0.0, 1.0) * b.intensity;
        });
    }

    void fiber(const Fiber& f) {
        for (const auto& pt : f.points) {
            const double cx = pt[0] + dx_, cy = pt[1] + dy_;
            for_box(cx, cy, f.width + 1.0, [&](std::size_t x, std::size_t y) {
                const double d = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
                return std::clamp(f.width - d + 0.5, 0.0, 1.0) * f.intensity;
            });
        }
    }

    std::vector<double> take() { return std::move(pixels_); }

private:
    template <class Fn>
    void for_box(double cx, double cy, double reach, Fn&& value) {
        const auto lo = [](double v) { return static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, double(image_side - 1))); };
        const auto hi = [](double v) { return static_cast<std::size_t>(std::clamp(std::ceil(v), 0.0, double(image_side - 1))); };
        if (cx + reach < 0 || cy + reach < 0 || cx - reach > double(image_side - 1) || cy - reach > double(image_side - 1))
            return;
        for (std::size_t y = lo(cy - reach); y <= hi(cy + reach); ++y)
            for (std::size_t x = lo(cx - reach); x <= hi(cx + reach); ++x) {
                double& px = pixels_[y * image_side + x];
                px = std::max(px, value(x, y));
            }
    }

    double dx_, dy_;
    std::vector<double> pixels_;
};

std::vector<double> render(const NeuronGeometry& g, double dx, double dy) {
    Canvas canvas(dx, dy);
    for (const auto& n : g.neighbors) canvas.blob(n);
    for (const auto& f : g.fibers) canvas.fiber(f);
    canvas.blob(g.soma);
    return canvas.take();
}

std::vector<double> gaussian_blur(const std::vector<double>& src, double sigma) {
    if (sigma <= 0.0) return src;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& k : kernel) k /= total;
    const int n = static_cast<int>(image_side);
    auto clampi = [n](int v) { return std::clamp(v, 0, n - 1); };
    std::vector<double> tmp(src.size()), out(src.size());
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * src[y * n + clampi(x + k)];
            tmp[y * n + x] = acc;
        }
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp[clampi(y + k) * n + x];
            out[y * n + x] = acc;
        }
    return out;
}

void add_noise_and_clamp(std::vector<double>& px, double sigma, std::mt19937_64& rng) {
    if (sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, sigma);
        for (auto& v : px) v += noise(rng);
    }
    for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

void SynthesisParams::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid synthesis parameters: " + what); };
    if (!(soma_radius.lo > 0.0) || soma_radius.lo > soma_radius.hi) fail("soma_radius range");
    if (fiber_count.lo < 0 || fiber_count.lo > fiber_count.hi) fail("fiber_count range");
    if (neighbor_count.lo < 0 || neighbor_count.lo > neighbor_count.hi) fail("neighbor_count range");
    if (fiber_wander < 0.0) fail("fiber_wander < 0");
    if (modality_a_noise < 0.0 || modality_b_noise < 0.0) fail("noise sigma < 0");
    if (modality_b_blur < 0.0) fail("blur sigma < 0");
    if (!(contrast_gap > 0.0)) fail("contrast_gap must be positive");
    if (soma_jitter < 0.0) fail("soma_jitter < 0");
    if (misalignment < 0) fail("misalignment < 0");
}

PairedSample generate_pair(const SynthesisParams& params, std::int64_t pair_id) {
    params.validate();
    const NeuronGeometry geometry = sample_geometry(params, pair_id);

    auto shift_rng = stream(params.seed, pair_id, 1);
    const int dx = uniform_int(shift_rng, -params.misalignment, params.misalignment);
    const int dy = uniform_int(shift_rng, -params.misalignment, params.misalignment);

    std::vector<double> a = render(geometry, 0.0, 0.0);
    for (auto& v : a) v *= params.contrast_gap;
    auto noise_a = stream(params.seed, pair_id, 2);
    add_noise_and_clamp(a, params.modality_a_noise, noise_a);

    std::vector<double> b = gaussian_blur(render(geometry, dx, dy), params.modality_b_blur);
    auto noise_b = stream(params.seed, pair_id, 3);
    add_noise_and_clamp(b, params.modality_b_noise, noise_b);

    return PairedSample{pair_id, Tensor({image_side, image_side}, std::move(a)),
                        Tensor({image_side, image_side}, std::move(b))};
}

SplitSizes split_sizes(std::size_t n_pairs, const SplitRatios& ratios) {
    if (n_pairs < 3) throw ConfigError("need at least 3 pairs to populate train/validation/test, got " + std::to_string(n_pairs));
    const double weights[3] = {ratios.train, ratios.validation, ratios.test};
    const double total = weights[0] + weights[1] + weights[2];
    if (!(weights[0] > 0 && weights[1] > 0 && weights[2] > 0)) throw ConfigError("split ratios must be positive");
    std::size_t sizes[3];
    double remainder[3];
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double quota = static_cast<double>(n_pairs) * weights[i] / total;
        sizes[i] = static_cast<std::size_t>(std::floor(quota));
        remainder[i] = quota - std::floor(quota);
        assigned += sizes[i];
    }
    // Remaining units go to the largest fractional parts; ties favour the earlier split.
    int order[3] = {0, 1, 2};
    std::stable_sort(order, order + 3, [&](int x, int y) { return remainder[x] > remainder[y]; });
    for (std::size_t k = 0; assigned < n_pairs; ++k, ++assigned) ++sizes[order[k % 3]];
    for (int i = 0; i < 3; ++i) {
        while (sizes[i] == 0) {
            const int largest = static_cast<int>(std::max_element(sizes, sizes + 3) - sizes);
            --sizes[largest];
            ++sizes[i];
        }
    }
    return SplitSizes{sizes[0], sizes[1], sizes[2]};
}

DatasetSplit generate_dataset(const SynthesisParams& params, std::size_t n_pairs, const SplitRatios& ratios) {
    params.validate();
    const SplitSizes sizes = split_sizes(n_pairs, ratios);
    DatasetSplit split;
    for (std::size_t i = 0; i < n_pairs; ++i) {
        auto sample = generate_pair(params, static_cast<std::int64_t>(i));
        if (i < sizes.train)
            split.train.push_back(std::move(sample));
        else if (i < sizes.train + sizes.validation)
            split.validation.push_back(std::move(sample));
        else
            split.test.push_back(std::move(sample));
    }
    return split;
}

}  // namespace neuromatch
