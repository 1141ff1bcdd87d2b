#pragma once

// Grad-CAM maps, heatmap overlays, exact t-SNE and SVG plots.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "neuromatch/dataset.hpp"
#include "neuromatch/encoder.hpp"
#include "neuromatch/evaluation.hpp"

namespace neuromatch {

enum class CamChannel { local, global };
CamChannel parse_cam_channel(const std::string& name);
const char* cam_channel_name(CamChannel c);

// Core map: weights are the token-mean of `gradients`, the map is
// ReLU(features . weights) on a grid x grid lattice, bilinearly resized to
// side x side and min-max normalised. A constant map yields all zeros.
Tensor grad_cam_map(const Tensor& features, const Tensor& gradients, std::size_t grid, std::size_t side);

// Objective: squared norm of the fused embedding before normalisation.
// Target: token features after the channel's last attention block. The
// local map covers the centre crop and is zero elsewhere.
Tensor grad_cam(const DualEncoder& model, const Tensor& image, CamChannel channel);

struct RgbImage {
    std::size_t rows = 0, cols = 0;
    std::vector<double> rgb;  // row-major, 3 values in [0, 1] per pixel
};

// 256-entry blue-to-red ramp: entry i = (i/255, 0, 1 - i/255).
const std::vector<std::array<double, 3>>& heat_colormap();

// alpha * colormap(heatmap) + (1 - alpha) * gray(image).
RgbImage overlay(const Tensor& heatmap, const Tensor& image, double alpha);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);

struct TsneConfig {
    double perplexity = 10.0;
    std::size_t iterations = 1000;
    std::optional<double> learning_rate;  // unset: min(100, n / 2)
    double early_exaggeration = 4.0;
    std::size_t exaggeration_iterations = 100;
    std::size_t momentum_switch = 250;  // momentum 0.5 before, 0.8 from here on
    std::uint64_t seed = 0;
};

struct TsneResult {
    Tensor coordinates;                // n x 2
    Tensor conditional;                // P_{j|i}, rows sum to 1
    std::vector<double> perplexities;  // 2^H(P_i) reached by the bandwidth search
    Tensor joint;                      // symmetrised P, sums to 1
    std::vector<double> kl;            // KL(P || Q) after each iteration
};

// Row-stochastic P_{j|i} from squared distances with per-row bandwidths
// matching `perplexity`.
Tensor conditional_affinities(const Tensor& sq_distances, double perplexity, std::vector<double>* reached = nullptr);
TsneResult tsne(const Tensor& features, const TsneConfig& config);

enum class PlotKind { topk_curve, kde_pair, similarity_heatmap, tsne_pairs };
PlotKind parse_plot_kind(const std::string& name);
const char* plot_kind_name(PlotKind k);

struct Curve {
    std::string label;
    std::vector<double> values;  // values[k-1] for k = 1..
};

struct PlotData {
    std::string title;
    std::vector<Curve> curves;                   // topk_curve
    KdeCurve positive, negative;                 // kde_pair
    Tensor matrix;                               // similarity_heatmap
    Tensor points;                               // tsne_pairs: n x 2
    std::vector<int> modality;                   // tsne_pairs: 0 = A (filled), 1 = B (hollow)
    std::vector<std::int64_t> pair_ids;          // tsne_pairs
};

void export_plot(PlotKind kind, const PlotData& data, const std::filesystem::path& path);

// index,modality,pair_id,x,y
void write_tsne_csv(const std::filesystem::path& path, const Tensor& points, const std::vector<int>& modality,
                    const std::vector<std::int64_t>& pair_ids);

}  // namespace neuromatch
