#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "neuromatch/visualization.hpp"

namespace neuromatch {

namespace fs = std::filesystem;

PlotKind parse_plot_kind(const std::string& name) {
    if (name == "topk_curve") return PlotKind::topk_curve;
    if (name == "kde_pair") return PlotKind::kde_pair;
    if (name == "similarity_heatmap") return PlotKind::similarity_heatmap;
    if (name == "tsne_pairs") return PlotKind::tsne_pairs;
    throw ConfigError("unknown plot kind \"" + name + "\"");
}

const char* plot_kind_name(PlotKind k) {
    switch (k) {
        case PlotKind::topk_curve: return "topk_curve";
        case PlotKind::kde_pair: return "kde_pair";
        case PlotKind::similarity_heatmap: return "similarity_heatmap";
        case PlotKind::tsne_pairs: return "tsne_pairs";
    }
    return "?";
}

namespace {

constexpr double width = 640, height = 480;
constexpr double left = 70, right = 150, top = 40, bottom = 60;
constexpr double plot_w = width - left - right, plot_h = height - top - bottom;

const std::vector<std::string>& palette() {
    static const std::vector<std::string> colors = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return colors;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string hex_color(const std::array<double, 3>& rgb) {
    std::ostringstream s;
    s << '#' << std::hex << std::setfill('0');
    for (double v : rgb) s << std::setw(2) << std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    return s.str();
}

struct Range {
    double lo, hi;
    double map(double v, double a, double b) const { return a + (v - lo) / (hi - lo) * (b - a); }
};

Range padded(double lo, double hi) {
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    return {lo - pad, hi + pad};
}

class Svg {
public:
    explicit Svg(const std::string& title) {
        body_ << std::setprecision(6);
        body_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
              << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
        body_ << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
        body_ << "<text class=\"title\" x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
              << escape(title) << "</text>\n";
    }

    std::ostringstream& out() { return body_; }

    void axes(const Range& x, const Range& y, const std::string& xlabel, const std::string& ylabel) {
        const double x0 = left, y0 = top + plot_h;
        body_ << "<g class=\"axes\" stroke=\"black\" fill=\"none\">\n";
        body_ << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 + plot_w << "\" y2=\"" << y0 << "\"/>\n";
        body_ << "<line x1=\"" << x0 << "\" y1=\"" << top << "\" x2=\"" << x0 << "\" y2=\"" << y0 << "\"/>\n";
        body_ << "</g>\n";
        for (int t = 0; t <= 4; ++t) {
            const double vx = x.lo + (x.hi - x.lo) * t / 4.0, vy = y.lo + (y.hi - y.lo) * t / 4.0;
            const double px = x.map(vx, left, left + plot_w), py = y.map(vy, top + plot_h, top);
            body_ << "<text class=\"tick\" x=\"" << px << "\" y=\"" << y0 + 16
                  << "\" text-anchor=\"middle\" font-size=\"10\">" << vx << "</text>\n";
            body_ << "<text class=\"tick\" x=\"" << x0 - 6 << "\" y=\"" << py + 3
                  << "\" text-anchor=\"end\" font-size=\"10\">" << vy << "</text>\n";
        }
        body_ << "<text class=\"xlabel\" x=\"" << left + plot_w / 2 << "\" y=\"" << height - 16
              << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(xlabel) << "</text>\n";
        body_ << "<text class=\"ylabel\" x=\"16\" y=\"" << top + plot_h / 2 << "\" text-anchor=\"middle\" font-size=\"12\""
              << " transform=\"rotate(-90 16 " << top + plot_h / 2 << ")\">" << escape(ylabel) << "</text>\n";
    }

    void legend(const std::vector<std::pair<std::string, std::string>>& entries) {
        body_ << "<g class=\"legend\">\n";
        double y = top + 10;
        for (const auto& [label, color] : entries) {
            body_ << "<rect x=\"" << width - right + 12 << "\" y=\"" << y - 8 << "\" width=\"10\" height=\"10\" fill=\""
                  << color << "\"/>\n";
            body_ << "<text x=\"" << width - right + 28 << "\" y=\"" << y << "\" font-size=\"11\">" << escape(label)
                  << "</text>\n";
            y += 18;
        }
        body_ << "</g>\n";
    }

    void write(const fs::path& path) {
        body_ << "</svg>\n";
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        std::ofstream f(path);
        if (!f) throw DataError("cannot write " + path.string());
        f << body_.str();
        if (!f) throw DataError("failed writing " + path.string());
    }

private:
    std::ostringstream body_;
};

void topk_plot(const PlotData& d, Svg& svg) {
    if (d.curves.empty()) throw ShapeError("topk_curve plot needs at least one curve");
    std::size_t k_max = 0;
    for (const auto& c : d.curves) {
        if (c.values.empty()) throw ShapeError("topk_curve: curve \"" + c.label + "\" is empty");
        k_max = std::max(k_max, c.values.size());
    }
    const Range x{1.0, std::max(2.0, static_cast<double>(k_max))}, y{0.0, 1.0};
    svg.axes(x, y, "k", "Top-k accuracy");
    std::vector<std::pair<std::string, std::string>> legend;
    for (std::size_t i = 0; i < d.curves.size(); ++i) {
        const auto& color = palette()[i % palette().size()];
        svg.out() << "<polyline class=\"curve\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t k = 0; k < d.curves[i].values.size(); ++k)
            svg.out() << x.map(static_cast<double>(k + 1), left, left + plot_w) << ','
                      << y.map(d.curves[i].values[k], top + plot_h, top) << ' ';
        svg.out() << "\"/>\n";
        legend.emplace_back(d.curves[i].label, color);
    }
    svg.legend(legend);
}

void kde_plot(const PlotData& d, Svg& svg) {
    for (const KdeCurve* c : {&d.positive, &d.negative})
        if (c->x.empty() || c->x.size() != c->density.size())
            throw ShapeError("kde_pair needs non-empty positive and negative curves with matching x/density");
    double xlo = std::min(d.positive.x.front(), d.negative.x.front());
    double xhi = std::max(d.positive.x.back(), d.negative.x.back());
    double ymax = 0.0;
    for (const KdeCurve* c : {&d.positive, &d.negative})
        for (double v : c->density) ymax = std::max(ymax, v);
    const Range x = padded(xlo, xhi), y{0.0, ymax > 0.0 ? ymax * 1.05 : 1.0};
    svg.axes(x, y, "similarity", "density");
    const std::pair<const KdeCurve*, std::pair<const char*, const char*>> series[] = {
        {&d.positive, {"positive", "#1f77b4"}}, {&d.negative, {"negative", "#d62728"}}};
    for (const auto& [curve, style] : series) {
        svg.out() << "<path class=\"kde " << style.first << "\" fill=\"none\" stroke=\"" << style.second
                  << "\" stroke-width=\"2\" d=\"";
        for (std::size_t i = 0; i < curve->x.size(); ++i)
            svg.out() << (i == 0 ? 'M' : 'L') << x.map(curve->x[i], left, left + plot_w) << ' '
                      << y.map(curve->density[i], top + plot_h, top) << ' ';
        svg.out() << "\"/>\n";
    }
    svg.legend({{"positive pairs", "#1f77b4"}, {"negative pairs", "#d62728"}});
}

void heatmap_plot(const PlotData& d, Svg& svg) {
    const Tensor& m = d.matrix;
    if (m.rank() != 2 || m.size() == 0) throw ShapeError("similarity_heatmap needs a non-empty matrix");
    double lo = m[0], hi = m[0];
    for (std::size_t i = 0; i < m.size(); ++i) {
        lo = std::min(lo, m[i]);
        hi = std::max(hi, m[i]);
    }
    const double cw = plot_w / static_cast<double>(m.cols()), ch = plot_h / static_cast<double>(m.rows());
    const auto& cmap = heat_colormap();
    svg.out() << "<g class=\"heatmap\">\n";
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) {
            const double t = hi > lo ? (m.at(r, c) - lo) / (hi - lo) : 0.0;
            const auto idx = static_cast<std::size_t>(std::lround(t * 255.0));
            svg.out() << "<rect class=\"cell\" x=\"" << left + c * cw << "\" y=\"" << top + r * ch << "\" width=\"" << cw
                      << "\" height=\"" << ch << "\" fill=\"" << hex_color(cmap[idx]) << "\"><title>" << m.at(r, c)
                      << "</title></rect>\n";
        }
    svg.out() << "</g>\n";
    svg.out() << "<text class=\"xlabel\" x=\"" << left + plot_w / 2 << "\" y=\"" << height - 16
              << "\" text-anchor=\"middle\" font-size=\"12\">gallery (modality B)</text>\n";
    svg.out() << "<text class=\"ylabel\" x=\"16\" y=\"" << top + plot_h / 2
              << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 " << top + plot_h / 2
              << ")\">query (modality A)</text>\n";
    std::ostringstream lo_s, hi_s;
    lo_s << std::setprecision(3) << "min " << lo;
    hi_s << std::setprecision(3) << "max " << hi;
    svg.legend({{hi_s.str(), hex_color(cmap.back())}, {lo_s.str(), hex_color(cmap.front())}});
}

void tsne_plot(const PlotData& d, Svg& svg) {
    const Tensor& p = d.points;
    if (p.rank() != 2 || p.cols() != 2 || p.rows() == 0) throw ShapeError("tsne_pairs needs n x 2 points");
    if (d.modality.size() != p.rows() || d.pair_ids.size() != p.rows())
        throw ShapeError("tsne_pairs: modality and pair_ids must have one entry per point");
    double xlo = p.at(0, 0), xhi = xlo, ylo = p.at(0, 1), yhi = ylo;
    for (std::size_t i = 0; i < p.rows(); ++i) {
        xlo = std::min(xlo, p.at(i, 0));
        xhi = std::max(xhi, p.at(i, 0));
        ylo = std::min(ylo, p.at(i, 1));
        yhi = std::max(yhi, p.at(i, 1));
    }
    const Range x = padded(xlo, xhi), y = padded(ylo, yhi);
    svg.axes(x, y, "t-SNE 1", "t-SNE 2");
    std::map<std::int64_t, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < p.rows(); ++i) {
        if (d.modality[i] != 0 && d.modality[i] != 1) throw ShapeError("tsne_pairs: modality must be 0 or 1");
        members[d.pair_ids[i]].push_back(i);
    }
    auto px = [&](std::size_t i) { return x.map(p.at(i, 0), left, left + plot_w); };
    auto py = [&](std::size_t i) { return y.map(p.at(i, 1), top + plot_h, top); };
    std::size_t colour_index = 0;
    for (const auto& [id, idx] : members) {
        const auto& color = palette()[colour_index++ % palette().size()];
        for (std::size_t a = 0; a + 1 < idx.size(); ++a)
            svg.out() << "<line class=\"pair-link\" data-pair=\"" << id << "\" x1=\"" << px(idx[a]) << "\" y1=\""
                      << py(idx[a]) << "\" x2=\"" << px(idx[a + 1]) << "\" y2=\"" << py(idx[a + 1]) << "\" stroke=\""
                      << color << "\" stroke-width=\"1\"/>\n";
        for (std::size_t i : idx) {
            const bool filled = d.modality[i] == 0;
            svg.out() << "<circle class=\"marker " << (filled ? "filled" : "hollow") << "\" data-pair=\"" << id
                      << "\" cx=\"" << px(i) << "\" cy=\"" << py(i) << "\" r=\"5\" stroke=\"" << color
                      << "\" stroke-width=\"1.5\" fill=\"" << (filled ? color : std::string("white")) << "\"/>\n";
        }
    }
    svg.out() << "<g class=\"legend\">\n"
              << "<circle cx=\"" << width - right + 17 << "\" cy=\"" << top + 6
              << "\" r=\"5\" fill=\"black\" stroke=\"black\"/>\n"
              << "<text x=\"" << width - right + 28 << "\" y=\"" << top + 10
              << "\" font-size=\"11\">modality A</text>\n"
              << "<circle cx=\"" << width - right + 17 << "\" cy=\"" << top + 24
              << "\" r=\"5\" fill=\"white\" stroke=\"black\"/>\n"
              << "<text x=\"" << width - right + 28 << "\" y=\"" << top + 28
              << "\" font-size=\"11\">modality B</text>\n</g>\n";
}

}  // namespace

void export_plot(PlotKind kind, const PlotData& data, const fs::path& path) {
    Svg svg(data.title);
    switch (kind) {
        case PlotKind::topk_curve: topk_plot(data, svg); break;
        case PlotKind::kde_pair: kde_plot(data, svg); break;
        case PlotKind::similarity_heatmap: heatmap_plot(data, svg); break;
        case PlotKind::tsne_pairs: tsne_plot(data, svg); break;
    }
    svg.write(path);
}

void write_tsne_csv(const fs::path& path, const Tensor& points, const std::vector<int>& modality,
                    const std::vector<std::int64_t>& pair_ids) {
    if (points.rank() != 2 || points.cols() != 2 || modality.size() != points.rows() ||
        pair_ids.size() != points.rows())
        throw ShapeError("write_tsne_csv: points, modality and pair_ids disagree");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << std::setprecision(17) << "index,modality,pair_id,x,y\n";
    for (std::size_t i = 0; i < points.rows(); ++i)
        out << i << ',' << (modality[i] == 0 ? "A" : "B") << ',' << pair_ids[i] << ',' << points.at(i, 0) << ','
            << points.at(i, 1) << '\n';
    if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace neuromatch
