#include "a2dmn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace a2dmn {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Large finite stand-in for "no seed in this row/column" inside the distance
// transform; a true infinity would make the parabola intersection inf - inf.
constexpr double kFar = 1e20;

void check_same_dims(const LabelMap& a, const LabelMap& b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("label map dimension mismatch: " + std::to_string(a.width) + "x" +
                                    std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                    std::to_string(b.height));
}

// 1D squared-distance transform (Felzenszwalb & Huttenlocher).
void dt1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
          std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        double s;
        while (true) {
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
            if (s > z[k]) break;
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        d[q] = (q - v[k]) * (q - v[k]) + f[v[k]];
    }
}

// Exact squared Euclidean distance to the nearest seed pixel.
std::vector<double> distance_transform(int width, int height, const std::vector<std::pair<int, int>>& seeds) {
    std::vector<double> grid(static_cast<size_t>(width) * height, kFar);
    for (auto [x, y] : seeds) grid[static_cast<size_t>(y) * width + x] = 0;

    std::vector<double> col(height), dcol(height), row(width), drow(width);
    std::vector<int> v(std::max(width, height));
    std::vector<double> z(std::max(width, height) + 1);
    for (int x = 0; x < width; ++x) {
        for (int y = 0; y < height; ++y) col[y] = grid[static_cast<size_t>(y) * width + x];
        dt1d(col, dcol, v, z);
        for (int y = 0; y < height; ++y) grid[static_cast<size_t>(y) * width + x] = dcol[y];
    }
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) row[x] = grid[static_cast<size_t>(y) * width + x];
        dt1d(row, drow, v, z);
        for (int x = 0; x < width; ++x) grid[static_cast<size_t>(y) * width + x] = drow[x];
    }
    return grid;
}

struct DirectedStats {
    double max = 0;
    double mean = 0;
};

// Directed nearest-neighbor distances from each point of `from` to `to`.
DirectedStats directed(const std::vector<std::pair<int, int>>& from, const std::vector<double>& dt_to,
                       int width) {
    DirectedStats s;
    double acc = 0;
    for (auto [x, y] : from) {
        const double d = std::sqrt(dt_to[static_cast<size_t>(y) * width + x]);
        s.max = std::max(s.max, d);
        acc += d;
    }
    s.mean = acc / static_cast<double>(from.size());
    return s;
}

std::optional<std::pair<DirectedStats, DirectedStats>> boundary_stats(const LabelMap& pred,
                                                                      const LabelMap& gt, int c,
                                                                      std::string* reason) {
    auto pb = boundary_pixels(pred, c);
    auto gb = boundary_pixels(gt, c);
    if (pb.empty() || gb.empty()) {
        if (reason) {
            if (pb.empty() && gb.empty()) *reason = "empty prediction and ground truth";
            else if (pb.empty()) *reason = "empty prediction";
            else *reason = "empty ground truth";
        }
        return std::nullopt;
    }
    auto dt_g = distance_transform(pred.width, pred.height, gb);
    auto dt_p = distance_transform(pred.width, pred.height, pb);
    return std::make_pair(directed(pb, dt_g, pred.width), directed(gb, dt_p, pred.width));
}

double nearest_pairwise(const std::pair<int, int>& a, const std::vector<std::pair<int, int>>& set) {
    double best = kInf;
    for (auto [x, y] : set) {
        const double dx = a.first - x, dy = a.second - y;
        best = std::min(best, dx * dx + dy * dy);
    }
    return std::sqrt(best);
}

}  // namespace

bool LabelMap::valid() const {
    if (width <= 0 || height <= 0 || labels.size() != static_cast<size_t>(width) * height) return false;
    return std::all_of(labels.begin(), labels.end(), [](std::uint8_t v) { return v < kNumClasses; });
}

std::vector<std::pair<int, int>> boundary_pixels(const LabelMap& m, int c) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            if (m.at(x, y) != c) continue;
            const bool boundary = (x > 0 && m.at(x - 1, y) != c) || (x + 1 < m.width && m.at(x + 1, y) != c) ||
                                  (y > 0 && m.at(x, y - 1) != c) || (y + 1 < m.height && m.at(x, y + 1) != c);
            if (boundary) out.emplace_back(x, y);
        }
    return out;
}

std::optional<double> iou(const LabelMap& pred, const LabelMap& gt, int c) {
    check_same_dims(pred, gt);
    std::int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.labels.size(); ++i) {
        const bool p = pred.labels[i] == c, g = gt.labels[i] == c;
        inter += p && g;
        uni += p || g;
    }
    if (uni == 0) return std::nullopt;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::optional<double> hausdorff(const LabelMap& pred, const LabelMap& gt, int c) {
    check_same_dims(pred, gt);
    auto stats = boundary_stats(pred, gt, c, nullptr);
    if (!stats) return std::nullopt;
    return std::max(stats->first.max, stats->second.max);
}

std::optional<double> aad(const LabelMap& pred, const LabelMap& gt, int c) {
    check_same_dims(pred, gt);
    auto stats = boundary_stats(pred, gt, c, nullptr);
    if (!stats) return std::nullopt;
    return 0.5 * (stats->first.mean + stats->second.mean);
}

std::optional<double> hausdorff_oracle(const LabelMap& pred, const LabelMap& gt, int c) {
    check_same_dims(pred, gt);
    auto pb = boundary_pixels(pred, c);
    auto gb = boundary_pixels(gt, c);
    if (pb.empty() || gb.empty()) return std::nullopt;
    double h = 0;
    for (const auto& a : pb) h = std::max(h, nearest_pairwise(a, gb));
    for (const auto& b : gb) h = std::max(h, nearest_pairwise(b, pb));
    return h;
}

std::optional<double> aad_oracle(const LabelMap& pred, const LabelMap& gt, int c) {
    check_same_dims(pred, gt);
    auto pb = boundary_pixels(pred, c);
    auto gb = boundary_pixels(gt, c);
    if (pb.empty() || gb.empty()) return std::nullopt;
    double sp = 0, sg = 0;
    for (const auto& a : pb) sp += nearest_pairwise(a, gb);
    for (const auto& b : gb) sg += nearest_pairwise(b, pb);
    return 0.5 * (sp / pb.size() + sg / gb.size());
}

MetricsReport evaluate(const LabelMap& pred, const LabelMap& gt) {
    check_same_dims(pred, gt);
    if (!pred.valid() || !gt.valid())
        throw std::invalid_argument("evaluate: label map has labels outside [0, " +
                                    std::to_string(kNumClasses - 1) + "] or inconsistent dimensions");
    MetricsReport report;
    report.per_class.resize(kNumClasses);
    for (int c = 0; c < kNumClasses; ++c) {
        auto& cm = report.per_class[c];
        if (auto v = iou(pred, gt, c)) {
            cm.iou = {true, *v, ""};
        } else {
            cm.iou = {false, 0, "class absent in prediction and ground truth"};
        }
        std::string reason;
        auto stats = boundary_stats(pred, gt, c, &reason);
        if (stats) {
            cm.hd = {true, std::max(stats->first.max, stats->second.max), ""};
            cm.aad = {true, 0.5 * (stats->first.mean + stats->second.mean), ""};
        } else {
            cm.hd = {false, 0, reason};
            cm.aad = {false, 0, reason};
        }
    }
    return report;
}

int MetricsReport::defined_count(const char* metric) const {
    int n = 0;
    const std::string m(metric);
    for (const auto& cm : per_class) {
        const MetricValue& v = m == "iou" ? cm.iou : m == "hd" ? cm.hd : cm.aad;
        n += v.defined;
    }
    return n;
}

std::string MetricsReport::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "class,metric,value,defined,reason\n";
    const char* names[3] = {"iou", "hd", "aad"};
    for (size_t c = 0; c < per_class.size(); ++c) {
        const MetricValue* vals[3] = {&per_class[c].iou, &per_class[c].hd, &per_class[c].aad};
        for (int m = 0; m < 3; ++m) {
            os << c << ',' << names[m] << ',';
            if (vals[m]->defined) os << vals[m]->value;
            os << ',' << (vals[m]->defined ? 1 : 0) << ',' << vals[m]->reason << '\n';
        }
    }
    return os.str();
}

MetricsReport MetricsReport::from_csv(const std::string& csv) {
    MetricsReport report;
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cls, metric, value, defined, reason;
        std::getline(ls, cls, ',');
        std::getline(ls, metric, ',');
        std::getline(ls, value, ',');
        std::getline(ls, defined, ',');
        std::getline(ls, reason);
        const size_t c = std::stoul(cls);
        if (report.per_class.size() <= c) report.per_class.resize(c + 1);
        MetricValue v;
        v.defined = defined == "1";
        v.value = v.defined ? std::stod(value) : 0.0;
        v.reason = reason;
        if (metric == "iou") report.per_class[c].iou = v;
        else if (metric == "hd") report.per_class[c].hd = v;
        else if (metric == "aad") report.per_class[c].aad = v;
        else throw std::invalid_argument("unknown metric in report csv: " + metric);
    }
    return report;
}

}  // namespace a2dmn
