#pragma once

// Per-class area and boundary metrics over hard label maps: IoU, symmetric
// Hausdorff distance and average absolute boundary distance. Boundaries use
// inner 4-connectivity; the image edge alone does not make a pixel boundary.
// Metrics are absent (never 0 or infinity) when a class or its boundary is
// missing on either side. The production distance path uses an exact
// Euclidean distance transform; O(|P|*|G|) pairwise oracles ship next to it.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace a2dmn {

constexpr int kNumClasses = 5;

struct LabelMap {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> labels;  // row-major, values < kNumClasses

    std::uint8_t at(int x, int y) const { return labels[static_cast<size_t>(y) * width + x]; }
    bool valid() const;
};

std::vector<std::pair<int, int>> boundary_pixels(const LabelMap& m, int c);

std::optional<double> iou(const LabelMap& pred, const LabelMap& gt, int c);
std::optional<double> hausdorff(const LabelMap& pred, const LabelMap& gt, int c);
std::optional<double> aad(const LabelMap& pred, const LabelMap& gt, int c);

// Brute-force pairwise twins used for verification.
std::optional<double> hausdorff_oracle(const LabelMap& pred, const LabelMap& gt, int c);
std::optional<double> aad_oracle(const LabelMap& pred, const LabelMap& gt, int c);

struct MetricValue {
    bool defined = false;
    double value = 0;
    std::string reason;  // why absent, empty when defined
};

struct ClassMetrics {
    MetricValue iou, hd, aad;
};

struct MetricsReport {
    std::vector<ClassMetrics> per_class;  // kNumClasses entries

    int defined_count(const char* metric) const;
    std::string to_csv() const;
    static MetricsReport from_csv(const std::string& csv);
    bool operator==(const MetricsReport&) const = default;
};

inline bool operator==(const MetricValue& a, const MetricValue& b) {
    return a.defined == b.defined && a.value == b.value && a.reason == b.reason;
}
inline bool operator==(const ClassMetrics& a, const ClassMetrics& b) {
    return a.iou == b.iou && a.hd == b.hd && a.aad == b.aad;
}

MetricsReport evaluate(const LabelMap& pred, const LabelMap& gt);

}  // namespace a2dmn
