#include "a2dmn/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace a2dmn {

namespace {

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0) + 0.5);
}

// Separable box blur, replicated borders.
void box_blur(std::vector<double>& grid, int width, int height, int radius) {
    if (radius <= 0) return;
    std::vector<double> tmp(grid.size());
    const auto clampw = [&](int x) { return std::clamp(x, 0, width - 1); };
    const auto clamph = [&](int y) { return std::clamp(y, 0, height - 1); };
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double acc = 0;
            for (int d = -radius; d <= radius; ++d) acc += grid[static_cast<size_t>(y) * width + clampw(x + d)];
            tmp[static_cast<size_t>(y) * width + x] = acc / (2 * radius + 1);
        }
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double acc = 0;
            for (int d = -radius; d <= radius; ++d) acc += tmp[static_cast<size_t>(clamph(y + d)) * width + x];
            grid[static_cast<size_t>(y) * width + x] = acc / (2 * radius + 1);
        }
}

double bilinear(const std::vector<std::uint8_t>& img, int width, int height, double x, double y) {
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    const auto px = [&](int xx, int yy) -> double {
        // clamp-to-edge so interpolation never invents dark border pixels
        xx = std::clamp(xx, 0, width - 1);
        yy = std::clamp(yy, 0, height - 1);
        return img[static_cast<size_t>(yy) * width + xx];
    };
    return (1 - fx) * (1 - fy) * px(x0, y0) + fx * (1 - fy) * px(x0 + 1, y0) +
           (1 - fx) * fy * px(x0, y0 + 1) + fx * fy * px(x0 + 1, y0 + 1);
}

}  // namespace

void PhantomParams::validate() const {
    if (width < 16 || height < 16) throw std::invalid_argument("PhantomParams: canvas too small");
    const double margin = waviness * wave_components;
    double prev = 0;
    for (double f : band_fractions) {
        if (f - margin <= prev || f + margin >= 1.0)
            throw std::invalid_argument("PhantomParams: degenerate band ordering");
        prev = f;
    }
    for (size_t i = 1; i < band_fractions.size(); ++i)
        if (band_fractions[i] - band_fractions[i - 1] <= 2 * margin)
            throw std::invalid_argument("PhantomParams: degenerate band ordering");
    if (tumor_probability < 0 || tumor_probability > 1)
        throw std::invalid_argument("PhantomParams: tumor_probability out of [0,1]");
}

Sample generate_phantom(const PhantomParams& params, std::uint64_t seed) {
    params.validate();
    std::mt19937 rng(static_cast<std::uint32_t>(seed ^ (seed >> 32)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const int W = params.width, H = params.height;
    Sample s;
    s.id = "phantom_" + std::to_string(seed);
    s.seed = seed;
    s.width = W;
    s.height = H;
    s.mask.assign(static_cast<size_t>(W) * H, kBackground);
    s.image.assign(static_cast<size_t>(W) * H, 0);

    // wavy band interfaces, one sine stack per interface
    std::vector<std::vector<double>> interfaces(4, std::vector<double>(W));
    for (int b = 0; b < 4; ++b) {
        struct Wave {
            double amp, freq, phase;
        };
        std::vector<Wave> waves;
        for (int m = 0; m < params.wave_components; ++m)
            waves.push_back({params.waviness * H * unit(rng), 1.0 + 2.0 * unit(rng),
                             2 * std::numbers::pi * unit(rng)});
        for (int x = 0; x < W; ++x) {
            double y = params.band_fractions[b] * H;
            for (const auto& w : waves)
                y += w.amp * std::sin(2 * std::numbers::pi * w.freq * x / W + w.phase);
            interfaces[b][x] = y;
        }
    }

    static constexpr std::uint8_t band_label[5] = {kBackground, kFat, kMammary, kMuscle, kBackground};
    for (int x = 0; x < W; ++x)
        for (int y = 0; y < H; ++y) {
            int band = 0;
            while (band < 4 && y >= interfaces[band][x]) ++band;
            s.mask[static_cast<size_t>(y) * W + x] = band_label[band];
        }

    // optional tumor ellipse, clipped to the mammary band
    if (unit(rng) < params.tumor_probability) {
        const double cx = (0.25 + 0.5 * unit(rng)) * W;
        const int cxi = std::clamp(static_cast<int>(cx), 0, W - 1);
        const double cy = 0.5 * (interfaces[1][cxi] + interfaces[2][cxi]);
        const double rx = (params.tumor_rx_min + (params.tumor_rx_max - params.tumor_rx_min) * unit(rng)) * W;
        const double ry = (params.tumor_ry_min + (params.tumor_ry_max - params.tumor_ry_min) * unit(rng)) * H;
        const double theta = std::numbers::pi * unit(rng);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (s.mask[static_cast<size_t>(y) * W + x] != kMammary) continue;
                const double u = (x - cx) * ct + (y - cy) * st;
                const double v = -(x - cx) * st + (y - cy) * ct;
                if ((u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0)
                    s.mask[static_cast<size_t>(y) * W + x] = kTumor;
            }
    }

    // intensity: jittered class means + smoothed multiplicative speckle
    std::array<double, 5> mean = params.class_intensity;
    for (auto& m : mean) m *= 1.0 + params.intensity_jitter * (2 * unit(rng) - 1);
    std::vector<double> noise(s.image.size());
    for (auto& n : noise) n = 2 * unit(rng) - 1;
    box_blur(noise, W, H, params.speckle_radius);
    for (size_t i = 0; i < s.image.size(); ++i)
        s.image[i] = quantize(mean[s.mask[i]] * (1.0 + params.speckle_strength * noise[i]));
    return s;
}

Sample pad_to_square(const Sample& s) {
    if (s.width == s.height) return s;
    const int size = std::max(s.width, s.height);
    Sample out;
    out.id = s.id;
    out.seed = s.seed;
    out.width = out.height = size;
    out.image.assign(static_cast<size_t>(size) * size, 0);
    out.mask.assign(static_cast<size_t>(size) * size, kBackground);
    const int px = (size - s.width) / 2;   // extra pixel lands on the trailing side
    const int py = (size - s.height) / 2;
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            out.image[static_cast<size_t>(y + py) * size + (x + px)] = s.image[static_cast<size_t>(y) * s.width + x];
            out.mask[static_cast<size_t>(y + py) * size + (x + px)] = s.mask[static_cast<size_t>(y) * s.width + x];
        }
    return out;
}

Sample resize(const Sample& s, int size) {
    if (s.width != s.height)
        throw std::invalid_argument("resize expects a square sample; pad_to_square first");
    if (size == s.width) return s;
    Sample out;
    out.id = s.id;
    out.seed = s.seed;
    out.width = out.height = size;
    out.image.resize(static_cast<size_t>(size) * size);
    out.mask.resize(static_cast<size_t>(size) * size);
    const double scale = static_cast<double>(s.width) / size;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            // pixel-center sampling
            const double sx = (x + 0.5) * scale - 0.5;
            const double sy = (y + 0.5) * scale - 0.5;
            out.image[static_cast<size_t>(y) * size + x] = quantize(bilinear(s.image, s.width, s.height, sx, sy));
            const int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, s.width - 1);
            const int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, s.height - 1);
            out.mask[static_cast<size_t>(y) * size + x] = s.mask[static_cast<size_t>(ny) * s.width + nx];
        }
    return out;
}

Sample augment(const Sample& s, const AugmentConfig& cfg, std::mt19937& rng) {
    if (s.width != s.height) throw std::invalid_argument("augment expects a square sample");
    std::uniform_real_distribution<double> rot(cfg.rotation_deg_min, cfg.rotation_deg_max);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> trans(cfg.translate_px_min, cfg.translate_px_max);
    const double angle = rot(rng) * std::numbers::pi / 180.0;
    const bool flip = unit(rng) < cfg.hflip_probability;
    const int tx = trans(rng), ty = trans(rng);

    const int size = s.width;
    Sample out;
    out.id = s.id;
    out.seed = s.seed;
    out.width = out.height = size;
    out.image.resize(s.image.size());
    out.mask.resize(s.mask.size());
    const double cxy = (size - 1) / 2.0;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            // inverse map: translate, flip, then rotate back about the center
            double ux = x - tx, uy = y - ty;
            if (flip) ux = (size - 1) - ux;
            const double rx = ca * (ux - cxy) + sa * (uy - cxy) + cxy;
            const double ry = -sa * (ux - cxy) + ca * (uy - cxy) + cxy;
            const size_t o = static_cast<size_t>(y) * size + x;
            if (rx < 0 || rx > size - 1 || ry < 0 || ry > size - 1) {
                out.image[o] = 0;
                out.mask[o] = kBackground;
            } else {
                out.image[o] = quantize(bilinear(s.image, size, size, rx, ry));
                const int nx = std::clamp(static_cast<int>(std::lround(rx)), 0, size - 1);
                const int ny = std::clamp(static_cast<int>(std::lround(ry)), 0, size - 1);
                out.mask[o] = s.mask[static_cast<size_t>(ny) * size + nx];
            }
        }
    return out;
}

std::vector<Fold> kfold_split(std::vector<std::string> ids, int k, double val_frac, std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("kfold_split needs k >= 2");
    if (static_cast<int>(ids.size()) < k)
        throw std::invalid_argument("kfold_split: fewer ids (" + std::to_string(ids.size()) +
                                    ") than folds (" + std::to_string(k) + ")");
    std::mt19937 rng(static_cast<std::uint32_t>(seed ^ (seed >> 32)));
    std::shuffle(ids.begin(), ids.end(), rng);

    const int n = static_cast<int>(ids.size());
    std::vector<Fold> folds(k);
    int start = 0;
    for (int f = 0; f < k; ++f) {
        const int count = n / k + (f < n % k ? 1 : 0);
        folds[f].test.assign(ids.begin() + start, ids.begin() + start + count);
        start += count;
    }
    for (int f = 0; f < k; ++f) {
        std::vector<std::string> rest;
        for (int g = 0; g < k; ++g)
            if (g != f) rest.insert(rest.end(), folds[g].test.begin(), folds[g].test.end());
        std::shuffle(rest.begin(), rest.end(), rng);
        const int nval = static_cast<int>(std::lround(val_frac * rest.size()));
        folds[f].val.assign(rest.begin(), rest.begin() + nval);
        folds[f].train.assign(rest.begin() + nval, rest.end());
    }
    return folds;
}

void write_pgm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != static_cast<size_t>(width) * height)
        throw std::invalid_argument("write_pgm: pixel count does not match dimensions");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << "P5\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int& width, int& height) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P5") throw std::invalid_argument("malformed PGM header in " + path + ": magic " + magic);
    int maxval = 0;
    f >> width >> height >> maxval;
    if (!f || width <= 0 || height <= 0 || maxval != 255)
        throw std::invalid_argument("malformed PGM header in " + path);
    f.get();  // single whitespace after maxval
    std::vector<std::uint8_t> pixels(static_cast<size_t>(width) * height);
    f.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!f) throw std::runtime_error("truncated PGM data in " + path);
    return pixels;
}

void write_sample(const std::string& dataset_dir, const Sample& s) {
    fs::create_directories(fs::path(dataset_dir) / "images");
    fs::create_directories(fs::path(dataset_dir) / "masks");
    write_pgm((fs::path(dataset_dir) / "images" / (s.id + ".pgm")).string(), s.width, s.height, s.image);
    write_pgm((fs::path(dataset_dir) / "masks" / (s.id + ".pgm")).string(), s.width, s.height, s.mask);
}

Sample read_sample(const std::string& dataset_dir, const std::string& id, const std::string& image_path,
                   const std::string& mask_path, std::uint64_t seed) {
    Sample s;
    s.id = id;
    s.seed = seed;
    s.image = read_pgm((fs::path(dataset_dir) / image_path).string(), s.width, s.height);
    int mw = 0, mh = 0;
    s.mask = read_pgm((fs::path(dataset_dir) / mask_path).string(), mw, mh);
    if (mw != s.width || mh != s.height)
        throw std::invalid_argument("sample " + id + ": image and mask dimensions differ");
    for (std::uint8_t v : s.mask)
        if (v >= 5) throw std::invalid_argument("sample " + id + ": mask class index " + std::to_string(v) + " >= 5");
    return s;
}

void write_manifest(const std::string& dataset_dir, const std::vector<Sample>& samples) {
    fs::create_directories(dataset_dir);
    std::ofstream f(fs::path(dataset_dir) / "manifest.csv");
    if (!f) throw std::runtime_error("cannot write manifest in " + dataset_dir);
    for (const auto& s : samples) {
        write_sample(dataset_dir, s);
        f << s.id << ",images/" << s.id << ".pgm,masks/" << s.id << ".pgm," << s.seed << "\n";
    }
}

std::vector<Sample> read_manifest(const std::string& dataset_dir) {
    std::ifstream f(fs::path(dataset_dir) / "manifest.csv");
    if (!f) throw std::runtime_error("no manifest.csv in " + dataset_dir);
    std::vector<Sample> samples;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string id, img, msk, seed;
        std::getline(ls, id, ',');
        std::getline(ls, img, ',');
        std::getline(ls, msk, ',');
        std::getline(ls, seed);
        samples.push_back(read_sample(dataset_dir, id, img, msk, std::stoull(seed)));
    }
    return samples;
}

Sample collapse_binary(const Sample& s) {
    Sample out = s;
    for (auto& v : out.mask) v = (v == kTumor) ? 1 : 0;
    return out;
}

}  // namespace a2dmn
