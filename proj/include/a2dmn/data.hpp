#pragma once

// Synthetic layered-anatomy phantoms standing in for clinical scans: ordered
// wavy tissue bands (background / fat / mammary / muscle / background) with an
// optional tumor ellipse inside the mammary band, per-class base intensity and
// multiplicative speckle. Plus the preprocessing chain (pad to square, resize,
// augment, normalize), deterministic k-fold splitting and PGM/manifest I/O.

#include "a2dmn/tensor.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace a2dmn {

// Labels follow the anatomical class order of LossConfig:
// 0 background, 1 fat, 2 mammary, 3 tumor, 4 muscle.
enum : std::uint8_t {
    kBackground = 0,
    kFat = 1,
    kMammary = 2,
    kTumor = 3,
    kMuscle = 4,
};

struct Sample {
    std::string id;
    std::uint64_t seed = 0;
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> image;  // grayscale, row-major
    std::vector<std::uint8_t> mask;   // class indices < 5

    bool operator==(const Sample&) const = default;
};

struct PhantomParams {
    int width = 96;
    int height = 96;
    // interface base positions as fractions of height, top to bottom:
    // background|fat, fat|mammary, mammary|muscle, muscle|background
    std::array<double, 4> band_fractions{0.16, 0.36, 0.70, 0.88};
    double waviness = 0.025;  // per-sine amplitude, fraction of height
    int wave_components = 3;
    double tumor_probability = 0.9;
    double tumor_rx_min = 0.14, tumor_rx_max = 0.22;  // semi-axes, fraction of width/height
    double tumor_ry_min = 0.09, tumor_ry_max = 0.14;
    // base intensity per label {bg, fat, mammary, tumor, muscle}
    std::array<double, 5> class_intensity{28, 95, 150, 52, 72};
    double intensity_jitter = 0.08;   // per-phantom relative jitter of class means
    double speckle_strength = 0.30;   // multiplicative noise amplitude
    int speckle_radius = 1;           // box-blur radius applied to the noise field

    void validate() const;
};

struct AugmentConfig {
    double rotation_deg_min = -20, rotation_deg_max = 20;
    double hflip_probability = 0.5;
    int translate_px_min = -5, translate_px_max = 5;
};

Sample generate_phantom(const PhantomParams& params, std::uint64_t seed);

Sample pad_to_square(const Sample& s);
Sample resize(const Sample& s, int size);
Sample augment(const Sample& s, const AugmentConfig& cfg, std::mt19937& rng);

// u8 image -> [1,H,W] scaled to [0,1]; mask -> one-hot [K,H,W].
template <typename T>
std::pair<TensorPtr<T>, TensorPtr<T>> normalize(const Sample& s, int num_classes = 5) {
    auto image = make_tensor<T>({1, s.height, s.width});
    for (size_t i = 0; i < s.image.size(); ++i) image->values[i] = static_cast<T>(s.image[i]) / T(255);
    auto onehot = make_tensor<T>({num_classes, s.height, s.width});
    const std::int64_t plane = static_cast<std::int64_t>(s.height) * s.width;
    for (std::int64_t i = 0; i < plane; ++i) {
        if (s.mask[i] >= num_classes)
            throw std::invalid_argument("mask label " + std::to_string(s.mask[i]) + " out of range");
        onehot->values[s.mask[i] * plane + i] = T(1);
    }
    return {image, onehot};
}

struct Fold {
    std::vector<std::string> train, val, test;
};

std::vector<Fold> kfold_split(std::vector<std::string> ids, int k, double val_frac, std::uint64_t seed);

// PGM (P5, maxval 255) sample and manifest I/O. Layout under a dataset
// directory: images/<id>.pgm, masks/<id>.pgm, manifest.csv with lines
// "id,image_path,mask_path,seed" (paths relative to the directory).
void write_pgm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels);
std::vector<std::uint8_t> read_pgm(const std::string& path, int& width, int& height);

void write_sample(const std::string& dataset_dir, const Sample& s);
Sample read_sample(const std::string& dataset_dir, const std::string& id, const std::string& image_path,
                   const std::string& mask_path, std::uint64_t seed);

void write_manifest(const std::string& dataset_dir, const std::vector<Sample>& samples);
std::vector<Sample> read_manifest(const std::string& dataset_dir);

// Tumor-vs-rest collapse used for binary pretraining.
Sample collapse_binary(const Sample& s);

}  // namespace a2dmn
