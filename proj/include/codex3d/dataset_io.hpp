#pragma once

#include "codex3d/data_synth.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace codex3d {

inline constexpr const char* kDatasetSchema = "codex3d.dataset";
inline constexpr int kDatasetVersion = 1;

struct Sample {
    VolumeGrid volume;
    std::vector<ViewImage> views;
    std::uint64_t seed = 0;
};

struct Dataset {
    std::vector<Sample> samples;
    std::vector<double> azimuths_deg;
    std::string config_hash;
};

/// Options for building a dataset of (volume, views) pairs.
struct GenerationOptions {
    PhantomSpec spec;
    std::vector<double> azimuths_deg{0.0, 90.0};
    ProjectionMode mode = ProjectionMode::attenuation;
    double attenuation = kDefaultAttenuation;
    bool misalign = false;
    double max_rotation_deg = 15.0;
    double max_shift_vox = 2.0;
};

/// Sample i uses seed mix_seed(seed, i). With misalignment enabled the views
/// are projected from a rigidly perturbed copy while the stored volume stays
/// in its canonical pose, so pairs are not pixel-aligned.
Dataset generate_dataset(const GenerationOptions& options, std::int64_t count, std::uint64_t seed);

/// Directory layout: manifest.json plus one sample_NNNNNN.bin per record
/// holding the volume then each view as little-endian f32, C row-major.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

} // namespace codex3d
