#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace codex3d {

enum class Primitive { ellipsoid, box, tube, shell };

std::string to_string(Primitive p);
Primitive parse_primitive(const std::string& name);

/// Parameters of the procedural phantom generator.
struct PhantomSpec {
    int grid_size = 32;
    int min_primitives = 2;
    int max_primitives = 6;
    std::vector<double> density_levels{0.2, 0.4, 0.6, 0.8, 1.0};
    std::vector<Primitive> allowed_primitives{Primitive::ellipsoid, Primitive::box, Primitive::tube, Primitive::shell};
    int nesting_depth = 2;
    bool anti_alias = false;

    /// Throws ConfigError naming the first violated field.
    void validate() const;
};

/// Cubic or rectangular scalar grid, C row-major over (axis0, axis1, axis2).
struct VolumeGrid {
    std::array<std::int64_t, 3> shape{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<float> values;

    VolumeGrid() = default;
    explicit VolumeGrid(std::array<std::int64_t, 3> dims, float fill = 0.0f);

    std::int64_t voxel_count() const noexcept { return shape[0] * shape[1] * shape[2]; }
    std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept
    {
        return (i * shape[1] + j) * shape[2] + k;
    }
    float& at(std::int64_t i, std::int64_t j, std::int64_t k) { return values[index(i, j, k)]; }
    float at(std::int64_t i, std::int64_t j, std::int64_t k) const { return values[index(i, j, k)]; }
};

/// Single 2D projection; rows follow volume axis 0.
struct ViewImage {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<float> values;
    double azimuth_deg = 0.0;
    double elevation_deg = 0.0;

    ViewImage() = default;
    ViewImage(std::int64_t h, std::int64_t w, float fill = 0.0f) : height(h), width(w), values(h * w, fill) {}

    float& at(std::int64_t r, std::int64_t c) { return values[r * width + c]; }
    float at(std::int64_t r, std::int64_t c) const { return values[r * width + c]; }
};

struct MisalignmentParams {
    std::array<double, 3> rotation_deg{0.0, 0.0, 0.0};   // about axes 0, 1, 2
    std::array<double, 3> translation_vox{0.0, 0.0, 0.0};
    std::uint64_t seed = 0;

    static constexpr double kMaxRotationDeg = 30.0;
    void validate(std::int64_t grid_size) const;
};

enum class ProjectionMode { attenuation, max };

std::string to_string(ProjectionMode m);
ProjectionMode parse_projection_mode(const std::string& name);

/// Linear attenuation per voxel of unit density used by attenuation-mode views.
inline constexpr double kDefaultAttenuation = 0.08;

VolumeGrid generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

/// Parallel-ray projections rotating about axis 0. Azimuth 0 integrates along
/// axis 2; azimuth 90 integrates along axis 1.
std::vector<ViewImage> project_views(const VolumeGrid& volume, std::span<const double> azimuths_deg,
                                     ProjectionMode mode, double attenuation = kDefaultAttenuation);

/// Rigid rotation about the volume center followed by translation, trilinear
/// resampling, zero fill outside, clamped to [0,1].
VolumeGrid apply_misalignment(const VolumeGrid& volume, const MisalignmentParams& params);

/// Draws rotations uniformly in [-max_rotation_deg, max_rotation_deg] and
/// shifts in [-max_shift_vox, max_shift_vox] per axis.
MisalignmentParams random_misalignment(double max_rotation_deg, double max_shift_vox, std::uint64_t seed);

/// Window [lo, hi] then rescale affinely to [0,1].
VolumeGrid normalize_intensity(std::span<const float> raw, std::array<std::int64_t, 3> shape, double lo, double hi);

} // namespace codex3d
