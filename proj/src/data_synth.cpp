#include "codex3d/data_synth.hpp"

#include "codex3d/errors.hpp"
#include "codex3d/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace codex3d {

namespace {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

/// sin/cos in degrees, exact at multiples of 90 so axis-aligned transforms
/// introduce no interpolation bleed.
std::pair<double, double> sincos_deg(double deg)
{
    const double q = deg / 90.0;
    if (q == std::round(q)) {
        const auto quadrant = ((static_cast<long long>(std::llround(q)) % 4) + 4) % 4;
        constexpr double s[4] = {0.0, 1.0, 0.0, -1.0};
        constexpr double c[4] = {1.0, 0.0, -1.0, 0.0};
        return {s[quadrant], c[quadrant]};
    }
    const double rad = deg * std::numbers::pi / 180.0;
    return {std::sin(rad), std::cos(rad)};
}

Mat3 multiply(const Mat3& a, const Mat3& b)
{
    Mat3 out{};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            for (int k = 0; k < 3; ++k) out[r][c] += a[r][k] * b[k][c];
    return out;
}

/// Rotation about axis 2, then 1, then 0 (angles in degrees).
Mat3 rotation_matrix(const std::array<double, 3>& deg)
{
    auto about = [](int axis, double angle) {
        const auto [s, c] = sincos_deg(angle);
        const int a = (axis + 1) % 3;
        const int b = (axis + 2) % 3;
        Mat3 m{};
        m[axis][axis] = 1.0;
        m[a][a] = c;
        m[a][b] = -s;
        m[b][a] = s;
        m[b][b] = c;
        return m;
    };
    return multiply(about(0, deg[0]), multiply(about(1, deg[1]), about(2, deg[2])));
}

struct Shape {
    Primitive type = Primitive::ellipsoid;
    Vec3 center{};
    Vec3 radii{};
    Mat3 rotation{};
    double density = 0.0;
    double thickness = 0.0;
    int depth = 0;
};

Vec3 to_local(const Shape& s, const Vec3& p)
{
    const Vec3 d{p[0] - s.center[0], p[1] - s.center[1], p[2] - s.center[2]};
    Vec3 q{};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) q[r] += s.rotation[c][r] * d[c]; // R^T d
    return q;
}

double ellipsoid_distance(const Vec3& q, const Vec3& r)
{
    const double k = std::sqrt(std::pow(q[0] / r[0], 2) + std::pow(q[1] / r[1], 2) + std::pow(q[2] / r[2], 2));
    return (k - 1.0) * std::min({r[0], r[1], r[2]});
}

/// Approximate signed distance in voxel units; negative inside.
double signed_distance(const Shape& s, const Vec3& p)
{
    const Vec3 q = to_local(s, p);
    switch (s.type) {
    case Primitive::ellipsoid:
        return ellipsoid_distance(q, s.radii);
    case Primitive::shell:
        return std::abs(ellipsoid_distance(q, s.radii)) - 0.5 * s.thickness;
    case Primitive::box: {
        double outside = 0.0;
        double inside = -1e300;
        for (int a = 0; a < 3; ++a) {
            const double d = std::abs(q[a]) - s.radii[a];
            outside += std::pow(std::max(d, 0.0), 2);
            inside = std::max(inside, d);
        }
        return std::sqrt(outside) + std::min(inside, 0.0);
    }
    case Primitive::tube: {
        const double radial = std::hypot(q[1], q[2]) - s.radii[1];
        const double axial = std::abs(q[0]) - s.radii[0];
        return std::max(radial, axial);
    }
    }
    return 1e300;
}

double pick_density(const PhantomSpec& spec, Rng& rng, double avoid)
{
    const auto n = static_cast<std::int64_t>(spec.density_levels.size());
    double d = spec.density_levels[static_cast<std::size_t>(rng.below(n))];
    for (int attempt = 0; attempt < 4 && d == avoid && n > 1; ++attempt) {
        d = spec.density_levels[static_cast<std::size_t>(rng.below(n))];
    }
    return d;
}

std::vector<Shape> layout_scene(const PhantomSpec& spec, Rng& rng)
{
    const double n = spec.grid_size;
    const auto count = rng.between(spec.min_primitives, spec.max_primitives);
    std::vector<Shape> shapes;
    shapes.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        Shape s;
        s.type = spec.allowed_primitives[static_cast<std::size_t>(
            rng.below(static_cast<std::int64_t>(spec.allowed_primitives.size())))];
        s.rotation = rotation_matrix({rng.uniform(0.0, 360.0), rng.uniform(0.0, 360.0), rng.uniform(0.0, 360.0)});

        std::vector<std::size_t> parents;
        for (std::size_t p = 0; p < shapes.size(); ++p) {
            if (shapes[p].depth < spec.nesting_depth && shapes[p].type != Primitive::shell) parents.push_back(p);
        }
        const bool nested = !parents.empty() && rng.uniform() < 0.6;
        if (nested) {
            const Shape& parent = shapes[parents[static_cast<std::size_t>(
                rng.below(static_cast<std::int64_t>(parents.size())))]];
            const double rmin = std::min({parent.radii[0], parent.radii[1], parent.radii[2]});
            Vec3 offset{};
            for (int a = 0; a < 3; ++a) offset[a] = rng.uniform(-0.3, 0.3) * parent.radii[a];
            for (int r = 0; r < 3; ++r) {
                s.center[r] = parent.center[r];
                for (int c = 0; c < 3; ++c) s.center[r] += parent.rotation[r][c] * offset[c];
            }
            for (auto& r : s.radii) r = std::max(1.0, rmin * rng.uniform(0.25, 0.55));
            s.depth = parent.depth + 1;
            s.density = pick_density(spec, rng, parent.density);
        } else {
            for (auto& c : s.center) c = rng.uniform(0.35, 0.65) * (n - 1.0);
            for (auto& r : s.radii) r = std::max(1.0, rng.uniform(0.12, 0.3) * n);
            s.depth = 0;
            s.density = pick_density(spec, rng, -1.0);
        }
        if (s.type == Primitive::tube) s.radii[2] = s.radii[1];
        s.thickness = std::max(1.5, 0.2 * std::min({s.radii[0], s.radii[1], s.radii[2]}));
        shapes.push_back(s);
    }
    return shapes;
}

float sample_trilinear(const VolumeGrid& v, double x, double y, double z)
{
    const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
    const auto i0 = static_cast<std::int64_t>(fx);
    const auto j0 = static_cast<std::int64_t>(fy);
    const auto k0 = static_cast<std::int64_t>(fz);
    const double tx = x - fx, ty = y - fy, tz = z - fz;
    double acc = 0.0;
    for (int di = 0; di < 2; ++di) {
        const double wx = di ? tx : 1.0 - tx;
        const auto i = i0 + di;
        if (wx == 0.0 || i < 0 || i >= v.shape[0]) continue;
        for (int dj = 0; dj < 2; ++dj) {
            const double wy = dj ? ty : 1.0 - ty;
            const auto j = j0 + dj;
            if (wy == 0.0 || j < 0 || j >= v.shape[1]) continue;
            for (int dk = 0; dk < 2; ++dk) {
                const double wz = dk ? tz : 1.0 - tz;
                const auto k = k0 + dk;
                if (wz == 0.0 || k < 0 || k >= v.shape[2]) continue;
                acc += wx * wy * wz * v.at(i, j, k);
            }
        }
    }
    return static_cast<float>(acc);
}

} // namespace

std::string to_string(Primitive p)
{
    switch (p) {
    case Primitive::ellipsoid: return "ellipsoid";
    case Primitive::box: return "box";
    case Primitive::tube: return "tube";
    case Primitive::shell: return "shell";
    }
    return "?";
}

Primitive parse_primitive(const std::string& name)
{
    if (name == "ellipsoid") return Primitive::ellipsoid;
    if (name == "box") return Primitive::box;
    if (name == "tube") return Primitive::tube;
    if (name == "shell") return Primitive::shell;
    throw ConfigError("allowed_primitives: unknown primitive '" + name + "'");
}

std::string to_string(ProjectionMode m) { return m == ProjectionMode::max ? "max" : "attenuation"; }

ProjectionMode parse_projection_mode(const std::string& name)
{
    if (name == "attenuation") return ProjectionMode::attenuation;
    if (name == "max") return ProjectionMode::max;
    throw ConfigError("projection mode: unknown value '" + name + "'");
}

void PhantomSpec::validate() const
{
    if (grid_size < 8 || (grid_size & (grid_size - 1)) != 0) {
        throw ConfigError("grid_size: must be a power of two >= 8, got " + std::to_string(grid_size));
    }
    if (min_primitives < 0 || max_primitives < min_primitives) {
        throw ConfigError("primitive_count_range: need 0 <= min <= max");
    }
    if (density_levels.empty()) {
        throw ConfigError("density_levels: must not be empty");
    }
    for (std::size_t i = 0; i < density_levels.size(); ++i) {
        const double d = density_levels[i];
        if (!(d >= 0.0 && d <= 1.0)) {
            throw ConfigError("density_levels: values must lie in [0,1]");
        }
        if (i > 0 && d < density_levels[i - 1]) {
            throw ConfigError("density_levels: must be sorted ascending");
        }
    }
    if (allowed_primitives.empty() && max_primitives > 0) {
        throw ConfigError("allowed_primitives: must not be empty");
    }
    if (nesting_depth < 0) {
        throw ConfigError("nesting_depth: must be non-negative");
    }
}

VolumeGrid::VolumeGrid(std::array<std::int64_t, 3> dims, float fill)
    : shape(dims), values(static_cast<std::size_t>(dims[0] * dims[1] * dims[2]), fill)
{
}

void MisalignmentParams::validate(std::int64_t grid_size) const
{
    for (int a = 0; a < 3; ++a) {
        if (!std::isfinite(rotation_deg[a]) || std::abs(rotation_deg[a]) > kMaxRotationDeg) {
            // 180-degree flips are allowed as exact axis permutations.
            const double q = rotation_deg[a] / 90.0;
            if (!(std::isfinite(q) && q == std::round(q))) {
                throw ConfigError("rotation_deg: magnitude must be <= 30 degrees (or a multiple of 90)");
            }
        }
        if (!std::isfinite(translation_vox[a]) || std::abs(translation_vox[a]) > grid_size / 8.0) {
            throw ConfigError("translation_vox: magnitude must be <= grid_size/8");
        }
    }
}

VolumeGrid generate_phantom(const PhantomSpec& spec, std::uint64_t seed)
{
    spec.validate();
    Rng rng(mix_seed(seed, 0x50484e54)); // "PHNT"
    const auto shapes = layout_scene(spec, rng);
    const std::int64_t n = spec.grid_size;
    VolumeGrid vol({n, n, n});
    if (shapes.empty()) return vol;

    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            for (std::int64_t k = 0; k < n; ++k) {
                const Vec3 p{static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
                double value = 0.0;
                for (const Shape& s : shapes) {
                    const double sd = signed_distance(s, p);
                    if (spec.anti_alias) {
                        const double cover = std::clamp(0.5 - sd, 0.0, 1.0);
                        value = value * (1.0 - cover) + s.density * cover;
                    } else if (sd <= 0.0) {
                        value = s.density;
                    }
                }
                vol.at(i, j, k) = static_cast<float>(value);
            }
        }
    }
    return vol;
}

std::vector<ViewImage> project_views(const VolumeGrid& volume, std::span<const double> azimuths_deg,
                                     ProjectionMode mode, double attenuation)
{
    if (azimuths_deg.empty()) {
        throw ConfigError("azimuths: at least one azimuth is required");
    }
    if (volume.values.empty()) {
        throw ShapeError("project_views: empty volume");
    }
    const std::int64_t rows = volume.shape[0];
    const std::int64_t cols = volume.shape[1];
    const std::int64_t n1 = volume.shape[1];
    const std::int64_t n2 = volume.shape[2];
    const double c1 = (n1 - 1) / 2.0;
    const double c2 = (n2 - 1) / 2.0;
    const double cu = (cols - 1) / 2.0;
    // Ray length covers the in-plane diagonal; parity matches the grid so that
    // axis-aligned rays hit voxel centres exactly.
    const auto extent = std::max(n1, n2);
    auto samples = static_cast<std::int64_t>(std::ceil(std::hypot(n1, n2)));
    if ((samples - extent) % 2 != 0) ++samples;
    const double s0 = -(samples - 1) / 2.0;

    std::vector<ViewImage> views;
    views.reserve(azimuths_deg.size());
    for (double az : azimuths_deg) {
        if (!std::isfinite(az)) {
            throw ConfigError("azimuths: values must be finite");
        }
        const auto [s, c] = sincos_deg(az);
        ViewImage view(rows, cols);
        view.azimuth_deg = az;
        for (std::int64_t u = 0; u < cols; ++u) {
            const double du = u - cu;
            for (std::int64_t m = 0; m < samples; ++m) {
                const double t = s0 + static_cast<double>(m);
                // Detector axis a = (cos, sin), ray direction d = (-sin, cos) in the (axis1, axis2) plane.
                const double y = c1 + du * c - t * s;
                const double z = c2 + du * s + t * c;
                if (y <= -1.0 || z <= -1.0 || y >= n1 || z >= n2) continue;
                const double fy = std::floor(y), fz = std::floor(z);
                const auto j0 = static_cast<std::int64_t>(fy);
                const auto k0 = static_cast<std::int64_t>(fz);
                const double ty = y - fy, tz = z - fz;
                for (std::int64_t i = 0; i < rows; ++i) {
                    double v = 0.0;
                    for (int dj = 0; dj < 2; ++dj) {
                        const double wy = dj ? ty : 1.0 - ty;
                        const auto j = j0 + dj;
                        if (wy == 0.0 || j < 0 || j >= n1) continue;
                        for (int dk = 0; dk < 2; ++dk) {
                            const double wz = dk ? tz : 1.0 - tz;
                            const auto k = k0 + dk;
                            if (wz == 0.0 || k < 0 || k >= n2) continue;
                            v += wy * wz * volume.at(i, j, k);
                        }
                    }
                    float& px = view.at(i, u);
                    if (mode == ProjectionMode::max) {
                        px = std::max(px, static_cast<float>(v));
                    } else {
                        px += static_cast<float>(v);
                    }
                }
            }
        }
        if (mode == ProjectionMode::attenuation) {
            for (float& px : view.values) {
                px = static_cast<float>(1.0 - std::exp(-attenuation * px));
            }
        }
        views.push_back(std::move(view));
    }
    return views;
}

VolumeGrid apply_misalignment(const VolumeGrid& volume, const MisalignmentParams& params)
{
    params.validate(std::max({volume.shape[0], volume.shape[1], volume.shape[2]}));
    const Mat3 rot = rotation_matrix(params.rotation_deg);
    const Vec3 centre{(volume.shape[0] - 1) / 2.0, (volume.shape[1] - 1) / 2.0, (volume.shape[2] - 1) / 2.0};
    VolumeGrid out(volume.shape);
    out.spacing = volume.spacing;
    for (std::int64_t i = 0; i < volume.shape[0]; ++i) {
        for (std::int64_t j = 0; j < volume.shape[1]; ++j) {
            for (std::int64_t k = 0; k < volume.shape[2]; ++k) {
                const Vec3 q{i - centre[0] - params.translation_vox[0], j - centre[1] - params.translation_vox[1],
                             k - centre[2] - params.translation_vox[2]};
                Vec3 src = centre;
                for (int r = 0; r < 3; ++r)
                    for (int c = 0; c < 3; ++c) src[r] += rot[c][r] * q[c]; // R^T q
                out.at(i, j, k) = std::clamp(sample_trilinear(volume, src[0], src[1], src[2]), 0.0f, 1.0f);
            }
        }
    }
    return out;
}

MisalignmentParams random_misalignment(double max_rotation_deg, double max_shift_vox, std::uint64_t seed)
{
    Rng rng(mix_seed(seed, 0x4d49534c)); // "MISL"
    MisalignmentParams p;
    p.seed = seed;
    for (auto& r : p.rotation_deg) r = rng.uniform(-max_rotation_deg, max_rotation_deg);
    for (auto& t : p.translation_vox) t = rng.uniform(-max_shift_vox, max_shift_vox);
    return p;
}

VolumeGrid normalize_intensity(std::span<const float> raw, std::array<std::int64_t, 3> shape, double lo, double hi)
{
    if (!(lo < hi)) {
        throw ConfigError("normalize_intensity: lo must be < hi");
    }
    VolumeGrid out(shape);
    if (static_cast<std::int64_t>(raw.size()) != out.voxel_count()) {
        throw ShapeError("normalize_intensity: value count does not match shape");
    }
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const double v = std::clamp(static_cast<double>(raw[i]), lo, hi);
        out.values[i] = static_cast<float>((v - lo) / (hi - lo));
    }
    return out;
}

} // namespace codex3d
