#include "codex3d/dataset_io.hpp"

#include "codex3d/binary_io.hpp"
#include "codex3d/errors.hpp"
#include "codex3d/rng.hpp"

#include <json.hpp>

#include <cstdio>

namespace codex3d {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string record_name(std::size_t i)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%06zu.bin", i);
    return buf;
}

} // namespace

Dataset generate_dataset(const GenerationOptions& options, std::int64_t count, std::uint64_t seed)
{
    options.spec.validate();
    if (count <= 0) {
        throw ConfigError("count: must be positive");
    }
    Dataset ds;
    ds.azimuths_deg = options.azimuths_deg;
    ds.samples.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        Sample s;
        s.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
        s.volume = generate_phantom(options.spec, s.seed);
        if (options.misalign) {
            const auto params = random_misalignment(options.max_rotation_deg, options.max_shift_vox, s.seed);
            s.views = project_views(apply_misalignment(s.volume, params), options.azimuths_deg, options.mode,
                                    options.attenuation);
        } else {
            s.views = project_views(s.volume, options.azimuths_deg, options.mode, options.attenuation);
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

void save_dataset(const Dataset& dataset, const fs::path& dir)
{
    if (dataset.samples.empty()) {
        throw ConfigError("save_dataset: empty dataset");
    }
    fs::create_directories(dir);
    const auto& first = dataset.samples.front();
    json manifest;
    manifest["schema"] = kDatasetSchema;
    manifest["version"] = kDatasetVersion;
    manifest["count"] = dataset.samples.size();
    manifest["volume_shape"] = first.volume.shape;
    manifest["spacing"] = first.volume.spacing;
    manifest["view_count"] = first.views.size();
    manifest["view_shape"] = first.views.empty() ? std::vector<std::int64_t>{0, 0}
                                                 : std::vector<std::int64_t>{first.views[0].height, first.views[0].width};
    manifest["azimuths_deg"] = dataset.azimuths_deg;
    manifest["config_hash"] = dataset.config_hash;
    json seeds = json::array();
    json records = json::array();

    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const Sample& s = dataset.samples[i];
        if (s.volume.shape != first.volume.shape || s.views.size() != first.views.size()) {
            throw ShapeError("save_dataset: samples must share volume shape and view count");
        }
        io::ByteWriter w;
        w.f32s(s.volume.values);
        for (const auto& v : s.views) {
            if (v.height != first.views[0].height || v.width != first.views[0].width) {
                throw ShapeError("save_dataset: views must share one shape");
            }
            w.f32s(v.values);
        }
        const auto name = record_name(i);
        io::write_file_atomic(dir / name, w.buffer());
        seeds.push_back(s.seed);
        records.push_back(name);
    }
    manifest["seeds"] = seeds;
    manifest["records"] = records;
    // Manifest last: a directory without one is an incomplete write.
    io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir)
{
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) {
        throw IoError("dataset manifest not found: " + manifest_path.string());
    }
    const std::string text = io::read_file(manifest_path);
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw SchemaError("empty dataset: manifest " + manifest_path.string() + " has no content");
    }
    json manifest;
    try {
        manifest = json::parse(text);
    } catch (const json::parse_error& e) {
        throw SchemaError("corrupted dataset manifest " + manifest_path.string() + ": " + e.what());
    }

    Dataset ds;
    std::vector<std::int64_t> volume_shape, view_shape;
    std::vector<std::string> records;
    std::vector<std::uint64_t> seeds;
    std::array<double, 3> spacing{1, 1, 1};
    std::size_t view_count = 0;
    try {
        if (manifest.at("schema").get<std::string>() != kDatasetSchema) {
            throw SchemaError("dataset manifest: unexpected schema id");
        }
        if (manifest.at("version").get<int>() != kDatasetVersion) {
            throw SchemaError("dataset manifest: unsupported schema version "
                              + std::to_string(manifest.at("version").get<int>()));
        }
        if (manifest.at("count").get<std::size_t>() == 0) {
            throw SchemaError("empty dataset: " + dir.string());
        }
        volume_shape = manifest.at("volume_shape").get<std::vector<std::int64_t>>();
        view_shape = manifest.at("view_shape").get<std::vector<std::int64_t>>();
        view_count = manifest.at("view_count").get<std::size_t>();
        spacing = manifest.at("spacing").get<std::array<double, 3>>();
        ds.azimuths_deg = manifest.at("azimuths_deg").get<std::vector<double>>();
        ds.config_hash = manifest.at("config_hash").get<std::string>();
        records = manifest.at("records").get<std::vector<std::string>>();
        seeds = manifest.at("seeds").get<std::vector<std::uint64_t>>();
    } catch (const json::exception& e) {
        throw SchemaError("corrupted dataset manifest " + manifest_path.string() + ": " + e.what());
    }
    if (volume_shape.size() != 3 || view_shape.size() != 2 || records.size() != seeds.size()
        || records.size() != manifest["count"].get<std::size_t>()) {
        throw SchemaError("dataset manifest: inconsistent shapes or counts");
    }
    for (auto e : volume_shape)
        if (e <= 0) throw SchemaError("dataset manifest: bad volume shape");

    const std::size_t voxels = static_cast<std::size_t>(volume_shape[0] * volume_shape[1] * volume_shape[2]);
    const std::size_t pixels = static_cast<std::size_t>(view_shape[0] * view_shape[1]);
    ds.samples.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        const std::string data = io::read_file(dir / records[i]);
        const std::size_t expected = 4 * (voxels + view_count * pixels);
        if (data.size() != expected) {
            throw SchemaError("dataset record " + records[i] + ": expected " + std::to_string(expected)
                              + " bytes, found " + std::to_string(data.size()));
        }
        io::ByteReader r(data);
        Sample s;
        s.seed = seeds[i];
        s.volume = VolumeGrid({volume_shape[0], volume_shape[1], volume_shape[2]});
        s.volume.spacing = spacing;
        r.f32s(s.volume.values);
        for (std::size_t v = 0; v < view_count; ++v) {
            ViewImage view(view_shape[0], view_shape[1]);
            view.azimuth_deg = v < ds.azimuths_deg.size() ? ds.azimuths_deg[v] : 0.0;
            r.f32s(view.values);
            s.views.push_back(std::move(view));
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace codex3d
