#pragma once

// Synthetic phantoms and dataset persistence. Phantoms are sums of
// ellipses rasterized by center-of-pixel inclusion on the image grid;
// datasets are file-per-sample TOMO1 payloads plus a line-delimited JSON
// manifest with content hashes and a deterministic train/test split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tomo/core.hpp"
#include "tomo/io.hpp"
#include "tomo/noise.hpp"
#include "tomo/projector.hpp"
#include "tomo/rng.hpp"
#include "tomo/unrolled.hpp"

namespace tomo {

struct Ellipse {
    double center_x = 0.0;  // in [-1, 1] grid coordinates
    double center_y = 0.0;
    double axis_a = 0.0;    // semi-axes, same units
    double axis_b = 0.0;
    double rotation = 0.0;  // radians, counter-clockwise
    double intensity = 0.0; // additive attenuation (1/cm)
};

// Adds each ellipse's intensity to every pixel whose center lies inside.
inline Image rasterize_ellipses(const std::vector<Ellipse>& ellipses, int width, int height,
                                double pixel_size, bool clamp_nonnegative) {
    Image img(width, height, pixel_size, 0.0);
    const double half_w = 0.5 * width;
    const double half_h = 0.5 * height;
    for (const Ellipse& e : ellipses) {
        const double c = std::cos(e.rotation), s = std::sin(e.rotation);
        for (int r = 0; r < height; ++r) {
            // unit coordinates with y up, matching the world convention
            const double v = (half_h - (r + 0.5)) / half_h;
            for (int col = 0; col < width; ++col) {
                const double u = (col + 0.5 - half_w) / half_w;
                const double dx = u - e.center_x;
                const double dy = v - e.center_y;
                const double xr = dx * c + dy * s;
                const double yr = -dx * s + dy * c;
                const double q = (xr / e.axis_a) * (xr / e.axis_a) +
                                 (yr / e.axis_b) * (yr / e.axis_b);
                if (q <= 1.0) img.at(r, col) += e.intensity;
            }
        }
    }
    if (clamp_nonnegative)
        for (auto& v : img.values) v = std::max(v, 0.0);
    return img;
}

// The standard 10-ellipse Shepp-Logan phantom on the unit square.
inline std::vector<Ellipse> shepp_logan_ellipses() {
    const auto deg = [](double d) { return d * std::numbers::pi / 180.0; };
    return {
        {0.0, 0.0, 0.69, 0.92, 0.0, 2.0},
        {0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98},
        {0.22, 0.0, 0.11, 0.31, deg(-18.0), -0.02},
        {-0.22, 0.0, 0.16, 0.41, deg(18.0), -0.02},
        {0.0, 0.35, 0.21, 0.25, 0.0, 0.01},
        {0.0, 0.1, 0.046, 0.046, 0.0, 0.01},
        {0.0, -0.1, 0.046, 0.046, 0.0, 0.01},
        {-0.08, -0.605, 0.046, 0.023, 0.0, 0.01},
        {0.0, -0.605, 0.023, 0.023, 0.0, 0.01},
        {0.06, -0.605, 0.023, 0.046, 0.0, 0.01},
    };
}

inline Image shepp_logan(int width, double pixel_size = 0.0) {
    if (width < 16) throw std::invalid_argument("shepp_logan: width must be >= 16");
    if (pixel_size <= 0.0) pixel_size = 2.0 / width;
    return rasterize_ellipses(shepp_logan_ellipses(), width, width, pixel_size,
                              /*clamp_nonnegative=*/false);
}

struct EllipsePhantomSpec {
    int width = 64;
    int height = 64;
    double pixel_size = 0.1;      // cm
    int n_min = 4, n_max = 10;
    double intensity_min = -0.04; // 1/cm
    double intensity_max = 0.12;
    double axis_min = 0.08;       // fraction of the half-extent
    double axis_max = 0.35;
    double center_max = 0.55;     // |center| bound, fraction of the half-extent
    double rotation_min = 0.0;
    double rotation_max = std::numbers::pi;
    std::uint64_t seed = 0;

    void validate() const {
        if (width < 8 || height < 8 || !(pixel_size > 0.0))
            throw std::invalid_argument("EllipsePhantomSpec: bad grid");
        if (n_min < 1 || n_max < n_min)
            throw std::invalid_argument("EllipsePhantomSpec: bad ellipse count range");
        if (!(axis_min > 0.0) || axis_max < axis_min)
            throw std::invalid_argument("EllipsePhantomSpec: bad axis range");
        if (intensity_max < intensity_min || rotation_max < rotation_min)
            throw std::invalid_argument("EllipsePhantomSpec: bad range");
        if (center_max < 0.0 || center_max + axis_max > 1.0)
            throw std::invalid_argument("EllipsePhantomSpec: ellipses may leave the grid");
    }
};

inline std::vector<Ellipse> draw_ellipses(const EllipsePhantomSpec& spec, int index) {
    spec.validate();
    CounterRng rng(spec.seed, 0xe111ull, static_cast<std::uint64_t>(index));
    const int n = spec.n_min +
                  static_cast<int>(rng() % static_cast<std::uint64_t>(spec.n_max - spec.n_min + 1));
    std::vector<Ellipse> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Ellipse e;
        e.intensity = uniform(rng, spec.intensity_min, spec.intensity_max);
        e.axis_a = uniform(rng, spec.axis_min, spec.axis_max);
        e.axis_b = uniform(rng, spec.axis_min, spec.axis_max);
        e.center_x = uniform(rng, -spec.center_max, spec.center_max);
        e.center_y = uniform(rng, -spec.center_max, spec.center_max);
        e.rotation = uniform(rng, spec.rotation_min, spec.rotation_max);
        out.push_back(e);
    }
    return out;
}

// Deterministic per (spec.seed, index); values clamped to >= 0.
inline Image generate_ellipse_phantom(const EllipsePhantomSpec& spec, int index) {
    return rasterize_ellipses(draw_ellipses(spec, index), spec.width, spec.height,
                              spec.pixel_size, /*clamp_nonnegative=*/true);
}

// ---------------------------------------------------------------------------
// Dataset

inline std::string dose_key(double dose) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", dose);
    return buf;
}

struct DatasetEntry {
    int index = 0;
    std::string split;       // "train" | "test"
    std::string image_file;  // relative to the manifest directory
    std::map<std::string, std::string> sino_files;     // dose key -> file
    std::map<std::string, std::uint64_t> noise_seeds;  // dose key -> seed
    std::map<std::string, std::string> hashes;         // file -> fnv64 hex
};

struct DatasetManifest {
    ScanGeometry geometry;
    int width = 0, height = 0;
    double pixel_size = 0.0;
    std::uint64_t seed = 0;
    std::vector<double> doses;
    double electronic_variance = 10.0;
    std::vector<DatasetEntry> entries;
    std::string root_dir;  // set on load

    static constexpr double kTestFraction = 0.2;
};

// Exact-fraction split by hash rank: the ceil(0.2 n) indices with the
// smallest derived hashes are the test set. Deterministic in (seed, n).
inline std::vector<std::string> assign_splits(std::uint64_t seed, int n) {
    std::vector<std::pair<std::uint64_t, int>> ranked;
    ranked.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        ranked.emplace_back(derive_seed(seed, 0x5b117ull, static_cast<std::uint64_t>(i)), i);
    std::sort(ranked.begin(), ranked.end());
    const int n_test = static_cast<int>(
        std::ceil(DatasetManifest::kTestFraction * static_cast<double>(n)));
    std::vector<std::string> split(static_cast<std::size_t>(n), "train");
    for (int i = 0; i < n_test; ++i) split[static_cast<std::size_t>(ranked[i].second)] = "test";
    return split;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    nlohmann::json header = {{"kind", "tomo-dataset-v1"},
                             {"geometry", geometry_to_json(m.geometry)},
                             {"image", {{"width", m.width},
                                        {"height", m.height},
                                        {"pixel_size", m.pixel_size}}},
                             {"seed", m.seed},
                             {"doses", m.doses},
                             {"electronic_variance", m.electronic_variance},
                             {"count", m.entries.size()}};
    out << header.dump() << "\n";
    for (const DatasetEntry& e : m.entries) {
        nlohmann::json j = {{"index", e.index},
                            {"split", e.split},
                            {"image", e.image_file},
                            {"sinograms", e.sino_files},
                            {"noise_seeds", e.noise_seeds},
                            {"hashes", e.hashes}};
        out << j.dump() << "\n";
    }
}

inline DatasetManifest load_manifest(const std::string& path, bool verify_hashes = true) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty manifest: " + path);
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.at("kind").get<std::string>() != "tomo-dataset-v1")
        throw std::runtime_error("unknown manifest kind in " + path);

    DatasetManifest m;
    m.geometry = geometry_from_json(header.at("geometry"));
    m.width = header.at("image").at("width").get<int>();
    m.height = header.at("image").at("height").get<int>();
    m.pixel_size = header.at("image").at("pixel_size").get<double>();
    m.seed = header.at("seed").get<std::uint64_t>();
    m.doses = header.at("doses").get<std::vector<double>>();
    m.electronic_variance = header.at("electronic_variance").get<double>();
    m.root_dir = std::filesystem::path(path).parent_path().string();
    if (m.root_dir.empty()) m.root_dir = ".";

    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        DatasetEntry e;
        e.index = j.at("index").get<int>();
        e.split = j.at("split").get<std::string>();
        e.image_file = j.at("image").get<std::string>();
        e.sino_files = j.at("sinograms").get<std::map<std::string, std::string>>();
        e.noise_seeds = j.at("noise_seeds").get<std::map<std::string, std::uint64_t>>();
        e.hashes = j.at("hashes").get<std::map<std::string, std::string>>();
        m.entries.push_back(std::move(e));
    }
    if (header.at("count").get<std::size_t>() != m.entries.size())
        throw std::runtime_error("manifest count mismatch in " + path);

    if (verify_hashes) {
        for (const DatasetEntry& e : m.entries)
            for (const auto& [file, hash] : e.hashes) {
                const std::string full = m.root_dir + "/" + file;
                if (fnv1a_file_hex(full) != hash)
                    throw std::runtime_error("manifest hash mismatch for " + full);
            }
    }
    return m;
}

// Generates n phantoms, forward-projects them, simulates every dose level
// and writes images + sinograms + manifest under out_dir. Deterministic in
// (spec, geometry, doses, seed).
inline DatasetManifest build_dataset(int n, const EllipsePhantomSpec& spec,
                                     const ScanGeometry& geometry,
                                     const std::vector<double>& doses,
                                     const std::string& out_dir,
                                     double electronic_variance = 10.0) {
    if (n < 1) throw std::invalid_argument("build_dataset: n must be >= 1");
    if (doses.empty()) throw std::invalid_argument("build_dataset: need at least one dose");
    spec.validate();
    geometry.validate();
    std::filesystem::create_directories(out_dir + "/images");
    std::filesystem::create_directories(out_dir + "/sinograms");

    Projector proj(geometry, spec.width, spec.height, spec.pixel_size);
    DatasetManifest manifest;
    manifest.geometry = geometry;
    manifest.width = spec.width;
    manifest.height = spec.height;
    manifest.pixel_size = spec.pixel_size;
    manifest.seed = spec.seed;
    manifest.doses = doses;
    manifest.electronic_variance = electronic_variance;
    manifest.root_dir = out_dir;

    const std::vector<std::string> split = assign_splits(spec.seed, n);
    for (int i = 0; i < n; ++i) {
        DatasetEntry entry;
        entry.index = i;
        entry.split = split[static_cast<std::size_t>(i)];

        Image phantom = generate_ellipse_phantom(spec, i);
        char name[64];
        std::snprintf(name, sizeof(name), "images/img_%05d.tomo", i);
        entry.image_file = name;
        save_image(out_dir + "/" + entry.image_file, phantom);
        entry.hashes[entry.image_file] = fnv1a_file_hex(out_dir + "/" + entry.image_file);

        Sinogram clean = forward_project(proj, phantom);
        for (std::size_t d = 0; d < doses.size(); ++d) {
            NoiseModel noise;
            noise.incident_intensity = doses[d];
            noise.electronic_variance = electronic_variance;
            noise.rng_seed = derive_seed(spec.seed, static_cast<std::uint64_t>(i),
                                         0x0d05e000ull + d);
            Sinogram y = log_transform(noise, simulate_counts(noise, clean));
            const std::string key = dose_key(doses[d]);
            std::snprintf(name, sizeof(name), "sinograms/sino_%05d_d%s.tomo", i, key.c_str());
            entry.sino_files[key] = name;
            entry.noise_seeds[key] = noise.rng_seed;
            save_sinogram(out_dir + "/" + name, y);
            entry.hashes[name] = fnv1a_file_hex(out_dir + "/" + std::string(name));
        }
        manifest.entries.push_back(std::move(entry));
    }
    save_manifest(manifest, out_dir + "/manifest.jsonl");
    return manifest;
}

// Loads the (image, sinogram) pairs of one split at one dose level, in
// manifest order, optionally capped.
inline SampleSet load_split(const DatasetManifest& m, const std::string& split, double dose,
                            int limit = -1) {
    const std::string key = dose_key(dose);
    SampleSet set;
    for (const DatasetEntry& e : m.entries) {
        if (e.split != split) continue;
        if (limit >= 0 && static_cast<int>(set.size()) >= limit) break;
        const auto it = e.sino_files.find(key);
        if (it == e.sino_files.end())
            throw std::runtime_error("dataset has no dose " + key + " for index " +
                                     std::to_string(e.index));
        set.push(load_image(m.root_dir + "/" + e.image_file),
                 load_sinogram(m.root_dir + "/" + it->second));
    }
    return set;
}

}  // namespace tomo
