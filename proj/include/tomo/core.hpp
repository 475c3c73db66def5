#pragma once

// Core types shared by every module: attenuation images, projection data
// and the fan-beam acquisition geometry.
//
// Conventions (fixed once, documented here):
//   * Pixel (0,0) is the top-left corner; the image is centered on the
//     isocenter; world coordinates are in cm, attenuation in 1/cm.
//   * View i observes from angle beta_i = i * angular_span / n_views with
//     the source starting on the +y axis and rotating counter-clockwise.
//   * All numerics are 64-bit; a 32-bit storage mode exists only in the
//     file container (see io.hpp).

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tomo {

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

struct Image {
    int width = 0;
    int height = 0;
    double pixel_size = 0.0;  // cm
    std::vector<double> values;  // row-major, height rows of width entries

    Image() = default;
    Image(int w, int h, double px, double fill = 0.0)
        : width(w), height(h), pixel_size(px) {
        if (w < 1 || h < 1) throw std::invalid_argument("Image: dimensions must be >= 1");
        if (!(px > 0.0)) throw std::invalid_argument("Image: pixel_size must be > 0");
        if (!std::isfinite(fill)) throw std::invalid_argument("Image: fill must be finite");
        values.assign(static_cast<std::size_t>(w) * h, fill);
    }

    double& at(int row, int col) { return values[static_cast<std::size_t>(row) * width + col]; }
    double at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
    std::size_t size() const { return values.size(); }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && pixel_size == o.pixel_size;
    }
};

enum class SinogramDomain { post_log, pre_log_counts };

inline std::string to_string(SinogramDomain d) {
    return d == SinogramDomain::post_log ? "post_log" : "pre_log_counts";
}

inline SinogramDomain sinogram_domain_from_string(const std::string& s) {
    if (s == "post_log") return SinogramDomain::post_log;
    if (s == "pre_log_counts") return SinogramDomain::pre_log_counts;
    throw std::invalid_argument("unknown sinogram domain: " + s);
}

struct Sinogram {
    int n_views = 0;
    int n_bins = 0;
    SinogramDomain domain = SinogramDomain::post_log;
    std::vector<double> values;  // view-major, n_views rows of n_bins entries

    Sinogram() = default;
    Sinogram(int views, int bins, SinogramDomain d = SinogramDomain::post_log, double fill = 0.0)
        : n_views(views), n_bins(bins), domain(d) {
        if (views < 1 || bins < 1) throw std::invalid_argument("Sinogram: dimensions must be >= 1");
        values.assign(static_cast<std::size_t>(views) * bins, fill);
    }

    double& at(int view, int bin) { return values[static_cast<std::size_t>(view) * n_bins + bin]; }
    double at(int view, int bin) const { return values[static_cast<std::size_t>(view) * n_bins + bin]; }
    std::size_t size() const { return values.size(); }
    bool same_shape(const Sinogram& o) const {
        return n_views == o.n_views && n_bins == o.n_bins;
    }
};

// Fan-beam flat-panel acquisition: point source on a circle of radius
// source_to_isocenter, equidistant detector at source_to_detector.
struct ScanGeometry {
    double source_to_isocenter = 0.0;  // cm
    double source_to_detector = 0.0;   // cm
    double detector_pixel_size = 0.0;  // cm
    int n_bins = 0;
    int n_views = 0;
    double angular_span = 2.0 * std::numbers::pi;  // radians
    double image_fov = 0.0;  // cm, side length of the square reconstruction FOV

    bool operator==(const ScanGeometry&) const = default;

    double view_angle(int view) const { return angular_span * view / n_views; }
    double half_fan_angle() const {
        return std::atan(0.5 * n_bins * detector_pixel_size / source_to_detector);
    }
    // Angle subtended at the source by the FOV's circumscribed circle.
    double fov_half_angle() const {
        return std::asin((image_fov / std::numbers::sqrt2) / source_to_isocenter);
    }

    void validate() const {
        if (!(source_to_isocenter > 0.0) || !(source_to_detector > source_to_isocenter))
            throw std::invalid_argument("ScanGeometry: need source_to_detector > source_to_isocenter > 0");
        if (!(detector_pixel_size > 0.0))
            throw std::invalid_argument("ScanGeometry: detector_pixel_size must be > 0");
        if (n_bins < 1 || n_views < 1)
            throw std::invalid_argument("ScanGeometry: n_bins and n_views must be >= 1");
        if (!(angular_span > 0.0))
            throw std::invalid_argument("ScanGeometry: angular_span must be > 0");
        if (!(image_fov > 0.0))
            throw std::invalid_argument("ScanGeometry: image_fov must be > 0");
        if (image_fov / std::numbers::sqrt2 >= source_to_isocenter)
            throw std::invalid_argument("ScanGeometry: FOV reaches the source orbit");
        if (half_fan_angle() < fov_half_angle())
            throw std::invalid_argument("ScanGeometry: detector too narrow to cover the image FOV fan");
    }
};

// Named acquisition presets. paper_full is the full-scale configuration;
// desk_small is the proportionally shrunk geometry used for desk-scale
// runs and tests (same magnification, same detector extent at isocenter).
inline ScanGeometry geometry_preset(const std::string& name) {
    ScanGeometry g;
    if (name == "paper_full") {
        g.source_to_isocenter = 50.0;
        g.source_to_detector = 100.0;
        g.detector_pixel_size = 0.0388;
        g.n_bins = 512;
        g.n_views = 600;
        g.image_fov = 6.9;
    } else if (name == "desk_small") {
        g.source_to_isocenter = 25.0;
        g.source_to_detector = 50.0;
        g.detector_pixel_size = 0.1552;
        g.n_bins = 128;
        g.n_views = 180;
        g.image_fov = 6.4;
    } else {
        throw std::invalid_argument("unknown geometry preset: " + name);
    }
    g.validate();
    return g;
}

// Per-view source/detector frame for the angle convention above.
//   source   = D * (-sin b, cos b)
//   dir      = unit vector from source through the isocenter
//   det_axis = unit vector along the detector, +u at view 0 points to +x
struct ViewBasis {
    double source_x, source_y;
    double dir_x, dir_y;
    double det_x, det_y;
};

inline ViewBasis make_view_basis(const ScanGeometry& g, int view) {
    const double beta = g.view_angle(view);
    const double s = std::sin(beta), c = std::cos(beta);
    ViewBasis b;
    b.source_x = -g.source_to_isocenter * s;
    b.source_y = g.source_to_isocenter * c;
    b.dir_x = s;
    b.dir_y = -c;
    b.det_x = c;
    b.det_y = s;
    return b;
}

// Aligned (ground-truth image, projection data) pairs.
struct SampleSet {
    std::vector<Image> images;
    std::vector<Sinogram> sinograms;

    std::size_t size() const { return images.size(); }
    void push(Image img, Sinogram sino) {
        images.push_back(std::move(img));
        sinograms.push_back(std::move(sino));
    }
};

// Diagonal data-fidelity weights, one per detector ray; the empty optional
// marks the identity.
struct FidelityWeights {
    std::optional<std::vector<double>> diag;

    static FidelityWeights identity() { return {}; }
    static FidelityWeights diagonal(std::vector<double> w) {
        for (double x : w)
            if (!(x > 0.0)) throw std::invalid_argument("FidelityWeights: weights must be > 0");
        FidelityWeights f;
        f.diag = std::move(w);
        return f;
    }
    bool is_identity() const { return !diag.has_value(); }
};

}  // namespace tomo
