// Command-line front end: simulate | train | reconstruct | eval.
//
// Everything that affects numerics lives in a JSON config file; flags only
// select the command, the config path, a seed override and the thread
// count. Unknown config keys are rejected. Every run writes a resolved
// config snapshot next to its outputs so results can be reproduced
// bit-exactly.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tomo/tomo.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <class T>
T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + key + "': " + e.what());
    }
}

template <class T>
T require(const json& obj, const std::string& key, const std::string& where) {
    if (!obj.contains(key)) throw ConfigError("missing key '" + key + "' in " + where);
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + key + "' in " + where + ": " + e.what());
    }
}

tomo::ScanGeometry geometry_from_config(const json& cfg) {
    json section = cfg.value("geometry", json::object());
    check_keys(section,
               {"preset", "image_fov", "n_views", "n_bins", "source_to_isocenter",
                "source_to_detector", "detector_pixel_size", "angular_span"},
               "geometry");
    tomo::ScanGeometry g = tomo::geometry_preset(get_or<std::string>(section, "preset", "desk_small"));
    if (section.contains("image_fov")) g.image_fov = section.at("image_fov").get<double>();
    if (section.contains("n_views")) g.n_views = section.at("n_views").get<int>();
    if (section.contains("n_bins")) g.n_bins = section.at("n_bins").get<int>();
    if (section.contains("source_to_isocenter"))
        g.source_to_isocenter = section.at("source_to_isocenter").get<double>();
    if (section.contains("source_to_detector"))
        g.source_to_detector = section.at("source_to_detector").get<double>();
    if (section.contains("detector_pixel_size"))
        g.detector_pixel_size = section.at("detector_pixel_size").get<double>();
    if (section.contains("angular_span")) g.angular_span = section.at("angular_span").get<double>();
    try {
        g.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return g;
}

struct ImageShape {
    int width = 64, height = 64;
    double pixel_size = 0.0;
};

ImageShape image_shape_from_config(const json& cfg, const tomo::ScanGeometry& g) {
    json section = cfg.value("image", json::object());
    check_keys(section, {"width", "height", "pixel_size"}, "image");
    ImageShape s;
    s.width = get_or<int>(section, "width", 64);
    s.height = get_or<int>(section, "height", 64);
    s.pixel_size = get_or<double>(section, "pixel_size", g.image_fov / s.width);
    if (s.width < 1 || s.height < 1 || !(s.pixel_size > 0.0))
        throw ConfigError("bad image shape");
    return s;
}

json geometry_snapshot(const tomo::ScanGeometry& g) { return tomo::geometry_to_json(g); }

void write_snapshot(const std::string& path, const json& resolved) {
    fs::create_directories(fs::path(path).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write config snapshot: " + path);
    out << resolved.dump(2) << "\n";
}

// 8-bit preview with the display window [-150, 150] HU,
// HU = 1000 (mu - mu_water) / mu_water.
void write_pgm_preview(const std::string& path, const tomo::Image& img, double mu_water) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write preview: " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    for (double v : img.values) {
        const double hu = 1000.0 * (v - mu_water) / mu_water;
        const double t = std::clamp((hu + 150.0) / 300.0, 0.0, 1.0);
        out.put(static_cast<char>(std::lround(t * 255.0)));
    }
}

// ---------------------------------------------------------------------------

int cmd_simulate(const json& cfg, std::uint64_t seed) {
    const json section = cfg.value("simulate", json::object());
    check_keys(section, {"count", "doses", "out_dir", "electronic_variance", "phantom"},
               "simulate");
    const int count = require<int>(section, "count", "simulate");
    const auto doses = require<std::vector<double>>(section, "doses", "simulate");
    const std::string out_dir = require<std::string>(section, "out_dir", "simulate");
    const double evar = get_or<double>(section, "electronic_variance", 10.0);

    const tomo::ScanGeometry g = geometry_from_config(cfg);
    const ImageShape shape = image_shape_from_config(cfg, g);

    tomo::EllipsePhantomSpec spec;
    spec.width = shape.width;
    spec.height = shape.height;
    spec.pixel_size = shape.pixel_size;
    spec.seed = seed;
    const json ph = section.value("phantom", json::object());
    check_keys(ph,
               {"n_min", "n_max", "intensity_min", "intensity_max", "axis_min", "axis_max",
                "center_max", "rotation_min", "rotation_max"},
               "simulate.phantom");
    spec.n_min = get_or<int>(ph, "n_min", spec.n_min);
    spec.n_max = get_or<int>(ph, "n_max", spec.n_max);
    spec.intensity_min = get_or<double>(ph, "intensity_min", spec.intensity_min);
    spec.intensity_max = get_or<double>(ph, "intensity_max", spec.intensity_max);
    spec.axis_min = get_or<double>(ph, "axis_min", spec.axis_min);
    spec.axis_max = get_or<double>(ph, "axis_max", spec.axis_max);
    spec.center_max = get_or<double>(ph, "center_max", spec.center_max);
    spec.rotation_min = get_or<double>(ph, "rotation_min", spec.rotation_min);
    spec.rotation_max = get_or<double>(ph, "rotation_max", spec.rotation_max);
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    tomo::DatasetManifest manifest;
    try {
        manifest = tomo::build_dataset(count, spec, g, doses, out_dir, evar);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    } catch (const std::exception& e) {
        throw DataError(e.what());  // filesystem and I/O failures
    }

    json resolved = {{"command", "simulate"},
                     {"seed", seed},
                     {"geometry", geometry_snapshot(g)},
                     {"image", {{"width", shape.width},
                                {"height", shape.height},
                                {"pixel_size", shape.pixel_size}}},
                     {"simulate",
                      {{"count", count},
                       {"doses", doses},
                       {"out_dir", out_dir},
                       {"electronic_variance", evar},
                       {"phantom",
                        {{"n_min", spec.n_min},
                         {"n_max", spec.n_max},
                         {"intensity_min", spec.intensity_min},
                         {"intensity_max", spec.intensity_max},
                         {"axis_min", spec.axis_min},
                         {"axis_max", spec.axis_max},
                         {"center_max", spec.center_max},
                         {"rotation_min", spec.rotation_min},
                         {"rotation_max", spec.rotation_max}}}}}};
    write_snapshot(out_dir + "/resolved_config.json", resolved);
    std::cout << out_dir << "/manifest.jsonl\n";
    return 0;
}

tomo::DatasetManifest load_manifest_checked(const std::string& path) {
    if (!fs::exists(path)) throw DataError("manifest not found: " + path);
    try {
        return tomo::load_manifest(path, /*verify_hashes=*/true);
    } catch (const std::exception& e) {
        throw DataError(e.what());
    }
}

int cmd_train(const json& cfg, std::uint64_t seed) {
    const json section = cfg.value("train", json::object());
    check_keys(section,
               {"manifest", "dose", "method", "stages", "channels", "epochs", "batch_size",
                "lr", "beta1", "beta2", "eps", "out_dir", "final_relu", "resume", "test_limit"},
               "train");
    const std::string manifest_path = require<std::string>(section, "manifest", "train");
    const double dose = require<double>(section, "dose", "train");
    const std::string method = require<std::string>(section, "method", "train");
    const std::string out_dir = require<std::string>(section, "out_dir", "train");
    if (method != "pfbs-ir" && method != "pfbs-air")
        throw ConfigError("train.method must be pfbs-ir or pfbs-air");
    const tomo::PrecondMode mode =
        method == "pfbs-air" ? tomo::PrecondMode::fbp : tomo::PrecondMode::adjoint;

    const tomo::DatasetManifest manifest = load_manifest_checked(manifest_path);
    tomo::SampleSet train_set, test_set;
    try {
        train_set = tomo::load_split(manifest, "train", dose);
        test_set = tomo::load_split(manifest, "test", dose,
                                    get_or<int>(section, "test_limit", -1));
    } catch (const std::exception& e) {
        throw DataError(e.what());
    }
    if (train_set.size() == 0) throw DataError("training split is empty");

    tomo::TrainingConfig tc;
    tc.epochs = get_or<int>(section, "epochs", 50);
    tc.batch_size = get_or<int>(section, "batch_size", 4);
    tc.lr = get_or<double>(section, "lr", 1e-4);
    tc.beta1 = get_or<double>(section, "beta1", 0.9);
    tc.beta2 = get_or<double>(section, "beta2", 0.999);
    tc.eps = get_or<double>(section, "eps", 1e-8);
    tc.seed = seed;
    tc.checkpoint_dir = out_dir + "/checkpoints";
    tc.log_path = out_dir + "/train_log.jsonl";
    const int stages = get_or<int>(section, "stages", 10);
    const int channels = get_or<int>(section, "channels", 64);
    const bool final_relu = get_or<bool>(section, "final_relu", true);

    fs::create_directories(out_dir);
    tomo::UnrolledModel model;
    tomo::AdamState adam;
    if (section.contains("resume")) {
        const std::string resume = section.at("resume").get<std::string>();
        tomo::Checkpoint ck;
        try {
            ck = tomo::load_checkpoint(resume);
        } catch (const std::exception& e) {
            throw DataError(e.what());
        }
        if (ck.model.mode != mode || ck.model.stages != stages || ck.model.channels != channels)
            throw ConfigError("resume checkpoint does not match train.method/stages/channels");
        if (tomo::geometry_hash(ck.model.geometry) != tomo::geometry_hash(manifest.geometry))
            throw DataError("resume checkpoint geometry does not match the dataset");
        model = std::move(ck.model);
        adam = std::move(ck.adam);
        tc.start_epoch = ck.epoch;
    } else {
        try {
            model = tomo::make_unrolled_model(manifest.geometry, manifest.width,
                                              manifest.height, manifest.pixel_size, stages,
                                              channels, mode, seed, final_relu);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }

    json resolved = {{"command", "train"},
                     {"seed", seed},
                     {"geometry", geometry_snapshot(manifest.geometry)},
                     {"train",
                      {{"manifest", manifest_path},
                       {"dose", dose},
                       {"method", method},
                       {"stages", stages},
                       {"channels", channels},
                       {"epochs", tc.epochs},
                       {"batch_size", tc.batch_size},
                       {"lr", tc.lr},
                       {"beta1", tc.beta1},
                       {"beta2", tc.beta2},
                       {"eps", tc.eps},
                       {"final_relu", final_relu},
                       {"start_epoch", tc.start_epoch},
                       {"train_samples", train_set.size()},
                       {"test_samples", test_set.size()},
                       {"out_dir", out_dir}}}};
    write_snapshot(out_dir + "/resolved_config.json", resolved);

    std::vector<tomo::EpochRecord> records;
    try {
        records = tomo::train(model, train_set, test_set, tc, &adam);
    } catch (const std::runtime_error& e) {
        throw NumericError(e.what());
    }
    tomo::save_checkpoint(model, adam, tc.epochs, out_dir + "/final",
                          json{{"epochs", tc.epochs},
                               {"batch_size", tc.batch_size},
                               {"lr", tc.lr},
                               {"seed", tc.seed}});
    for (const auto& r : records)
        std::cout << "epoch " << r.epoch << " train_loss " << tomo::format_double(r.train_loss)
                  << " test_psnr " << tomo::format_double(r.test_psnr) << "\n";
    std::cout << out_dir << "/final\n";
    return 0;
}

int cmd_reconstruct(const json& cfg, std::uint64_t seed) {
    (void)seed;
    const json section = cfg.value("reconstruct", json::object());
    check_keys(section, {"method", "input", "output", "checkpoint", "tv", "preview", "mu_water"},
               "reconstruct");
    const std::string method = require<std::string>(section, "method", "reconstruct");
    const std::string input = require<std::string>(section, "input", "reconstruct");
    const std::string output = require<std::string>(section, "output", "reconstruct");

    if (!fs::exists(input)) throw DataError("input sinogram not found: " + input);
    tomo::Sinogram y;
    try {
        y = tomo::load_sinogram(input);
    } catch (const std::exception& e) {
        throw DataError(e.what());
    }
    if (y.domain != tomo::SinogramDomain::post_log)
        throw DataError("reconstruct expects a post-log sinogram");

    const tomo::ScanGeometry g = geometry_from_config(cfg);
    const ImageShape shape = image_shape_from_config(cfg, g);
    if (y.n_views != g.n_views || y.n_bins != g.n_bins)
        throw DataError("sinogram does not match the configured geometry");

    tomo::Image result;
    json method_detail = json::object();
    if (method == "fbp") {
        tomo::FbpOperator op(g, shape.width, shape.height, shape.pixel_size);
        result = tomo::fbp_reconstruct(op, y);
    } else if (method == "tv") {
        const json tv = section.value("tv", json::object());
        check_keys(tv, {"lambda", "mu", "outer_iters", "cg_iters", "cg_tol", "dose"},
                   "reconstruct.tv");
        tomo::TvParams params;
        if (tv.contains("lambda"))
            params.lambda = tv.at("lambda").get<double>();
        else if (tv.contains("dose"))
            params.lambda = tomo::tv_lambda_preset(tv.at("dose").get<double>());
        params.mu = get_or<double>(tv, "mu", params.mu);
        params.outer_iters = get_or<int>(tv, "outer_iters", params.outer_iters);
        params.cg_iters = get_or<int>(tv, "cg_iters", params.cg_iters);
        params.cg_tol = get_or<double>(tv, "cg_tol", params.cg_tol);
        try {
            params.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        tomo::Projector proj(g, shape.width, shape.height, shape.pixel_size);
        tomo::TvResult res = tomo::reconstruct_tv(proj, y, params);
        if (res.cg_breakdown) std::cerr << "warning: CG breakdown, returned last iterate\n";
        result = std::move(res.image);
        method_detail = {{"lambda", params.lambda},
                         {"mu", params.mu},
                         {"outer_iters", params.outer_iters},
                         {"cg_iters", params.cg_iters},
                         {"cg_tol", params.cg_tol},
                         {"objective", res.objective},
                         {"primal_residual_rel", res.primal_residual_rel}};
    } else if (method == "pfbs-ir" || method == "pfbs-air") {
        if (!section.contains("checkpoint"))
            throw ConfigError("reconstruct." + method + " needs a checkpoint");
        const std::string ckpath = section.at("checkpoint").get<std::string>();
        tomo::Checkpoint ck;
        try {
            ck = tomo::load_checkpoint(ckpath);
        } catch (const std::exception& e) {
            throw DataError(e.what());
        }
        const tomo::PrecondMode want =
            method == "pfbs-air" ? tomo::PrecondMode::fbp : tomo::PrecondMode::adjoint;
        if (ck.model.mode != want)
            throw ConfigError("checkpoint preconditioner does not match " + method);
        if (tomo::geometry_hash(ck.model.geometry) != tomo::geometry_hash(g))
            throw DataError("checkpoint geometry does not match the configured geometry");
        if (ck.model.img_width != shape.width || ck.model.img_height != shape.height)
            throw DataError("checkpoint image shape does not match the configured image");
        result = tomo::unrolled_reconstruct(ck.model, y);
        method_detail = {{"checkpoint", ckpath},
                         {"stages", ck.model.stages},
                         {"epoch", ck.epoch}};
    } else {
        throw ConfigError("unknown reconstruct.method: " + method);
    }

    if (!tomo::all_finite(result.values)) throw NumericError("reconstruction is not finite");

    const fs::path out_path(output);
    if (!out_path.parent_path().empty()) fs::create_directories(out_path.parent_path());
    tomo::save_image(output, result);
    const double mu_water = get_or<double>(section, "mu_water", 0.193);  // 1/cm
    if (section.contains("preview"))
        write_pgm_preview(section.at("preview").get<std::string>(), result, mu_water);

    json resolved = {{"command", "reconstruct"},
                     {"geometry", geometry_snapshot(g)},
                     {"image", {{"width", shape.width},
                                {"height", shape.height},
                                {"pixel_size", shape.pixel_size}}},
                     {"reconstruct", {{"method", method},
                                      {"input", input},
                                      {"output", output},
                                      {"mu_water", mu_water},
                                      {"detail", method_detail}}}};
    write_snapshot(output + ".config.json", resolved);
    std::cout << output << "\n";
    return 0;
}

struct Stats {
    double mean = 0.0, stdev = 0.0;
};

Stats mean_std(const std::vector<double>& v) {
    Stats s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double acc = 0.0;
        for (double x : v) acc += (x - s.mean) * (x - s.mean);
        s.stdev = std::sqrt(acc / static_cast<double>(v.size() - 1));
    }
    return s;
}

int cmd_eval(const json& cfg, std::uint64_t seed) {
    (void)seed;
    const json section = cfg.value("eval", json::object());
    check_keys(section, {"manifest", "recon_root", "methods", "doses", "split", "out_dir", "limit"},
               "eval");
    const std::string manifest_path = require<std::string>(section, "manifest", "eval");
    const std::string recon_root = require<std::string>(section, "recon_root", "eval");
    const auto methods = require<std::vector<std::string>>(section, "methods", "eval");
    const auto doses = require<std::vector<double>>(section, "doses", "eval");
    const std::string split = get_or<std::string>(section, "split", "test");
    const std::string out_dir = require<std::string>(section, "out_dir", "eval");
    const int limit = get_or<int>(section, "limit", -1);

    const tomo::DatasetManifest manifest = load_manifest_checked(manifest_path);
    fs::create_directories(out_dir);
    std::ofstream records(out_dir + "/metrics.jsonl");
    if (!records) throw DataError("cannot write " + out_dir + "/metrics.jsonl");

    std::string table;
    char line[256];
    std::snprintf(line, sizeof(line), "%-10s %-10s %-20s %-20s %-20s\n", "method", "dose",
                  "psnr", "rmse", "ssim");
    table += line;
    for (const std::string& method : methods) {
        for (double dose : doses) {
            const std::string key = tomo::dose_key(dose);
            std::vector<double> psnrs, rmses, ssims;
            int used = 0;
            for (const auto& entry : manifest.entries) {
                if (entry.split != split) continue;
                if (limit >= 0 && used >= limit) break;
                char name[64];
                std::snprintf(name, sizeof(name), "img_%05d.tomo", entry.index);
                const std::string recon_path =
                    recon_root + "/" + method + "/d" + key + "/" + name;
                if (!fs::exists(recon_path))
                    throw DataError("missing reconstruction: " + recon_path);
                tomo::Image reference, recon;
                try {
                    reference = tomo::load_image(manifest.root_dir + "/" + entry.image_file);
                    recon = tomo::load_image(recon_path);
                } catch (const std::exception& e) {
                    throw DataError(e.what());
                }
                tomo::MetricReport r;
                try {
                    r = tomo::evaluate_metrics(reference, recon);
                } catch (const std::invalid_argument& e) {
                    throw NumericError(e.what());
                }
                psnrs.push_back(r.psnr);
                rmses.push_back(r.rmse);
                ssims.push_back(r.ssim);
                records << json{{"method", method},
                                {"dose", dose},
                                {"index", entry.index},
                                {"psnr", r.psnr},
                                {"rmse", r.rmse},
                                {"ssim", r.ssim}}
                               .dump()
                        << "\n";
                ++used;
            }
            const Stats p = mean_std(psnrs), r = mean_std(rmses), s = mean_std(ssims);
            std::snprintf(line, sizeof(line),
                          "%-10s %-10s %9.4f +- %-8.4f %9.6f +- %-8.6f %9.6f +- %-8.6f\n",
                          method.c_str(), key.c_str(), p.mean, p.stdev, r.mean, r.stdev, s.mean,
                          s.stdev);
            table += line;
        }
    }
    std::ofstream table_out(out_dir + "/table.txt");
    table_out << table;
    std::cout << table;

    json resolved = {{"command", "eval"},
                     {"eval",
                      {{"manifest", manifest_path},
                       {"recon_root", recon_root},
                       {"methods", methods},
                       {"doses", doses},
                       {"split", split},
                       {"limit", limit},
                       {"out_dir", out_dir}}}};
    write_snapshot(out_dir + "/resolved_config.json", resolved);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale fan-beam CT reconstruction toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_given = false;
    unsigned threads = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file")->required();
        sub->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
            seed_given = true;
        });
        sub->add_option("--threads", threads, "worker thread count");
    };
    CLI::App* simulate = app.add_subcommand("simulate", "generate a phantom dataset");
    CLI::App* train = app.add_subcommand("train", "train an unrolled model");
    CLI::App* reconstruct = app.add_subcommand("reconstruct", "reconstruct one sinogram");
    CLI::App* evalcmd = app.add_subcommand("eval", "evaluate reconstructions");
    for (CLI::App* sub : {simulate, train, reconstruct, evalcmd}) add_common(sub);

    CLI11_PARSE(app, argc, argv);
    if (threads > 0) tomo::set_thread_count(threads);

    try {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("cannot open config: " + config_path);
        json cfg;
        try {
            cfg = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config parse error: ") + e.what());
        }
        check_keys(cfg, {"seed", "geometry", "image", "simulate", "train", "reconstruct", "eval"},
                   "config");
        if (!seed_given) seed = get_or<std::uint64_t>(cfg, "seed", 0);

        if (app.got_subcommand(simulate)) return cmd_simulate(cfg, seed);
        if (app.got_subcommand(train)) return cmd_train(cfg, seed);
        if (app.got_subcommand(reconstruct)) return cmd_reconstruct(cfg, seed);
        if (app.got_subcommand(evalcmd)) return cmd_eval(cfg, seed);
        throw ConfigError("no command");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
}
