// Trains a small unrolled model on a handful of random ellipse phantoms
// and compares its held-out reconstruction quality against plain FBP.

#include <cstdio>

#include "tomo/tomo.hpp"

using namespace tomo;

int main() {
    const ScanGeometry g = geometry_preset("desk_small");
    const int n = 32;
    const double px = g.image_fov / n;
    const Projector proj(g, n, n, px);

    EllipsePhantomSpec spec;
    spec.width = n;
    spec.height = n;
    spec.pixel_size = px;
    spec.seed = 7;

    SampleSet train_set, test_set;
    for (int i = 0; i < 20; ++i) {
        Image img = generate_ellipse_phantom(spec, i);
        NoiseModel noise;
        noise.incident_intensity = 5e4;
        noise.rng_seed = derive_seed(spec.seed, static_cast<std::uint64_t>(i));
        auto [y, truth] = make_low_dose_pair(img, proj, noise);
        if (i < 16)
            train_set.push(std::move(truth), std::move(y));
        else
            test_set.push(std::move(truth), std::move(y));
    }

    UnrolledModel model = make_unrolled_model(g, n, n, px, /*stages=*/2, /*channels=*/16,
                                              PrecondMode::fbp, /*seed=*/3);
    FbpOperator fbp_op(g, n, n, px);
    double fbp_psnr = 0.0;
    for (std::size_t i = 0; i < test_set.size(); ++i)
        fbp_psnr += psnr(test_set.images[i], fbp_reconstruct(fbp_op, test_set.sinograms[i]));
    fbp_psnr /= static_cast<double>(test_set.size());
    std::printf("FBP        : test psnr %7.3f dB\n", fbp_psnr);

    TrainingConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.seed = 11;
    for (const EpochRecord& r : train(model, train_set, test_set, cfg))
        std::printf("epoch %2d   : train loss %10.5f   test psnr %7.3f dB   (%.1fs)\n", r.epoch,
                    r.train_loss, r.test_psnr, r.wall_time_s);
    return 0;
}
