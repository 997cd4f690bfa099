#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "eelab/tlc.hpp"

using namespace eelab;

namespace {

LogitBundleT<float> random_bundle(int classifiers, int tasks, int classes_per_task,
                                  Eigen::Index samples, std::uint64_t seed,
                                  double min_gap = 0.0) {
    LogitBundleT<float> b;
    Rng rng(seed);
    for (int t = 0; t < tasks; ++t)
        b.task_ranges.push_back({t * classes_per_task, classes_per_task});
    for (int i = 0; i < classifiers; ++i) {
        Matf z(samples, tasks * classes_per_task);
        for (Eigen::Index r = 0; r < samples; ++r)
            for (Eigen::Index c = 0; c < z.cols(); ++c)
                z(r, c) = static_cast<float>(rng.uniform(-5, 5));
        if (min_gap > 0) {
            // Spread within-slice values so scalar shifts cannot collapse the
            // ordering in float arithmetic.
            for (Eigen::Index r = 0; r < samples; ++r)
                for (int t = 0; t < tasks; ++t)
                    for (int k = 1; k < classes_per_task; ++k)
                        z(r, t * classes_per_task + k) =
                            z(r, t * classes_per_task + k - 1) +
                            static_cast<float>(rng.uniform(min_gap, 1.0)) *
                                (rng.next_u64() % 2 ? 1.0f : -1.0f);
        }
        b.logits.push_back(std::move(z));
    }
    return b;
}

// Single classifier, two tasks, one sample, duplicated per-task maxima so
// the masked max equals the plain max: E = ((a + b - 2)^2) / 2.
LogitBundleT<float> closed_form_bundle() {
    LogitBundleT<float> b;
    b.task_ranges = {{0, 2}, {2, 2}};
    Matf z(1, 4);
    z << 3.0f, 3.0f, 5.0f, 5.0f;
    b.logits.push_back(z);
    return b;
}

}  // namespace

TEST_CASE("apply_tlc adds a*(T-t)+b to old slices and leaves the last task raw") {
    LogitBundleT<float> b;
    b.task_ranges = {{0, 2}, {2, 2}, {4, 2}};
    Matf z(1, 6);
    z << 1.0f, 0.0f, 1.0f, 0.0f, 1.0f, 0.0f;
    b.logits.push_back(z);
    b.logits.push_back(z);

    auto out = apply_tlc(b, {0.5, 0.1}, 3);
    // c_1 = 0.5 * 2 + 0.1 = 1.1; c_2 = 0.6; c_3 = 0.
    CHECK(out.logits[0](0, 0) == doctest::Approx(2.1));
    CHECK(out.logits[0](0, 2) == doctest::Approx(1.6));
    CHECK(out.logits[0](0, 4) == doctest::Approx(1.0));

    // Identical correction at every classifier.
    for (Eigen::Index c = 0; c < 6; ++c)
        CHECK(out.logits[0](0, c) == out.logits[1](0, c));

    auto same = apply_tlc(b, {0.0, 0.0}, 3);
    for (std::size_t i = 0; i < b.logits.size(); ++i)
        CHECK((same.logits[i].array() == b.logits[i].array()).all());
}

TEST_CASE("tlc preserves the within-slice argmax") {
    auto b = random_bundle(2, 3, 4, 24, 5, 1e-3);
    auto out = apply_tlc(b, {1.7, -0.4}, 3);
    for (std::size_t i = 0; i < b.logits.size(); ++i)
        for (Eigen::Index r = 0; r < b.num_samples(); ++r)
            for (int t = 0; t < 3; ++t) {
                const ClassRange range = b.task_ranges[static_cast<std::size_t>(t)];
                CHECK(argmax_row(b.logits[i], r, range.begin, range.count) ==
                      argmax_row(out.logits[i], r, range.begin, range.count));
            }
}

TEST_CASE("masked max excludes the predicted class only inside its own task") {
    LogitBundleT<float> b;
    b.task_ranges = {{0, 2}, {2, 3}};
    Matf z(1, 5);
    z << 0.2f, -1.0f, 0.5f, 4.0f, 1.0f;
    b.logits.push_back(z);

    // Prediction is the middle class of task 2 -> exclusion leaves 1.0.
    CHECK(masked_task_max(b, 0, 0, 2, {0, 0}) == doctest::Approx(1.0));
    // Task 1 does not contain the prediction -> plain slice max.
    CHECK(masked_task_max(b, 0, 0, 1, {0, 0}) == doctest::Approx(0.2));
}

TEST_CASE("exclusion differs from the slice max exactly when the prediction tops its task") {
    for (std::uint64_t seed = 1; seed <= 8; ++seed) {
        auto b = random_bundle(3, 3, 3, 10, seed);
        for (int i = 0; i < 3; ++i)
            for (Eigen::Index j = 0; j < b.num_samples(); ++j) {
                // Recover the corrected row's argmax independently.
                const TlcParams p{0.3, -0.2};
                auto corrected = apply_tlc(b, p, 3);
                Eigen::Index pred = argmax_row(corrected.logits[i], j);
                for (int t = 1; t <= 3; ++t) {
                    const ClassRange r = b.task_ranges[static_cast<std::size_t>(t - 1)];
                    const double slice_max =
                        corrected.logits[i]
                            .row(j)
                            .segment(r.begin, r.count)
                            .maxCoeff();
                    const double m = masked_task_max(b, j, i, t, p);
                    if (!r.contains(static_cast<int>(pred)))
                        CHECK(m == doctest::Approx(slice_max));
                    else
                        CHECK(m <= slice_max + 1e-12);
                }
            }
    }
}

TEST_CASE("single-class task slices are rejected") {
    LogitBundleT<float> b;
    b.task_ranges = {{0, 1}, {1, 2}};
    Matf z(1, 3);
    z << 5.0f, 0.0f, 1.0f;  // prediction falls in the 1-class task
    b.logits.push_back(z);
    CHECK_THROWS_AS(masked_task_max(b, 0, 0, 1, {0, 0}), DataError);
    CHECK_THROWS_AS(build_tlc_stats(b), DataError);
}

TEST_CASE("closed-form two-task energy: E(0,0) = 2 and E = 0 on a+b = 2") {
    auto b = closed_form_bundle();
    CHECK(tlc_energy(b, {0, 0}) == doctest::Approx(2.0));
    CHECK(tlc_energy(b, {0.0, 2.0}) == doctest::Approx(0.0));
    CHECK(tlc_energy(b, {2.0, 0.0}) == doctest::Approx(0.0));
    CHECK(tlc_energy(b, {0.5, 1.5}) == doctest::Approx(0.0));

    // Already equal maxima -> zero energy at zero correction.
    LogitBundleT<float> eq;
    eq.task_ranges = {{0, 2}, {2, 2}};
    Matf z(1, 4);
    z << 4.0f, 4.0f, 4.0f, 4.0f;
    eq.logits.push_back(z);
    CHECK(tlc_energy(eq, {0, 0}) == doctest::Approx(0.0));
}

TEST_CASE("fast energy equals the literal masked-max energy") {
    for (std::uint64_t seed = 10; seed < 16; ++seed) {
        auto b = random_bundle(2 + seed % 3, 2 + seed % 4, 2 + seed % 2, 7, seed);
        auto st = build_tlc_stats(b);
        Rng rng(seed * 7);
        for (int k = 0; k < 12; ++k) {
            const double a = rng.uniform(-6, 6);
            const double bb = rng.uniform(-6, 6);
            const double fast = fast_tlc_energy(st, a, bb);
            const double slow = tlc_energy(b, {a, bb});
            CHECK(fast == doctest::Approx(slow).epsilon(1e-9));
            CHECK(fast >= 0.0);
        }
    }
}

TEST_CASE("grid sweep agrees with brute-force evaluation of every grid point") {
    for (std::uint64_t seed = 30; seed < 34; ++seed) {
        auto b = random_bundle(2, 3, 2, 5, seed);
        auto st = build_tlc_stats(b);
        TlcFitOptions opts;
        opts.grid_lo = -4;
        opts.grid_hi = 4;
        opts.grid_step = 0.5;
        opts.simplex_iters = 0;
        auto report = fit_tlc_from_stats(st, opts);

        double brute = std::numeric_limits<double>::infinity();
        for (double a = -4; a <= 4 + 1e-12; a += 0.5)
            for (double bb = -4; bb <= 4 + 1e-12; bb += 0.5)
                brute = std::min(brute, fast_tlc_energy(st, a, bb));
        CHECK(report.energy == doctest::Approx(brute).epsilon(1e-9));
    }
}

TEST_CASE("fit recovers the closed-form optimum") {
    auto b = closed_form_bundle();
    auto report = fit_tlc(b);
    CHECK(std::abs(report.params.a + report.params.b - 2.0) < 0.01);
    CHECK(report.energy <= 1e-4);
    CHECK(report.energy <= report.energy_at_zero);
    CHECK(report.energy_at_zero == doctest::Approx(2.0));
}

TEST_CASE("vacuous fits: one task returns zeros, empty trimmings") {
    LogitBundleT<float> b;
    b.task_ranges = {{0, 3}};
    Matf z(2, 3);
    z.setZero();
    b.logits.push_back(z);
    auto report = fit_tlc(b);
    CHECK(report.params.a == 0.0);
    CHECK(report.params.b == 0.0);
    CHECK(report.energy == 0.0);
    CHECK(tlc_energy(b, {1.0, 1.0}) == 0.0);
}

TEST_CASE("fitted energy never exceeds the zero-correction energy") {
    for (std::uint64_t seed = 40; seed < 46; ++seed) {
        auto b = random_bundle(3, 4, 2, 9, seed);
        auto report = fit_tlc(b);
        CHECK(report.energy <= report.energy_at_zero + 1e-12);
        CHECK(report.energy >= 0.0);
    }
}

TEST_CASE("fit beats a moderately fine brute-force grid") {
    for (std::uint64_t seed = 50; seed < 53; ++seed) {
        auto b = random_bundle(2, 3, 2, 4, seed);
        auto st = build_tlc_stats(b);
        auto report = fit_tlc_from_stats(st);
        double brute = std::numeric_limits<double>::infinity();
        for (double a = -10; a <= 10 + 1e-12; a += 0.05)
            for (double bb = -10; bb <= 10 + 1e-12; bb += 0.05)
                brute = std::min(brute, fast_tlc_energy(st, a, bb));
        CHECK(report.energy <= brute + 1e-3);
    }
}
