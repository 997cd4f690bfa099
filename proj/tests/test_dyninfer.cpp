#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "eelab/dyninfer.hpp"

using namespace eelab;

namespace {

EarlyExitNetworkT<float> demo_net(std::uint64_t seed = 8, int tasks = 2) {
    auto net = attach_ics(make_backbone<float>(6, 12, 4, seed), {0.25, 0.6});
    for (int t = 1; t <= tasks; ++t) add_task_head(net, t, 2);
    return net;
}

Matf random_inputs(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    Rng rng(seed);
    Matf x(n, d);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < d; ++c) x(r, c) = static_cast<float>(rng.uniform(-1, 1));
    return x;
}

std::vector<int> random_labels(Eigen::Index n, int classes, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> y;
    for (Eigen::Index i = 0; i < n; ++i)
        y.push_back(static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes))));
    return y;
}

}  // namespace

TEST_CASE("cost model: strictly increasing exit costs, full cost = 1 + overheads") {
    auto net = demo_net();
    CostModel cm = make_cost_model(net);
    REQUIRE(cm.num_classifiers() == 3);
    for (int i = 1; i < cm.num_classifiers(); ++i) CHECK(cm.exit_cost(i) > cm.exit_cost(i - 1));
    double ic_overheads = 0;
    for (int i = 0; i + 1 < cm.num_classifiers(); ++i) ic_overheads += cm.overhead[i];
    CHECK(cm.full_cost() == doctest::Approx(1.0 + ic_overheads).epsilon(1e-12));
    for (double o : cm.overhead) CHECK(o > 0);
}

TEST_CASE("exit rule: first crossing, immediate exit, and sentinel fallback") {
    auto net = demo_net();
    CostModel cm = make_cost_model(net);
    std::vector<ClassifierReadout> readouts{{0.3, 4}, {0.6, 1}, {0.9, 2}};

    auto mid = decide_exit(readouts, 0.5, cm);
    CHECK(mid.exit_index == 1);
    CHECK(mid.predicted_class == 1);
    CHECK(mid.exited_early);
    CHECK(mid.cost_fraction == cm.exit_cost(1));

    auto zero = decide_exit(readouts, 0.0, cm);
    CHECK(zero.exit_index == 0);
    CHECK(zero.cost_fraction == cm.exit_cost(0));

    auto none = decide_exit(readouts, 2.0, cm);
    CHECK(!none.exited_early);
    CHECK(none.exit_index == 2);  // argmax-confidence classifier
    CHECK(none.predicted_class == 2);
    CHECK(none.cost_fraction == cm.full_cost());

    // Fallback picks the most confident classifier even when it is early.
    std::vector<ClassifierReadout> peaked{{0.8, 3}, {0.5, 1}, {0.7, 2}};
    auto fb = decide_exit(peaked, 2.0, cm);
    CHECK(fb.exit_index == 0);
    CHECK(fb.predicted_class == 3);
    CHECK(fb.cost_fraction == cm.full_cost());
}

TEST_CASE("predict_dynamic: instrumented cost matches the reported cost") {
    auto net = demo_net(21);
    CostModel cm = make_cost_model(net);
    Matf x = random_inputs(10, 6, 33);
    for (double tau : {0.0, 0.4, 0.7, 2.0}) {
        ExitPolicy policy;
        policy.tau = tau;
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            DynStats stats;
            auto d = predict_dynamic(net, Matf(x.row(r)), policy, cm, &stats);
            CHECK(std::abs(stats.accounted_cost - d.cost_fraction) < 1e-9);
            if (tau == 0.0) {
                CHECK(d.exit_index == 0);
                CHECK(stats.stage_evals == net.classifiers[0].stage_index + 1);
            }
            if (tau == 2.0) CHECK(stats.stage_evals == static_cast<int>(net.stages.size()));
        }
    }
}

TEST_CASE("sweep endpoints: immediate exit and sentinel fallback") {
    auto net = demo_net(5);
    CostModel cm = make_cost_model(net);
    Matf x = random_inputs(40, 6, 7);
    std::vector<int> y = random_labels(40, 4, 8);

    ExitPolicy base;
    BudgetCurve curve = sweep_thresholds(net, x, y, base, {0.0, 2.0});
    REQUIRE(curve.points.size() == 2);
    CHECK(curve.points[0].tau == 0.0);
    CHECK(curve.points[0].avg_cost_fraction == doctest::Approx(cm.exit_cost(0)));

    // tau = 0 accuracy equals classifier 1's plain accuracy.
    auto bundle = forward_all(net, x);
    int correct = 0;
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        if (static_cast<int>(argmax_row(bundle.logits[0], r)) == y[static_cast<std::size_t>(r)])
            ++correct;
    CHECK(curve.points[0].accuracy == doctest::Approx(correct / 40.0));

    CHECK(curve.points[1].tau == 2.0);
    CHECK(curve.points[1].avg_cost_fraction == doctest::Approx(cm.full_cost()));
}

TEST_CASE("sweep replay equals per-sample dynamic prediction, bit-exact") {
    auto net = demo_net(101);
    CostModel cm = make_cost_model(net);
    Matf x = random_inputs(30, 6, 11);
    std::vector<int> y = random_labels(30, 4, 12);

    for (bool use_tlc : {false, true}) {
        ExitPolicy base;
        base.use_tlc = use_tlc;
        base.tlc = {0.5, -0.2};
        const std::vector<double> grid{0.0, 0.3, 0.5, 0.8, 1.0, 2.0};
        BudgetCurve curve = sweep_thresholds(net, x, y, base, grid);
        REQUIRE(curve.points.size() == grid.size());
        for (const CurvePoint& p : curve.points) {
            double cost_sum = 0;
            long correct = 0;
            for (Eigen::Index r = 0; r < x.rows(); ++r) {
                ExitPolicy policy = base;
                policy.tau = p.tau;
                auto d = predict_dynamic(net, Matf(x.row(r)), policy, cm);
                cost_sum += d.cost_fraction;
                if (d.predicted_class == y[static_cast<std::size_t>(r)]) ++correct;
            }
            CHECK(p.avg_cost_fraction == cost_sum / 30.0);
            CHECK(p.accuracy == static_cast<double>(correct) / 30.0);
        }
    }
}

TEST_CASE("raising tau never lowers a sample's exit index; average cost is monotone") {
    auto net = demo_net(55);
    CostModel cm = make_cost_model(net);
    Matf x = random_inputs(25, 6, 56);
    auto bundle = forward_all(net, x);
    auto cache = cache_readouts(bundle);
    std::vector<double> grid;
    for (int k = 0; k <= 20; ++k) grid.push_back(k / 20.0);
    grid.push_back(2.0);
    for (const auto& sample : cache) {
        int prev_exit = -1;
        for (double tau : grid) {
            auto d = decide_exit(sample, tau, cm);
            const int effective = d.exited_early ? d.exit_index
                                                 : static_cast<int>(sample.size()) - 1;
            CHECK(effective >= prev_exit);
            prev_exit = effective;
        }
    }
    BudgetCurve curve =
        sweep_thresholds(net, x, random_labels(25, 4, 57), ExitPolicy{}, grid);
    for (std::size_t i = 1; i < curve.points.size(); ++i)
        CHECK(curve.points[i].avg_cost_fraction >= curve.points[i - 1].avg_cost_fraction);
}

TEST_CASE("threshold_for_budget picks the largest affordable tau") {
    BudgetCurve curve;
    curve.points = {{0.0, 0.3, 0.50}, {0.5, 0.45, 0.60}, {1.0, 0.6, 0.70}};
    auto pick = threshold_for_budget(curve, 0.5);
    CHECK(pick.tau == 0.5);
    CHECK(pick.accuracy == 0.60);
    CHECK(pick.feasible);

    auto loose = threshold_for_budget(curve, 1.0);
    CHECK(loose.tau == 1.0);

    auto floor = threshold_for_budget(curve, 0.2);  // below the cheapest point
    CHECK(floor.tau == 0.0);
    CHECK(!floor.feasible);

    CHECK_THROWS_AS(threshold_for_budget(curve, 0.0), ConfigError);
    CHECK_THROWS_AS(threshold_for_budget(curve, 1.5), ConfigError);
}

TEST_CASE("overthinking: identical classifiers give zero gap; counting and union bound") {
    // IC attached to the last stage with heads copied from the final
    // classifier -> all classifiers identical.
    auto net = attach_ics(make_backbone<float>(4, 8, 2, 3), {0.99});
    add_task_head(net, 1, 3);
    net.params.value(head_w(0, 1)) = net.params.value(head_w(1, 1));
    net.params.value(head_b(0, 1)) = net.params.value(head_b(1, 1));
    REQUIRE(net.classifiers[0].stage_index == 1);
    Matf x = random_inputs(12, 4, 5);
    auto rep = overthinking(net, x, random_labels(12, 3, 6));
    CHECK(rep.gap == doctest::Approx(0.0));

    // Constructed 10-sample set: final wrong on 2, an IC right on both.
    auto net2 = demo_net(77);
    Matf x2 = random_inputs(10, 6, 78);
    auto bundle = forward_all(net2, x2);
    std::vector<int> labels;
    int flipped = 0;
    for (Eigen::Index r = 0; r < 10; ++r) {
        const int fin = static_cast<int>(argmax_row(bundle.logits.back(), r));
        const int ic = static_cast<int>(argmax_row(bundle.logits[0], r));
        if (flipped < 2 && ic != fin) {
            labels.push_back(ic);
            ++flipped;
        } else {
            labels.push_back(fin);
        }
    }
    REQUIRE(flipped == 2);
    auto rep2 = overthinking(net2, x2, labels);
    CHECK(rep2.final_accuracy == doctest::Approx(0.8));
    CHECK(rep2.oracle_accuracy == doctest::Approx(1.0));
    CHECK(rep2.gap == doctest::Approx(0.2));

    // Union bound on random labels.
    auto y3 = random_labels(10, 4, 79);
    auto rep3 = overthinking(net2, x2, y3);
    for (int i = 0; i < net2.num_classifiers(); ++i) {
        int correct = 0;
        for (Eigen::Index r = 0; r < 10; ++r)
            if (static_cast<int>(argmax_row(bundle.logits[i], r)) == y3[static_cast<std::size_t>(r)])
                ++correct;
        CHECK(rep3.oracle_accuracy >= correct / 10.0);
    }
    CHECK(rep3.gap >= 0.0);
}

TEST_CASE("single-task forgetting column equals plain accuracy; averaging identity") {
    auto net = demo_net(91, 1);
    ContinualScenarioT<float> sc;
    sc.num_classes = 2;
    TaskDataT<float> task;
    task.task_index = 1;
    task.classes = {0, 2};
    task.train_x = random_inputs(4, 6, 92);
    task.train_y = {0, 1, 0, 1};
    task.test_x = random_inputs(20, 6, 93);
    task.test_y = random_labels(20, 2, 94);
    sc.tasks.push_back(task);

    Matd fm = forgetting_matrix(net, sc);
    auto bundle = forward_all(net, task.test_x);
    for (int i = 0; i < net.num_classifiers(); ++i) {
        int correct = 0;
        for (Eigen::Index r = 0; r < 20; ++r)
            if (static_cast<int>(argmax_row(bundle.logits[i], r)) ==
                task.test_y[static_cast<std::size_t>(r)])
                ++correct;
        CHECK(fm(i, 0) == doctest::Approx(correct / 20.0));
    }

    // Task-aware with a single task coincides with class-incremental.
    Matd ta = task_aware_eval(net, sc);
    for (int i = 0; i < net.num_classifiers(); ++i) CHECK(ta(i, 0) == doctest::Approx(fm(i, 0)));
}

TEST_CASE("uniform logits give confidence 1/num_classes") {
    auto net = demo_net(95, 1);
    for (int i = 0; i < net.num_classifiers(); ++i) {
        net.params.value(head_w(i, 1)).setZero();
        net.params.value(head_b(i, 1)).setZero();
    }
    ContinualScenarioT<float> sc;
    sc.num_classes = 2;
    TaskDataT<float> task;
    task.task_index = 1;
    task.classes = {0, 2};
    task.train_x = random_inputs(2, 6, 96);
    task.train_y = {0, 1};
    task.test_x = random_inputs(8, 6, 97);
    task.test_y = {0, 0, 0, 0, 1, 1, 1, 1};
    sc.tasks.push_back(task);
    auto conf = confidence_by_task(net, sc);
    REQUIRE(conf.size() == 1);
    REQUIRE(conf[0].has_value());
    CHECK(*conf[0] == doctest::Approx(0.5));  // argmax ties to class 0, conf = 1/2
}

TEST_CASE("cross-task confusions: task-aware perfect, class-incremental not") {
    // One identity stage; task-2 heads double the task-1 logits, so
    // class-incremental predictions always land in task 2.
    auto net = attach_ics(make_backbone<float>(2, 2, 1, 1), {});
    add_task_head(net, 1, 2);
    add_task_head(net, 2, 2);
    net.params.value(stage_w(0)) = Matf::Identity(2, 2);
    net.params.value(stage_b(0)).setZero();
    Matf w1(2, 2), w2(2, 2);
    w1 << 1.f, 0.f, 0.f, 1.f;
    w2 << 2.f, 0.f, 0.f, 2.f;
    net.params.value(head_w(0, 1)) = w1;
    net.params.value(head_b(0, 1)).setZero();
    net.params.value(head_w(0, 2)) = w2;
    net.params.value(head_b(0, 2)).setZero();

    ContinualScenarioT<float> sc;
    sc.num_classes = 4;
    for (int t = 1; t <= 2; ++t) {
        TaskDataT<float> task;
        task.task_index = t;
        task.classes = {(t - 1) * 2, 2};
        Matf x(2, 2);
        x << 3.f, 1.f, 1.f, 3.f;
        task.train_x = x;
        task.test_x = x;
        task.train_y = {(t - 1) * 2, (t - 1) * 2 + 1};
        task.test_y = task.train_y;
        sc.tasks.push_back(task);
    }

    Matd ci = forgetting_matrix(net, sc);
    Matd ta = task_aware_eval(net, sc);
    CHECK(ta(0, 0) == doctest::Approx(1.0));
    CHECK(ta(0, 1) == doctest::Approx(1.0));
    CHECK(ci(0, 0) == doctest::Approx(0.0));  // task-1 samples predicted as task 2
    CHECK(ci(0, 1) == doctest::Approx(1.0));
    for (int i = 0; i < ta.rows(); ++i)
        for (int t = 0; t < ta.cols(); ++t) CHECK(ta(i, t) >= ci(i, t));

    // Absent confidence entry: task 1 has no correct final predictions.
    auto conf = confidence_by_task(net, sc);
    CHECK(!conf[0].has_value());
    CHECK(conf[1].has_value());
}

TEST_CASE("rectified nets: sweep and sequential prediction stay bit-exact") {
    auto net = demo_net(123);
    net.rectifier.assign(static_cast<std::size_t>(net.num_classifiers()), {0.8f, -0.6f});
    net.rectified_task = 2;
    CostModel cm = make_cost_model(net);
    Matf x = random_inputs(24, 6, 124);
    std::vector<int> y = random_labels(24, 4, 125);

    for (bool use_tlc : {false, true}) {
        ExitPolicy base;
        base.use_tlc = use_tlc;
        base.tlc = {0.7, 0.3};
        BudgetCurve curve = sweep_thresholds(net, x, y, base, {0.0, 0.4, 0.6, 0.9, 2.0});
        for (const CurvePoint& p : curve.points) {
            double cost_sum = 0;
            long correct = 0;
            for (Eigen::Index r = 0; r < x.rows(); ++r) {
                ExitPolicy policy = base;
                policy.tau = p.tau;
                auto d = predict_dynamic(net, Matf(x.row(r)), policy, cm);
                cost_sum += d.cost_fraction;
                if (d.predicted_class == y[static_cast<std::size_t>(r)]) ++correct;
            }
            CHECK(p.avg_cost_fraction == cost_sum / 24.0);
            CHECK(p.accuracy == static_cast<double>(correct) / 24.0);
        }
    }
}

TEST_CASE("feature-reduction projections feed the cost model overhead") {
    auto net = attach_ics(make_backbone<float>(6, 24, 3, 9), {0.4}, 8);  // 24 -> 8 projection
    add_task_head(net, 1, 3);
    REQUIRE(net.classifiers[0].projection.has_value());
    REQUIRE(net.classifiers[0].reduced_width == 8);

    CostModel cm = make_cost_model(net);
    // IC overhead includes the projection: 2*24*8 plus the head 2*8*3.
    const double expected = (2.0 * 24 * 8 + 2.0 * 8 * 3) / cm.standard_flops;
    CHECK(cm.overhead[0] == doctest::Approx(expected));

    // Sequential prediction agrees with the cached bundle through the
    // projection path.
    Matf x = random_inputs(5, 6, 10);
    auto bundle = forward_all(net, x);
    for (Eigen::Index r = 0; r < 5; ++r) {
        ExitPolicy policy;
        policy.tau = 0.0;
        auto d = predict_dynamic(net, Matf(x.row(r)), policy, cm);
        CHECK(d.exit_index == 0);
        CHECK(d.predicted_class == static_cast<int>(argmax_row(bundle.logits[0], r)));
        CHECK(d.cost_fraction == cm.exit_cost(0));
    }
}

TEST_CASE("tlc leaves single-task oracle accuracy unchanged") {
    auto net = demo_net(99, 1);
    Matf x = random_inputs(15, 6, 98);
    auto bundle = forward_all(net, x);
    auto corrected = apply_tlc(bundle, {3.0, -1.0}, 1);
    for (std::size_t i = 0; i < bundle.logits.size(); ++i)
        CHECK((bundle.logits[i].array() == corrected.logits[i].array()).all());
}
