#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "eelab/eenet.hpp"
#include "eelab/train.hpp"

using namespace eelab;

namespace {

// Backbone with prescribed stage cost fractions (flops set directly).
BackboneT<float> backbone_with_fractions(const std::vector<double>& flops) {
    BackboneT<float> bb;
    bb.input_dim = 4;
    double total = 0;
    for (double f : flops) total += f;
    double cum = 0;
    for (std::size_t i = 0; i < flops.size(); ++i) {
        StageSpec s;
        s.in_width = 4;
        s.out_width = 4;
        s.flops = flops[i];
        cum += flops[i];
        s.cum_cost_fraction = cum / total;
        bb.stages.push_back(s);
        Rng rng(derive_seed(1, "s", i));
        bb.params.add(stage_w(static_cast<int>(i)), glorot_uniform<float>(4, 4, rng));
        bb.params.add(stage_b(static_cast<int>(i)), Matf::Zero(1, 4));
    }
    return bb;
}

TaskDataT<float> two_cluster_task(int n_per_class, double spread, std::uint64_t seed) {
    TaskDataT<float> task;
    task.task_index = 1;
    task.classes = {0, 2};
    Rng rng(seed);
    const int n = 2 * n_per_class;
    task.train_x.resize(n, 2);
    for (int c = 0; c < 2; ++c) {
        const double cx = c == 0 ? 0.0 : 3.0;
        for (int i = 0; i < n_per_class; ++i) {
            const int row = c * n_per_class + i;
            task.train_x(row, 0) = static_cast<float>(cx + spread * rng.gaussian());
            task.train_x(row, 1) = static_cast<float>(cx + spread * rng.gaussian());
            task.train_y.push_back(c);
        }
    }
    task.test_x = task.train_x;
    task.test_y = task.train_y;
    return task;
}

std::uint64_t param_checksum(const ParamStoreT<float>& store) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, e] : store) {
        for (Eigen::Index i = 0; i < e.value.size(); ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, e.value.data() + i, 4);
            h ^= bits;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

}  // namespace

TEST_CASE("attach_ics picks the stage nearest each target fraction") {
    {
        auto net = attach_ics(backbone_with_fractions({20, 30, 50}), {0.15, 0.45});
        REQUIRE(net.num_internal() == 2);
        CHECK(net.classifiers[0].stage_index == 0);
        CHECK(net.classifiers[1].stage_index == 1);
        CHECK(net.backbone_fraction(0) == doctest::Approx(0.2));
        CHECK(net.backbone_fraction(1) == doctest::Approx(0.5));
        CHECK(net.classifiers.back().stage_index == 2);  // final classifier
    }
    {
        // 7 equal stages, the six canonical targets -> one IC per stage 1..6.
        auto net = attach_ics(backbone_with_fractions(std::vector<double>(7, 1.0)),
                              {0.15, 0.30, 0.45, 0.60, 0.75, 0.90});
        REQUIRE(net.num_internal() == 6);
        for (int i = 0; i < 6; ++i) CHECK(net.classifiers[i].stage_index == i);
    }
    {
        auto net = attach_ics(backbone_with_fractions({1, 1}), {0.5});
        CHECK(net.classifiers[0].stage_index == 0);
        CHECK(net.backbone_fraction(0) == doctest::Approx(0.5));
    }
    CHECK_THROWS_AS(attach_ics(backbone_with_fractions({1, 1}), {0.2, 0.5, 0.8}), ConfigError);
    CHECK_THROWS_AS(attach_ics(backbone_with_fractions({1, 1}), {0.5, 0.4}), ConfigError);
    CHECK_THROWS_AS(attach_ics(backbone_with_fractions({1, 1}), {1.5}), ConfigError);
}

TEST_CASE("task heads grow in order and produce disjoint slices") {
    auto net = attach_ics(backbone_with_fractions({1, 1, 1}), {0.3});
    CHECK_THROWS_AS(forward_all(net, Matf(Matf::Zero(1, 4))), ProtocolError);

    add_task_head(net, 1, 2);
    for (int i = 0; i < net.num_classifiers(); ++i)
        CHECK(net.params.value(head_w(i, 1)).cols() == 2);
    CHECK(net.num_classes() == 2);

    CHECK_THROWS_AS(add_task_head(net, 3, 2), ProtocolError);

    add_task_head(net, 2, 3);
    CHECK(net.num_classes() == 5);
    CHECK(net.tasks[0].begin == 0);
    CHECK(net.tasks[0].count == 2);
    CHECK(net.tasks[1].begin == 2);
    CHECK(net.tasks[1].count == 3);

    auto bundle = forward_all(net, Matf(Matf::Zero(2, 4)));
    for (const auto& z : bundle.logits) {
        CHECK(z.rows() == 2);
        CHECK(z.cols() == 5);
    }
}

TEST_CASE("forward_all shares one backbone pass and matches recomputation") {
    auto bb = make_backbone<float>(6, 16, 4, 42);
    auto net = attach_ics(std::move(bb), {0.25, 0.75});
    add_task_head(net, 1, 3);
    add_task_head(net, 2, 2);

    Rng rng(5);
    Matf x(8, 6);
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = static_cast<float>(rng.uniform(-1, 1));

    ForwardStats stats;
    auto bundle = forward_all(net, x, &stats);
    CHECK(stats.stage_evals == 4);

    // Recompute each classifier independently from the input.
    for (int i = 0; i < net.num_classifiers(); ++i) {
        Matf h = x;
        for (int s = 0; s <= net.classifiers[i].stage_index; ++s)
            h = relu<float>(linear<float>(h, net.params.value(stage_w(s)),
                                          net.params.value(stage_b(s))));
        Matf reduced = reduce_features(net, i, h);
        Matf logits = classifier_logits(net, i, reduced);
        CHECK((logits - bundle.logits[i]).cwiseAbs().maxCoeff() < 1e-6f);
    }

    // Per-task slices concatenate, in task order, to the full row.
    CHECK(bundle.task_ranges[0].begin == 0);
    CHECK(bundle.task_ranges[1].begin == bundle.task_ranges[0].end());
    CHECK(bundle.task_ranges[1].end() == bundle.num_classes());
}

TEST_CASE("zero heads give zero logits; doubling heads keeps argmax") {
    auto net = attach_ics(make_backbone<float>(4, 8, 3, 7), {0.4});
    add_task_head(net, 1, 3);
    for (int i = 0; i < net.num_classifiers(); ++i) {
        net.params.value(head_w(i, 1)).setZero();
        net.params.value(head_b(i, 1)).setZero();
    }
    Matf x = Matf::Ones(2, 4);
    auto bundle = forward_all(net, x);
    for (const auto& z : bundle.logits) CHECK(z.cwiseAbs().maxCoeff() == 0.0f);
    Matf p = softmax_rows(bundle.logits[0]);
    CHECK(p(0, 0) == doctest::Approx(1.0 / 3));

    // Fresh random heads; scaling all heads by 2 preserves every argmax.
    auto net2 = attach_ics(make_backbone<float>(4, 8, 3, 7), {0.4});
    add_task_head(net2, 1, 5);
    Rng rng(9);
    Matf xr(16, 4);
    for (Eigen::Index r = 0; r < xr.rows(); ++r)
        for (Eigen::Index c = 0; c < xr.cols(); ++c)
            xr(r, c) = static_cast<float>(rng.uniform(-1, 1));
    auto before = forward_all(net2, xr);
    for (int i = 0; i < net2.num_classifiers(); ++i) {
        net2.params.value(head_w(i, 1)) *= 2.0f;
        net2.params.value(head_b(i, 1)) *= 2.0f;
    }
    auto after = forward_all(net2, xr);
    for (int i = 0; i < net2.num_classifiers(); ++i)
        for (Eigen::Index r = 0; r < xr.rows(); ++r)
            CHECK(argmax_row(before.logits[i], r) == argmax_row(after.logits[i], r));
}

TEST_CASE("ic loss weights ramp linearly from 0.01 to the cost fraction") {
    auto w0 = ic_loss_weights(0, 10, {0.15, 0.5});
    CHECK(w0[0] == doctest::Approx(0.01));
    CHECK(w0[1] == doctest::Approx(0.01));
    CHECK(w0[2] == doctest::Approx(1.0));

    auto wend = ic_loss_weights(9, 10, {0.15, 0.5});
    CHECK(wend[0] == doctest::Approx(0.15));
    CHECK(wend[1] == doctest::Approx(0.5));
    CHECK(wend[2] == doctest::Approx(1.0));

    auto wmid = ic_loss_weights(5, 11, {0.9});
    CHECK(wmid[0] == doctest::Approx(0.455));

    CHECK_THROWS_AS(ic_loss_weights(10, 10, {0.5}), ConfigError);
}

TEST_CASE("zero-weight IC losses leave IC heads at initialization") {
    auto net = attach_ics(make_backbone<float>(2, 8, 2, 3), {0.5});
    add_task_head(net, 1, 2);
    const Matf ic_w0 = net.params.value(head_w(0, 1));
    const Matf fin_w0 = net.params.value(head_w(1, 1));

    Matf x(4, 2);
    x << 0.f, 0.f, 1.f, 1.f, 0.f, 1.f, 1.f, 0.f;
    const std::vector<int> y{0, 1, 0, 1};
    for (int step = 0; step < 5; ++step) {
        GraphT<float> g;
        auto logits = forward_graph(net, g, g.constant(x));
        std::vector<GraphT<float>::Value> losses;
        for (auto& l : logits) losses.push_back(g.softmax_cross_entropy(l, y));
        const std::vector<float> w{0.0f, 1.0f};  // IC weight forced to zero
        auto total = g.weighted_sum(losses, w);
        g.backward(total);
        net.params.sgd_step(0.1f, 0.9f);
        net.params.zero_grads();
    }
    CHECK((net.params.value(head_w(0, 1)).array() == ic_w0.array()).all());
    CHECK(!(net.params.value(head_w(1, 1)).array() == fin_w0.array()).all());
}

TEST_CASE("training a separable task reaches high accuracy at every classifier") {
    auto task = two_cluster_task(40, 0.3, 1234);
    auto net = attach_ics(make_backbone<float>(2, 16, 2, 11), {0.5});
    add_task_head(net, 1, 2);

    TrainConfig tc;
    tc.epochs = 60;
    tc.batch_size = 32;
    tc.schedule.base_lr = 0.1;
    tc.schedule.milestones = {40};
    tc.schedule.decay = 0.1;
    MethodHooksT<float> hooks;
    TrainStats stats = train_task(net, task, tc, hooks, 77);
    CHECK(stats.steps == 60 * 3);  // 80 samples, batch 32 -> 3 batches

    auto bundle = forward_all(net, task.train_x);
    for (int i = 0; i < net.num_classifiers(); ++i) {
        int correct = 0;
        for (Eigen::Index r = 0; r < bundle.logits[i].rows(); ++r)
            if (static_cast<int>(argmax_row(bundle.logits[i], r)) == task.train_y[r]) ++correct;
        CHECK(static_cast<double>(correct) / task.train_y.size() >= 0.99);
    }
}

TEST_CASE("zero epochs leave parameters unchanged; empty data rejected") {
    auto task = two_cluster_task(10, 0.3, 5);
    auto net = attach_ics(make_backbone<float>(2, 8, 2, 3), {0.5});
    add_task_head(net, 1, 2);
    const std::uint64_t before = param_checksum(net.params);
    TrainConfig tc;
    tc.epochs = 0;
    train_task(net, task, tc, MethodHooksT<float>{}, 1);
    CHECK(param_checksum(net.params) == before);

    TaskDataT<float> empty;
    empty.task_index = 1;
    empty.classes = {0, 2};
    empty.train_x.resize(0, 2);
    CHECK_THROWS_AS(train_task(net, empty, tc, MethodHooksT<float>{}, 1), ConfigError);
}

TEST_CASE("first epoch does not increase the toy-task loss (3 seeds)") {
    for (std::uint64_t seed : {100ULL, 200ULL, 300ULL}) {
        auto task = two_cluster_task(30, 0.4, seed);
        auto net = attach_ics(make_backbone<float>(2, 8, 2, seed), {0.5});
        add_task_head(net, 1, 2);

        auto weighted_loss = [&](const EarlyExitNetworkT<float>& n) {
            GraphT<float> g;
            EarlyExitNetworkT<float> copy = n;
            auto logits = forward_graph(copy, g, g.constant(task.train_x));
            std::vector<GraphT<float>::Value> losses;
            for (auto& l : logits) losses.push_back(g.softmax_cross_entropy(l, task.train_y));
            const std::vector<double> wd = ic_loss_weights(0, 5, n.ic_fractions());
            std::vector<float> w(wd.begin(), wd.end());
            return static_cast<double>(g.value(g.weighted_sum(losses, w))(0, 0));
        };

        const double before = weighted_loss(net);
        TrainConfig tc;
        tc.epochs = 1;
        tc.batch_size = 30;
        tc.schedule.base_lr = 0.05;
        train_task(net, task, tc, MethodHooksT<float>{}, seed);
        const double after = weighted_loss(net);
        CHECK(after <= before);
    }
}

TEST_CASE("identical seed and config give bit-identical training") {
    auto task = two_cluster_task(20, 0.4, 9);
    auto make = [&] {
        auto net = attach_ics(make_backbone<float>(2, 8, 3, 21), {0.3, 0.7});
        add_task_head(net, 1, 2);
        TrainConfig tc;
        tc.epochs = 4;
        tc.batch_size = 16;
        train_task(net, task, tc, MethodHooksT<float>{}, 55);
        return param_checksum(net.params);
    };
    CHECK(make() == make());
}

TEST_CASE("frozen projections stay fixed while the rest trains") {
    auto task = two_cluster_task(30, 0.3, 77);
    auto net = attach_ics(make_backbone<float>(2, 16, 2, 13), {0.5}, 4);  // 16 -> 4 FR
    add_task_head(net, 1, 2);
    REQUIRE(net.classifiers[0].projection.has_value());
    const Matf frozen = *net.classifiers[0].projection;

    TrainConfig tc;
    tc.epochs = 40;
    tc.batch_size = 32;
    tc.schedule.base_lr = 0.1;
    tc.schedule.milestones = {30};
    train_task(net, task, tc, MethodHooksT<float>{}, 7);

    CHECK((net.classifiers[0].projection->array() == frozen.array()).all());
    auto bundle = forward_all(net, task.train_x);
    int correct = 0;
    for (Eigen::Index r = 0; r < bundle.logits[0].rows(); ++r)
        if (static_cast<int>(argmax_row(bundle.logits[0], r)) == task.train_y[r]) ++correct;
    CHECK(static_cast<double>(correct) / task.train_y.size() >= 0.95);
}

TEST_CASE("gradient clipping caps the global norm") {
    ParamStoreT<float> store;
    store.add("a", Matf::Zero(1, 3));
    store.add("b", Matf::Zero(1, 4));
    store.grad("a") << 3.0f, 0.0f, 0.0f;
    store.grad("b") << 0.0f, 4.0f, 0.0f, 0.0f;  // global norm 5
    store.clip_grad_norm(1.0f);
    double norm = std::sqrt(store.grad("a").squaredNorm() + store.grad("b").squaredNorm());
    CHECK(norm == doctest::Approx(1.0));
    CHECK(store.grad("a")(0, 0) == doctest::Approx(0.6));

    // Below the cap: untouched.
    store.clip_grad_norm(10.0f);
    CHECK(store.grad("a")(0, 0) == doctest::Approx(0.6));
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    auto net = attach_ics(make_backbone<float>(5, 12, 3, 77), {0.3, 0.8}, 6);
    add_task_head(net, 1, 2);
    add_task_head(net, 2, 4);
    net.rectifier = {{1.0f, 0.0f}, {0.9f, -0.25f}, {1.1f, 0.5f}};
    net.rectified_task = 2;

    const std::string path = "checkpoint_test.eenet";
    save_checkpoint(net, path);
    auto loaded = load_checkpoint<float>(path);

    CHECK(loaded.input_dim == net.input_dim);
    CHECK(loaded.stages.size() == net.stages.size());
    CHECK(loaded.tasks.size() == net.tasks.size());
    CHECK(loaded.rectified_task == 2);
    REQUIRE(loaded.params.size() == net.params.size());
    for (const auto& [name, e] : net.params) {
        const Matf& other = loaded.params.value(name);
        REQUIRE(other.rows() == e.value.rows());
        REQUIRE(other.cols() == e.value.cols());
        CHECK((other.array() == e.value.array()).all());
    }
    for (std::size_t i = 0; i < net.classifiers.size(); ++i) {
        REQUIRE(loaded.classifiers[i].projection.has_value() ==
                net.classifiers[i].projection.has_value());
        if (net.classifiers[i].projection)
            CHECK((loaded.classifiers[i].projection->array() ==
                   net.classifiers[i].projection->array())
                      .all());
    }

    Rng rng(2);
    Matf x(3, 5);
    for (Eigen::Index r = 0; r < 3; ++r)
        for (Eigen::Index c = 0; c < 5; ++c) x(r, c) = static_cast<float>(rng.uniform(-1, 1));
    auto a = forward_all(net, x);
    auto b = forward_all(loaded, x);
    for (int i = 0; i < net.num_classifiers(); ++i)
        CHECK((a.logits[i].array() == b.logits[i].array()).all());
    auto ar = collect_logits(net, x);
    auto br = collect_logits(loaded, x);
    for (int i = 0; i < net.num_classifiers(); ++i)
        CHECK((ar.logits[i].array() == br.logits[i].array()).all());
    std::remove(path.c_str());
}
