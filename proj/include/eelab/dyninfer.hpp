#pragma once

#include <optional>
#include <vector>

#include "eelab/eenet.hpp"
#include "eelab/scenario.hpp"
#include "eelab/tlc.hpp"

namespace eelab {

// Exit rule: leave at the first classifier whose max-softmax confidence over
// the full (corrected) logit row strictly exceeds tau. Values above 1 act as
// a never-exit sentinel.
struct ExitPolicy {
    double tau = 0.5;
    bool use_tlc = false;
    TlcParams tlc;

    static ExitPolicy sentinel(bool use_tlc = false, TlcParams tlc = {}) {
        return ExitPolicy{2.0, use_tlc, tlc};
    }
};

// Analytic FLOPs accounting relative to the standard network (backbone plus
// final classifier, no ICs). IC overhead covers its projection and heads.
struct CostModel {
    std::vector<double> backbone_frac;  // per classifier, in standard-network units
    std::vector<double> overhead;       // per classifier
    std::vector<double> stage_frac;     // per backbone stage
    double standard_flops = 0;

    int num_classifiers() const { return static_cast<int>(backbone_frac.size()); }

    // Cost of exiting at classifier i: backbone up to its stage plus the
    // overhead of every classifier evaluated so far.
    double exit_cost(int i) const {
        double c = backbone_frac[static_cast<std::size_t>(i)];
        for (int k = 0; k <= i; ++k) c += overhead[static_cast<std::size_t>(k)];
        return c;
    }

    // Full pass: every IC evaluated, final classifier answers.
    double full_cost() const { return exit_cost(num_classifiers() - 1); }
};

template <typename Scalar>
double classifier_overhead_flops(const EarlyExitNetworkT<Scalar>& net, int classifier) {
    const auto& c = net.classifiers[static_cast<std::size_t>(classifier)];
    double flops = 0;
    if (c.projection)
        flops += 2.0 * net.stages[static_cast<std::size_t>(c.stage_index)].out_width *
                 c.reduced_width;
    for (const ClassRange& t : net.tasks) flops += 2.0 * c.reduced_width * t.count;
    return flops;
}

template <typename Scalar>
CostModel make_cost_model(const EarlyExitNetworkT<Scalar>& net) {
    CostModel cm;
    double backbone = 0;
    for (const auto& s : net.stages) backbone += s.flops;
    const int fin = net.num_classifiers() - 1;
    cm.standard_flops = backbone + classifier_overhead_flops(net, fin);
    for (const auto& s : net.stages) cm.stage_frac.push_back(s.flops / cm.standard_flops);
    for (int i = 0; i < net.num_classifiers(); ++i) {
        cm.backbone_frac.push_back(net.stages[net.classifiers[i].stage_index].cum_cost_fraction *
                                   backbone / cm.standard_flops);
        cm.overhead.push_back(classifier_overhead_flops(net, i) / cm.standard_flops);
    }
    return cm;
}

struct ExitDecision {
    int predicted_class = -1;
    int exit_index = -1;       // classifier whose prediction is returned
    bool exited_early = false;  // false means the fallback rule fired
    double cost_fraction = 0;
};

// Cached per-sample view of one classifier's output.
struct ClassifierReadout {
    double confidence = 0;
    int predicted_class = -1;
};

template <typename Scalar>
ClassifierReadout readout_row(const MatX<Scalar>& logits, Eigen::Index row) {
    ClassifierReadout r;
    Eigen::Index arg = 0;
    double maxv = static_cast<double>(logits(row, 0));
    for (Eigen::Index c = 1; c < logits.cols(); ++c)
        if (static_cast<double>(logits(row, c)) > maxv) {
            maxv = static_cast<double>(logits(row, c));
            arg = c;
        }
    double denom = 0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c)
        denom += std::exp(static_cast<double>(logits(row, c)) - maxv);
    r.confidence = 1.0 / denom;
    r.predicted_class = static_cast<int>(arg);
    return r;
}

inline ExitDecision decide_exit(const std::vector<ClassifierReadout>& readouts, double tau,
                                const CostModel& cost) {
    ExitDecision d;
    for (std::size_t i = 0; i < readouts.size(); ++i) {
        if (readouts[i].confidence > tau) {
            d.predicted_class = readouts[i].predicted_class;
            d.exit_index = static_cast<int>(i);
            d.exited_early = true;  // threshold crossing, as opposed to fallback
            d.cost_fraction = cost.exit_cost(static_cast<int>(i));
            return d;
        }
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < readouts.size(); ++i)
        if (readouts[i].confidence > readouts[best].confidence) best = i;
    d.predicted_class = readouts[best].predicted_class;
    d.exit_index = static_cast<int>(best);
    d.exited_early = false;
    d.cost_fraction = cost.full_cost();
    return d;
}

struct DynStats {
    int stage_evals = 0;
    int classifier_evals = 0;
    double accounted_cost = 0;  // stage fractions + evaluated-classifier overheads
};

// Sequential early-exit inference for one sample: stages run only as far as
// the exit requires, and the instrumented cost matches the reported one.
template <typename Scalar>
ExitDecision predict_dynamic(const EarlyExitNetworkT<Scalar>& net, const MatX<Scalar>& sample,
                             const ExitPolicy& policy, const CostModel& cost,
                             DynStats* stats = nullptr) {
    if (sample.rows() != 1) throw DimensionError("predict_dynamic: expects a single row");
    const int T = net.num_tasks();
    std::vector<MatX<Scalar>> feats;
    MatX<Scalar> cur = sample;
    auto ensure_stage = [&](int upto) {
        while (static_cast<int>(feats.size()) <= upto) {
            const int s = static_cast<int>(feats.size());
            cur = relu<Scalar>(
                linear<Scalar>(cur, net.params.value(stage_w(s)), net.params.value(stage_b(s))));
            feats.push_back(cur);
            if (stats) {
                ++stats->stage_evals;
                stats->accounted_cost += cost.stage_frac[static_cast<std::size_t>(s)];
            }
        }
    };
    std::vector<ClassifierReadout> readouts;
    for (int i = 0; i < net.num_classifiers(); ++i) {
        ensure_stage(net.classifiers[i].stage_index);
        MatX<Scalar> reduced = reduce_features(net, i, feats[net.classifiers[i].stage_index]);
        MatX<Scalar> logits = classifier_logits(net, i, reduced);
        if (!net.rectifier.empty() && net.rectified_task >= 1 &&
            net.rectified_task <= net.num_tasks()) {
            const ClassRange r = net.tasks[static_cast<std::size_t>(net.rectified_task - 1)];
            auto block = logits.middleCols(r.begin, r.count);
            block = (block.array() * net.rectifier[i].first + net.rectifier[i].second).matrix();
        }
        if (policy.use_tlc) {
            for (int t = 1; t < T; ++t) {
                const Scalar c = static_cast<Scalar>(tlc_offset(policy.tlc, t, T));
                const ClassRange r = net.tasks[static_cast<std::size_t>(t - 1)];
                logits.middleCols(r.begin, r.count).array() += c;
            }
        }
        if (stats) {
            ++stats->classifier_evals;
            stats->accounted_cost += cost.overhead[static_cast<std::size_t>(i)];
        }
        readouts.push_back(readout_row(logits, 0));
        if (readouts.back().confidence > policy.tau) break;
    }
    // If an exit fired, readouts ends at that classifier and decide_exit
    // reproduces the same pick; otherwise all classifiers are present and the
    // fallback rule applies.
    return decide_exit(readouts, policy.tau, cost);
}

// ---------------------------------------------------------------------------
// Threshold sweeps over cached bundles
// ---------------------------------------------------------------------------
struct CurvePoint {
    double tau = 0;
    double avg_cost_fraction = 0;
    double accuracy = 0;
};

struct BudgetCurve {
    std::vector<CurvePoint> points;  // sorted by tau, unique taus
};

template <typename Scalar>
std::vector<std::vector<ClassifierReadout>> cache_readouts(const LogitBundleT<Scalar>& bundle) {
    std::vector<std::vector<ClassifierReadout>> cache(
        static_cast<std::size_t>(bundle.num_samples()));
    for (Eigen::Index j = 0; j < bundle.num_samples(); ++j) {
        cache[static_cast<std::size_t>(j)].reserve(bundle.logits.size());
        for (const auto& z : bundle.logits)
            cache[static_cast<std::size_t>(j)].push_back(readout_row(z, j));
    }
    return cache;
}

// One forward pass caches every classifier's confidence; curve points replay
// the exit rule per tau with no re-forwarding.
template <typename Scalar>
BudgetCurve sweep_thresholds(const EarlyExitNetworkT<Scalar>& net, const MatX<Scalar>& test_x,
                             const std::vector<int>& test_y, const ExitPolicy& policy_base,
                             std::vector<double> grid) {
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    LogitBundleT<Scalar> bundle = collect_logits(net, test_x);
    if (policy_base.use_tlc) bundle = apply_tlc(bundle, policy_base.tlc, bundle.num_tasks());
    const CostModel cost = make_cost_model(net);
    const auto cache = cache_readouts(bundle);

    BudgetCurve curve;
    for (double tau : grid) {
        double cost_sum = 0;
        long correct = 0;
        for (std::size_t j = 0; j < cache.size(); ++j) {
            const ExitDecision d = decide_exit(cache[j], tau, cost);
            cost_sum += d.cost_fraction;
            if (d.predicted_class == test_y[j]) ++correct;
        }
        CurvePoint p;
        p.tau = tau;
        p.avg_cost_fraction = cache.empty() ? 0 : cost_sum / static_cast<double>(cache.size());
        p.accuracy = cache.empty() ? 0 : static_cast<double>(correct) / static_cast<double>(cache.size());
        curve.points.push_back(p);
    }
    return curve;
}

struct BudgetPick {
    double budget = 0;
    double tau = 0;
    double avg_cost_fraction = 0;
    double accuracy = 0;
    bool feasible = false;
};

// Largest grid tau whose average cost fits the budget; tau = 0 with an
// infeasibility flag when even the cheapest point exceeds it.
inline BudgetPick threshold_for_budget(const BudgetCurve& curve, double budget) {
    if (curve.points.empty()) throw DataError("threshold_for_budget: empty curve");
    if (!(budget > 0.0 && budget <= 1.0))
        throw ConfigError("threshold_for_budget: budget must be in (0, 1]");
    BudgetPick pick;
    pick.budget = budget;
    for (const CurvePoint& p : curve.points) {
        if (p.avg_cost_fraction <= budget) {
            pick.tau = p.tau;
            pick.avg_cost_fraction = p.avg_cost_fraction;
            pick.accuracy = p.accuracy;
            pick.feasible = true;
        }
    }
    if (!pick.feasible) {
        pick.tau = 0.0;
        pick.avg_cost_fraction = curve.points.front().avg_cost_fraction;
        pick.accuracy = curve.points.front().accuracy;
    }
    return pick;
}

// ---------------------------------------------------------------------------
// Analysis metrics
// ---------------------------------------------------------------------------
struct OverthinkingReport {
    double oracle_accuracy = 0;
    double final_accuracy = 0;
    double gap = 0;
};

// Oracle counts a sample correct if any classifier's argmax hits the label.
template <typename Scalar>
OverthinkingReport overthinking(const EarlyExitNetworkT<Scalar>& net, const MatX<Scalar>& test_x,
                                const std::vector<int>& test_y) {
    LogitBundleT<Scalar> bundle = collect_logits(net, test_x);
    long oracle = 0, fin = 0;
    const int last = bundle.num_classifiers() - 1;
    for (Eigen::Index j = 0; j < bundle.num_samples(); ++j) {
        bool any = false;
        for (int i = 0; i < bundle.num_classifiers(); ++i) {
            const Eigen::Index arg = argmax_row(bundle.logits[i], j);
            if (static_cast<int>(arg) == test_y[static_cast<std::size_t>(j)]) {
                any = true;
                if (i == last) ++fin;
            }
        }
        if (any) ++oracle;
    }
    const double n = static_cast<double>(std::max<Eigen::Index>(bundle.num_samples(), 1));
    OverthinkingReport r;
    r.oracle_accuracy = oracle / n;
    r.final_accuracy = fin / n;
    r.gap = r.oracle_accuracy - r.final_accuracy;
    return r;
}

// accuracy[classifier][task], class-incremental argmax over all classes.
template <typename Scalar>
Matd forgetting_matrix(const EarlyExitNetworkT<Scalar>& net,
                       const ContinualScenarioT<Scalar>& scenario) {
    Matd acc = Matd::Zero(net.num_classifiers(), scenario.num_tasks());
    for (int t = 0; t < scenario.num_tasks(); ++t) {
        const auto& task = scenario.tasks[static_cast<std::size_t>(t)];
        if (task.test_x.rows() == 0) continue;
        LogitBundleT<Scalar> bundle = collect_logits(net, task.test_x);
        for (int i = 0; i < bundle.num_classifiers(); ++i) {
            long correct = 0;
            for (Eigen::Index j = 0; j < bundle.num_samples(); ++j)
                if (static_cast<int>(argmax_row(bundle.logits[i], j)) ==
                    task.test_y[static_cast<std::size_t>(j)])
                    ++correct;
            acc(i, t) = static_cast<double>(correct) / static_cast<double>(bundle.num_samples());
        }
    }
    return acc;
}

// Mean max-softmax of the final classifier's correct predictions per task;
// absent (nullopt) for tasks with no correct prediction.
template <typename Scalar>
std::vector<std::optional<double>> confidence_by_task(const EarlyExitNetworkT<Scalar>& net,
                                                      const ContinualScenarioT<Scalar>& scenario) {
    std::vector<std::optional<double>> out;
    for (const auto& task : scenario.tasks) {
        if (task.test_x.rows() == 0) {
            out.push_back(std::nullopt);
            continue;
        }
        LogitBundleT<Scalar> bundle = collect_logits(net, task.test_x);
        const auto& z = bundle.logits.back();
        double sum = 0;
        long correct = 0;
        for (Eigen::Index j = 0; j < z.rows(); ++j) {
            const ClassifierReadout r = readout_row(z, j);
            if (r.predicted_class == task.test_y[static_cast<std::size_t>(j)]) {
                sum += r.confidence;
                ++correct;
            }
        }
        if (correct == 0)
            out.push_back(std::nullopt);
        else
            out.push_back(sum / static_cast<double>(correct));
    }
    return out;
}

// accuracy[classifier][task] with the task ID given: argmax restricted to the
// task's own slice.
template <typename Scalar>
Matd task_aware_eval(const EarlyExitNetworkT<Scalar>& net,
                     const ContinualScenarioT<Scalar>& scenario) {
    Matd acc = Matd::Zero(net.num_classifiers(), scenario.num_tasks());
    for (int t = 0; t < scenario.num_tasks(); ++t) {
        const auto& task = scenario.tasks[static_cast<std::size_t>(t)];
        if (task.test_x.rows() == 0) continue;
        LogitBundleT<Scalar> bundle = collect_logits(net, task.test_x);
        for (int i = 0; i < bundle.num_classifiers(); ++i) {
            long correct = 0;
            for (Eigen::Index j = 0; j < bundle.num_samples(); ++j) {
                const Eigen::Index arg =
                    argmax_row(bundle.logits[i], j, task.classes.begin, task.classes.count);
                if (static_cast<int>(arg) == task.test_y[static_cast<std::size_t>(j)]) ++correct;
            }
            acc(i, t) = static_cast<double>(correct) / static_cast<double>(bundle.num_samples());
        }
    }
    return acc;
}

}  // namespace eelab
