#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "eelab/graph.hpp"
#include "eelab/rng.hpp"
#include "eelab/scenario.hpp"
#include "eelab/tensor.hpp"

namespace eelab {

// ---------------------------------------------------------------------------
// Backbone: a stack of affine+ReLU stages with an analytic FLOPs model.
// Stage costs are multiply-accumulate counts; only ratios matter downstream.
// ---------------------------------------------------------------------------
struct StageSpec {
    int in_width = 0;
    int out_width = 0;
    double flops = 0;
    double cum_cost_fraction = 0;  // over the backbone only; last stage = 1.0
};

template <typename Scalar>
struct BackboneT {
    int input_dim = 0;
    std::vector<StageSpec> stages;
    ParamStoreT<Scalar> params;
};

inline std::string stage_w(int i) { return "stage" + std::to_string(i) + ".w"; }
inline std::string stage_b(int i) { return "stage" + std::to_string(i) + ".b"; }
inline std::string head_w(int cls, int task) {
    return "cls" + std::to_string(cls) + ".task" + std::to_string(task) + ".w";
}
inline std::string head_b(int cls, int task) {
    return "cls" + std::to_string(cls) + ".task" + std::to_string(task) + ".b";
}

template <typename Scalar>
BackboneT<Scalar> make_backbone(int input_dim, const std::vector<int>& widths,
                                std::uint64_t seed) {
    if (input_dim < 1 || widths.empty()) throw ConfigError("backbone needs input dim and stages");
    BackboneT<Scalar> bb;
    bb.input_dim = input_dim;
    double total = 0;
    int in = input_dim;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        StageSpec s;
        s.in_width = in;
        s.out_width = widths[i];
        s.flops = 2.0 * s.in_width * s.out_width;
        total += s.flops;
        bb.stages.push_back(s);
        in = widths[i];
    }
    double cum = 0;
    for (auto& s : bb.stages) {
        cum += s.flops;
        s.cum_cost_fraction = cum / total;
    }
    for (std::size_t i = 0; i < bb.stages.size(); ++i) {
        Rng rng(derive_seed(seed, "stage", i));
        bb.params.add(stage_w(static_cast<int>(i)),
                      glorot_uniform<Scalar>(bb.stages[i].in_width, bb.stages[i].out_width, rng));
        bb.params.add(stage_b(static_cast<int>(i)),
                      MatX<Scalar>::Zero(1, bb.stages[i].out_width));
    }
    return bb;
}

template <typename Scalar>
BackboneT<Scalar> make_backbone(int input_dim, int width, int n_stages, std::uint64_t seed) {
    return make_backbone<Scalar>(input_dim, std::vector<int>(n_stages, width), seed);
}

// ---------------------------------------------------------------------------
// Early-exit network: classifiers 0..M-1 are internal, classifier M is final.
// Each classifier = feature reduction (identity or a frozen projection) plus
// one linear head per task.
// ---------------------------------------------------------------------------
template <typename Scalar>
struct ClassifierSpecT {
    int stage_index = 0;                      // backbone stage it reads from
    int reduced_width = 0;                    // head input width
    std::optional<MatX<Scalar>> projection;   // frozen; empty = identity
};

template <typename Scalar>
struct EarlyExitNetworkT {
    int input_dim = 0;
    std::vector<StageSpec> stages;
    std::vector<ClassifierSpecT<Scalar>> classifiers;  // size M + 1
    std::vector<ClassRange> tasks;
    ParamStoreT<Scalar> params;
    std::uint64_t init_seed = 0;

    // Prediction rectification of the newest task's logit slice, one
    // (scale, shift) pair per classifier; empty when not fitted.
    std::vector<std::pair<Scalar, Scalar>> rectifier;
    int rectified_task = 0;  // 1-based task index the rectifier applies to

    int num_internal() const { return static_cast<int>(classifiers.size()) - 1; }
    int num_classifiers() const { return static_cast<int>(classifiers.size()); }
    int num_tasks() const { return static_cast<int>(tasks.size()); }
    int num_classes() const { return tasks.empty() ? 0 : tasks.back().end(); }

    double backbone_fraction(int classifier) const {
        return stages[classifiers[classifier].stage_index].cum_cost_fraction;
    }
    std::vector<double> ic_fractions() const {
        std::vector<double> f;
        for (int i = 0; i < num_internal(); ++i) f.push_back(backbone_fraction(i));
        return f;
    }
};

using EarlyExitNetwork = EarlyExitNetworkT<float>;

// Attaches one IC per target after the stage whose cumulative cost fraction
// is nearest the target (ties to the earlier stage), then the final
// classifier after the last stage.
template <typename Scalar>
EarlyExitNetworkT<Scalar> attach_ics(BackboneT<Scalar> backbone,
                                     const std::vector<double>& target_fractions,
                                     int fr_width = 0) {
    if (target_fractions.size() > backbone.stages.size())
        throw ConfigError("attach_ics: fewer stages than internal classifiers");
    for (std::size_t i = 0; i < target_fractions.size(); ++i) {
        if (target_fractions[i] <= 0.0 || target_fractions[i] >= 1.0)
            throw ConfigError("attach_ics: targets must lie in (0, 1)");
        if (i > 0 && target_fractions[i] <= target_fractions[i - 1])
            throw ConfigError("attach_ics: targets must be strictly increasing");
    }
    EarlyExitNetworkT<Scalar> net;
    net.input_dim = backbone.input_dim;
    net.stages = backbone.stages;
    net.params = std::move(backbone.params);
    net.init_seed = derive_seed(0x5eeda11, "net", net.stages.size(), net.input_dim);

    auto add_classifier = [&](int stage_index) {
        ClassifierSpecT<Scalar> c;
        c.stage_index = stage_index;
        const int w = net.stages[stage_index].out_width;
        c.reduced_width = (fr_width > 0) ? fr_width : w;
        if (c.reduced_width != w) {
            Rng rng(derive_seed(net.init_seed, "fr", net.classifiers.size()));
            c.projection = glorot_uniform<Scalar>(w, c.reduced_width, rng);
        }
        net.classifiers.push_back(std::move(c));
    };

    for (double target : target_fractions) {
        int best = 0;
        double best_dist = std::abs(net.stages[0].cum_cost_fraction - target);
        for (std::size_t s = 1; s < net.stages.size(); ++s) {
            const double d = std::abs(net.stages[s].cum_cost_fraction - target);
            if (d < best_dist) {
                best = static_cast<int>(s);
                best_dist = d;
            }
        }
        add_classifier(best);
    }
    add_classifier(static_cast<int>(net.stages.size()) - 1);  // final classifier
    return net;
}

// Every classifier gains a freshly initialized head for the new task.
template <typename Scalar>
void add_task_head(EarlyExitNetworkT<Scalar>& net, int task_index, int num_classes) {
    if (task_index != net.num_tasks() + 1)
        throw ProtocolError("add_task_head: expected task " + std::to_string(net.num_tasks() + 1) +
                            ", got " + std::to_string(task_index));
    if (num_classes < 1) throw ConfigError("add_task_head: need at least one class");
    ClassRange range{net.num_classes(), num_classes};
    for (int i = 0; i < net.num_classifiers(); ++i) {
        Rng rng(derive_seed(net.init_seed, "head", task_index, i));
        net.params.add(head_w(i, task_index),
                       glorot_uniform<Scalar>(net.classifiers[i].reduced_width, num_classes, rng));
        net.params.add(head_b(i, task_index), MatX<Scalar>::Zero(1, num_classes));
    }
    net.tasks.push_back(range);
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------
template <typename Scalar>
struct LogitBundleT {
    std::vector<MatX<Scalar>> logits;  // one samples-by-classes matrix per classifier
    std::vector<ClassRange> task_ranges;

    int num_classifiers() const { return static_cast<int>(logits.size()); }
    int num_tasks() const { return static_cast<int>(task_ranges.size()); }
    Eigen::Index num_samples() const { return logits.empty() ? 0 : logits[0].rows(); }
    Eigen::Index num_classes() const { return logits.empty() ? 0 : logits[0].cols(); }
};

using LogitBundle = LogitBundleT<float>;

struct ForwardStats {
    int stage_evals = 0;
};

template <typename Scalar>
std::vector<MatX<Scalar>> stage_features(const EarlyExitNetworkT<Scalar>& net,
                                         const MatX<Scalar>& x, ForwardStats* stats = nullptr) {
    if (x.cols() != net.input_dim) throw DimensionError("forward: bad input width");
    std::vector<MatX<Scalar>> feats;
    feats.reserve(net.stages.size());
    const MatX<Scalar>* cur = &x;
    for (std::size_t s = 0; s < net.stages.size(); ++s) {
        feats.push_back(relu<Scalar>(linear<Scalar>(*cur, net.params.value(stage_w(static_cast<int>(s))),
                                                    net.params.value(stage_b(static_cast<int>(s))))));
        cur = &feats.back();
        if (stats) ++stats->stage_evals;
    }
    return feats;
}

template <typename Scalar>
MatX<Scalar> reduce_features(const EarlyExitNetworkT<Scalar>& net, int classifier,
                             const MatX<Scalar>& stage_out) {
    const auto& c = net.classifiers[classifier];
    return c.projection ? MatX<Scalar>(stage_out * *c.projection) : stage_out;
}

template <typename Scalar>
MatX<Scalar> classifier_logits(const EarlyExitNetworkT<Scalar>& net, int classifier,
                               const MatX<Scalar>& reduced) {
    MatX<Scalar> out(reduced.rows(), net.num_classes());
    for (int t = 0; t < net.num_tasks(); ++t) {
        out.middleCols(net.tasks[t].begin, net.tasks[t].count) =
            linear<Scalar>(reduced, net.params.value(head_w(classifier, t + 1)),
                           net.params.value(head_b(classifier, t + 1)));
    }
    return out;
}

// One shared backbone pass; stage features are reused by every classifier.
template <typename Scalar>
LogitBundleT<Scalar> forward_all(const EarlyExitNetworkT<Scalar>& net, const MatX<Scalar>& x,
                                 ForwardStats* stats = nullptr) {
    if (net.tasks.empty()) throw ProtocolError("forward_all: no task heads yet");
    auto feats = stage_features(net, x, stats);
    LogitBundleT<Scalar> bundle;
    bundle.task_ranges = net.tasks;
    bundle.logits.reserve(net.classifiers.size());
    for (int i = 0; i < net.num_classifiers(); ++i) {
        MatX<Scalar> reduced = reduce_features(net, i, feats[net.classifiers[i].stage_index]);
        bundle.logits.push_back(classifier_logits(net, i, reduced));
    }
    return bundle;
}

// Applies the fitted rectifier to the newest task's slice, in place.
template <typename Scalar>
void apply_rectifier(const EarlyExitNetworkT<Scalar>& net, LogitBundleT<Scalar>& bundle) {
    if (net.rectifier.empty()) return;
    if (net.rectified_task < 1 || net.rectified_task > bundle.num_tasks()) return;
    const ClassRange r = bundle.task_ranges[net.rectified_task - 1];
    for (int i = 0; i < bundle.num_classifiers(); ++i) {
        auto block = bundle.logits[i].middleCols(r.begin, r.count);
        block = (block.array() * net.rectifier[i].first + net.rectifier[i].second).matrix();
    }
}

// The network's effective outputs: raw logits plus rectification when fitted.
template <typename Scalar>
LogitBundleT<Scalar> collect_logits(const EarlyExitNetworkT<Scalar>& net, const MatX<Scalar>& x,
                                    bool rectified = true) {
    LogitBundleT<Scalar> bundle = forward_all(net, x);
    if (rectified) apply_rectifier(net, bundle);
    return bundle;
}

// Final classifier's pre-head representation (drives exemplar herding).
template <typename Scalar>
MatX<Scalar> penultimate_features(const EarlyExitNetworkT<Scalar>& net, const MatX<Scalar>& x) {
    auto feats = stage_features(net, x);
    const int fin = net.num_classifiers() - 1;
    return reduce_features(net, fin, feats[net.classifiers[fin].stage_index]);
}

// Tape version of forward_all; returns one logit value per classifier.
template <typename Scalar>
std::vector<typename GraphT<Scalar>::Value> forward_graph(EarlyExitNetworkT<Scalar>& net,
                                                          GraphT<Scalar>& g,
                                                          typename GraphT<Scalar>::Value x) {
    using Value = typename GraphT<Scalar>::Value;
    if (net.tasks.empty()) throw ProtocolError("forward_graph: no task heads yet");
    std::vector<Value> feats;
    Value cur = x;
    for (std::size_t s = 0; s < net.stages.size(); ++s) {
        Value w = g.param(net.params, stage_w(static_cast<int>(s)));
        Value b = g.param(net.params, stage_b(static_cast<int>(s)));
        cur = g.relu(g.affine(cur, w, b));
        feats.push_back(cur);
    }
    std::vector<Value> logits;
    for (int i = 0; i < net.num_classifiers(); ++i) {
        Value h = feats[net.classifiers[i].stage_index];
        if (net.classifiers[i].projection)
            h = g.matmul(h, g.constant(*net.classifiers[i].projection));
        std::vector<Value> parts;
        for (int t = 0; t < net.num_tasks(); ++t) {
            Value w = g.param(net.params, head_w(i, t + 1));
            Value b = g.param(net.params, head_b(i, t + 1));
            parts.push_back(g.affine(h, w, b));
        }
        logits.push_back(g.concat_cols(parts));
    }
    return logits;
}

// ---------------------------------------------------------------------------
// SDN-style loss weights: each IC ramps linearly from 0.01 at epoch 0 to its
// actual cost fraction at the last epoch; the final classifier stays at 1.
// ---------------------------------------------------------------------------
inline std::vector<double> ic_loss_weights(int epoch, int total_epochs,
                                           const std::vector<double>& actual_fractions) {
    if (epoch < 0 || epoch >= total_epochs) throw ConfigError("ic_loss_weights: epoch out of range");
    const double t = (total_epochs <= 1) ? 1.0
                                         : static_cast<double>(epoch) /
                                               static_cast<double>(total_epochs - 1);
    std::vector<double> w;
    for (double f : actual_fractions) w.push_back(0.01 + t * (f - 0.01));
    w.push_back(1.0);
    return w;
}

// ---------------------------------------------------------------------------
// Checkpoint: versioned little-endian binary; round-trips bit-exactly.
// ---------------------------------------------------------------------------
namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                 static_cast<char>(v >> 24)};
    os.write(b, 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}
inline void put_f64(std::ostream& os, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    put_u64(os, u);
}
inline void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("checkpoint truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t lo = get_u32(is);
    std::uint64_t hi = get_u32(is);
    return lo | (hi << 32);
}
inline double get_f64(std::istream& is) {
    std::uint64_t u = get_u64(is);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}
inline std::string get_str(std::istream& is) {
    std::uint32_t n = get_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw FormatError("checkpoint truncated");
    return s;
}

template <typename Scalar>
void put_mat(std::ostream& os, const MatX<Scalar>& m) {
    put_u32(os, static_cast<std::uint32_t>(m.rows()));
    put_u32(os, static_cast<std::uint32_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(sizeof(Scalar) * m.size()));
}
template <typename Scalar>
MatX<Scalar> get_mat(std::istream& is) {
    const std::uint32_t r = get_u32(is), c = get_u32(is);
    MatX<Scalar> m(r, c);
    is.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(Scalar) * m.size()));
    if (!is) throw FormatError("checkpoint truncated");
    return m;
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const EarlyExitNetworkT<Scalar>& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint: " + path);
    os.write("EENETCKP", 8);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(sizeof(Scalar)));
    detail::put_u32(os, static_cast<std::uint32_t>(net.input_dim));
    detail::put_u32(os, static_cast<std::uint32_t>(net.stages.size()));
    for (const auto& s : net.stages) {
        detail::put_u32(os, static_cast<std::uint32_t>(s.in_width));
        detail::put_u32(os, static_cast<std::uint32_t>(s.out_width));
        detail::put_f64(os, s.flops);
        detail::put_f64(os, s.cum_cost_fraction);
    }
    detail::put_u32(os, static_cast<std::uint32_t>(net.classifiers.size()));
    for (const auto& c : net.classifiers) {
        detail::put_u32(os, static_cast<std::uint32_t>(c.stage_index));
        detail::put_u32(os, static_cast<std::uint32_t>(c.reduced_width));
        detail::put_u32(os, c.projection ? 1 : 0);
        if (c.projection) detail::put_mat(os, *c.projection);
    }
    detail::put_u32(os, static_cast<std::uint32_t>(net.tasks.size()));
    for (const auto& t : net.tasks) {
        detail::put_u32(os, static_cast<std::uint32_t>(t.begin));
        detail::put_u32(os, static_cast<std::uint32_t>(t.count));
    }
    detail::put_u64(os, net.init_seed);
    detail::put_u32(os, static_cast<std::uint32_t>(net.rectifier.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(net.rectified_task));
    for (const auto& [a, b] : net.rectifier) {
        MatX<Scalar> m(1, 2);
        m(0, 0) = a;
        m(0, 1) = b;
        detail::put_mat(os, m);
    }
    detail::put_u32(os, static_cast<std::uint32_t>(net.params.size()));
    for (const auto& [name, entry] : net.params) {
        detail::put_str(os, name);
        detail::put_mat(os, entry.value);
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
}

template <typename Scalar>
EarlyExitNetworkT<Scalar> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != "EENETCKP")
        throw FormatError("bad checkpoint magic at offset 0");
    const std::uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw VersionError("unsupported checkpoint version " + std::to_string(version));
    if (detail::get_u32(is) != sizeof(Scalar))
        throw FormatError("checkpoint scalar width mismatch");
    EarlyExitNetworkT<Scalar> net;
    net.input_dim = static_cast<int>(detail::get_u32(is));
    const std::uint32_t n_stages = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n_stages; ++i) {
        StageSpec s;
        s.in_width = static_cast<int>(detail::get_u32(is));
        s.out_width = static_cast<int>(detail::get_u32(is));
        s.flops = detail::get_f64(is);
        s.cum_cost_fraction = detail::get_f64(is);
        net.stages.push_back(s);
    }
    const std::uint32_t n_cls = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n_cls; ++i) {
        ClassifierSpecT<Scalar> c;
        c.stage_index = static_cast<int>(detail::get_u32(is));
        c.reduced_width = static_cast<int>(detail::get_u32(is));
        if (detail::get_u32(is)) c.projection = detail::get_mat<Scalar>(is);
        net.classifiers.push_back(std::move(c));
    }
    const std::uint32_t n_tasks = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n_tasks; ++i) {
        ClassRange r;
        r.begin = static_cast<int>(detail::get_u32(is));
        r.count = static_cast<int>(detail::get_u32(is));
        net.tasks.push_back(r);
    }
    net.init_seed = detail::get_u64(is);
    const std::uint32_t n_rect = detail::get_u32(is);
    net.rectified_task = static_cast<int>(detail::get_u32(is));
    for (std::uint32_t i = 0; i < n_rect; ++i) {
        MatX<Scalar> m = detail::get_mat<Scalar>(is);
        net.rectifier.emplace_back(m(0, 0), m(0, 1));
    }
    const std::uint32_t n_params = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n_params; ++i) {
        std::string name = detail::get_str(is);
        net.params.add(name, detail::get_mat<Scalar>(is));
    }
    return net;
}

}  // namespace eelab
