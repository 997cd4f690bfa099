#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <optional>
#include <vector>

#include "eelab/eenet.hpp"

namespace eelab {

// Additive task-indexed logit correction: slice t of every classifier gets
// a * (T - t) + b, and the last task's slice is left untouched.
struct TlcParams {
    double a = 0;
    double b = 0;
};

inline double tlc_offset(const TlcParams& p, int task_index, int num_tasks) {
    if (task_index >= num_tasks) return 0.0;
    return p.a * static_cast<double>(num_tasks - task_index) + p.b;
}

template <typename Scalar>
LogitBundleT<Scalar> apply_tlc(const LogitBundleT<Scalar>& bundle, const TlcParams& params,
                               int num_tasks) {
    if (num_tasks != bundle.num_tasks())
        throw DimensionError("apply_tlc: bundle does not span the stated tasks");
    LogitBundleT<Scalar> out = bundle;
    for (int t = 1; t < num_tasks; ++t) {  // task T (index num_tasks) stays raw
        const Scalar c = static_cast<Scalar>(tlc_offset(params, t, num_tasks));
        if (c == Scalar(0)) continue;
        const ClassRange r = bundle.task_ranges[static_cast<std::size_t>(t - 1)];
        for (auto& logits : out.logits)
            logits.middleCols(r.begin, r.count).array() += c;
    }
    return out;
}

// Maximum of task t's corrected slice for (classifier i, sample j), with the
// predicted class's logit removed when the prediction (argmax of the full
// corrected row) falls inside task t. 1-based task indices.
template <typename Scalar>
double masked_task_max(const LogitBundleT<Scalar>& bundle, Eigen::Index sample, int classifier,
                       int task, const TlcParams& params) {
    const int T = bundle.num_tasks();
    const auto& z = bundle.logits[static_cast<std::size_t>(classifier)];
    // Corrected full row.
    std::vector<double> row(static_cast<std::size_t>(z.cols()));
    for (int t = 1; t <= T; ++t) {
        const ClassRange r = bundle.task_ranges[static_cast<std::size_t>(t - 1)];
        const double c = tlc_offset(params, t, T);
        for (int col = r.begin; col < r.end(); ++col)
            row[static_cast<std::size_t>(col)] = static_cast<double>(z(sample, col)) + c;
    }
    std::size_t pred = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
        if (row[c] > row[pred]) pred = c;

    const ClassRange r = bundle.task_ranges[static_cast<std::size_t>(task - 1)];
    const bool exclude = r.contains(static_cast<int>(pred));
    if (exclude && r.count < 2)
        throw DataError("masked_task_max: single-class task slice is degenerate");
    bool first = true;
    double best = 0;
    for (int col = r.begin; col < r.end(); ++col) {
        if (exclude && static_cast<std::size_t>(col) == pred) continue;
        if (first || row[static_cast<std::size_t>(col)] > best) {
            best = row[static_cast<std::size_t>(col)];
            first = false;
        }
    }
    return best;
}

// Reference energy: E(a, b) = sum_j sum_i sum_t (M_j - m_t^{i,j})^2 with M_j
// the per-sample mean of the masked maxima over classifiers and tasks.
template <typename Scalar>
double tlc_energy(const LogitBundleT<Scalar>& bundle, const TlcParams& params) {
    const int T = bundle.num_tasks();
    const int N = bundle.num_classifiers();
    if (T < 2) return 0.0;
    double energy = 0;
    for (Eigen::Index j = 0; j < bundle.num_samples(); ++j) {
        double sum = 0, sumsq = 0;
        for (int i = 0; i < N; ++i)
            for (int t = 1; t <= T; ++t) {
                const double m = masked_task_max(bundle, j, i, t, params);
                sum += m;
                sumsq += m * m;
            }
        energy += sumsq - sum * sum / static_cast<double>(N * T);
    }
    return energy;
}

// ---------------------------------------------------------------------------
// Fit machinery. Per (classifier, sample, task) only the slice's top value
// and the runner-up after removing the slice argmax matter, so the energy
// collapses to O(N*T) per sample and the grid scan to an event sweep in b.
// ---------------------------------------------------------------------------
struct TlcMaxStats {
    int num_tasks = 0;
    int num_classifiers = 0;
    Eigen::Index samples = 0;
    // top1[i](j, t): slice max; top2[i](j, t): max after removing the slice's
    // first-argmax column. Stored as float: these are maxima of float logits,
    // so nothing is lost, and the fit becomes memory-bound on half the bytes.
    std::vector<Matf> top1;
    std::vector<Matf> top2;
};

template <typename Scalar>
TlcMaxStats build_tlc_stats(const LogitBundleT<Scalar>& bundle) {
    TlcMaxStats st;
    st.num_tasks = bundle.num_tasks();
    st.num_classifiers = bundle.num_classifiers();
    st.samples = bundle.num_samples();
    for (int t = 0; t < st.num_tasks; ++t)
        if (bundle.task_ranges[static_cast<std::size_t>(t)].count < 2)
            throw DataError("build_tlc_stats: single-class task slice is degenerate");
    for (int i = 0; i < st.num_classifiers; ++i) {
        const auto& z = bundle.logits[static_cast<std::size_t>(i)];
        ensure_finite(z, "build_tlc_stats");
        Matf t1(st.samples, st.num_tasks), t2(st.samples, st.num_tasks);
        for (Eigen::Index j = 0; j < st.samples; ++j) {
            for (int t = 0; t < st.num_tasks; ++t) {
                const ClassRange r = bundle.task_ranges[static_cast<std::size_t>(t)];
                int arg = r.begin;
                for (int col = r.begin + 1; col < r.end(); ++col)
                    if (static_cast<double>(z(j, col)) > static_cast<double>(z(j, arg))) arg = col;
                bool first = true;
                double second = 0;
                for (int col = r.begin; col < r.end(); ++col) {
                    if (col == arg) continue;
                    if (first || static_cast<double>(z(j, col)) > second) {
                        second = static_cast<double>(z(j, col));
                        first = false;
                    }
                }
                t1(j, t) = static_cast<float>(z(j, arg));
                t2(j, t) = static_cast<float>(second);
            }
        }
        st.top1.push_back(std::move(t1));
        st.top2.push_back(std::move(t2));
    }
    return st;
}

// Same value as tlc_energy, computed from the precomputed maxima in one
// fused pass per (classifier, sample) row.
inline double fast_tlc_energy(const TlcMaxStats& st, double a, double b) {
    const int T = st.num_tasks;
    const int N = st.num_classifiers;
    if (T < 2) return 0.0;
    if (T > 64) throw ConfigError("fast_tlc_energy supports up to 64 tasks");
    double c[64];
    for (int t = 0; t < T; ++t)
        c[t] = (t < T - 1) ? a * static_cast<double>(T - 1 - t) + b : 0.0;
    const double nt = static_cast<double>(N * T);
    std::vector<double> sum(static_cast<std::size_t>(st.samples), 0.0);
    std::vector<double> sumsq(static_cast<std::size_t>(st.samples), 0.0);
    for (int i = 0; i < N; ++i) {
        const Matf& t1 = st.top1[static_cast<std::size_t>(i)];
        const Matf& t2 = st.top2[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < st.samples; ++j) {
            const float* r1 = t1.data() + j * T;
            const float* r2 = t2.data() + j * T;
            int star = 0;
            double best = static_cast<double>(r1[0]) + c[0];
            double s1 = best, s2 = best * best;
            for (int t = 1; t < T; ++t) {
                const double v = static_cast<double>(r1[t]) + c[t];
                if (v > best) {
                    best = v;
                    star = t;
                }
                s1 += v;
                s2 += v * v;
            }
            const double m1 = static_cast<double>(r1[star]) + c[star];
            const double m2 = static_cast<double>(r2[star]) + c[star];
            sum[static_cast<std::size_t>(j)] += s1 - m1 + m2;
            sumsq[static_cast<std::size_t>(j)] += s2 - m1 * m1 + m2 * m2;
        }
    }
    double energy = 0;
    for (Eigen::Index j = 0; j < st.samples; ++j)
        energy += sumsq[static_cast<std::size_t>(j)] -
                  sum[static_cast<std::size_t>(j)] * sum[static_cast<std::size_t>(j)] / nt;
    // Algebraically a sum of squares; the fused form can round a hair below 0.
    return std::max(energy, 0.0);
}

struct TlcFitOptions {
    double grid_lo = -10.0;
    double grid_hi = 10.0;
    double grid_step = 0.25;
    int simplex_iters = 120;
};

struct TlcFitReport {
    TlcParams params;
    double energy = 0;
    double energy_at_zero = 0;
    std::vector<double> mean_task_max;  // per task, at the fitted params
    std::optional<double> oracle_energy;  // filled by external verification
    long grid_evals = 0;
};

namespace detail {

// One a-line of the grid: assignments flip from "last task predicted" to
// "task tw predicted" as b crosses u_{T-1} - u_tw, so E(b) is tracked as a
// quadratic updated at sorted crossing events.
struct SweepCoeffs {
    double b0;        // crossing point
    double s1l, scl, s2l;  // coefficients while the last task is predicted
    double s1h, sch, s2h;  // coefficients once task tw takes over
    Eigen::Index sample;
};

struct SweepWorkspace {
    std::vector<SweepCoeffs> events;
    std::vector<double> A;
    std::vector<std::uint32_t> order;
    std::vector<std::uint32_t> counts;
};

inline void sweep_a_line(const TlcMaxStats& st, double a, const std::vector<double>& b_grid,
                         std::vector<double>& energies, SweepWorkspace& ws) {
    const int T = st.num_tasks;
    const int N = st.num_classifiers;
    const Eigen::Index S = st.samples;
    const double nt = static_cast<double>(N * T);
    const double B = static_cast<double>(N * (T - 1));

    std::vector<SweepCoeffs>& events = ws.events;
    events.clear();
    events.reserve(static_cast<std::size_t>(S * N));
    std::vector<double>& A = ws.A;
    A.assign(static_cast<std::size_t>(S), 0.0);
    double Q1 = 0, Q2 = 0;

    for (int i = 0; i < N; ++i) {
        const Matf& t1 = st.top1[static_cast<std::size_t>(i)];
        const Matf& t2 = st.top2[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < S; ++j) {
            // tw: first argmax of u over tasks 0..T-2 (b-independent).
            int tw = 0;
            double u_tw = t1(j, 0) + a * static_cast<double>(T - 1);
            for (int t = 1; t < T - 1; ++t) {
                const double u = t1(j, t) + a * static_cast<double>(T - 1 - t);
                if (u > u_tw) {
                    u_tw = u;
                    tw = t;
                }
            }
            const double u_last = t1(j, T - 1);
            SweepCoeffs e;
            e.sample = j;
            e.b0 = u_last - u_tw;  // t* = tw iff b >= b0 (ties to the earlier task)
            e.s1l = e.scl = e.s2l = 0;
            e.s1h = e.sch = e.s2h = 0;
            for (int t = 0; t < T; ++t) {
                const double slope_term = (t < T - 1) ? a * static_cast<double>(T - 1 - t) : 0.0;
                const double v_low = ((t == T - 1) ? t2(j, t) : t1(j, t)) + slope_term;
                const double v_high = ((t == tw) ? t2(j, t) : t1(j, t)) + slope_term;
                e.s1l += v_low;
                e.s1h += v_high;
                e.s2l += v_low * v_low;
                e.s2h += v_high * v_high;
                if (t < T - 1) {
                    e.scl += v_low;
                    e.sch += v_high;
                }
            }
            if (e.b0 > b_grid.back()) {
                // Never fires: stays in the low-b assignment.
                A[static_cast<std::size_t>(j)] += e.s1l;
                Q1 += e.scl;
                Q2 += e.s2l;
            } else if (e.b0 <= b_grid.front()) {
                // Fires before the first grid point: start high.
                A[static_cast<std::size_t>(j)] += e.s1h;
                Q1 += e.sch;
                Q2 += e.s2h;
            } else {
                A[static_cast<std::size_t>(j)] += e.s1l;
                Q1 += e.scl;
                Q2 += e.s2l;
                events.push_back(e);
            }
        }
    }
    double P1 = 0, P2 = 0;
    for (double v : A) {
        P1 += v;
        P2 += v * v;
    }

    // Bucket events by the first grid point at which they fire; the order
    // within a bucket is irrelevant, so no comparison sort is needed.
    const std::size_t nb = b_grid.size();
    std::vector<std::uint32_t>& counts = ws.counts;
    counts.assign(nb + 1, 0);
    auto bucket_of = [&](double b0) {
        return static_cast<std::size_t>(
            std::lower_bound(b_grid.begin(), b_grid.end(), b0) - b_grid.begin());
    };
    for (const SweepCoeffs& e : events) ++counts[bucket_of(e.b0)];
    std::vector<std::uint32_t>& order = ws.order;
    order.resize(events.size());
    std::uint32_t at = 0;
    for (std::size_t k = 0; k <= nb; ++k) {
        const std::uint32_t c = counts[k];
        counts[k] = at;
        at += c;
    }
    std::vector<std::uint32_t> cursor(counts);
    for (std::size_t k = 0; k < events.size(); ++k)
        order[cursor[bucket_of(events[k].b0)]++] = static_cast<std::uint32_t>(k);

    energies.assign(nb, 0.0);
    std::size_t next_event = 0;
    for (std::size_t k = 0; k < nb; ++k) {
        const double b = b_grid[k];
        const std::size_t fire_until = counts[k + 1];
        while (next_event < fire_until) {
            const SweepCoeffs& e = events[order[next_event]];
            const double d1 = e.s1h - e.s1l;
            double& aj = A[static_cast<std::size_t>(e.sample)];
            P2 += (aj + d1) * (aj + d1) - aj * aj;
            P1 += d1;
            aj += d1;
            Q1 += e.sch - e.scl;
            Q2 += e.s2h - e.s2l;
            ++next_event;
        }
        const double quad = Q2 + 2.0 * b * Q1 + b * b * static_cast<double>(S) * B;
        const double lin = P2 + 2.0 * b * B * P1 + b * b * B * B * static_cast<double>(S);
        energies[k] = quad - lin / nt;
    }
}

}  // namespace detail

// Coarse grid scan (event-sweep accelerated) followed by Nelder-Mead
// refinement. Deterministic given the inputs.
inline TlcFitReport fit_tlc_from_stats(const TlcMaxStats& st, const TlcFitOptions& opts = {}) {
    TlcFitReport report;
    if (st.num_tasks < 2) {
        report.mean_task_max.assign(static_cast<std::size_t>(std::max(st.num_tasks, 0)), 0.0);
        return report;
    }
    if (st.samples == 0) throw DataError("fit_tlc: no samples");

    std::vector<double> grid;
    for (double v = opts.grid_lo; v <= opts.grid_hi + 1e-12; v += opts.grid_step)
        grid.push_back(v);
    const std::size_t na = grid.size();

    // Full coarse surface via the event sweep.
    std::vector<std::vector<double>> surface(na);
    std::vector<double> energies;
    detail::SweepWorkspace ws;
    for (std::size_t ia = 0; ia < na; ++ia) {
        detail::sweep_a_line(st, grid[ia], grid, energies, ws);
        surface[ia] = energies;
        report.grid_evals += static_cast<long>(energies.size());
    }

    struct Pt {
        double a, b, e;
    };
    auto eval = [&](double a, double b) { return fast_tlc_energy(st, a, b); };

    // Candidate basins: grid-local minima (no worse than all 8 neighbours),
    // best-first. The energy surface is piecewise quadratic, so the global
    // optimum can sit in a basin the single best grid point does not see.
    std::vector<Pt> candidates;
    for (std::size_t ia = 0; ia < na; ++ia)
        for (std::size_t ib = 0; ib < na; ++ib) {
            const double e = surface[ia][ib];
            bool local_min = true;
            for (int da = -1; da <= 1 && local_min; ++da)
                for (int db = -1; db <= 1; ++db) {
                    if (da == 0 && db == 0) continue;
                    const long ja = static_cast<long>(ia) + da;
                    const long jb = static_cast<long>(ib) + db;
                    if (ja < 0 || jb < 0 || ja >= static_cast<long>(na) ||
                        jb >= static_cast<long>(na))
                        continue;
                    if (surface[static_cast<std::size_t>(ja)][static_cast<std::size_t>(jb)] < e) {
                        local_min = false;
                        break;
                    }
                }
            if (local_min) candidates.push_back({grid[ia], grid[ib], e});
        }
    std::sort(candidates.begin(), candidates.end(), [](const Pt& x, const Pt& y) {
        if (x.e != y.e) return x.e < y.e;
        if (x.a != y.a) return x.a < y.a;
        return x.b < y.b;
    });
    const double grid_best = candidates.empty() ? 0.0 : candidates.front().e;
    std::vector<Pt> starts;
    for (const Pt& c : candidates) {
        if (starts.size() >= 4) break;
        if (c.e <= grid_best * 1.5 + 1e-9) starts.push_back(c);
    }
    if (starts.empty()) starts.push_back({0.0, 0.0, eval(0.0, 0.0)});

    // Re-evaluate starts directly so reported energies are not tied to the
    // incremental sweep's rounding.
    Pt best{starts.front().a, starts.front().b, eval(starts.front().a, starts.front().b)};
    for (Pt start : starts) {
        start.e = eval(start.a, start.b);
        if (start.e < best.e) best = start;
        std::array<Pt, 3> simplex{start,
                                  Pt{start.a + opts.grid_step, start.b,
                                     eval(start.a + opts.grid_step, start.b)},
                                  Pt{start.a, start.b + opts.grid_step,
                                     eval(start.a, start.b + opts.grid_step)}};
        for (int it = 0; it < opts.simplex_iters; ++it) {
            std::sort(simplex.begin(), simplex.end(),
                      [](const Pt& x, const Pt& y) { return x.e < y.e; });
            if (simplex[0].e < best.e) best = simplex[0];
            const double span = std::max(std::abs(simplex[2].a - simplex[0].a) +
                                             std::abs(simplex[2].b - simplex[0].b),
                                         std::abs(simplex[2].e - simplex[0].e));
            if (span < 1e-12) break;
            const double ca = (simplex[0].a + simplex[1].a) / 2;
            const double cb = (simplex[0].b + simplex[1].b) / 2;
            Pt refl{ca + (ca - simplex[2].a), cb + (cb - simplex[2].b), 0};
            refl.e = eval(refl.a, refl.b);
            if (refl.e < simplex[0].e) {
                Pt expd{ca + 2 * (ca - simplex[2].a), cb + 2 * (cb - simplex[2].b), 0};
                expd.e = eval(expd.a, expd.b);
                simplex[2] = (expd.e < refl.e) ? expd : refl;
            } else if (refl.e < simplex[1].e) {
                simplex[2] = refl;
            } else {
                Pt con{ca + 0.5 * (simplex[2].a - ca), cb + 0.5 * (simplex[2].b - cb), 0};
                con.e = eval(con.a, con.b);
                if (con.e < simplex[2].e) {
                    simplex[2] = con;
                } else {
                    for (int k = 1; k < 3; ++k) {
                        simplex[k].a = simplex[0].a + 0.5 * (simplex[k].a - simplex[0].a);
                        simplex[k].b = simplex[0].b + 0.5 * (simplex[k].b - simplex[0].b);
                        simplex[k].e = eval(simplex[k].a, simplex[k].b);
                    }
                }
            }
        }
        for (const Pt& p : simplex)
            if (p.e < best.e) best = p;
    }

    report.params = {best.a, best.b};
    report.energy = best.e;
    report.energy_at_zero = fast_tlc_energy(st, 0.0, 0.0);

    // Per-task mean corrected masked max at the fitted params.
    const int T = st.num_tasks;
    report.mean_task_max.assign(static_cast<std::size_t>(T), 0.0);
    for (int i = 0; i < st.num_classifiers; ++i) {
        const Matf& t1 = st.top1[static_cast<std::size_t>(i)];
        const Matf& t2 = st.top2[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < st.samples; ++j) {
            int star = 0;
            double bestv = t1(j, 0) + best.a * static_cast<double>(T - 1) + best.b;
            for (int t = 1; t < T; ++t) {
                const double c =
                    (t < T - 1) ? best.a * static_cast<double>(T - 1 - t) + best.b : 0.0;
                if (t1(j, t) + c > bestv) {
                    bestv = t1(j, t) + c;
                    star = t;
                }
            }
            for (int t = 0; t < T; ++t) {
                const double c =
                    (t < T - 1) ? best.a * static_cast<double>(T - 1 - t) + best.b : 0.0;
                report.mean_task_max[static_cast<std::size_t>(t)] +=
                    (t == star ? t2(j, t) : t1(j, t)) + c;
            }
        }
    }
    const double denom = static_cast<double>(st.num_classifiers) * static_cast<double>(st.samples);
    for (double& v : report.mean_task_max) v /= denom;
    return report;
}

template <typename Scalar>
TlcFitReport fit_tlc(const LogitBundleT<Scalar>& bundle, const TlcFitOptions& opts = {}) {
    if (bundle.num_tasks() < 2) {
        TlcFitReport report;
        report.mean_task_max.assign(static_cast<std::size_t>(bundle.num_tasks()), 0.0);
        return report;
    }
    return fit_tlc_from_stats(build_tlc_stats(bundle), opts);
}

}  // namespace eelab
