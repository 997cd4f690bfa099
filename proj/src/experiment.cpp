#include "eelab/experiment.hpp"

#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>

#include <json.hpp>

#include "eelab/dataset.hpp"
#include "eelab/memory_io.hpp"
#include "eelab/methods.hpp"
#include "eelab/train.hpp"

namespace eelab {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open file: " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write file: " + path);
    os << content;
    if (!os) throw DataError("write failed: " + path);
}

Dataset load_for_config(const ExperimentConfig& cfg) {
    if (cfg.dataset == "synthetic-blobs") {
        BlobsSpec spec;
        spec.classes = cfg.blobs_classes;
        spec.dim = cfg.blobs_dim;
        spec.per_class = cfg.blobs_per_class;
        spec.sigma = cfg.blobs_sigma;
        spec.seed = cfg.blobs_seed ? cfg.blobs_seed : derive_seed(cfg.seed, "blobs-data");
        return load_synthetic_blobs(spec);
    }
    if (cfg.dataset == "idx-images")
        return load_idx(cfg.data_path, cfg.labels_path, cfg.test_data_path,
                        cfg.test_labels_path);
    if (cfg.dataset == "cifar-binary") return load_cifar_binary(cfg.data_path, cfg.test_data_path);
    if (cfg.dataset == "csv") return load_csv(cfg.data_path);
    throw ConfigError("unsupported dataset selector: " + cfg.dataset);
}

json curve_to_json(const BudgetCurve& curve) {
    json arr = json::array();
    for (const CurvePoint& p : curve.points)
        arr.push_back({{"tau", p.tau}, {"avg_cost_fraction", p.avg_cost_fraction},
                       {"accuracy", p.accuracy}});
    return arr;
}

json budgets_to_json(const std::vector<BudgetPick>& picks) {
    json arr = json::array();
    for (const BudgetPick& p : picks)
        arr.push_back({{"budget", p.budget},
                       {"tau", p.tau},
                       {"avg_cost_fraction", p.avg_cost_fraction},
                       {"accuracy", p.accuracy},
                       {"feasible", p.feasible}});
    return arr;
}

json matrix_to_json(const Matd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

json metrics_to_json(const RunResult& result) {
    json confidence = json::array();
    for (const auto& c : result.confidence) {
        if (c)
            confidence.push_back(*c);
        else
            confidence.push_back(nullptr);
    }
    return json{{"schema_version", kManifestSchemaVersion},
                {"overthinking",
                 {{"oracle_accuracy", result.overthinking_report.oracle_accuracy},
                  {"final_accuracy", result.overthinking_report.final_accuracy},
                  {"gap", result.overthinking_report.gap}}},
                {"forgetting_matrix", matrix_to_json(result.forgetting)},
                {"confidence_by_task", confidence},
                {"task_aware", matrix_to_json(result.task_aware)}};
}

json manifest_body(const RunResult& result, const std::string& error) {
    json j;
    j["schema_version"] = kManifestSchemaVersion;
    j["tool_version"] = kToolVersion;
    j["config"] = result.config.echo();
    json tasks = json::array();
    for (const TaskTrainRecord& r : result.task_records)
        tasks.push_back({{"task", r.task_index},
                         {"classes", r.num_classes},
                         {"train_samples", r.train_samples},
                         {"steps", r.steps},
                         {"final_loss", r.final_loss}});
    j["tasks"] = std::move(tasks);
    if (result.tlc_report) {
        j["tlc"] = {{"a", result.tlc_report->params.a},
                    {"b", result.tlc_report->params.b},
                    {"energy", result.tlc_report->energy},
                    {"energy_at_zero", result.tlc_report->energy_at_zero},
                    {"mean_task_max", result.tlc_report->mean_task_max},
                    {"grid_evals", result.tlc_report->grid_evals}};
    } else {
        j["tlc"] = nullptr;
    }
    j["curves"] = {{"plain", curve_to_json(result.curve_plain)},
                   {"tlc", result.curve_tlc.points.empty() ? json(nullptr)
                                                           : curve_to_json(result.curve_tlc)}};
    j["budgets"] = {{"plain", budgets_to_json(result.budgets_plain)},
                    {"tlc", budgets_to_json(result.budgets_tlc)}};
    {
        json history = json::array();
        for (const Matd& m : result.forgetting_history) history.push_back(matrix_to_json(m));
        j["forgetting_history"] = std::move(history);
    }
    j["metrics"] = metrics_to_json(result);
    j["checksums"] = result.checksums;
    if (!error.empty()) j["error"] = error;
    return j;
}

// Digest covers the deterministic experiment content: timings and the
// storage location are excluded.
std::string digest_of_manifest(const json& body) {
    json trimmed = body;
    trimmed.erase("timing");
    trimmed.erase("digest");
    if (trimmed.contains("config")) trimmed["config"].erase("out_dir");
    return fnv1a64_hex(trimmed.dump());
}

void write_manifest(RunResult& result, const std::string& path, double total_seconds,
                    const std::string& error = {}) {
    json body = manifest_body(result, error);
    body["timing"] = {{"total_seconds", total_seconds},
                      {"last_task_train_seconds", result.last_task_train_seconds},
                      {"tlc_fit_seconds", result.tlc_fit_seconds}};
    result.digest = digest_of_manifest(body);
    body["digest"] = result.digest;
    write_file(path, body.dump(2) + "\n");
}

// Per-task halves of the test split for leakage-free threshold selection.
void split_eval_sets(const ContinualScenario& scenario, std::uint64_t seed, Matf& select_x,
                     std::vector<int>& select_y, Matf& eval_x, std::vector<int>& eval_y) {
    const Eigen::Index dim = scenario.tasks.empty() ? 0 : scenario.tasks[0].test_x.cols();
    std::vector<std::pair<const TaskData*, Eigen::Index>> sel, ev;
    for (const TaskData& task : scenario.tasks) {
        std::vector<Eigen::Index> rows(static_cast<std::size_t>(task.test_x.rows()));
        for (Eigen::Index i = 0; i < task.test_x.rows(); ++i)
            rows[static_cast<std::size_t>(i)] = i;
        Rng rng(derive_seed(seed, "holdout", static_cast<std::uint64_t>(task.task_index)));
        rng.shuffle(rows);
        const std::size_t half = rows.size() / 2;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (i < half)
                sel.emplace_back(&task, rows[i]);
            else
                ev.emplace_back(&task, rows[i]);
        }
    }
    auto build = [&](const std::vector<std::pair<const TaskData*, Eigen::Index>>& src, Matf& x,
                     std::vector<int>& y) {
        x.resize(static_cast<Eigen::Index>(src.size()), dim);
        y.clear();
        for (std::size_t i = 0; i < src.size(); ++i) {
            x.row(static_cast<Eigen::Index>(i)) = src[i].first->test_x.row(src[i].second);
            y.push_back(src[i].first->test_y[static_cast<std::size_t>(src[i].second)]);
        }
    };
    build(sel, select_x, select_y);
    build(ev, eval_x, eval_y);
}

}  // namespace

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string fnv1a64_hex(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes)));
    return std::string(buf);
}

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw NumericError("format_double failed");
    return std::string(buf, p);
}

std::string curve_to_csv(const BudgetCurve& curve) {
    std::string out = "tau,avg_cost_fraction,accuracy\n";
    for (const CurvePoint& p : curve.points) {
        out += format_double(p.tau);
        out += ",";
        out += format_double(p.avg_cost_fraction);
        out += ",";
        out += format_double(p.accuracy);
        out += "\n";
    }
    return out;
}

RunResult run_experiment(const ExperimentConfig& config) {
    config.validate();
    const auto t0 = Clock::now();
    RunResult result;
    result.config = config;
    std::filesystem::create_directories(config.out_dir);
    const std::string manifest_path = config.out_dir + "/manifest.json";

    try {
        Dataset dataset = load_for_config(config);
        ContinualScenario scenario = split_tasks(dataset, config.num_tasks, config.seed);
        validate_scenario(scenario);

        auto backbone = make_backbone<float>(static_cast<int>(dataset.x.cols()), config.width,
                                             config.stages, derive_seed(config.seed, "init"));
        EarlyExitNetwork net = attach_ics(std::move(backbone), config.ic_fractions, config.fr_width);

        const bool uses_memory = config.method == Method::FTE || config.method == Method::ER ||
                                 config.method == Method::BIC || config.method == Method::ICARL;
        const bool uses_previous = config.method == Method::LWF || config.method == Method::BIC ||
                                   config.method == Method::ICARL;
        ExemplarMemory memory(config.memory_capacity);
        std::shared_ptr<const EarlyExitNetwork> previous;

        TrainConfig tc;
        tc.epochs = config.epochs;
        tc.batch_size = config.batch_size;
        tc.schedule.base_lr = config.base_lr;
        tc.schedule.milestones = config.lr_milestones;
        tc.schedule.decay = config.lr_decay;
        tc.momentum = config.momentum;
        tc.weight_decay = config.weight_decay;
        tc.grad_clip = config.grad_clip;

        const BicOptions bic_opts{0.10, 100, 0.001, 16, 0.9, config.lwf_temperature};

        for (const TaskData& task : scenario.tasks) {
            const int t = task.task_index;
            add_task_head(net, t, task.classes.count);
            net.rectifier.clear();
            net.rectified_task = 0;

            MethodHooks hooks;
            std::optional<BalancedSplitT<float>> bic_split;
            std::optional<TaskData> bic_task;
            std::optional<ExemplarMemory> bic_memory;
            switch (config.method) {
                case Method::FT: hooks = ft_hooks<float>(); break;
                case Method::FTE: hooks = fte_hooks(memory); break;
                case Method::ER: hooks = er_hooks(memory); break;
                case Method::LWF:
                    hooks = (t == 1) ? ft_hooks<float>()
                                     : lwf_hooks(previous, config.lwf_lambda,
                                                 config.lwf_temperature);
                    break;
                case Method::ICARL:
                    hooks = icarl_hooks(t == 1 ? nullptr : previous, memory, task.classes);
                    break;
                case Method::BIC: {
                    if (t == 1) {
                        hooks = ft_hooks<float>();
                    } else {
                        bic_split =
                            carve_balanced_split(memory, task, bic_opts.val_fraction, config.seed);
                        bic_task = filter_task_rows(task, bic_split->train_rows);
                        bic_memory = filter_memory(memory, bic_split->held_out_memory);
                        hooks = fte_hooks(*bic_memory);
                        const double lambda =
                            static_cast<double>(task.classes.begin) /
                            static_cast<double>(task.classes.end());
                        hooks.losses =
                            lwf_hooks(previous, lambda, config.lwf_temperature).losses;
                    }
                    break;
                }
            }

            const auto task_t0 = Clock::now();
            const TaskData& train_view = bic_task ? *bic_task : task;
            TrainStats stats = train_task(net, train_view, tc, hooks,
                                          derive_seed(config.seed, "task", t));
            const double task_seconds = seconds_since(task_t0);
            if (t == scenario.num_tasks()) result.last_task_train_seconds = task_seconds;

            if (uses_memory && config.memory_capacity > 0) memory_update(memory, net, task);
            if (config.method == Method::BIC && bic_split)
                bic_fit(net, *bic_split, t, bic_opts, derive_seed(config.seed, "bic", t));
            if (uses_previous) previous = std::make_shared<const EarlyExitNetwork>(net);

            // Accuracy of every classifier on the tasks seen so far.
            {
                ContinualScenario seen;
                seen.num_classes = net.num_classes();
                seen.tasks.assign(scenario.tasks.begin(), scenario.tasks.begin() + t);
                result.forgetting_history.push_back(forgetting_matrix(net, seen));
            }

            TaskTrainRecord rec;
            rec.task_index = t;
            rec.num_classes = task.classes.count;
            rec.train_samples = static_cast<int>(train_view.train_x.rows());
            rec.steps = stats.steps;
            rec.final_loss = stats.epoch_loss.empty() ? 0.0 : stats.epoch_loss.back();
            rec.wall_seconds = task_seconds;
            result.task_records.push_back(rec);
        }

        // TLC fit on the last task's training data. The fit cost is the
        // optimization over the cached logits; collecting them is one
        // forward pass, timed separately.
        TlcParams tlc_params;
        if (config.tlc) {
            const TaskData& last = scenario.tasks.back();
            LogitBundle bundle = collect_logits(net, last.train_x);
            const auto fit_t0 = Clock::now();
            result.tlc_report = fit_tlc(bundle);
            result.tlc_fit_seconds = seconds_since(fit_t0);
            tlc_params = result.tlc_report->params;
        }

        // Evaluation sets: full test split, or select/eval halves in holdout
        // mode (thresholds picked on one half, reported on the other).
        Matf select_x, eval_x;
        std::vector<int> select_y, eval_y;
        if (config.budget_selection == "holdout") {
            split_eval_sets(scenario, config.seed, select_x, select_y, eval_x, eval_y);
        } else {
            Eigen::Index total = 0;
            for (const TaskData& task : scenario.tasks) total += task.test_x.rows();
            select_x.resize(total, scenario.tasks[0].test_x.cols());
            select_y.clear();
            Eigen::Index at = 0;
            for (const TaskData& task : scenario.tasks) {
                select_x.middleRows(at, task.test_x.rows()) = task.test_x;
                select_y.insert(select_y.end(), task.test_y.begin(), task.test_y.end());
                at += task.test_x.rows();
            }
            eval_x = select_x;
            eval_y = select_y;
        }

        const std::vector<double> grid = config.tau_grid();
        auto sweep_pair = [&](const ExitPolicy& base) {
            BudgetCurve eval_curve = sweep_thresholds(net, eval_x, eval_y, base, grid);
            std::vector<BudgetPick> picks;
            if (config.budget_selection == "holdout") {
                BudgetCurve select_curve = sweep_thresholds(net, select_x, select_y, base, grid);
                for (double b : config.budgets) {
                    BudgetPick pick = threshold_for_budget(select_curve, b);
                    for (const CurvePoint& p : eval_curve.points)
                        if (p.tau == pick.tau) {
                            pick.avg_cost_fraction = p.avg_cost_fraction;
                            pick.accuracy = p.accuracy;
                        }
                    picks.push_back(pick);
                }
            } else {
                for (double b : config.budgets) picks.push_back(threshold_for_budget(eval_curve, b));
            }
            return std::make_pair(std::move(eval_curve), std::move(picks));
        };

        ExitPolicy plain;
        plain.use_tlc = false;
        std::tie(result.curve_plain, result.budgets_plain) = sweep_pair(plain);
        if (config.tlc) {
            ExitPolicy with_tlc;
            with_tlc.use_tlc = true;
            with_tlc.tlc = tlc_params;
            std::tie(result.curve_tlc, result.budgets_tlc) = sweep_pair(with_tlc);
        }

        result.overthinking_report = overthinking(net, eval_x, eval_y);
        result.forgetting = forgetting_matrix(net, scenario);
        result.confidence = confidence_by_task(net, scenario);
        result.task_aware = task_aware_eval(net, scenario);

        // Persist artifacts.
        const std::string curves_path = config.out_dir + "/curves.csv";
        write_file(curves_path, curve_to_csv(result.curve_plain));
        result.checksums["curves.csv"] = fnv1a64_hex(read_file(curves_path));
        if (config.tlc) {
            const std::string tlc_path = config.out_dir + "/curves_tlc.csv";
            write_file(tlc_path, curve_to_csv(result.curve_tlc));
            result.checksums["curves_tlc.csv"] = fnv1a64_hex(read_file(tlc_path));
        }
        write_file(config.out_dir + "/metrics.json", metrics_to_json(result).dump(2) + "\n");
        save_checkpoint(net, config.out_dir + "/checkpoint.eenet");
        result.checksums["checkpoint.eenet"] =
            fnv1a64_hex(read_file(config.out_dir + "/checkpoint.eenet"));
        if (uses_memory && config.memory_capacity > 0)
            save_memory_snapshot(memory, config.out_dir + "/memory.json");

        write_manifest(result, manifest_path, seconds_since(t0));
        return result;
    } catch (const std::exception& e) {
        // Partial flush keeps long runs debuggable.
        try {
            write_manifest(result, manifest_path, seconds_since(t0), e.what());
        } catch (...) {
        }
        throw;
    }
}

std::string export_plot_data(const std::vector<std::string>& manifest_paths) {
    if (manifest_paths.empty()) throw ConfigError("export: need at least one manifest");
    std::string out = "method,tlc,seed,tau,avg_cost_fraction,accuracy\n";
    for (const std::string& path : manifest_paths) {
        json j = json::parse(read_file(path));
        if (!j.contains("schema_version") ||
            j["schema_version"].get<int>() != kManifestSchemaVersion)
            throw VersionError("manifest schema version mismatch: " + path);
        const std::string method = j["config"]["method"].get<std::string>();
        const std::string seed = j["config"]["seed"].get<std::string>();
        auto emit = [&](const json& curve, int tlc_flag) {
            if (curve.is_null()) return;
            for (const auto& p : curve) {
                out += method;
                out += ",";
                out += std::to_string(tlc_flag);
                out += ",";
                out += seed;
                out += ",";
                out += format_double(p["tau"].get<double>());
                out += ",";
                out += format_double(p["avg_cost_fraction"].get<double>());
                out += ",";
                out += format_double(p["accuracy"].get<double>());
                out += "\n";
            }
        };
        emit(j["curves"]["plain"], 0);
        emit(j["curves"]["tlc"], 1);
    }
    return out;
}

}  // namespace eelab
