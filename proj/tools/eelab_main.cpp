// eelab: continual-learning early-exit benchmark harness.
//
//   eelab run <config>                train + fit + sweep with one seed
//   eelab sweep <config> --seeds ...  same pipeline across several seeds
//   eelab export <manifests...>       consolidated plot-ready CSV
//   eelab validate <config>           parse and check a config
//
// Exit codes: 0 success, 2 configuration error, 3 data/format error.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "eelab/errors.hpp"
#include "eelab/experiment.hpp"

namespace {

int guarded(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const eelab::ConfigError& e) {
        std::cerr << "eelab: " << e.what() << "\n";
        return 2;
    } catch (const eelab::DataError& e) {
        std::cerr << "eelab: " << e.what() << "\n";
        return 3;
    } catch (const eelab::FormatError& e) {
        std::cerr << "eelab: " << e.what() << "\n";
        return 3;
    } catch (const eelab::VersionError& e) {
        std::cerr << "eelab: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "eelab: " << e.what() << "\n";
        return 1;
    }
}

void print_summary(const eelab::RunResult& result) {
    std::cout << "method=" << eelab::method_name(result.config.method)
              << " seed=" << result.config.seed << " digest=" << result.digest << "\n";
    auto print_budgets = [](const char* label, const std::vector<eelab::BudgetPick>& picks) {
        if (picks.empty()) return;
        std::cout << "  " << label << ":";
        for (const auto& p : picks)
            std::cout << " " << static_cast<int>(p.budget * 100) << "%="
                      << eelab::format_double(p.accuracy) << (p.feasible ? "" : "(!)");
        std::cout << "\n";
    };
    print_budgets("accuracy", result.budgets_plain);
    print_budgets("accuracy+tlc", result.budgets_tlc);
    if (result.tlc_report) {
        std::cout << "  tlc: a=" << eelab::format_double(result.tlc_report->params.a)
                  << " b=" << eelab::format_double(result.tlc_report->params.b)
                  << " energy=" << eelab::format_double(result.tlc_report->energy) << "\n";
    }
    std::cout << "  overthinking gap=" << eelab::format_double(result.overthinking_report.gap)
              << " (oracle " << eelab::format_double(result.overthinking_report.oracle_accuracy)
              << ", final " << eelab::format_double(result.overthinking_report.final_accuracy)
              << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual-learning early-exit benchmark"};
    app.require_subcommand(1);

    std::string config_path, out_dir, seeds_arg, export_out;
    std::vector<std::string> manifests;

    CLI::App* run = app.add_subcommand("run", "run one experiment");
    run->add_option("config", config_path, "config file")->required();
    run->add_option("--out", out_dir, "override out_dir");

    CLI::App* sweep = app.add_subcommand("sweep", "run several seeds");
    sweep->add_option("config", config_path, "config file")->required();
    sweep->add_option("--seeds", seeds_arg, "comma-separated seeds")->required();
    sweep->add_option("--out", out_dir, "base output directory");

    CLI::App* exp = app.add_subcommand("export", "merge manifests into plot CSV");
    exp->add_option("manifests", manifests, "manifest.json files")->required();
    exp->add_option("--out", export_out, "output CSV path (default: stdout)");

    CLI::App* validate = app.add_subcommand("validate", "check a config file");
    validate->add_option("config", config_path, "config file")->required();

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) {
        return guarded([&] {
            eelab::ExperimentConfig cfg = eelab::parse_config_file(config_path);
            if (!out_dir.empty()) cfg.out_dir = out_dir;
            eelab::RunResult result = eelab::run_experiment(cfg);
            print_summary(result);
        });
    }
    if (sweep->parsed()) {
        return guarded([&] {
            eelab::ExperimentConfig base = eelab::parse_config_file(config_path);
            const std::string root = out_dir.empty() ? base.out_dir : out_dir;
            std::vector<std::string> seeds;
            std::stringstream ss(seeds_arg);
            std::string item;
            while (std::getline(ss, item, ',')) {
                if (item.empty()) continue;
                if (item.find_first_not_of("0123456789") != std::string::npos)
                    throw eelab::ConfigError("--seeds expects integers, got '" + item + "'");
                seeds.push_back(item);
            }
            if (seeds.empty()) throw eelab::ConfigError("--seeds is empty");
            for (const std::string& s : seeds) {
                eelab::ExperimentConfig cfg = base;
                cfg.seed = std::stoull(s);
                cfg.seed_set = true;
                cfg.out_dir = root + "/seed_" + s;
                eelab::RunResult result = eelab::run_experiment(cfg);
                print_summary(result);
            }
        });
    }
    if (exp->parsed()) {
        return guarded([&] {
            const std::string csv = eelab::export_plot_data(manifests);
            if (export_out.empty()) {
                std::cout << csv;
            } else {
                std::ofstream os(export_out, std::ios::binary);
                if (!os) throw eelab::DataError("cannot write: " + export_out);
                os << csv;
            }
        });
    }
    if (validate->parsed()) {
        return guarded([&] {
            eelab::ExperimentConfig cfg = eelab::parse_config_file(config_path);
            cfg.validate();
            std::cout << "config ok: method=" << eelab::method_name(cfg.method)
                      << " tasks=" << cfg.num_tasks << " seed=" << cfg.seed << "\n";
        });
    }
    return 0;
}
