#include "eelab/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "eelab/errors.hpp"

namespace eelab {

std::string method_name(Method m) {
    switch (m) {
        case Method::FT: return "ft";
        case Method::FTE: return "ft-e";
        case Method::ER: return "er";
        case Method::LWF: return "lwf";
        case Method::BIC: return "bic";
        case Method::ICARL: return "icarl";
    }
    return "ft";
}

Method method_from_name(const std::string& name) {
    if (name == "ft") return Method::FT;
    if (name == "ft-e" || name == "fte") return Method::FTE;
    if (name == "er") return Method::ER;
    if (name == "lwf") return Method::LWF;
    if (name == "bic") return Method::BIC;
    if (name == "icarl") return Method::ICARL;
    throw ConfigError("unknown method: " + name);
}

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("key '" + key + "': expected integer, got '" + v + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("key '" + key + "': expected number, got '" + v + "'");
    return out;
}

bool parse_flag(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected on/off, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string fmt_real(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += f(v[i]);
    }
    return out;
}

}  // namespace

std::vector<double> ExperimentConfig::tau_grid() const {
    std::vector<double> grid;
    for (int k = 0; k < tau_grid_points; ++k)
        grid.push_back(tau_grid_points == 1 ? 0.0
                                            : static_cast<double>(k) /
                                                  static_cast<double>(tau_grid_points - 1));
    if (tau_sentinel) grid.push_back(2.0);
    return grid;
}

void ExperimentConfig::validate() const {
    if (!seed_set) throw ConfigError("seed is mandatory");
    if (dataset != "synthetic-blobs" && dataset != "idx-images" && dataset != "cifar-binary" &&
        dataset != "csv")
        throw ConfigError("unsupported dataset selector: " + dataset);
    if (dataset != "synthetic-blobs" && data_path.empty())
        throw ConfigError("data_path required for dataset " + dataset);
    if (dataset == "idx-images" && labels_path.empty())
        throw ConfigError("labels_path required for idx-images");
    if (num_tasks < 1) throw ConfigError("num_tasks must be >= 1");
    if (memory_capacity < 0) throw ConfigError("memory_capacity must be >= 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (stages < 1) throw ConfigError("stages must be >= 1");
    if (width < 1) throw ConfigError("width must be >= 1");
    if (static_cast<int>(ic_fractions.size()) > stages)
        throw ConfigError("more internal classifiers than stages");
    for (std::size_t i = 0; i < ic_fractions.size(); ++i) {
        if (ic_fractions[i] <= 0.0 || ic_fractions[i] >= 1.0)
            throw ConfigError("ic_fractions must lie in (0, 1)");
        if (i > 0 && ic_fractions[i] <= ic_fractions[i - 1])
            throw ConfigError("ic_fractions must be strictly increasing");
    }
    if (tau_grid_points < 1) throw ConfigError("tau_grid_points must be >= 1");
    for (double b : budgets)
        if (!(b > 0.0 && b <= 1.0)) throw ConfigError("budgets must lie in (0, 1]");
    if (budget_selection != "test" && budget_selection != "holdout")
        throw ConfigError("budget_selection must be test or holdout");
    if (!(lr_decay > 0.0 && lr_decay < 1.0)) throw ConfigError("lr_decay must be in (0, 1)");
    for (std::size_t i = 1; i < lr_milestones.size(); ++i)
        if (lr_milestones[i] <= lr_milestones[i - 1])
            throw ConfigError("lr_milestones must be strictly increasing");
    if (lwf_temperature <= 0.0) throw ConfigError("lwf_temperature must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

std::map<std::string, std::string> ExperimentConfig::echo() const {
    std::map<std::string, std::string> m;
    m["dataset"] = dataset;
    m["data_path"] = data_path;
    m["labels_path"] = labels_path;
    m["test_data_path"] = test_data_path;
    m["test_labels_path"] = test_labels_path;
    m["blobs_classes"] = std::to_string(blobs_classes);
    m["blobs_dim"] = std::to_string(blobs_dim);
    m["blobs_per_class"] = std::to_string(blobs_per_class);
    m["blobs_sigma"] = fmt_real(blobs_sigma);
    m["blobs_seed"] = std::to_string(blobs_seed);
    m["num_tasks"] = std::to_string(num_tasks);
    m["method"] = method_name(method);
    m["memory_capacity"] = std::to_string(memory_capacity);
    m["lwf_lambda"] = fmt_real(lwf_lambda);
    m["lwf_temperature"] = fmt_real(lwf_temperature);
    m["stages"] = std::to_string(stages);
    m["width"] = std::to_string(width);
    m["fr_width"] = std::to_string(fr_width);
    m["ic_fractions"] =
        join<double>(ic_fractions, [](const double& v) { return fmt_real(v); });
    m["epochs"] = std::to_string(epochs);
    m["batch_size"] = std::to_string(batch_size);
    m["base_lr"] = fmt_real(base_lr);
    m["lr_milestones"] =
        join<int>(lr_milestones, [](const int& v) { return std::to_string(v); });
    m["lr_decay"] = fmt_real(lr_decay);
    m["momentum"] = fmt_real(momentum);
    m["weight_decay"] = fmt_real(weight_decay);
    m["grad_clip"] = fmt_real(grad_clip);
    m["tlc"] = tlc ? "on" : "off";
    m["tau_grid_points"] = std::to_string(tau_grid_points);
    m["tau_sentinel"] = tau_sentinel ? "on" : "off";
    m["budgets"] = join<double>(budgets, [](const double& v) { return fmt_real(v); });
    m["budget_selection"] = budget_selection;
    m["seed"] = std::to_string(seed);
    m["out_dir"] = out_dir;
    return m;
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));

        if (key == "dataset") cfg.dataset = val;
        else if (key == "data_path") cfg.data_path = val;
        else if (key == "labels_path") cfg.labels_path = val;
        else if (key == "test_data_path") cfg.test_data_path = val;
        else if (key == "test_labels_path") cfg.test_labels_path = val;
        else if (key == "blobs_classes") cfg.blobs_classes = static_cast<int>(parse_int(key, val));
        else if (key == "blobs_dim") cfg.blobs_dim = static_cast<int>(parse_int(key, val));
        else if (key == "blobs_per_class")
            cfg.blobs_per_class = static_cast<int>(parse_int(key, val));
        else if (key == "blobs_sigma") cfg.blobs_sigma = parse_real(key, val);
        else if (key == "blobs_seed")
            cfg.blobs_seed = static_cast<std::uint64_t>(parse_int(key, val));
        else if (key == "num_tasks") cfg.num_tasks = static_cast<int>(parse_int(key, val));
        else if (key == "method") cfg.method = method_from_name(val);
        else if (key == "memory_capacity")
            cfg.memory_capacity = static_cast<int>(parse_int(key, val));
        else if (key == "lwf_lambda") cfg.lwf_lambda = parse_real(key, val);
        else if (key == "lwf_temperature") cfg.lwf_temperature = parse_real(key, val);
        else if (key == "stages") cfg.stages = static_cast<int>(parse_int(key, val));
        else if (key == "width") cfg.width = static_cast<int>(parse_int(key, val));
        else if (key == "fr_width") cfg.fr_width = static_cast<int>(parse_int(key, val));
        else if (key == "ic_fractions") {
            cfg.ic_fractions.clear();
            for (const std::string& s : split_list(val))
                cfg.ic_fractions.push_back(parse_real(key, s));
        } else if (key == "epochs") cfg.epochs = static_cast<int>(parse_int(key, val));
        else if (key == "batch_size") cfg.batch_size = static_cast<int>(parse_int(key, val));
        else if (key == "base_lr") cfg.base_lr = parse_real(key, val);
        else if (key == "lr_milestones") {
            cfg.lr_milestones.clear();
            for (const std::string& s : split_list(val))
                cfg.lr_milestones.push_back(static_cast<int>(parse_int(key, s)));
        } else if (key == "lr_decay") cfg.lr_decay = parse_real(key, val);
        else if (key == "momentum") cfg.momentum = parse_real(key, val);
        else if (key == "weight_decay") cfg.weight_decay = parse_real(key, val);
        else if (key == "grad_clip") cfg.grad_clip = parse_real(key, val);
        else if (key == "tlc") cfg.tlc = parse_flag(key, val);
        else if (key == "tau_grid_points")
            cfg.tau_grid_points = static_cast<int>(parse_int(key, val));
        else if (key == "tau_sentinel") cfg.tau_sentinel = parse_flag(key, val);
        else if (key == "budgets") {
            cfg.budgets.clear();
            for (const std::string& s : split_list(val)) cfg.budgets.push_back(parse_real(key, s));
        } else if (key == "budget_selection") cfg.budget_selection = val;
        else if (key == "seed") {
            cfg.seed = static_cast<std::uint64_t>(parse_int(key, val));
            cfg.seed_set = true;
        } else if (key == "out_dir") cfg.out_dir = val;
        else throw ConfigError("unknown key '" + key + "' on line " + std::to_string(lineno));
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config: " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str());
}

}  // namespace eelab
