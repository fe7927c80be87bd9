#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "advprune/error.hpp"

namespace advprune {

struct ConfigKey {
    const char* name;
    const char* help;
};

/// Every key the experiment runner understands.
inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys{
        {"dataset", "dataset file path, or toy:<two_gaussians|spiral|checkerboard|bars>"},
        {"data.n", "toy dataset size"},
        {"data.noise", "toy dataset noise"},
        {"data.side", "image side for toy:bars"},
        {"data.val_fraction", "share of the training data held out for validation"},
        {"data.test_fraction", "share of the dataset held out for robust evaluation"},
        {"model.kind", "mlp | tiny_cnn"},
        {"model.hidden", "hidden widths (mlp) or conv channels (tiny_cnn), comma separated"},
        {"loss.kind", "ce | trades | mart"},
        {"loss.beta", "regulariser weight of trades/mart (required for those losses)"},
        {"methods", "comma list of kind[@fraction][+bullet], kind in full|random|glister|gradmatch"},
        {"selector.kind", "selector when methods is unset"},
        {"selector.fraction", "subset fraction when methods is unset"},
        {"selector.interval", "epochs between reselections"},
        {"selector.eta", "GLISTER step size"},
        {"selector.omp_lambda", "ridge regulariser of the OMP refits"},
        {"selector.omp_tol", "OMP stopping tolerance relative to the full gradient norm"},
        {"attack.train.eps", "training perturbation budget (decimal or a/b)"},
        {"attack.train.alpha", "training step size (default eps/4)"},
        {"attack.train.steps", "training PGD steps"},
        {"attack.select.steps", "PGD steps of the selection-time attack"},
        {"attack.probe.steps", "PGD steps of the categorization probe"},
        {"attack.eval.eps_list", "evaluation budgets, comma separated"},
        {"attack.eval.alpha", "evaluation step size"},
        {"attack.eval.steps", "evaluation PGD steps"},
        {"attack.eval.restarts", "evaluation PGD restarts"},
        {"attack.eval.objective", "ce | margin"},
        {"optim.lr", "initial learning rate"},
        {"optim.momentum", "SGD momentum"},
        {"optim.weight_decay", "SGD weight decay"},
        {"bullet.on", "enable per-category attack budgets when methods is unset"},
        {"bullet.steps_outlier", "attack steps for outlier examples"},
        {"bullet.steps_boundary", "attack steps for boundary examples"},
        {"bullet.steps_robust", "attack steps for robust examples"},
        {"track", "categorize the training set after every epoch"},
        {"checkpoint.every", "save a checkpoint every this many epochs (0 = off)"},
        {"epochs", "training epochs"},
        {"batch_size", "minibatch size"},
        {"seed", "master seed"},
    };
    return keys;
}

inline bool is_config_key(const std::string& key) {
    return std::any_of(config_keys().begin(), config_keys().end(), [&](const ConfigKey& k) { return key == k.name; });
}

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline bool parse_plain_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* end = s.data() + s.size();
    const auto r = std::from_chars(s.data(), end, out);
    return r.ec == std::errc{} && r.ptr == end;
}

} // namespace config_detail

/// Decimal or a fraction "a/b".
inline double parse_number(const std::string& key, const std::string& text) {
    const std::string s = config_detail::trim(text);
    double v = 0.0;
    const auto slash = s.find('/');
    if (slash == std::string::npos) {
        if (!config_detail::parse_plain_double(s, v)) throw ConfigError(key, "expected a number, got '" + s + "'");
    } else {
        double a = 0.0, b = 0.0;
        if (!config_detail::parse_plain_double(config_detail::trim(s.substr(0, slash)), a) ||
            !config_detail::parse_plain_double(config_detail::trim(s.substr(slash + 1)), b) || b == 0.0)
            throw ConfigError(key, "expected a fraction a/b, got '" + s + "'");
        v = a / b;
    }
    if (!std::isfinite(v)) throw ConfigError(key, "value is not finite");
    return v;
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = config_detail::trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

/// Flat key = value settings. '#' starts a comment; blank lines are ignored.
class Config {
public:
    static Config parse(const std::string& text) {
        Config c;
        std::stringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = config_detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(line, "line " + std::to_string(lineno) + " is not of the form key = value");
            c.set(config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
        }
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error("cannot open config file " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    void set(const std::string& key, const std::string& value) {
        if (!is_config_key(key)) throw ConfigError(key, "unknown key");
        values_[key] = value;
    }

    /// Applies a "key=value" override.
    void set_assignment(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError(assignment, "override must be key=value");
        set(config_detail::trim(assignment.substr(0, eq)), config_detail::trim(assignment.substr(eq + 1)));
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    const std::string& require(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError(key, "required key is missing");
        return it->second;
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        return has(key) ? values_.at(key) : fallback;
    }

    double get_double(const std::string& key, double fallback) const {
        return has(key) ? parse_number(key, values_.at(key)) : fallback;
    }

    std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
        if (!has(key)) return fallback;
        const auto& s = values_.at(key);
        std::uint64_t v = 0;
        const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
            throw ConfigError(key, "expected a non-negative integer, got '" + s + "'");
        return v;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        std::string s = values_.at(key);
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
        if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
        if (s == "0" || s == "false" || s == "off" || s == "no") return false;
        throw ConfigError(key, "expected a boolean, got '" + values_.at(key) + "'");
    }

    std::vector<double> get_double_list(const std::string& key, std::vector<double> fallback) const {
        if (!has(key)) return fallback;
        std::vector<double> out;
        for (const auto& item : split_list(values_.at(key))) out.push_back(parse_number(key, item));
        if (out.empty()) throw ConfigError(key, "list is empty");
        return out;
    }

    std::vector<std::size_t> get_uint_list(const std::string& key, std::vector<std::size_t> fallback) const {
        if (!has(key)) return fallback;
        std::vector<std::size_t> out;
        for (const auto& item : split_list(values_.at(key))) {
            std::size_t v = 0;
            const auto r = std::from_chars(item.data(), item.data() + item.size(), v);
            if (r.ec != std::errc{} || r.ptr != item.data() + item.size())
                throw ConfigError(key, "expected integers, got '" + item + "'");
            out.push_back(v);
        }
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

} // namespace advprune
