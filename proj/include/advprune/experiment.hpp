#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "advprune/config.hpp"
#include "advprune/csv.hpp"
#include "advprune/dataset_io.hpp"
#include "advprune/trainer.hpp"

namespace advprune {

/// One configured training method, written kind[@fraction][+bullet].
struct MethodSpec {
    SelectorKind kind = SelectorKind::full;
    double fraction = 1.0;
    bool bullet = false;

    std::string label() const {
        std::ostringstream s;
        s << to_string(kind);
        if (kind != SelectorKind::full) s << '@' << fraction;
        if (bullet) s << "+bullet";
        return s.str();
    }

    /// File-name friendly label.
    std::string slug() const {
        std::string out = label();
        std::replace(out.begin(), out.end(), '@', '_');
        std::replace(out.begin(), out.end(), '+', '_');
        return out;
    }

    friend bool operator==(const MethodSpec&, const MethodSpec&) = default;
};

inline MethodSpec parse_method(const std::string& text, double default_fraction = 0.3) {
    MethodSpec m;
    std::string s = text;
    const auto plus = s.find('+');
    if (plus != std::string::npos) {
        if (s.substr(plus + 1) != "bullet") throw ConfigError("methods", "unknown method modifier in '" + text + "'");
        m.bullet = true;
        s.resize(plus);
    }
    const auto at = s.find('@');
    try {
        m.kind = parse_selector_kind(s.substr(0, at));
    } catch (const InvalidArgument&) {
        throw ConfigError("methods", "unknown selector in '" + text + "'");
    }
    if (m.kind == SelectorKind::full) {
        if (at != std::string::npos) throw ConfigError("methods", "full takes no fraction: '" + text + "'");
        m.fraction = 1.0;
    } else {
        m.fraction = at == std::string::npos ? default_fraction : parse_number("methods", s.substr(at + 1));
        if (!(m.fraction > 0.0 && m.fraction <= 1.0)) throw ConfigError("methods", "fraction must be in (0,1]: '" + text + "'");
    }
    return m;
}

struct ExperimentConfig {
    std::string dataset = "toy:two_gaussians";
    std::size_t data_n = 1000;
    double data_noise = 0.05;
    std::size_t data_side = 12;
    double val_fraction = 0.1;
    double test_fraction = 0.2;
    ModelKind model_kind = ModelKind::mlp;
    std::vector<std::size_t> hidden;
    /// Shared settings; the model, selector kind/fraction and bullet policy
    /// are filled in per method.
    TrainConfig train;
    BudgetPolicy bullet_policy;
    std::vector<MethodSpec> methods;

    static ExperimentConfig from(const Config& c) {
        ExperimentConfig x;
        x.dataset = c.get_string("dataset", x.dataset);
        x.data_n = c.get_uint("data.n", x.data_n);
        x.data_noise = c.get_double("data.noise", x.data_noise);
        x.data_side = c.get_uint("data.side", x.data_side);
        x.val_fraction = c.get_double("data.val_fraction", x.val_fraction);
        x.test_fraction = c.get_double("data.test_fraction", x.test_fraction);
        if (!(x.val_fraction >= 0.0 && x.val_fraction < 1.0)) throw ConfigError("data.val_fraction", "must be in [0,1)");
        if (!(x.test_fraction >= 0.0 && x.test_fraction < 1.0)) throw ConfigError("data.test_fraction", "must be in [0,1)");
        try {
            x.model_kind = parse_model_kind(c.get_string("model.kind", "mlp"));
        } catch (const InvalidArgument& e) {
            throw ConfigError("model.kind", e.what());
        }
        x.hidden = c.get_uint_list("model.hidden", {});

        auto& t = x.train;
        try {
            t.loss.kind = parse_loss_kind(c.get_string("loss.kind", "trades"));
        } catch (const InvalidArgument& e) {
            throw ConfigError("loss.kind", e.what());
        }
        if (t.loss.kind != LossKind::ce) {
            const double beta = parse_number("loss.beta", c.require("loss.beta"));
            if (!(beta >= 0.0)) throw ConfigError("loss.beta", "must be >= 0");
            if (t.loss.kind == LossKind::trades)
                t.loss.beta = beta;
            else
                t.loss.lambda_mart = beta;
        }

        t.epochs = c.get_uint("epochs", t.epochs);
        t.batch_size = c.get_uint("batch_size", t.batch_size);
        t.seed = c.get_uint("seed", t.seed);
        t.selection_interval = c.get_uint("selector.interval", t.selection_interval);
        if (t.epochs < 1) throw ConfigError("epochs", "must be >= 1");
        if (t.batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
        if (t.selection_interval < 1) throw ConfigError("selector.interval", "must be >= 1");

        const double eps = c.get_double("attack.train.eps", 8.0 / 255.0);
        if (!(eps >= 0.0)) throw ConfigError("attack.train.eps", "must be >= 0");
        t.train_attack = AttackSpec::training(eps);
        t.train_attack.alpha = c.get_double("attack.train.alpha", eps / 4.0);
        t.train_attack.steps = static_cast<int>(c.get_uint("attack.train.steps", 10));
        t.probe_attack = AttackSpec::probe(eps);
        t.probe_attack.steps = static_cast<int>(c.get_uint("attack.probe.steps", 5));
        t.selector.selection_attack = AttackSpec::probe(eps);
        t.selector.selection_attack.steps = static_cast<int>(c.get_uint("attack.select.steps", 5));
        t.selector.glister_eta = c.get_double("selector.eta", t.selector.glister_eta);
        t.selector.omp_lambda = c.get_double("selector.omp_lambda", t.selector.omp_lambda);
        t.selector.omp_tol = c.get_double("selector.omp_tol", t.selector.omp_tol);

        const auto eps_list = c.get_double_list("attack.eval.eps_list", {4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0});
        const double eval_alpha = c.get_double("attack.eval.alpha", 2.0 / 255.0);
        const int eval_steps = static_cast<int>(c.get_uint("attack.eval.steps", 50));
        const int eval_restarts = static_cast<int>(c.get_uint("attack.eval.restarts", 10));
        for (double e : eps_list) {
            if (!(e >= 0.0)) throw ConfigError("attack.eval.eps_list", "budgets must be >= 0");
            t.eval_attacks.push_back(AttackSpec{e, eval_alpha, eval_steps, eval_restarts, true});
        }
        const auto objective = c.get_string("attack.eval.objective", "ce");
        if (objective == "ce")
            t.eval_objective = EvalObjective::ce;
        else if (objective == "margin")
            t.eval_objective = EvalObjective::margin;
        else
            throw ConfigError("attack.eval.objective", "expected ce or margin");

        t.lr0 = c.get_double("optim.lr", t.lr0);
        t.momentum = c.get_double("optim.momentum", t.momentum);
        t.weight_decay = c.get_double("optim.weight_decay", t.weight_decay);
        if (!(t.lr0 > 0.0)) throw ConfigError("optim.lr", "must be > 0");
        if (!(t.momentum >= 0.0 && t.momentum < 1.0)) throw ConfigError("optim.momentum", "must be in [0,1)");
        if (!(t.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay", "must be >= 0");

        x.bullet_policy.outlier_steps = static_cast<int>(c.get_uint("bullet.steps_outlier", 0));
        x.bullet_policy.boundary_steps = static_cast<int>(c.get_uint("bullet.steps_boundary", 10));
        x.bullet_policy.robust_steps = static_cast<int>(c.get_uint("bullet.steps_robust", 1));
        t.track = c.get_bool("track", false);
        t.checkpoint_every = c.get_uint("checkpoint.every", 0);

        if (c.has("methods")) {
            for (const auto& item : split_list(c.get_string("methods", ""))) x.methods.push_back(parse_method(item));
            if (x.methods.empty()) throw ConfigError("methods", "no methods listed");
        } else {
            MethodSpec m;
            try {
                m.kind = parse_selector_kind(c.get_string("selector.kind", "full"));
            } catch (const InvalidArgument& e) {
                throw ConfigError("selector.kind", e.what());
            }
            m.fraction = m.kind == SelectorKind::full ? 1.0 : c.get_double("selector.fraction", 0.3);
            if (!(m.fraction > 0.0 && m.fraction <= 1.0)) throw ConfigError("selector.fraction", "must be in (0,1]");
            m.bullet = c.get_bool("bullet.on", false);
            x.methods.push_back(m);
        }
        return x;
    }
};

struct PreparedData {
    Dataset train;
    Dataset val;
    Dataset test;
    ModelSpec model;
};

/// Loads or generates the dataset, splits off the test and validation
/// parts, and sizes the model to the data.
inline PreparedData prepare_data(const ExperimentConfig& x) {
    Dataset all;
    if (x.dataset.rfind("toy:", 0) == 0) {
        ToyKind kind;
        try {
            kind = parse_toy_kind(x.dataset.substr(4));
        } catch (const InvalidArgument& e) {
            throw ConfigError("dataset", e.what());
        }
        all = generate_toy_dataset(kind, x.data_n, x.data_noise, derive_seed(x.train.seed, {0xda7a}), x.data_side);
    } else {
        all = load_dataset(x.dataset);
    }
    PreparedData p;
    auto [rest, test] = split_train_val(all, x.test_fraction, derive_seed(x.train.seed, {0x7e57}));
    auto [train, val] = split_train_val(rest, x.val_fraction, derive_seed(x.train.seed, {0x5a1}));
    p.train = std::move(train);
    p.val = std::move(val);
    p.test = std::move(test);

    const auto fs = all.feature_shape();
    if (x.model_kind == ModelKind::mlp) {
        if (fs.size() != 1) throw ConfigError("model.kind", "mlp needs flat features, dataset has " + shape_string(fs));
        p.model = x.hidden.empty() ? ModelSpec::mlp(fs[0], all.classes) : ModelSpec::mlp(fs[0], all.classes, x.hidden);
    } else {
        if (fs.size() != 3) throw ConfigError("model.kind", "tiny_cnn needs [C,S,S] images, dataset has " + shape_string(fs));
        p.model = x.hidden.empty() ? ModelSpec::tiny_cnn(fs[0], fs[1], all.classes)
                                   : ModelSpec::tiny_cnn(fs[0], fs[1], all.classes, x.hidden);
    }
    p.model.validate();
    return p;
}

inline TrainConfig method_config(const ExperimentConfig& x, const MethodSpec& m, const ModelSpec& model) {
    TrainConfig t = x.train;
    t.model = model;
    t.selector.kind = m.kind;
    t.selector.fraction = m.fraction;
    if (m.bullet) t.bullet = x.bullet_policy;
    return t;
}

struct ReportRow {
    std::string method;
    double fraction = 1.0;
    bool bullet = false;
    double clean_acc = 0.0;
    std::vector<double> robust_acc;
    double time_per_epoch = 0.0;
    double speedup = 1.0;
    double selection_seconds = 0.0;
    std::size_t selections = 0;
};

struct ExperimentReport {
    std::vector<double> epsilons;
    std::string baseline;
    std::vector<ReportRow> rows;

    void write_csv(std::ostream& out) const {
        out << "method,fraction,bullet,clean_acc";
        for (double e : epsilons) out << ",robust_acc@" << csv_number(e);
        out << ",time_per_epoch,speedup,selection_seconds,selections\n";
        for (const auto& r : rows) {
            out << r.method << ',' << csv_number(r.fraction) << ',' << (r.bullet ? 1 : 0) << ',' << csv_number(r.clean_acc);
            for (double a : r.robust_acc) out << ',' << csv_number(a);
            out << ',' << csv_number(r.time_per_epoch) << ',' << csv_number(r.speedup) << ','
                << csv_number(r.selection_seconds) << ',' << r.selections << '\n';
        }
    }

    /// Table with clean/robust accuracy in percent and "time (speed-up×)".
    void write_markdown(std::ostream& out) const {
        out << "| method | clean";
        for (double e : epsilons) out << " | robust@" << std::setprecision(4) << e * 255.0 << "/255";
        out << " | time/epoch (speed-up) |\n|---|---";
        for (std::size_t i = 0; i < epsilons.size(); ++i) out << "|---";
        out << "|---|\n";
        for (const auto& r : rows) {
            out << "| " << r.method << " | " << std::fixed << std::setprecision(2) << 100.0 * r.clean_acc;
            for (double a : r.robust_acc) out << " | " << 100.0 * a;
            out << " | " << std::setprecision(4) << r.time_per_epoch << " s (" << std::setprecision(2) << r.speedup
                << "×) |\n";
            out << std::defaultfloat;
        }
        out << "\nSpeed-ups are relative to " << baseline << ".\n";
    }
};

struct MethodRun {
    MethodSpec method;
    TrainResult result;
};

/// Runs every configured method on the same split and seed, writes the
/// report plus per-method metrics/selection/tracking CSVs into `out_dir`
/// (skipped when empty). The baseline is the first plain `full` method, or
/// the first method if none is listed.
inline ExperimentReport run_experiment(const ExperimentConfig& x, const std::string& out_dir,
                                       std::vector<MethodRun>* runs = nullptr, std::ostream* log = nullptr) {
    const auto data = prepare_data(x);
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
    auto write = [&](const std::string& name, auto&& fn) {
        if (out_dir.empty()) return;
        const auto path = (std::filesystem::path(out_dir) / name).string();
        std::ofstream f(path);
        if (!f) throw Error("cannot write " + path);
        fn(f);
    };

    ExperimentReport report;
    for (const auto& a : x.train.eval_attacks) report.epsilons.push_back(a.epsilon);
    std::vector<MethodRun> local;
    for (const auto& m : x.methods) {
        auto cfg = method_config(x, m, data.model);
        if (cfg.checkpoint_every > 0)
            cfg.checkpoint_dir = out_dir.empty() ? "." : (std::filesystem::path(out_dir) / ("ckpt_" + m.slug())).string();
        if (log) *log << "running " << m.label() << " (" << cfg.epochs << " epochs)\n";
        TrainResult r;
        try {
            r = adversarial_train(data.train, data.val, cfg, &data.test);
        } catch (const Error& e) {
            throw Error("method '" + m.label() + "': " + e.what());
        }
        ReportRow row;
        row.method = m.label();
        row.fraction = m.fraction;
        row.bullet = m.bullet;
        row.clean_acc = r.metrics.back().clean_acc;
        row.robust_acc = r.metrics.back().robust_acc;
        row.time_per_epoch = steady_epoch_seconds(r.metrics);
        for (const auto& em : r.metrics) row.selection_seconds += em.selection_seconds;
        row.selections = r.selections.size();
        report.rows.push_back(row);

        write("metrics_" + m.slug() + ".csv", [&](std::ostream& f) { write_metrics_csv(f, r.metrics, cfg.eval_attacks); });
        if (m.kind != SelectorKind::full)
            write("selections_" + m.slug() + ".csv", [&](std::ostream& f) { write_selections_csv(f, r.selections); });
        if (cfg.track) write("tracking_" + m.slug() + ".csv", [&](std::ostream& f) { r.tracking().write_csv(f); });
        local.push_back({m, std::move(r)});
    }

    std::size_t base = 0;
    for (std::size_t i = 0; i < x.methods.size(); ++i)
        if (x.methods[i].kind == SelectorKind::full && !x.methods[i].bullet) {
            base = i;
            break;
        }
    report.baseline = report.rows[base].method;
    for (auto& row : report.rows) row.speedup = report.rows[base].time_per_epoch / row.time_per_epoch;

    write("report.csv", [&](std::ostream& f) { report.write_csv(f); });
    write("report.md", [&](std::ostream& f) { report.write_markdown(f); });
    if (runs) *runs = std::move(local);
    return report;
}

inline ExperimentReport run_experiment(const std::string& config_path, const std::string& out_dir) {
    return run_experiment(ExperimentConfig::from(Config::load(config_path)), out_dir);
}

/// Output directory from ADVPRUNE_OUTPUT_DIR, defaulting to the working directory.
inline std::string output_dir_from_env() {
    const char* v = std::getenv("ADVPRUNE_OUTPUT_DIR");
    return v && *v ? std::string(v) : std::string(".");
}

} // namespace advprune
