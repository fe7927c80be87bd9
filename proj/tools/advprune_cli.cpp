#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "advprune/advprune.hpp"

using namespace advprune;
namespace fs = std::filesystem;

namespace {

struct ConfigOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::map<std::string, std::string> keyed;
    std::string out_dir;

    Config build() const {
        Config c = config_path.empty() ? Config{} : Config::load(config_path);
        for (const auto& [k, v] : keyed)
            if (!v.empty()) c.set(k, v);
        for (const auto& o : overrides) c.set_assignment(o);
        return c;
    }

    std::string output_dir() const { return out_dir.empty() ? output_dir_from_env() : out_dir; }
};

void add_config_options(CLI::App* cmd, ConfigOptions& o) {
    cmd->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", o.overrides, "override, key=value (repeatable)");
    cmd->add_option("--out-dir", o.out_dir, "output directory (default $ADVPRUNE_OUTPUT_DIR or .)");
    for (const auto& k : config_keys()) cmd->add_option(std::string("--") + k.name, o.keyed[k.name], k.help);
}

std::string in_dir(const std::string& dir, const std::string& name) {
    fs::create_directories(dir);
    return (fs::path(dir) / name).string();
}

template <class Fn>
void write_to(const std::string& path, Fn&& fn) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path);
    fn(f);
    if (!f) throw Error("failed writing " + path);
}

Checkpoint checkpoint_for(const std::string& path, const PreparedData& data) {
    auto ck = load_checkpoint(path);
    if (ck.spec.input_shape != data.model.input_shape || ck.spec.classes != data.model.classes)
        throw Error("checkpoint " + path + " does not match the dataset's shape");
    return ck;
}

int run_gen_data(const std::string& kind, std::size_t n, double noise, std::uint64_t seed, std::size_t side,
                 std::string out, const std::string& out_dir) {
    if (out.empty()) out = in_dir(out_dir, "data.bin");
    const auto d = generate_toy_dataset(parse_toy_kind(kind), n, noise, seed, out, side);
    std::cout << "wrote " << d.size() << " examples of shape " << shape_string(d.feature_shape()) << " to " << out << '\n';
    return 0;
}

int run_train(const ConfigOptions& o) {
    const auto x = ExperimentConfig::from(o.build());
    const auto data = prepare_data(x);
    const auto& m = x.methods.front();
    if (x.methods.size() > 1) std::cerr << "note: train runs only the first method, " << m.label() << '\n';
    const auto dir = o.output_dir();
    auto cfg = method_config(x, m, data.model);
    if (cfg.checkpoint_every > 0) cfg.checkpoint_dir = (fs::path(dir) / "checkpoints").string();
    const auto r = adversarial_train(data.train, data.val, cfg, &data.test);

    save_checkpoint(in_dir(dir, "model.ckpt"), data.model, r.params);
    write_to(in_dir(dir, "metrics.csv"), [&](std::ostream& f) { write_metrics_csv(f, r.metrics, cfg.eval_attacks); });
    if (m.kind != SelectorKind::full)
        write_to(in_dir(dir, "selections.csv"), [&](std::ostream& f) { write_selections_csv(f, r.selections); });
    if (cfg.track) write_to(in_dir(dir, "tracking.csv"), [&](std::ostream& f) { r.tracking().write_csv(f); });

    const auto& last = r.metrics.back();
    std::cout << m.label() << ": clean " << last.clean_acc;
    for (std::size_t i = 0; i < last.robust_acc.size(); ++i)
        std::cout << ", robust@" << cfg.eval_attacks[i].epsilon << ' ' << last.robust_acc[i];
    std::cout << ", " << steady_epoch_seconds(r.metrics) << " s/epoch\n";
    return 0;
}

int run_evaluate(const ConfigOptions& o, const std::string& ckpt) {
    const auto x = ExperimentConfig::from(o.build());
    const auto data = prepare_data(x);
    const auto ck = checkpoint_for(ckpt, data);
    const auto report = evaluate_robust_accuracy(ck.params, ck.spec, data.test, x.train.eval_attacks,
                                                 derive_seed(x.train.seed, {0xe7a1}), x.train.eval_objective);
    write_to(in_dir(o.output_dir(), "robustness.csv"), [&](std::ostream& f) { report.write_csv(f); });
    report.write_csv(std::cout);
    return 0;
}

int run_select(const ConfigOptions& o, const std::string& ckpt) {
    const auto x = ExperimentConfig::from(o.build());
    const auto data = prepare_data(x);
    const auto ck = checkpoint_for(ckpt, data);
    const auto cfg = method_config(x, x.methods.front(), data.model);
    const auto s = select_subset(ck.params, ck.spec, data.train, data.val, cfg.loss, cfg.selector,
                                 derive_seed(x.train.seed, {0x5e1ec7}));
    write_to(in_dir(o.output_dir(), "selection.csv"), [&](std::ostream& f) { s.write_csv(f, 0, true); });
    std::cout << "selected " << s.size() << " of " << data.train.size() << " in " << s.select_seconds << " s"
              << (s.warning ? " (selector stopped early, filled at random)" : "") << '\n';
    return 0;
}

int run_track(const ConfigOptions& o, const std::string& ckpt) {
    const auto x = ExperimentConfig::from(o.build());
    const auto data = prepare_data(x);
    const auto ck = checkpoint_for(ckpt, data);
    const auto cats = categorize_examples(ck.params, ck.spec, data.train, x.train.probe_attack,
                                          derive_seed(x.train.seed, {0x7a4c}));
    write_to(in_dir(o.output_dir(), "categories.csv"), [&](std::ostream& f) {
        f << "index,category\n";
        for (std::size_t i = 0; i < cats.categories.size(); ++i) f << i << ',' << to_string(cats.categories[i]) << '\n';
    });
    std::cout << "outlier " << cats.counts.outlier << ", boundary " << cats.counts.boundary << ", robust "
              << cats.counts.robust << '\n';
    return 0;
}

int run_report(const ConfigOptions& o) {
    const auto x = ExperimentConfig::from(o.build());
    const auto report = run_experiment(x, o.output_dir(), nullptr, &std::cerr);
    report.write_markdown(std::cout);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adversarial training on pruned subsets"};
    app.require_subcommand(1);

    std::string kind = "two_gaussians", data_out, gen_dir;
    std::size_t n = 1000, side = 12;
    double noise = 0.05;
    std::uint64_t seed = 0;
    auto* gen = app.add_subcommand("gen-data", "generate a toy dataset file");
    gen->add_option("--kind", kind, "two_gaussians | spiral | checkerboard | bars");
    gen->add_option("--n", n, "number of examples")->check(CLI::Range(std::size_t{10}, std::size_t{1} << 24));
    gen->add_option("--noise", noise, "noise level")->check(CLI::NonNegativeNumber);
    gen->add_option("--seed", seed, "random seed");
    gen->add_option("--side", side, "image side for bars");
    gen->add_option("--out", data_out, "output file (default <out-dir>/data.bin)");
    gen->add_option("--out-dir", gen_dir, "output directory (default $ADVPRUNE_OUTPUT_DIR or .)");

    ConfigOptions train_o, eval_o, select_o, track_o, report_o;
    std::string eval_ckpt, select_ckpt, track_ckpt;
    auto* train = app.add_subcommand("train", "train the first configured method and save model.ckpt");
    add_config_options(train, train_o);
    auto* evaluate = app.add_subcommand("evaluate", "robust accuracy of a checkpoint on the test split");
    add_config_options(evaluate, eval_o);
    evaluate->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
    auto* select = app.add_subcommand("select", "run the configured selector once with a checkpoint");
    add_config_options(select, select_o);
    select->add_option("--checkpoint", select_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
    auto* track = app.add_subcommand("track", "categorize the training split with a checkpoint");
    add_config_options(track, track_o);
    track->add_option("--checkpoint", track_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
    auto* report = app.add_subcommand("report", "run every configured method and write report.csv / report.md");
    add_config_options(report, report_o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*gen) return run_gen_data(kind, n, noise, seed, side, data_out, gen_dir.empty() ? output_dir_from_env() : gen_dir);
        if (*train) return run_train(train_o);
        if (*evaluate) return run_evaluate(eval_o, eval_ckpt);
        if (*select) return run_select(select_o, select_ckpt);
        if (*track) return run_track(track_o, track_ckpt);
        if (*report) return run_report(report_o);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
