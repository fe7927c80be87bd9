#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "advprune/attacks.hpp"
#include "advprune/bullet.hpp"
#include "advprune/csv.hpp"
#include "advprune/data.hpp"
#include "advprune/diffcore.hpp"
#include "advprune/error.hpp"
#include "advprune/losses.hpp"
#include "advprune/models.hpp"
#include "advprune/rng.hpp"
#include "advprune/selection.hpp"

namespace advprune {

/// θ and velocity updated in place: v ← m·v + g + wd·θ; θ ← θ − lr·v.
inline void sgd_update(ParamSet& params, std::span<const Tensor> grads, ParamSet& velocity, double lr, double momentum,
                       double weight_decay) {
    if (grads.size() != params.size() || velocity.size() != params.size())
        throw ShapeError("grads", "expected " + std::to_string(params.size()) + " gradient tensors");
    const float lr_f = static_cast<float>(lr), m = static_cast<float>(momentum), wd = static_cast<float>(weight_decay);
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& theta = params[p].tensor;
        auto& v = velocity[p].tensor;
        if (grads[p].shape != theta.shape) throw ShapeError(params[p].name, "gradient shape " + shape_string(grads[p].shape));
        if (v.shape != theta.shape) throw ShapeError(params[p].name, "velocity shape " + shape_string(v.shape));
        for (std::size_t i = 0; i < theta.size(); ++i) {
            v.values[i] = m * v.values[i] + grads[p].values[i] + wd * theta.values[i];
            theta.values[i] -= lr_f * v.values[i];
        }
    }
}

struct TrainConfig {
    ModelSpec model;
    std::size_t epochs = 40;
    std::size_t batch_size = 128;
    SelectorConfig selector{SelectorKind::full};
    std::size_t selection_interval = 20;
    LossConfig loss;
    AttackSpec train_attack = AttackSpec::training(8.0 / 255.0);
    std::vector<AttackSpec> eval_attacks;
    EvalObjective eval_objective = EvalObjective::ce;
    /// Robust evaluation every this many epochs; 0 evaluates after the last epoch only.
    std::size_t eval_every = 0;
    double lr0 = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    /// Fractions of the run at which the learning rate drops by 10×.
    std::vector<double> lr_milestones{0.5, 0.75};
    std::optional<BudgetPolicy> bullet;
    AttackSpec probe_attack = AttackSpec::probe(8.0 / 255.0);
    /// Categorize the full training set after every epoch.
    bool track = false;
    std::size_t checkpoint_every = 0;
    std::string checkpoint_dir;
    std::uint64_t seed = 0;
    /// Start from these weights instead of a fresh initialisation.
    std::optional<ParamSet> initial_params;
    /// Active subset for the epochs before the first selection round, in
    /// place of the random draw (or the full set for `full`).
    std::optional<SubsetSelection> initial_subset;

    void validate() const {
        model.validate();
        if (initial_params && !initial_params->same_shapes(init_model(model, 0)))
            throw InvalidArgument("initial parameters do not match the model");
        if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
        if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
        if (selection_interval < 1) throw InvalidArgument("selection interval must be >= 1");
        if (!(lr0 > 0.0)) throw InvalidArgument("learning rate must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must be in [0,1)");
        if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be >= 0");
        for (double m : lr_milestones)
            if (!(m > 0.0 && m <= 1.0)) throw InvalidArgument("lr milestones must be fractions in (0,1]");
        selector.validate();
        train_attack.validate();
        probe_attack.validate();
        for (const auto& a : eval_attacks) a.validate();
        if (bullet) bullet->validate();
        if (checkpoint_every > 0 && checkpoint_dir.empty())
            throw InvalidArgument("checkpoint_every needs a checkpoint directory");
    }
};

/// lr0 times 0.1 for every milestone already reached.
inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
    double lr = cfg.lr0;
    for (double m : cfg.lr_milestones)
        if (static_cast<double>(epoch) >= m * static_cast<double>(cfg.epochs)) lr *= 0.1;
    return lr;
}

/// Epoch 0 trains on a random subset; reselection happens at R, 2R, ... < total.
constexpr bool selection_schedule(std::size_t epoch, std::size_t interval, std::size_t total_epochs) {
    return epoch > 0 && interval > 0 && epoch % interval == 0 && epoch < total_epochs;
}

inline std::size_t selection_count(std::size_t interval, std::size_t total_epochs) {
    std::size_t n = 0;
    for (std::size_t e = 0; e < total_epochs; ++e) n += selection_schedule(e, interval, total_epochs) ? 1 : 0;
    return n;
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double clean_acc = 0.0;
    /// One entry per eval attack on evaluated epochs, empty otherwise.
    std::vector<double> robust_acc;
    double epoch_seconds = 0.0;
    double selection_seconds = 0.0;
    bool selected = false;
    std::size_t subset_size = 0;
    std::size_t attack_steps = 0;
    /// Bullet probe of the active subset at epoch start.
    std::optional<CategoryCounts> budget_counts;
    /// Full training set after the epoch.
    std::optional<CategoryCounts> tracking_counts;
};

struct SelectionRound {
    std::size_t epoch = 0;
    SubsetSelection selection;
};

struct TrainResult {
    ParamSet params;
    std::vector<EpochMetrics> metrics;
    SubsetSelection initial_subset;
    /// Rounds fired by the selection schedule, in order.
    std::vector<SelectionRound> selections;

    TrackingTable tracking() const {
        std::vector<CategoryCounts> history;
        for (const auto& m : metrics)
            if (m.tracking_counts) history.push_back(*m.tracking_counts);
        return track_dynamics(history);
    }
};

inline void write_metrics_csv(std::ostream& out, std::span<const EpochMetrics> metrics,
                              std::span<const AttackSpec> eval_attacks) {
    out << "epoch,train_loss,clean_acc,epoch_seconds,selection_seconds,selected,subset_size,attack_steps";
    for (const auto& a : eval_attacks) out << ",robust_acc@" << csv_number(a.epsilon);
    out << ",n_outlier,n_boundary,n_robust\n";
    for (const auto& m : metrics) {
        out << m.epoch << ',' << csv_number(m.train_loss) << ',' << csv_number(m.clean_acc) << ','
            << csv_number(m.epoch_seconds) << ',' << csv_number(m.selection_seconds) << ',' << (m.selected ? 1 : 0) << ','
            << m.subset_size << ',' << m.attack_steps;
        for (std::size_t i = 0; i < eval_attacks.size(); ++i) {
            out << ',';
            if (i < m.robust_acc.size()) out << csv_number(m.robust_acc[i]);
        }
        const auto& c = m.tracking_counts ? m.tracking_counts : m.budget_counts;
        if (c)
            out << ',' << c->outlier << ',' << c->boundary << ',' << c->robust << '\n';
        else
            out << ",,,\n";
    }
}

inline void write_selections_csv(std::ostream& out, std::span<const SelectionRound> rounds) {
    out << "round,index,weight\n";
    for (std::size_t r = 0; r < rounds.size(); ++r) rounds[r].selection.write_csv(out, r + 1, false);
}

namespace train_detail {

enum StreamTag : std::uint64_t {
    kInit = 1,
    kInitialSubset,
    kSelect,
    kShuffle,
    kAttack,
    kProbe,
    kTrack,
    kEval,
};

inline double accuracy(const ParamSet& params, const ModelSpec& spec, const Dataset& data, std::size_t batch = 512) {
    std::size_t correct = 0;
    for (std::size_t b = 0; b < data.size(); b += batch) {
        const std::size_t e = std::min(data.size(), b + batch);
        const auto pred = predict(params, spec, slice_rows(data.inputs, b, e));
        for (std::size_t i = b; i < e; ++i) correct += pred[i - b] == data.labels[i] ? 1 : 0;
    }
    return data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Adversaries for one batch. Rows are grouped by step budget; each group
/// is attacked with its own seed so a uniform budget reproduces the plain path.
inline Tensor batch_adversaries(const ParamSet& params, const ModelSpec& spec, const Tensor& x, std::span<const int> y,
                                const Objective<float>& objective, const AttackSpec& attack,
                                std::span<const int> steps, std::uint64_t seed, std::size_t& step_count) {
    const std::size_t n = x.dim(0);
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) groups[steps.empty() ? attack.steps : steps[i]].push_back(i);
    if (groups.size() == 1) {
        AttackSpec a = attack;
        a.steps = groups.begin()->first;
        step_count += n * static_cast<std::size_t>(a.steps) * static_cast<std::size_t>(a.restarts);
        return pgd_attack(params, spec, x, y, objective, a,
                          derive_seed(seed, {static_cast<std::uint64_t>(a.steps)}));
    }
    Tensor out = x;
    for (const auto& [s, rows] : groups) {
        AttackSpec a = attack;
        a.steps = s;
        step_count += rows.size() * static_cast<std::size_t>(s) * static_cast<std::size_t>(a.restarts);
        if (s == 0) continue;
        const auto xs = gather_rows(x, std::span<const std::size_t>(rows));
        std::vector<int> ys;
        for (auto r : rows) ys.push_back(y[r]);
        const auto adv = pgd_attack(params, spec, xs, std::span<const int>(ys), objective, a,
                                    derive_seed(seed, {static_cast<std::uint64_t>(s)}));
        scatter_rows(out, std::span<const std::size_t>(rows), adv);
    }
    return out;
}

inline double seconds(std::chrono::steady_clock::time_point a, std::chrono::steady_clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

} // namespace train_detail

/// Adversarial training on a periodically reselected weighted subset.
/// Robust accuracy is measured on `eval` when given, else on `val` when
/// non-empty, else on `train`. Deterministic given cfg.seed.
inline TrainResult adversarial_train(const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                                     const Dataset* eval = nullptr) {
    using namespace train_detail;
    using clock = std::chrono::steady_clock;
    cfg.validate();
    train.validate();
    cfg.model.check_inputs(train.inputs.shape);
    if (train.size() < cfg.batch_size)
        throw InvalidArgument("training set (" + std::to_string(train.size()) + ") is smaller than batch_size (" +
                              std::to_string(cfg.batch_size) + ")");
    if (cfg.selector.kind == SelectorKind::glister && val.empty())
        throw InvalidArgument("glister selection needs a validation set");
    const Dataset& eval_set = eval ? *eval : (val.empty() ? train : val);

    const std::size_t n = train.size();
    const auto objective = training_objective<float>(cfg.loss);
    const auto attack_obj = attack_objective<float>(cfg.loss);

    TrainResult result;
    result.params = cfg.initial_params ? *cfg.initial_params : init_model(cfg.model, derive_seed(cfg.seed, {kInit}));
    ParamSet velocity = result.params.zeros_like();

    if (cfg.initial_subset) {
        cfg.initial_subset->validate(n);
        if (cfg.initial_subset->size() == 0) throw InvalidArgument("initial subset is empty");
    }
    SubsetSelection active = cfg.initial_subset ? *cfg.initial_subset
                             : cfg.selector.kind == SelectorKind::full
                                 ? SubsetSelection::all(n)
                                 : select_random(n, cfg.selector.subset_size(n), derive_seed(cfg.seed, {kInitialSubset}));
    result.initial_subset = active;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochMetrics m;
        m.epoch = epoch;

        if (cfg.selector.kind != SelectorKind::full &&
            selection_schedule(epoch, cfg.selection_interval, cfg.epochs)) {
            const auto t0 = clock::now();
            try {
                active = select_subset(result.params, cfg.model, train, val, cfg.loss, cfg.selector,
                                       derive_seed(cfg.seed, {kSelect, epoch}));
            } catch (const NonFiniteError& e) {
                throw DivergenceError(epoch, 0, std::string("during selection: ") + e.what());
            }
            m.selection_seconds = seconds(t0, clock::now());
            m.selected = true;
            result.selections.push_back({epoch, active});
        }
        m.subset_size = active.size();

        const auto t_train = clock::now();
        std::vector<std::size_t> order(active.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(cfg.seed, {kShuffle, epoch}));
        shuffle_rng.shuffle(std::span<std::size_t>(order));

        std::vector<int> budget;
        if (cfg.bullet) {
            const auto probe = categorize_examples(result.params, cfg.model,
                                                   train.subset(std::span<const std::size_t>(active.indices)),
                                                   cfg.probe_attack, derive_seed(cfg.seed, {kProbe, epoch}), cfg.batch_size);
            m.budget_counts = probe.counts;
            for (auto c : probe.categories) budget.push_back(cfg.bullet->steps_for(c));
        }

        const double lr = lr_schedule(epoch, cfg);
        double loss_sum = 0.0;
        std::size_t loss_rows = 0, batch_no = 0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++batch_no) {
            const std::size_t e = std::min(order.size(), b + cfg.batch_size);
            std::vector<std::size_t> rows;
            std::vector<int> y, steps;
            std::vector<float> w;
            for (std::size_t i = b; i < e; ++i) {
                const std::size_t slot = order[i];
                rows.push_back(active.indices[slot]);
                y.push_back(train.labels[active.indices[slot]]);
                w.push_back(active.weights[slot]);
                if (!budget.empty()) steps.push_back(budget[slot]);
            }
            const auto x = gather_rows(train.inputs, std::span<const std::size_t>(rows));
            try {
                const auto adv = batch_adversaries(result.params, cfg.model, x, y, attack_obj, cfg.train_attack, steps,
                                                   derive_seed(cfg.seed, {kAttack, epoch, batch_no}), m.attack_steps);
                const auto rec = evaluate_with_gradients(
                    result.params, cfg.model, Batch<float>{adv, y, w, &x, nullptr}, objective, GradRequest{true, false});
                if (!std::isfinite(rec.loss_value)) throw NonFiniteError("non-finite training loss");
                sgd_update(result.params, rec.param_grads, velocity, lr, cfg.momentum, cfg.weight_decay);
                if (!std::all_of(result.params.begin(), result.params.end(),
                                 [](const auto& p) { return p.tensor.all_finite(); }))
                    throw NonFiniteError("non-finite parameters after update");
                loss_sum += static_cast<double>(rec.loss_value) * static_cast<double>(e - b);
                loss_rows += e - b;
            } catch (const NonFiniteError& err) {
                throw DivergenceError(epoch, batch_no, err.what());
            }
        }
        m.epoch_seconds = seconds(t_train, clock::now());
        m.train_loss = loss_sum / static_cast<double>(loss_rows);

        m.clean_acc = accuracy(result.params, cfg.model, eval_set);
        if (cfg.track)
            m.tracking_counts = categorize_examples(result.params, cfg.model, train, cfg.probe_attack,
                                                    derive_seed(cfg.seed, {kTrack, epoch}))
                                    .counts;
        const bool last = epoch + 1 == cfg.epochs;
        if (!cfg.eval_attacks.empty() && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0))) {
            const auto rep = evaluate_robust_accuracy(result.params, cfg.model, eval_set, cfg.eval_attacks,
                                                      derive_seed(cfg.seed, {kEval, epoch}), cfg.eval_objective);
            for (const auto& r : rep.rows) m.robust_acc.push_back(r.robust_acc);
        }
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            std::filesystem::create_directories(cfg.checkpoint_dir);
            save_checkpoint((std::filesystem::path(cfg.checkpoint_dir) / ("epoch_" + std::to_string(epoch + 1) + ".ckpt")).string(),
                            cfg.model, result.params);
        }
        result.metrics.push_back(std::move(m));
    }
    return result;
}

/// Median training-phase seconds over epochs without a selection round,
/// skipping the first `warmup` epochs when enough remain.
inline double steady_epoch_seconds(std::span<const EpochMetrics> metrics, std::size_t warmup = 1) {
    std::vector<double> t;
    for (const auto& m : metrics)
        if (!m.selected && m.epoch >= warmup) t.push_back(m.epoch_seconds);
    if (t.empty())
        for (const auto& m : metrics)
            if (!m.selected) t.push_back(m.epoch_seconds);
    if (t.empty()) throw InvalidArgument("no non-selection epochs to time");
    std::sort(t.begin(), t.end());
    const std::size_t h = t.size() / 2;
    return t.size() % 2 ? t[h] : 0.5 * (t[h - 1] + t[h]);
}

} // namespace advprune
