#pragma once

// Joint training of all switches on one shared weight store.
//
// One iteration (wide modes):
//   1. clear gradients
//   2. wide switch vs labels (cross-entropy), backward; keep its prediction y'
//   3. [1.0]x vs y' (distillation), backward; keep its activation vector a'
//   4. every other switch vs y' plus beta * activation MSE vs a', backward
//   5. one optimizer step
// Each switch runs on its own tape, so y' and a' enter later tapes as
// constants and receive no gradient.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "paradis/calibration.hpp"
#include "paradis/dataset.hpp"
#include "paradis/losses.hpp"
#include "paradis/model.hpp"
#include "paradis/optimizer.hpp"

namespace paradis {

enum class TrainMode { wide_ipkd_a, wide_ipkd, ipkd, no_kd, us_baseline };

inline std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::wide_ipkd_a: return "wide_ipkd_a";
        case TrainMode::wide_ipkd: return "wide_ipkd";
        case TrainMode::ipkd: return "ipkd";
        case TrainMode::no_kd: return "no_kd";
        case TrainMode::us_baseline: return "us_baseline";
    }
    return "?";
}

inline std::optional<TrainMode> parse_train_mode(const std::string& s) {
    for (auto m : {TrainMode::wide_ipkd_a, TrainMode::wide_ipkd, TrainMode::ipkd, TrainMode::no_kd, TrainMode::us_baseline})
        if (to_string(m) == s) return m;
    return std::nullopt;
}

enum class LrSchedule { linear, step };

struct TrainerConfig {
    std::vector<SwitchSpec> switches;
    SwitchSpec wide = SwitchSpec({1.2});
    TrainMode mode = TrainMode::wide_ipkd_a;
    double beta = 1.0;
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    double lr = 0.1;
    LrSchedule schedule = LrSchedule::linear;
    std::vector<std::size_t> lr_steps;  // epochs at which lr is multiplied by lr_gamma
    double lr_gamma = 0.1;
    SgdOptions sgd;
    std::uint64_t seed = 1;
    std::size_t us_samples = 2;  // random single-path widths per iteration (us_baseline)
    double us_min_width = 0.25;
    bool check_finite = false;
    std::size_t calib_samples = 512;  // per-epoch evaluation only
    std::size_t calib_batch = 64;

    bool has(const SwitchSpec& s) const { return std::find(switches.begin(), switches.end(), s) != switches.end(); }
    bool wide_mode() const {
        return mode == TrainMode::wide_ipkd_a || mode == TrainMode::wide_ipkd || mode == TrainMode::us_baseline;
    }

    std::vector<std::string> problems(const ModelManifest& m) const {
        std::vector<std::string> p;
        const SwitchSpec full({1.0});
        if (switches.empty()) p.push_back("switches: list is empty");
        if (epochs == 0) p.push_back("epochs must be > 0");
        if (batch_size < 2) p.push_back("batch_size must be >= 2 (batch statistics)");
        if (!(lr >= 0)) p.push_back("lr must be >= 0");
        if (!(beta >= 0)) p.push_back("beta must be >= 0");
        if (!(sgd.momentum >= 0 && sgd.momentum < 1)) p.push_back("momentum must be in [0,1)");
        if (!(sgd.weight_decay >= 0)) p.push_back("weight_decay must be >= 0");
        if (wide.total_width() > m.wide_width + 1e-9)
            p.push_back("wide switch " + wide.str() + " exceeds model wide_width " + std::to_string(m.wide_width));
        double widest = 0;
        for (const auto& s : switches) {
            if (s == wide) continue;
            widest = std::max(widest, s.total_width());
            if (s.total_width() > 1.0 + 1e-9)
                p.push_back("switch " + s.str() + " spans beyond width 1.0; only the wide switch may");
        }
        if (wide_mode() && wide.total_width() + 1e-9 < widest)
            p.push_back("rule wide-covers-all: wide switch " + wide.str() + " must be at least as wide as every other switch");
        if ((mode == TrainMode::wide_ipkd_a || mode == TrainMode::wide_ipkd) && !switches.empty()) {
            if (!has(wide)) p.push_back("rule wide-present: switches must include the wide switch " + wide.str());
            const bool others = std::any_of(switches.begin(), switches.end(), [&](const auto& s) { return s != wide; });
            if (others && !has(full))
                p.push_back("rule full-present: switches must include [1]x as the activation teacher");
        }
        if ((mode == TrainMode::ipkd) && !has(full)) p.push_back("rule full-present: ipkd mode distills from [1]x");
        if (mode == TrainMode::us_baseline && !has(wide) && !has(full))
            p.push_back("rule teacher-present: us_baseline needs the wide switch or [1]x");
        if (schedule == LrSchedule::step && lr_steps.empty()) p.push_back("step schedule needs lr_steps");
        return p;
    }

    void validate(const ModelManifest& m) const {
        auto p = problems(m);
        if (!p.empty()) throw ConfigError(p);
    }
};

struct MetricsRow {
    std::size_t epoch = 0;
    std::string switch_id;
    double train_loss = 0;
    std::optional<double> eval_acc;
    double lr = 0;
    double wall_ms = 0;
};

// Wall time is opt-in so that reruns with the same seed produce identical files.
inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, bool with_wall_ms = false) {
    os << "epoch,switch,train_loss,eval_acc,lr" << (with_wall_ms ? ",wall_ms" : "") << '\n';
    for (const auto& r : rows) {
        os << r.epoch << ",\"" << r.switch_id << "\"," << std::setprecision(9) << r.train_loss << ',';
        if (r.eval_acc) os << std::setprecision(6) << *r.eval_acc;
        os << ',' << std::setprecision(9) << r.lr;
        if (with_wall_ms) os << ',' << std::fixed << std::setprecision(1) << r.wall_ms << std::defaultfloat;
        os << '\n';
    }
}

// Top-1 accuracy of fused eval-mode logits.
template <typename T>
double evaluate(const ElasticModel<T>& model, const SwitchSpec& spec, const Dataset& data,
                const SwitchableStats<T>* stats = nullptr, std::size_t batch_size = 256) {
    if (data.size() == 0) throw Error("evaluate on an empty dataset");
    std::size_t correct = 0;
    for (std::size_t s = 0; s < data.size(); s += batch_size) {
        std::vector<std::size_t> idx(std::min(batch_size, data.size() - s));
        std::iota(idx.begin(), idx.end(), s);
        const Tensor<T> x = data.gather(idx).template cast<T>();
        const Tensor<T> logits = infer_switch(model, spec, x, NormMode::stored, stats);
        const std::size_t C = logits.dim(1);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (logits.at(b, c) > logits.at(b, best)) best = c;
            if (static_cast<int>(best) == data.labels[idx[b]]) ++correct;
        }
    }
    return double(correct) / double(data.size());
}

template <typename T>
std::vector<Tensor<T>> calibration_batches(const Dataset& data, std::size_t samples, std::size_t batch) {
    std::vector<Tensor<T>> out;
    for (auto& b : data.batches(batch, samples)) out.push_back(b.template cast<T>());
    return out;
}

template <typename T>
class Trainer {
public:
    using Losses = std::map<std::string, double>;

    Trainer(ElasticModel<T>& model, TrainerConfig cfg) : model_(model), cfg_(std::move(cfg)), opt_(cfg_.sgd) {
        cfg_.validate(model_.manifest());
        for (const auto& s : cfg_.switches) model_.register_switch(s);
    }

    const TrainerConfig& config() const { return cfg_; }
    Sgd<T>& optimizer() { return opt_; }
    std::size_t iteration() const { return iteration_; }
    void set_iteration(std::size_t it) { iteration_ = it; }

    // Steps 1-4: clears and accumulates gradients for every switch, returns
    // per-switch losses. Weights are not touched.
    Losses compute_gradients(const Tensor<T>& x, const std::vector<int>& labels) {
        model_.zero_grad();
        Losses losses;
        const SwitchSpec full({1.0});
        const Tensor<T> target = one_hot<T>(labels, model_.num_classes());
        ForwardOptions<T> fo;
        fo.mode = NormMode::batch;

        auto run = [&](const SwitchSpec& spec, auto&& make_loss, Tensor<T>* pred_out, Tensor<T>* act_out,
                       const std::string& key) {
            Graph<T> g;
            g.set_check_finite(cfg_.check_finite);
            auto out = model_.forward_switch(g, spec, g.constant(x), fo);
            Var<T> pred = ops::softmax(out.logits);
            Var<T> loss = make_loss(g, pred, out);
            const double v = loss.value()[0];
            if (!std::isfinite(v))
                throw NonFiniteError("non-finite loss for switch " + spec.str() + " at iteration " + std::to_string(iteration_));
            g.backward(loss);
            losses[key] += v;
            if (pred_out) *pred_out = pred.value();
            if (act_out && out.activation) *act_out = out.activation->value();
        };
        auto from_labels = [&](Graph<T>& g, Var<T> pred, const SwitchOutput<T>&) { return ce_loss(pred, g.constant(target)); };

        Tensor<T> teacher_pred, teacher_act;
        auto from_teacher = [&](Graph<T>&, Var<T> pred, const SwitchOutput<T>&) { return kd_loss(pred, teacher_pred); };

        switch (cfg_.mode) {
            case TrainMode::wide_ipkd_a:
            case TrainMode::wide_ipkd: {
                const bool act = cfg_.mode == TrainMode::wide_ipkd_a;
                run(cfg_.wide, from_labels, &teacher_pred, nullptr, cfg_.wide.str());
                if (cfg_.has(full)) run(full, from_teacher, nullptr, &teacher_act, full.str());
                for (const auto& s : cfg_.switches) {
                    if (s == cfg_.wide || s == full) continue;
                    if (act) {
                        run(s, [&](Graph<T>&, Var<T> pred, const SwitchOutput<T>& o) {
                            return kd_act_loss(pred, teacher_pred, *o.activation, teacher_act, static_cast<T>(cfg_.beta));
                        }, nullptr, nullptr, s.str());
                    } else {
                        run(s, from_teacher, nullptr, nullptr, s.str());
                    }
                }
                break;
            }
            case TrainMode::ipkd:
                run(full, from_labels, &teacher_pred, nullptr, full.str());
                for (const auto& s : cfg_.switches)
                    if (s != cfg_.wide && s != full) run(s, from_teacher, nullptr, nullptr, s.str());
                break;
            case TrainMode::no_kd:
                for (const auto& s : cfg_.switches)
                    if (s != cfg_.wide) run(s, from_labels, nullptr, nullptr, s.str());
                break;
            case TrainMode::us_baseline: {
                const SwitchSpec teacher = cfg_.has(cfg_.wide) ? cfg_.wide : full;
                run(teacher, from_labels, &teacher_pred, nullptr, teacher.str());
                if (teacher != full && cfg_.has(full)) run(full, from_teacher, nullptr, nullptr, full.str());
                std::mt19937_64 rng(cfg_.seed * 1000003ULL + iteration_);
                std::uniform_real_distribution<double> width(cfg_.us_min_width, 1.0);
                for (std::size_t i = 0; i < cfg_.us_samples; ++i) run(SwitchSpec({width(rng)}), from_teacher, nullptr, nullptr, "sampled");
                if (cfg_.us_samples > 0) losses["sampled"] /= double(cfg_.us_samples);
                break;
            }
        }
        return losses;
    }

    Losses train_iteration(const Tensor<T>& x, const std::vector<int>& labels, double lr) {
        Losses l = compute_gradients(x, labels);
        opt_.step(model_.params(), lr);
        ++iteration_;
        return l;
    }

    double lr_at(std::size_t iteration, std::size_t iters_per_epoch) const {
        const std::size_t total = cfg_.epochs * iters_per_epoch;
        if (cfg_.schedule == LrSchedule::linear) return cfg_.lr * (1.0 - double(iteration) / double(std::max<std::size_t>(1, total)));
        const std::size_t epoch = iteration / std::max<std::size_t>(1, iters_per_epoch);
        double lr = cfg_.lr;
        for (auto s : cfg_.lr_steps)
            if (epoch >= s) lr *= cfg_.lr_gamma;
        return lr;
    }

    static std::size_t iters_per_epoch(std::size_t samples, std::size_t batch) { return samples / batch; }

    // One pass over `train` in a seed- and epoch-determined order.
    std::vector<MetricsRow> run_epoch(const Dataset& train, std::size_t epoch, const Dataset* eval = nullptr) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(cfg_.seed + 7919ULL * (epoch + 1));
        std::shuffle(order.begin(), order.end(), rng);
        const std::size_t ipe = iters_per_epoch(train.size(), cfg_.batch_size);
        if (ipe == 0) throw Error("training set smaller than one batch");
        Losses sums;
        double lr = 0;
        for (std::size_t it = 0; it < ipe; ++it) {
            std::vector<std::size_t> idx(order.begin() + it * cfg_.batch_size, order.begin() + (it + 1) * cfg_.batch_size);
            lr = lr_at(iteration_, ipe);
            const auto l = train_iteration(train.gather(idx).template cast<T>(), train.gather_labels(idx), lr);
            for (const auto& [k, v] : l) sums[k] += v;
        }
        std::map<std::string, double> acc;
        if (eval && eval->size() > 0) {
            const auto batches = calibration_batches<T>(train, cfg_.calib_samples, cfg_.calib_batch);
            std::vector<SwitchSpec> specs;
            for (const auto& s : cfg_.switches)
                if (sums.count(s.str())) specs.push_back(s);
            const auto stats = calibrate(model_, specs, batches);
            for (const auto& s : specs) acc[s.str()] = evaluate(model_, s, *eval, &stats);
        }
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        std::vector<MetricsRow> rows;
        auto emit = [&](const std::string& key) {
            MetricsRow r;
            r.epoch = epoch;
            r.switch_id = key;
            r.train_loss = sums.at(key) / double(ipe);
            if (acc.count(key)) r.eval_acc = acc.at(key);
            r.lr = lr;
            r.wall_ms = ms;
            rows.push_back(r);
        };
        for (const auto& s : cfg_.switches)
            if (sums.count(s.str())) emit(s.str());
        for (const auto& [k, v] : sums)
            if (std::none_of(cfg_.switches.begin(), cfg_.switches.end(), [&](const auto& s) { return s.str() == k; })) emit(k);
        return rows;
    }

    std::vector<MetricsRow> train(const Dataset& train_set, const Dataset* eval = nullptr, std::size_t first_epoch = 0,
                                  const std::function<void(const std::vector<MetricsRow>&)>& on_epoch = {}) {
        std::vector<MetricsRow> all;
        for (std::size_t e = first_epoch; e < cfg_.epochs; ++e) {
            auto rows = run_epoch(train_set, e, eval);
            if (on_epoch) on_epoch(rows);
            all.insert(all.end(), rows.begin(), rows.end());
        }
        return all;
    }

private:
    ElasticModel<T>& model_;
    TrainerConfig cfg_;
    Sgd<T> opt_;
    std::size_t iteration_ = 0;
};

}  // namespace paradis
