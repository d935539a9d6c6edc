#pragma once

// Flat "key = value" configuration files. '#' starts a comment.

#include <cctype>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "paradis/dataset.hpp"
#include "paradis/error.hpp"
#include "paradis/model.hpp"
#include "paradis/trainer.hpp"

namespace paradis {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

// Switch strings separated by ';' or whitespace outside brackets.
inline std::vector<SwitchSpec> parse_switch_list(std::string_view text) {
    std::vector<SwitchSpec> out;
    std::string cur;
    int depth = 0;
    auto flush = [&] {
        const auto t = trim(cur);
        if (!t.empty()) out.push_back(SwitchSpec::parse(t));
        cur.clear();
    };
    for (char c : text) {
        if (c == '[') ++depth;
        if (c == ']') --depth;
        if (depth == 0 && (c == ';' || std::isspace(static_cast<unsigned char>(c)))) {
            flush();
            continue;
        }
        cur += c;
    }
    flush();
    return out;
}

class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& text) {
        KeyValueConfig c;
        std::istringstream in(text);
        std::string line;
        std::vector<std::string> problems;
        for (std::size_t n = 1; std::getline(in, line); ++n) {
            if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
            if (trim(line).empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                problems.push_back("line " + std::to_string(n) + ": expected key = value");
                continue;
            }
            const std::string k = trim(std::string_view(line).substr(0, eq));
            if (c.values_.count(k)) problems.push_back("line " + std::to_string(n) + ": duplicate key " + k);
            c.values_[k] = trim(std::string_view(line).substr(eq + 1));
        }
        if (!problems.empty()) throw ConfigError(problems);
        return c;
    }

    bool has(const std::string& k) const { return values_.count(k) != 0; }
    std::string get(const std::string& k, const std::string& def = "") const {
        used_.insert(k);
        auto it = values_.find(k);
        return it == values_.end() ? def : it->second;
    }
    void set(const std::string& k, const std::string& v) { values_[k] = v; }
    const std::map<std::string, std::string>& values() const { return values_; }

    std::vector<std::string> unused() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_)
            if (!used_.count(k)) out.push_back(k);
        return out;
    }

    std::string str() const {
        std::string s;
        for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
        return s;
    }

private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
};

// Everything the train command needs, decoded from a KeyValueConfig.
struct RunConfig {
    std::string arch = "toy";
    std::size_t classes = 10;
    double wide_width = 1.2;
    DatasetSpec dataset;
    TrainerConfig trainer;
    std::string checkpoint = "paradis.pdck";
    std::string metrics = "metrics.csv";

    ModelManifest manifest() const { return arch::by_name(arch, classes, wide_width); }

    static RunConfig from(const KeyValueConfig& kv) {
        RunConfig rc;
        std::vector<std::string> problems;
        auto num = [&](const std::string& key, auto& field) {
            if (!kv.has(key)) return;
            const std::string v = kv.get(key);
            try {
                std::size_t used = 0;
                using F = std::decay_t<decltype(field)>;
                if constexpr (std::is_same_v<F, double>) field = std::stod(v, &used);
                else if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
                else field = static_cast<F>(std::stoull(v, &used));
                if (used != v.size()) throw std::invalid_argument(v);
            } catch (const std::exception&) {
                problems.push_back(key + ": not a number: " + v);
            }
        };
        auto guarded = [&](const std::string& key, auto&& fn) {
            if (!kv.has(key)) return;
            try {
                fn(kv.get(key));
            } catch (const ConfigError& e) {
                for (const auto& p : e.problems()) problems.push_back(key + ": " + p);
            } catch (const std::exception& e) {
                problems.push_back(key + ": " + e.what());
            }
        };

        auto& t = rc.trainer;
        if (kv.has("arch")) rc.arch = kv.get("arch");
        num("classes", rc.classes);
        num("wide_width", rc.wide_width);
        guarded("dataset", [&](const std::string& v) { rc.dataset = DatasetSpec::parse(v); });
        guarded("switches", [&](const std::string& v) { t.switches = parse_switch_list(v); });
        guarded("wide", [&](const std::string& v) { t.wide = SwitchSpec::parse(v); });
        guarded("mode", [&](const std::string& v) {
            auto m = parse_train_mode(v);
            if (!m) throw Error("unknown mode " + v + " (wide_ipkd_a, wide_ipkd, ipkd, no_kd, us_baseline)");
            t.mode = *m;
        });
        num("beta", t.beta);
        num("epochs", t.epochs);
        num("batch_size", t.batch_size);
        num("lr", t.lr);
        guarded("schedule", [&](const std::string& v) {
            if (v == "linear") t.schedule = LrSchedule::linear;
            else if (v == "step") t.schedule = LrSchedule::step;
            else throw Error("unknown schedule " + v + " (linear, step)");
        });
        guarded("lr_steps", [&](const std::string& v) {
            std::stringstream ss(v);
            std::string item;
            while (std::getline(ss, item, ',')) t.lr_steps.push_back(std::stoul(trim(item)));
        });
        num("lr_gamma", t.lr_gamma);
        num("momentum", t.sgd.momentum);
        num("weight_decay", t.sgd.weight_decay);
        guarded("nesterov", [&](const std::string& v) {
            if (v != "true" && v != "false") throw Error("expected true or false");
            t.sgd.nesterov = v == "true";
        });
        num("seed", t.seed);
        num("us_samples", t.us_samples);
        num("us_min_width", t.us_min_width);
        num("calib_samples", t.calib_samples);
        guarded("check_finite", [&](const std::string& v) {
            if (v != "true" && v != "false") throw Error("expected true or false");
            t.check_finite = v == "true";
        });
        if (kv.has("checkpoint")) rc.checkpoint = kv.get("checkpoint");
        if (kv.has("metrics")) rc.metrics = kv.get("metrics");
        for (const auto& k : kv.unused()) problems.push_back("unknown key " + k);

        try {
            const auto m = rc.manifest();
            for (auto& p : t.problems(m)) problems.push_back(std::move(p));
        } catch (const ConfigError& e) {
            for (const auto& p : e.problems()) problems.push_back(p);
        }
        if (!problems.empty()) throw ConfigError(problems);
        return rc;
    }
};

}  // namespace paradis
