#pragma once

// Switchable normalization statistics: one (mean, var) pair per
// (switch, sub-model position, normalization layer), over that sub-model's
// channel slice. These are the only values not shared between switches.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "paradis/error.hpp"

namespace paradis {

struct StatsKey {
    std::string switch_id;
    std::size_t position = 0;
    std::size_t layer = 0;

    friend auto operator<=>(const StatsKey&, const StatsKey&) = default;
    friend bool operator==(const StatsKey&, const StatsKey&) = default;
};

template <typename T>
struct StatsEntry {
    std::vector<T> mean;
    std::vector<T> var;

    friend bool operator==(const StatsEntry&, const StatsEntry&) = default;
};

template <typename T>
class SwitchableStats {
public:
    void set(const StatsKey& key, StatsEntry<T> entry) {
        if (entry.mean.size() != entry.var.size()) throw ShapeError("stats mean/var length mismatch");
        for (T v : entry.var)
            if (v < T(0)) throw Error("negative variance in stats for switch " + key.switch_id);
        entries_[key] = std::move(entry);
    }

    const StatsEntry<T>& lookup(const std::string& switch_id, std::size_t position, std::size_t layer) const {
        auto it = entries_.find(StatsKey{switch_id, position, layer});
        if (it == entries_.end()) throw MissingStatsError(switch_id, position, layer);
        return it->second;
    }

    StatsEntry<T>* find(const StatsKey& key) {
        auto it = entries_.find(key);
        return it == entries_.end() ? nullptr : &it->second;
    }

    bool has_switch(const std::string& switch_id) const {
        auto it = entries_.lower_bound(StatsKey{switch_id, 0, 0});
        return it != entries_.end() && it->first.switch_id == switch_id;
    }

    void erase_switch(const std::string& switch_id) {
        for (auto it = entries_.begin(); it != entries_.end();) {
            if (it->first.switch_id == switch_id)
                it = entries_.erase(it);
            else
                ++it;
        }
        sample_counts_.erase(switch_id);
    }

    // Replaces every section of `other`'s switches in this set.
    void merge(const SwitchableStats& other) {
        for (const auto& sw : other.switches()) erase_switch(sw);
        for (const auto& [k, v] : other.entries_) entries_[k] = v;
        for (const auto& [k, v] : other.sample_counts_) sample_counts_[k] = v;
    }

    std::set<std::string> switches() const {
        std::set<std::string> out;
        for (const auto& [k, v] : entries_) out.insert(k.switch_id);
        return out;
    }

    void set_sample_count(const std::string& switch_id, std::uint64_t n) { sample_counts_[switch_id] = n; }
    std::uint64_t sample_count(const std::string& switch_id) const {
        auto it = sample_counts_.find(switch_id);
        return it == sample_counts_.end() ? 0 : it->second;
    }

    std::size_t total_floats() const {
        std::size_t n = 0;
        for (const auto& [k, v] : entries_) n += v.mean.size() + v.var.size();
        return n;
    }

    const std::map<StatsKey, StatsEntry<T>>& entries() const { return entries_; }
    bool empty() const { return entries_.empty(); }

    friend bool operator==(const SwitchableStats&, const SwitchableStats&) = default;

private:
    std::map<StatsKey, StatsEntry<T>> entries_;
    std::map<std::string, std::uint64_t> sample_counts_;
};

}  // namespace paradis
