#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace paradis {

// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class SwitchError : public Error {
public:
    using Error::Error;
};

// Raised when eval-mode normalization cannot find calibrated statistics.
class MissingStatsError : public Error {
public:
    MissingStatsError(std::string switch_id, std::size_t position, std::size_t layer)
        : Error("missing calibrated stats for switch " + switch_id + " position " +
                std::to_string(position) + " layer " + std::to_string(layer)),
          switch_id_(std::move(switch_id)), position_(position), layer_(layer) {}

    const std::string& switch_id() const { return switch_id_; }
    std::size_t position() const { return position_; }
    std::size_t layer() const { return layer_; }

private:
    std::string switch_id_;
    std::size_t position_;
    std::size_t layer_;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    explicit ConfigError(std::vector<std::string> problems)
        : Error(join(problems)), problems_(std::move(problems)) {}

    const std::vector<std::string>& problems() const { return problems_; }

private:
    static std::string join(const std::vector<std::string>& p) {
        std::string out = "invalid config:";
        for (const auto& s : p) out += "\n  - " + s;
        return out;
    }
    std::vector<std::string> problems_;
};

class WireError : public Error {
public:
    WireError(std::string code, const std::string& what) : Error(code + ": " + what), code_(std::move(code)) {}
    const std::string& code() const { return code_; }

private:
    std::string code_;
};

class PlanError : public Error {
public:
    using Error::Error;
};

}  // namespace paradis
