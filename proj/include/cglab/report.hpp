#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cglab {

using ConfigEcho = std::vector<std::pair<std::string, std::string>>;

/// Metrics bundle emitted by every pipeline. Missing row cells (degenerate
/// sweep points) serialize as null / NA. Wall time never enters the
/// deterministic outputs.
struct ExperimentReport {
    std::string kind;
    std::uint64_t seed = 0;
    ConfigEcho config;
    std::vector<std::pair<std::string, double>> metrics;
    std::vector<std::string> columns;
    std::vector<std::vector<std::optional<double>>> rows;
    std::vector<std::pair<std::string, std::string>> flags;
    double wall_seconds = 0.0;

    void set_metric(const std::string& name, double value);
    std::optional<double> metric(const std::string& name) const;
    void set_flag(const std::string& name, const std::string& value);
    std::optional<std::string> flag(const std::string& name) const;
    void add_config(const std::string& prefix, const ConfigEcho& echo);
    /// Column values across rows; empty optional cells are skipped.
    std::vector<double> column(const std::string& name) const;

    /// 16 hex digits of FNV-1a over kind, seed and config echo.
    std::string config_hash() const;
    std::string to_jsonl() const;
    std::string to_tsv() const;

    struct Paths {
        std::filesystem::path jsonl, tsv, log;
    };
    /// Writes <kind>-<hash>.jsonl, .tsv (when there are rows) and .log (wall time).
    Paths write(const std::filesystem::path& out_dir) const;
};

}  // namespace cglab
