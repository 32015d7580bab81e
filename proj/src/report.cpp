#include "cglab/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

#include "cglab/errors.hpp"
#include "format.hpp"

namespace cglab {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace

void ExperimentReport::set_metric(const std::string& name, double value) {
    if (!std::isfinite(value)) throw NumericalError("metric " + name + " is not finite");
    for (auto& [k, v] : metrics)
        if (k == name) {
            v = value;
            return;
        }
    metrics.emplace_back(name, value);
}

std::optional<double> ExperimentReport::metric(const std::string& name) const {
    for (const auto& [k, v] : metrics)
        if (k == name) return v;
    return std::nullopt;
}

void ExperimentReport::set_flag(const std::string& name, const std::string& value) {
    for (auto& [k, v] : flags)
        if (k == name) {
            v = value;
            return;
        }
    flags.emplace_back(name, value);
}

std::optional<std::string> ExperimentReport::flag(const std::string& name) const {
    for (const auto& [k, v] : flags)
        if (k == name) return v;
    return std::nullopt;
}

void ExperimentReport::add_config(const std::string& prefix, const ConfigEcho& echo) {
    for (const auto& [k, v] : echo) config.emplace_back(prefix.empty() ? k : prefix + "." + k, v);
}

std::vector<double> ExperimentReport::column(const std::string& name) const {
    std::size_t c = 0;
    while (c < columns.size() && columns[c] != name) ++c;
    if (c == columns.size()) throw DataError("report has no column " + name);
    std::vector<double> out;
    for (const auto& row : rows)
        if (row[c]) out.push_back(*row[c]);
    return out;
}

std::string ExperimentReport::config_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const std::string& s) {
        for (unsigned char ch : s) {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
        h ^= 0xff;
        h *= 0x100000001b3ULL;
    };
    mix(kind);
    mix(std::to_string(seed));
    for (const auto& [k, v] : config) {
        mix(k);
        mix(v);
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string ExperimentReport::to_jsonl() const {
    using json = nlohmann::ordered_json;
    std::string out;
    json header = {{"record", "header"}, {"kind", kind}, {"seed", seed}, {"config_hash", config_hash()}};
    json cfg = json::object();
    for (const auto& [k, v] : config) cfg[k] = v;
    header["config"] = cfg;
    out += header.dump() + "\n";
    json m = {{"record", "metrics"}};
    for (const auto& [k, v] : metrics) m[k] = v;
    out += m.dump() + "\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
        json row = {{"record", "row"}, {"index", r}};
        for (std::size_t c = 0; c < columns.size(); ++c)
            row[columns[c]] = rows[r][c] ? json(*rows[r][c]) : json(nullptr);
        out += row.dump() + "\n";
    }
    if (!flags.empty()) {
        json f = {{"record", "flags"}};
        for (const auto& [k, v] : flags) f[k] = v;
        out += f.dump() + "\n";
    }
    return out;
}

std::string ExperimentReport::to_tsv() const {
    std::string out;
    for (std::size_t c = 0; c < columns.size(); ++c) out += (c ? "\t" : "") + columns[c];
    out += "\n";
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); ++c) out += (c ? "\t" : "") + (row[c] ? format_double(*row[c]) : "NA");
        out += "\n";
    }
    return out;
}

ExperimentReport::Paths ExperimentReport::write(const std::filesystem::path& out_dir) const {
    std::filesystem::create_directories(out_dir);
    const std::string stem = kind + "-" + config_hash();
    Paths p{out_dir / (stem + ".jsonl"), {}, out_dir / (stem + ".log")};
    write_text(p.jsonl, to_jsonl());
    if (!columns.empty()) {
        p.tsv = out_dir / (stem + ".tsv");
        write_text(p.tsv, to_tsv());
    }
    write_text(p.log, "wall_seconds\t" + format_double(wall_seconds) + "\n");
    return p;
}

}  // namespace cglab
