#pragma once

#include <chrono>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "peft/error.hpp"

// Append-only structured metrics log: one JSON record per line with the
// fields {run_id, step, wall_time_s, split, metric, value}. This is the
// local stand-in for hosted experiment tracking. Values are written with
// %.17g so parsing them back reproduces the exact double.

namespace peft {

struct MetricRecord {
    std::string run_id;
    std::size_t step = 0;
    double wall_time_s = 0.0;
    std::string split;
    std::string metric;
    double value = 0.0;
};

class MetricsSink {
public:
    MetricsSink(const std::string& path, std::string run_id)
        : out_(path, std::ios::binary | std::ios::app), run_id_(std::move(run_id)), start_(clock::now()) {
        if (!out_) throw DataError("metrics: cannot open \"" + path + "\" for appending");
    }

    void log(std::size_t step, const std::string& split, const std::string& metric, double value) {
        const double wall = std::chrono::duration<double>(clock::now() - start_).count();
        char value_buf[64], wall_buf[64];
        std::snprintf(value_buf, sizeof(value_buf), "%.17g", value);
        std::snprintf(wall_buf, sizeof(wall_buf), "%.3f", wall);
        out_ << "{\"run_id\":\"" << run_id_ << "\",\"step\":" << step << ",\"wall_time_s\":" << wall_buf
             << ",\"split\":\"" << split << "\",\"metric\":\"" << metric << "\",\"value\":" << value_buf << "}\n";
        out_.flush();
    }

    const std::string& run_id() const { return run_id_; }

private:
    using clock = std::chrono::steady_clock;
    std::ofstream out_;
    std::string run_id_;
    clock::time_point start_;
};

// Parses records written by MetricsSink (fixed field order).
inline std::vector<MetricRecord> read_metrics(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("metrics: cannot open \"" + path + "\"");
    std::vector<MetricRecord> records;
    std::string line;
    std::size_t line_no = 0;
    const auto field = [&](const std::string& src, const std::string& key, bool quoted) {
        const std::string needle = "\"" + key + "\":";
        const auto at = src.find(needle);
        if (at == std::string::npos)
            throw FormatError("metrics " + path + ": line " + std::to_string(line_no) + " lacks field " + key);
        std::size_t start = at + needle.size();
        if (quoted) {
            if (src[start] != '"')
                throw FormatError("metrics " + path + ": line " + std::to_string(line_no) + ": bad " + key);
            const auto end = src.find('"', start + 1);
            return src.substr(start + 1, end - start - 1);
        }
        auto end = src.find_first_of(",}", start);
        return src.substr(start, end - start);
    };
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        MetricRecord r;
        r.run_id = field(line, "run_id", true);
        r.step = std::stoull(field(line, "step", false));
        r.wall_time_s = std::stod(field(line, "wall_time_s", false));
        r.split = field(line, "split", true);
        r.metric = field(line, "metric", true);
        r.value = std::stod(field(line, "value", false));
        records.push_back(std::move(r));
    }
    return records;
}

// Comparison key that ignores wall-clock fields (run_id carries a
// timestamp). Two runs are "the same" when these sequences match.
inline std::vector<std::string> metric_identity_lines(const std::vector<MetricRecord>& records) {
    std::vector<std::string> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        char value_buf[64];
        std::snprintf(value_buf, sizeof(value_buf), "%.17g", r.value);
        out.push_back(std::to_string(r.step) + "|" + r.split + "|" + r.metric + "|" + value_buf);
    }
    return out;
}

}  // namespace peft
