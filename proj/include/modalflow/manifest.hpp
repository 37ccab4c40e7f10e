#pragma once

// Every CLI command leaves one manifest.txt next to its outputs: enough to
// re-derive the run (command, resolved config, seed, inputs/outputs, content
// hash of the checkpoint it used).

#include "modalflow/common.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <string>
#include <vector>

namespace modalflow {

struct RunManifest {
    std::string command;
    nlohmann::json config;
    uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::string checkpoint_sha256;
    std::string started_utc;
    std::string finished_utc;
    nlohmann::json extra;  // command-specific fields (histograms, step counts)
};

inline std::string utc_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline void write_manifest(const std::string& path, const RunManifest& m) {
    std::ofstream os(path);
    if (!os) throw FormatError("write_manifest: cannot open " + path);
    os << "command: " << m.command << "\n";
    os << "seed: " << m.seed << "\n";
    os << "config: " << m.config.dump() << "\n";
    for (const auto& in : m.inputs) os << "input: " << in << "\n";
    for (const auto& out : m.outputs) os << "output: " << out << "\n";
    if (!m.checkpoint_sha256.empty()) os << "checkpoint_sha256: " << m.checkpoint_sha256 << "\n";
    os << "started: " << m.started_utc << "\n";
    os << "finished: " << m.finished_utc << "\n";
    for (auto it = m.extra.begin(); it != m.extra.end(); ++it)
        os << it.key() << ": " << it.value().dump() << "\n";
    if (!os) throw FormatError("write_manifest: short write to " + path);
}

}  // namespace modalflow
