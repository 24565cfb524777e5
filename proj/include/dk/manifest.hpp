#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace dk {

inline constexpr const char* kToolVersion = "0.1.0";

// Every CLI command records one of these next to its artifacts; replaying
// the manifest re-runs the command with the identical resolved options.
struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config;  // resolved option -> value
    std::uint64_t seed = 0;
    std::string tool_version = kToolVersion;
    std::vector<std::string> outputs;
};

inline void save_manifest(const RunManifest& m, const std::string& path) {
    nlohmann::json j = {
        {"command", m.command},
        {"config", m.config},
        {"seed", m.seed},
        {"tool_version", m.tool_version},
        {"outputs", m.outputs},
    };
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_manifest: cannot open " + path);
    out << j.dump(2) << '\n';
}

inline RunManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_manifest: cannot open " + path);
    nlohmann::json j;
    in >> j;
    RunManifest m;
    m.command = j.at("command");
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    m.seed = j.at("seed");
    m.tool_version = j.at("tool_version");
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    return m;
}

}  // namespace dk
