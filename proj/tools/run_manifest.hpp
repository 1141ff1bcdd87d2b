#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace neuromatch::cli {

struct RunManifest {
    std::string command;
    nlohmann::ordered_json config;
    std::uint64_t seed = 0;
    std::vector<std::filesystem::path> inputs;
    std::vector<std::filesystem::path> outputs;  // files; checksummed at write time
    double wall_seconds = 0.0;
};

std::string sha256_file(const std::filesystem::path& path);

// Writes <dir>/run_manifest.json via a temporary file and rename.
void write_run_manifest(const RunManifest& manifest, const std::filesystem::path& dir);

}  // namespace neuromatch::cli
