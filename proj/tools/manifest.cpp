#include <array>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include <openssl/evp.h>

#include "neuromatch/errors.hpp"
#include "run_manifest.hpp"

namespace neuromatch::cli {

namespace fs = std::filesystem;

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string() + " for checksumming");
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
    std::array<char, 1 << 16> buf;
    while (in) {
        in.read(buf.data(), buf.size());
        EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), digest, &len);
    std::ostringstream hex;
    hex << std::hex << std::setfill('0');
    for (unsigned int i = 0; i < len; ++i) hex << std::setw(2) << static_cast<int>(digest[i]);
    return hex.str();
}

void write_run_manifest(const RunManifest& m, const fs::path& dir) {
    nlohmann::ordered_json j;
    j["command"] = m.command;
    j["seed"] = m.seed;
    j["config"] = m.config;
    j["inputs"] = nlohmann::ordered_json::array();
    for (const auto& p : m.inputs) j["inputs"].push_back(p.string());
    j["outputs"] = nlohmann::ordered_json::array();
    nlohmann::ordered_json sums = nlohmann::ordered_json::object();
    for (const auto& p : m.outputs) {
        const std::string rel = fs::relative(p, dir).generic_string();
        j["outputs"].push_back(rel);
        sums[rel] = sha256_file(p);
    }
    j["checksums_sha256"] = std::move(sums);
    j["wall_seconds"] = m.wall_seconds;

    fs::create_directories(dir);
    const fs::path target = dir / "run_manifest.json";
    const fs::path tmp = dir / "run_manifest.json.tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw DataError("cannot write " + tmp.string());
        out << j.dump(2) << '\n';
        if (!out) throw DataError("failed writing " + tmp.string());
    }
    fs::rename(tmp, target);
}

}  // namespace neuromatch::cli
