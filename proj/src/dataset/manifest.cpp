#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "neuromatch/dataset.hpp"

namespace neuromatch {

namespace fs = std::filesystem;

const char* split_label(SplitName s) {
    switch (s) {
        case SplitName::train: return "train";
        case SplitName::validation: return "val";
        case SplitName::test: return "test";
    }
    return "?";
}

SplitName parse_split_label(const std::string& label) {
    if (label == "train") return SplitName::train;
    if (label == "val") return SplitName::validation;
    if (label == "test") return SplitName::test;
    throw DataError("unknown split label \"" + label + "\"");
}

std::vector<PairedSample>& DatasetSplit::part(SplitName s) {
    switch (s) {
        case SplitName::train: return train;
        case SplitName::validation: return validation;
        default: return test;
    }
}

const std::vector<PairedSample>& DatasetSplit::part(SplitName s) const {
    return const_cast<DatasetSplit*>(this)->part(s);
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
    std::string token;
    while (in) {
        const int c = in.get();
        if (c == EOF) break;
        if (c == '#') {
            std::string ignored;
            std::getline(in, ignored);
            continue;
        }
        if (std::isspace(c)) {
            if (!token.empty()) break;
            continue;
        }
        token.push_back(static_cast<char>(c));
    }
    return token;
}

}  // namespace

Tensor read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image " + path.string());
    if (header_token(in) != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
    std::size_t width = 0, height = 0;
    int maxval = 0;
    try {
        width = std::stoul(header_token(in));
        height = std::stoul(header_token(in));
        maxval = std::stoi(header_token(in));
    } catch (const std::exception&) {
        throw DataError(path.string() + ": malformed PGM header");
    }
    if (width == 0 || height == 0 || maxval <= 0 || maxval > 255)
        throw DataError(path.string() + ": unsupported PGM header (8-bit maxval required)");
    std::vector<unsigned char> raw(width * height);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError(path.string() + ": truncated pixel data");
    std::vector<double> values(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) values[i] = static_cast<double>(raw[i]) / maxval;
    return Tensor({height, width}, std::move(values));
}

void write_pgm(const fs::path& path, const Tensor& image) {
    if (image.rank() != 2) throw ShapeError("write_pgm: expected a rank-2 image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image " + path.string());
    out << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
    std::vector<unsigned char> raw(image.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        raw[i] = static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw DataError("failed writing " + path.string());
}

fs::path save_manifest(const DatasetSplit& split, const fs::path& directory) {
    fs::create_directories(directory / "images");
    const fs::path manifest = directory / "manifest.jsonl";
    std::ofstream out(manifest);
    if (!out) throw DataError("cannot write manifest " + manifest.string());
    for (SplitName s : {SplitName::train, SplitName::validation, SplitName::test}) {
        for (const auto& sample : split.part(s)) {
            std::ostringstream stem;
            stem << "images/pair_" << std::setw(4) << std::setfill('0') << sample.pair_id;
            const std::string a = stem.str() + "_a.pgm";
            const std::string b = stem.str() + "_b.pgm";
            write_pgm(directory / a, sample.image_a);
            write_pgm(directory / b, sample.image_b);
            nlohmann::ordered_json record;
            record["pair_id"] = sample.pair_id;
            record["modality_a_path"] = a;
            record["modality_b_path"] = b;
            record["split"] = split_label(s);
            out << record.dump() << '\n';
        }
    }
    if (!out) throw DataError("failed writing " + manifest.string());
    return manifest;
}

namespace {

Tensor load_checked(const fs::path& path) {
    if (!fs::exists(path)) throw DataError("missing image file " + path.string());
    Tensor image = read_pgm(path);
    if (image.rows() != image_side || image.cols() != image_side)
        throw DataError(path.string() + ": expected " + std::to_string(image_side) + "x" + std::to_string(image_side) +
                        " image, got " + std::to_string(image.cols()) + "x" + std::to_string(image.rows()));
    return image;
}

}  // namespace

DatasetSplit load_manifest(const fs::path& path) {
    const fs::path manifest = fs::is_directory(path) ? path / "manifest.jsonl" : path;
    std::ifstream in(manifest);
    if (!in) throw DataError("cannot open manifest " + manifest.string());
    const fs::path base = manifest.parent_path();
    static const std::set<std::string> expected{"pair_id", "modality_a_path", "modality_b_path", "split"};

    DatasetSplit split;
    std::set<std::int64_t> seen;
    std::string line;
    std::size_t line_no = 0, records = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = manifest.string() + ":" + std::to_string(line_no);
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error&) {
            throw DataError(where + ": malformed JSON record");
        }
        if (!record.is_object()) throw DataError(where + ": record is not an object");
        std::set<std::string> keys;
        for (const auto& item : record.items()) keys.insert(item.key());
        if (keys != expected)
            throw DataError(where + ": record must have exactly pair_id, modality_a_path, modality_b_path, split");
        if (!record["pair_id"].is_number_integer() || record["pair_id"].get<std::int64_t>() < 0)
            throw DataError(where + ": pair_id must be a non-negative integer");
        if (!record["modality_a_path"].is_string() || !record["modality_b_path"].is_string() ||
            !record["split"].is_string())
            throw DataError(where + ": paths and split must be strings");

        PairedSample sample;
        sample.pair_id = record["pair_id"].get<std::int64_t>();
        if (!seen.insert(sample.pair_id).second)
            throw DataError(where + ": duplicate pair_id " + std::to_string(sample.pair_id));
        const SplitName s = parse_split_label(record["split"].get<std::string>());
        auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
        sample.image_a = load_checked(resolve(record["modality_a_path"].get<std::string>()));
        sample.image_b = load_checked(resolve(record["modality_b_path"].get<std::string>()));
        split.part(s).push_back(std::move(sample));
        ++records;
    }
    if (records == 0) throw DataError(manifest.string() + ": no records");
    return split;
}

}  // namespace neuromatch
