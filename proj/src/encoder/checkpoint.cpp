#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "neuromatch/encoder.hpp"

namespace neuromatch {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int format_version = 1;

ordered_json config_json(const EncoderConfig& c) {
    ordered_json j;
    j["image_size"] = c.image_size;
    j["patch_size"] = c.patch_size;
    j["token_dim"] = c.token_dim;
    j["n_blocks_local"] = c.n_blocks_local;
    j["n_blocks_global"] = c.n_blocks_global;
    j["n_heads"] = c.n_heads;
    j["embed_dim"] = c.embed_dim;
    j["local_crop"] = c.local_crop;
    j["mlp_hidden"] = c.mlp_hidden;
    j["channels"] = channel_mode_name(c.channels);
    j["standardize"] = c.standardize;
    return j;
}

EncoderConfig config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.token_dim = j.at("token_dim").get<std::size_t>();
    c.n_blocks_local = j.at("n_blocks_local").get<std::size_t>();
    c.n_blocks_global = j.at("n_blocks_global").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.local_crop = j.at("local_crop").get<std::size_t>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    c.channels = parse_channel_mode(j.at("channels").get<std::string>());
    c.standardize = j.at("standardize").get<bool>();
    return c;
}

void put_float(std::string& out, double v) {
    const float f = static_cast<float>(v);
    std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    char bytes[4];
    std::memcpy(bytes, &bits, 4);
    out.append(bytes, 4);
}

double get_float(const char* p) {
    std::uint32_t bits;
    std::memcpy(&bits, p, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace

void save_checkpoint(const DualEncoder& model, const fs::path& path) {
    ordered_json header;
    header["format_version"] = format_version;
    header["config"] = config_json(model.config);
    header["lora"] = {{"rank", model.lora.rank}, {"alpha", model.lora.alpha}};
    ordered_json table = ordered_json::array();
    std::string data;
    data.reserve(model.params.scalar_count() * 4);
    for (const auto& [name, value] : model.params) {
        table.push_back({{"name", name}, {"shape", value.shape()}, {"offset", data.size()}});
        for (double v : value.values()) put_float(data, v);
    }
    header["parameters"] = std::move(table);

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write checkpoint " + path.string());
        out << header.dump() << '\n';
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out) throw DataError("failed writing checkpoint " + path.string());
    }
    fs::rename(tmp, path);
}

DualEncoder load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::string line;
    std::getline(in, line);
    const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto bad = [&](const std::string& what) { return DataError(path.string() + ": " + what); };

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
        throw bad("malformed checkpoint header");
    }
    DualEncoder model;
    LoraSettings lora;
    std::vector<std::pair<std::string, Shape>> layout;
    try {
        if (header.at("format_version").get<int>() != format_version) throw bad("unsupported checkpoint format version");
        model.config = config_from_json(header.at("config"));
        lora.rank = header.at("lora").at("rank").get<std::size_t>();
        lora.alpha = header.at("lora").at("alpha").get<double>();
        layout = parameter_layout(model.config, lora);
    } catch (const nlohmann::json::exception& e) {
        throw bad(std::string("invalid checkpoint header: ") + e.what());
    } catch (const ConfigError& e) {
        throw bad(e.what());
    }
    model.lora = lora;

    const auto& table = header.at("parameters");
    if (!table.is_array() || table.size() != layout.size())
        throw bad("parameter table has " + std::to_string(table.size()) + " entries, config requires " +
                  std::to_string(layout.size()));
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& [name, shape] = layout[i];
        const auto& entry = table[i];
        Shape stored;
        std::size_t offset = 0;
        try {
            if (entry.at("name").get<std::string>() != name)
                throw bad("expected parameter " + name + ", found " + entry.at("name").get<std::string>());
            stored = entry.at("shape").get<Shape>();
            offset = entry.at("offset").get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            throw bad(std::string("invalid parameter entry: ") + e.what());
        }
        if (stored != shape)
            throw bad("parameter " + name + " has shape " + shape_string(stored) + ", config requires " +
                      shape_string(shape));
        std::size_t count = 1;
        for (std::size_t d : shape) count *= d;
        if (offset + count * 4 > data.size()) throw bad("truncated data for parameter " + name);
        std::vector<double> values(count);
        for (std::size_t k = 0; k < count; ++k) values[k] = get_float(data.data() + offset + 4 * k);
        model.params.add(name, Tensor(shape, std::move(values)));
    }
    return model;
}

}  // namespace neuromatch
