#include "flipfl/checkpoint.hpp"

#include "flipfl/errors.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

namespace flipfl {

namespace {

constexpr const char* kMagic = "FLIPFL-ARRAY 1";

static_assert(sizeof(double) == 8 && std::numeric_limits<double>::is_iec559);

void put_le(std::ostream& os, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

double get_le(std::istream& is) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), 8)) throw ConfigError("array file truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

void write_array_file(std::ostream& os, const ArrayFile& file) {
    nlohmann::json header = file.header;
    header["length"] = file.values.size();
    os << kMagic << '\n' << header.dump() << '\n';
    for (Index i = 0; i < file.values.size(); ++i) put_le(os, file.values[i]);
    if (!os) throw ConfigError("failed writing array file");
}

ArrayFile read_array_file(std::istream& is) {
    std::string magic, header_line;
    if (!std::getline(is, magic) || magic != kMagic) throw ConfigError("not a flipfl array file");
    if (!std::getline(is, header_line)) throw ConfigError("array file missing header");
    ArrayFile f;
    f.header = nlohmann::json::parse(header_line);
    const auto n = f.header.at("length").get<Index>();
    f.values.resize(n);
    for (Index i = 0; i < n; ++i) f.values[i] = get_le(is);
    return f;
}

void save_array_file(const std::filesystem::path& path, const ArrayFile& file) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open " + path.string() + " for writing");
    write_array_file(os, file);
}

ArrayFile load_array_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open " + path.string());
    return read_array_file(is);
}

nlohmann::json to_json(const nn::LayerSpec& s) {
    nlohmann::json j;
    j["kind"] = nn::to_string(s.kind);
    j["activation"] = nn::to_string(s.activation);
    if (s.kind == nn::LayerKind::dense) {
        j["in"] = s.in_features;
        j["out"] = s.out_features;
    } else {
        j["channels"] = s.in_channels;
        j["height"] = s.in_height;
        j["width"] = s.in_width;
        j["filters"] = s.out_channels;
        j["kernel"] = {s.kernel_h, s.kernel_w};
    }
    return j;
}

nn::LayerSpec layer_spec_from_json(const nlohmann::json& j) {
    const auto kind = j.at("kind").get<std::string>();
    const auto act_name = j.value("activation", std::string("relu"));
    nn::Activation act;
    if (act_name == "relu") act = nn::Activation::relu;
    else if (act_name == "identity") act = nn::Activation::identity;
    else throw ConfigError("unknown activation '" + act_name + "'");
    if (kind == "dense") return nn::LayerSpec::dense(j.at("in").get<Index>(), j.at("out").get<Index>(), act);
    if (kind == "conv2d") {
        const auto& k = j.at("kernel");
        return nn::LayerSpec::conv2d(j.at("channels").get<Index>(), j.at("height").get<Index>(),
                                     j.at("width").get<Index>(), j.at("filters").get<Index>(),
                                     k.at(0).get<Index>(), k.at(1).get<Index>(), act);
    }
    throw ConfigError("unknown layer kind '" + kind + "'");
}

nlohmann::json to_json(const nn::Architecture& arch) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& l : arch) j.push_back(to_json(l));
    return j;
}

nn::Architecture architecture_from_json(const nlohmann::json& j) {
    nn::Architecture arch;
    for (const auto& l : j) arch.push_back(layer_spec_from_json(l));
    nn::validate(arch);
    return arch;
}

ArrayFile make_checkpoint(const nn::ModelParams& model, const nn::Architecture& arch,
                          nlohmann::json extra) {
    nn::check_model(model, arch);
    ArrayFile f;
    f.header = std::move(extra);
    f.header["kind"] = "model";
    f.header["layers"] = to_json(arch);
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& l : model.layers) shapes.push_back({{"weight", l.weight.shape()}, {"bias", l.bias.shape()}});
    f.header["shapes"] = shapes;
    f.header["order"] = "layer-major; per layer: weight row-major, then bias";
    f.values = nn::flatten(model);
    return f;
}

Checkpoint parse_checkpoint(const ArrayFile& file) {
    if (file.header.value("kind", std::string()) != "model") throw ConfigError("array file is not a model checkpoint");
    Checkpoint c;
    c.arch = architecture_from_json(file.header.at("layers"));
    c.model = nn::unflatten(file.values, c.arch);
    c.header = file.header;
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const nn::ModelParams& model,
                     const nn::Architecture& arch, nlohmann::json extra) {
    save_array_file(path, make_checkpoint(model, arch, std::move(extra)));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint(load_array_file(path));
}

ArrayFile make_tensor_file(const Tensor& t, nlohmann::json extra) {
    ArrayFile f;
    f.header = std::move(extra);
    f.header["shape"] = t.shape();
    f.values = t.data();
    return f;
}

Tensor parse_tensor_file(const ArrayFile& file) {
    return Tensor(file.header.at("shape").get<Shape>(), file.values);
}

}  // namespace flipfl
