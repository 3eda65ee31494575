#include "foba/checkpoint.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "foba/config_io.hpp"
#include "foba/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace foba {

namespace {

constexpr char kMagic[] = "FOBA1\n";
constexpr size_t kMagicLen = 6;

template <typename T>
const char* dtype_name() {
    return sizeof(T) == 4 ? "float32" : "float64";
}

template <typename T>
void write_raw(std::ofstream& os, const Tensor<T>& t) {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

template <typename T>
void read_raw(std::ifstream& is, Tensor<T>& t, const std::string& path) {
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!is) throw IoError("truncated checkpoint: " + path);
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const FoBaConfig& cfg,
                     const ParamStore<T>& params, const OptimState<T>& opt,
                     const TrainCursor& cursor) {
    const bool has_opt = !opt.m.empty();
    if (has_opt && (opt.m.size() != params.size() || opt.v.size() != params.size()))
        throw Error("optimizer state does not align with the parameter store");

    json header;
    header["format"] = "FOBA1";
    header["version"] = 1;
    header["dtype"] = dtype_name<T>();
    header["config"] = foba_config_to_json(cfg);
    json plist = json::array();
    for (size_t i = 0; i < params.size(); ++i) {
        json p;
        p["name"] = params[i].name;
        p["dims"] = params[i].value.dims();
        plist.push_back(std::move(p));
    }
    header["params"] = std::move(plist);
    header["opt"] = {{"present", has_opt}, {"t", opt.t}};
    header["cursor"] = {{"step", cursor.step},
                       {"rng", cursor.rng_state},
                       {"order", cursor.order},
                       {"pos", cursor.pos}};
    const std::string text = header.dump();

    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
        if (ec) throw IoError("cannot create " + target.parent_path().string());
    }
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        os.write(kMagic, kMagicLen);
        const uint64_t len = text.size();
        os.write(reinterpret_cast<const char*>(&len), sizeof(len));
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (size_t i = 0; i < params.size(); ++i) {
            write_raw(os, params[i].value);
            if (has_opt) {
                write_raw(os, opt.m[i]);
                write_raw(os, opt.v[i]);
            }
        }
        os.flush();
        if (!os) throw IoError("failed writing " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " into place");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFile("checkpoint " + path + " does not exist");

    char magic[kMagicLen];
    is.read(magic, kMagicLen);
    if (!is || std::string(magic, kMagicLen) != std::string(kMagic, kMagicLen))
        throw IoError(path + " is not a model checkpoint");
    uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!is || len == 0 || len > (1ull << 30)) throw IoError("corrupt header in " + path);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw IoError("truncated checkpoint: " + path);

    json header = json::parse(text, nullptr, false);
    if (header.is_discarded()) throw IoError("unreadable header in " + path);
    if (header.value("version", 0) != 1)
        throw IoError("unsupported checkpoint version in " + path);
    const std::string dtype = header.value("dtype", "");
    if (dtype != dtype_name<T>())
        throw ConfigError("checkpoint " + path + " holds " + dtype + " tensors, expected " +
                          dtype_name<T>());

    Checkpoint<T> ck;
    ck.config = foba_config_from_json(header.at("config"), "config");
    const bool has_opt = header.at("opt").at("present").get<bool>();
    ck.opt.t = header.at("opt").at("t").get<int64_t>();
    const auto& cur = header.at("cursor");
    ck.cursor.step = cur.at("step").get<int64_t>();
    ck.cursor.rng_state = cur.at("rng").get<std::string>();
    ck.cursor.order = cur.at("order").get<std::vector<int64_t>>();
    ck.cursor.pos = cur.at("pos").get<int64_t>();

    for (const auto& p : header.at("params")) {
        const std::string name = p.at("name").get<std::string>();
        const std::vector<int> dims = p.at("dims").get<std::vector<int>>();
        Tensor<T> value(dims);
        read_raw(is, value, path);
        if (has_opt) {
            Tensor<T> m(dims), v(dims);
            read_raw(is, m, path);
            read_raw(is, v, path);
            ck.opt.m.push_back(std::move(m));
            ck.opt.v.push_back(std::move(v));
        }
        ck.params.emplace_back(name, std::move(value));
    }
    return ck;
}

template <typename T>
void restore_params(ParamStore<T>& params, const Checkpoint<T>& ck) {
    if (params.size() != ck.params.size())
        throw ConfigError("checkpoint holds " + std::to_string(ck.params.size()) +
                          " tensors, the model has " + std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, value] = ck.params[i];
        if (params[i].name != name)
            throw ConfigError("parameter order mismatch: expected " + params[i].name +
                              ", checkpoint has " + name);
        if (params[i].value.dims() != value.dims())
            throw ShapeMismatch("stored " + name + " has a different shape");
        for (int64_t k = 0; k < value.numel(); ++k) params[i].value[k] = value[k];
    }
}

template void save_checkpoint<float>(const std::string&, const FoBaConfig&,
                                     const ParamStore<float>&, const OptimState<float>&,
                                     const TrainCursor&);
template void save_checkpoint<double>(const std::string&, const FoBaConfig&,
                                      const ParamStore<double>&, const OptimState<double>&,
                                      const TrainCursor&);
template Checkpoint<float> load_checkpoint<float>(const std::string&);
template Checkpoint<double> load_checkpoint<double>(const std::string&);
template void restore_params<float>(ParamStore<float>&, const Checkpoint<float>&);
template void restore_params<double>(ParamStore<double>&, const Checkpoint<double>&);

}  // namespace foba
