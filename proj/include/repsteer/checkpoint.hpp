#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "repsteer/errors.hpp"
#include "repsteer/model.hpp"

namespace repsteer {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class Role : std::uint8_t { base, positive, negative, finetuned };

inline std::string role_name(Role r) {
    switch (r) {
        case Role::base: return "base";
        case Role::positive: return "positive";
        case Role::negative: return "negative";
        case Role::finetuned: return "finetuned";
    }
    return "?";
}

inline Role parse_role(const std::string& s) {
    for (const Role r : {Role::base, Role::positive, Role::negative, Role::finetuned})
        if (role_name(r) == s) return r;
    throw CheckpointError("unknown checkpoint role '" + s + "'");
}

template <typename T>
struct Checkpoint {
    ModelWeights<T> weights;
    std::optional<LoraAdapter<T>> adapter;
    Role role = Role::base;
    int iteration = 0;
    std::uint64_t seed = 0;

    const TransformerConfig& config() const { return weights.config; }
    std::string fingerprint() const { return weights.config.fingerprint(); }

    // Base weights with the adapter folded in.
    ModelWeights<T> merged() const { return adapter ? merge_adapter(weights, *adapter) : weights; }

    template <typename U>
    Checkpoint<U> cast() const {
        Checkpoint<U> c;
        c.weights = weights.template cast<U>();
        if (adapter) c.adapter = adapter->template cast<U>();
        c.role = role;
        c.iteration = iteration;
        c.seed = seed;
        return c;
    }
};

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
    return std::is_same_v<T, float> ? "f32" : "f64";
}

inline std::string file_for(const std::string& tensor) { return "tensors/" + tensor + ".bin"; }

template <typename T>
void write_tensor(const std::filesystem::path& path, const Array<T>& a) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(T)));
    if (!out) throw CheckpointError("write failed for " + path.string());
}

template <typename Stored, typename T>
void read_into(const std::filesystem::path& path, Array<T>& a) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot read " + path.string());
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    if (bytes != a.size() * sizeof(Stored)) {
        throw CheckpointError(path.string() + ": expected " + std::to_string(a.size() * sizeof(Stored)) + " bytes, found " +
                              std::to_string(bytes));
    }
    std::vector<Stored> buf(a.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw CheckpointError("read failed for " + path.string());
    for (std::size_t i = 0; i < buf.size(); ++i) a.data()[i] = static_cast<T>(buf[i]);
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CheckpointError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace detail

// Layout:
//   manifest.json  config, role, iteration, fingerprint, seed, adapter spec
//   index.json     tensor name -> {file, dtype, shape}
//   tensors/*.bin  raw little-endian values
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint<T>& ck) {
    std::filesystem::create_directories(dir / "tensors");
    nlohmann::json manifest{{"format", "repsteer-checkpoint-1"},
                            {"config", ck.weights.config},
                            {"role", role_name(ck.role)},
                            {"iteration", ck.iteration},
                            {"fingerprint", ck.fingerprint()},
                            {"seed", ck.seed},
                            {"dtype", detail::dtype_name<T>()}};
    if (ck.adapter) manifest["lora"] = ck.adapter->spec;

    nlohmann::json index = nlohmann::json::object();
    auto put = [&](const std::string& name, const Array<T>& a) {
        const std::string file = detail::file_for(name);
        detail::write_tensor(dir / file, a);
        index[name] = nlohmann::json{{"file", file}, {"dtype", detail::dtype_name<T>()}, {"shape", a.shape()}};
    };
    for (const auto& [name, a] : ck.weights.tensors()) put(name, *a);
    if (ck.adapter) {
        for (const auto& [name, a] : ck.adapter->tensors()) put(name, *a);
    }
    detail::write_json(dir / "manifest.json", manifest);
    detail::write_json(dir / "index.json", index);
}

struct CheckpointInfo {
    TransformerConfig config;
    Role role = Role::base;
    int iteration = 0;
    std::string fingerprint;
    std::uint64_t seed = 0;
    std::optional<LoraSpec> lora;
};

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw CheckpointError("checkpoint directory not found: " + dir.string());
    const auto m = detail::read_json(dir / "manifest.json");
    CheckpointInfo info;
    try {
        info.config = m.at("config").get<TransformerConfig>();
        info.role = parse_role(m.at("role").get<std::string>());
        info.iteration = m.at("iteration").get<int>();
        info.fingerprint = m.at("fingerprint").get<std::string>();
        info.seed = m.at("seed").get<std::uint64_t>();
        if (m.contains("lora")) info.lora = m.at("lora").get<LoraSpec>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(dir.string() + "/manifest.json: " + e.what());
    }
    try {
        info.config.validate();
    } catch (const ConfigError& e) {
        throw CheckpointError(dir.string() + ": " + e.what());
    }
    if (info.config.fingerprint() != info.fingerprint) {
        throw CheckpointError(dir.string() + ": manifest fingerprint " + info.fingerprint + " does not match its config (" +
                              info.config.fingerprint() + ")");
    }
    return info;
}

// Loads into scalar type T regardless of the stored dtype.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
    const CheckpointInfo info = read_checkpoint_info(dir);
    const auto index = detail::read_json(dir / "index.json");
    Checkpoint<T> ck;
    ck.role = info.role;
    ck.iteration = info.iteration;
    ck.seed = info.seed;
    ck.weights = init_model<T>(info.config, 0);
    if (info.lora) ck.adapter = init_lora<T>(info.config, *info.lora, 0);

    auto get = [&](const std::string& name, Array<T>& a) {
        if (!index.contains(name)) throw CheckpointError(dir.string() + ": index.json lacks tensor '" + name + "'");
        const auto& e = index.at(name);
        const auto shape = e.at("shape").get<Shape>();
        if (shape != a.shape()) {
            throw CheckpointError(dir.string() + ": tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                  shape_str(a.shape()));
        }
        const auto dtype = e.at("dtype").get<std::string>();
        const auto path = dir / e.at("file").get<std::string>();
        if (dtype == "f32") detail::read_into<float>(path, a);
        else if (dtype == "f64") detail::read_into<double>(path, a);
        else throw CheckpointError(dir.string() + ": tensor '" + name + "' has unknown dtype " + dtype);
        if (!a.all_finite()) throw CheckpointError(dir.string() + ": tensor '" + name + "' holds non-finite values");
    };
    for (auto& [name, a] : ck.weights.tensors()) get(name, *a);
    if (ck.adapter) {
        for (auto& [name, a] : ck.adapter->tensors()) get(name, *a);
    }
    return ck;
}

// Throws CheckpointError describing both fingerprints when they differ.
inline void require_same_architecture(const TransformerConfig& expected, const TransformerConfig& got,
                                      const std::string& what) {
    if (expected.fingerprint() == got.fingerprint()) return;
    throw CheckpointError(what + ": architecture fingerprint " + got.fingerprint() + " (d_model=" +
                          std::to_string(got.d_model) + ", n_layers=" + std::to_string(got.n_layers) +
                          ") does not match " + expected.fingerprint() + " (d_model=" + std::to_string(expected.d_model) +
                          ", n_layers=" + std::to_string(expected.n_layers) + ")");
}

}  // namespace repsteer
