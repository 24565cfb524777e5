#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "dk/model.hpp"
#include "dk/tensor_io.hpp"
#include "dk/train.hpp"

namespace dk {

// Checkpoint directory: checkpoint.json (arch, config, epoch, dtype, param
// index) plus one .tsr per parameter tensor, named after the parameter.

namespace ckpt_detail {

inline std::string file_for(const std::string& param_name) {
    std::string f = param_name;
    for (char& c : f)
        if (c == '.') c = '_';
    return f + ".tsr";
}

inline nlohmann::json config_json(const TrainConfig& c) {
    return {
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"base_lr", c.base_lr},
        {"momentum", c.momentum},
        {"weight_decay", c.weight_decay},
        {"warmup_epochs", c.warmup_epochs},
        {"schedule", c.schedule},
        {"seed", c.seed},
        {"dk_lr_multiplier", c.dk_lr_multiplier},
    };
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs");
    c.batch_size = j.at("batch_size");
    c.base_lr = j.at("base_lr");
    c.momentum = j.at("momentum");
    c.weight_decay = j.at("weight_decay");
    c.warmup_epochs = j.at("warmup_epochs");
    c.schedule = j.at("schedule");
    c.seed = j.at("seed");
    c.dk_lr_multiplier = j.at("dk_lr_multiplier");
    return c;
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(Model<T>& model, const TrainConfig& cfg, int epoch,
                     const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest = {
        {"arch", model.arch},
        {"config", ckpt_detail::config_json(cfg)},
        {"epoch", epoch},
        {"dtype", detail::dtype_name<T>()},
        {"params", nlohmann::json::array()},
    };
    for (auto& p : model.params()) {
        const std::string file = ckpt_detail::file_for(p.name);
        Tensor<T> t(p.dims[0], p.dims[1], p.dims[2], p.dims[3]);
        t.data() = *p.value;
        save_tsr(t, (fs::path(dir) / file).string());
        manifest["params"].push_back({{"name", p.name}, {"file", file},
                                      {"dims", p.dims}});
    }
    std::ofstream out(fs::path(dir) / "checkpoint.json");
    if (!out) throw std::runtime_error("save_checkpoint: cannot write manifest");
    out << manifest.dump(2) << '\n';
}

template <typename T>
struct LoadedCheckpoint {
    Model<T> model;
    TrainConfig config;
    int epoch = 0;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "checkpoint.json");
    if (!in) throw std::runtime_error("load_checkpoint: missing checkpoint.json in " + dir);
    nlohmann::json manifest;
    in >> manifest;
    if (manifest.at("dtype") != detail::dtype_name<T>())
        throw std::runtime_error("load_checkpoint: dtype mismatch");
    LoadedCheckpoint<T> out{
        build_model<T>(manifest.at("arch"), 0),
        ckpt_detail::config_from_json(manifest.at("config")),
        manifest.at("epoch"),
    };
    // rebuild with the recorded config so lr multipliers match
    out.model = build_model<T>(manifest.at("arch"), out.config.seed, 4,
                               out.config.dk_lr_multiplier);
    auto params = out.model.params();
    const auto& listed = manifest.at("params");
    if (listed.size() != params.size())
        throw std::runtime_error("load_checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (listed[i].at("name") != params[i].name)
            throw std::runtime_error("load_checkpoint: parameter order mismatch at " +
                                     params[i].name);
        const Tensor<T> t =
            load_tsr<T>((fs::path(dir) / listed[i].at("file").get<std::string>()).string());
        if (t.size() != params[i].value->size())
            throw std::runtime_error("load_checkpoint: size mismatch at " + params[i].name);
        *params[i].value = t.data();
    }
    return out;
}

}  // namespace dk
