#pragma once

// Checkpoint format: a flat binary of named parameter tensors (name, shape,
// raw 32-bit floats) plus a JSON manifest carrying the seed and the
// architecture hyperparameters.

#include <cstring>
#include <filesystem>
#include <fstream>

#include "gmflow/pipeline.hpp"
#include "gmflow/sha256.hpp"
#include "json.hpp"

namespace gmflow {

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"enc_c1", c.enc_c1},
                          {"enc_c2", c.enc_c2},
                          {"enc_c3", c.enc_c3},
                          {"feat_dim", c.feat_dim},
                          {"ctx_dim", c.ctx_dim},
                          {"norm_groups", c.norm_groups},
                          {"corr_levels", c.corr_levels},
                          {"corr_radius", c.corr_radius},
                          {"q_softmax", c.q_softmax},
                          {"gmc_project_motion", c.gmc_project_motion}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.enc_c1 = j.at("enc_c1");
    c.enc_c2 = j.at("enc_c2");
    c.enc_c3 = j.at("enc_c3");
    c.feat_dim = j.at("feat_dim");
    c.ctx_dim = j.at("ctx_dim");
    c.norm_groups = j.at("norm_groups");
    c.corr_levels = j.at("corr_levels");
    c.corr_radius = j.at("corr_radius");
    c.q_softmax = j.at("q_softmax");
    c.gmc_project_motion = j.at("gmc_project_motion");
    return c;
}

namespace detail {
constexpr char kCheckpointMagic[8] = {'G', 'M', 'F', 'W', '0', '0', '0', '1'};
}

template <class S>
void save_checkpoint(const GmflowModel<S>& model, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::string bin_path = (std::filesystem::path(dir) / "checkpoint.bin").string();
    {
        std::ofstream f(bin_path, std::ios::binary);
        if (!f) throw IoError("cannot write " + bin_path);
        f.write(detail::kCheckpointMagic, 8);
        uint32_t count = uint32_t(model.params.count());
        f.write(reinterpret_cast<const char*>(&count), 4);
        for (size_t i = 0; i < model.params.count(); ++i) {
            const auto& p = model.params[i];
            uint16_t name_len = uint16_t(p.name.size());
            f.write(reinterpret_cast<const char*>(&name_len), 2);
            f.write(p.name.data(), name_len);
            uint8_t nd = uint8_t(p.value.shape.nd);
            f.write(reinterpret_cast<const char*>(&nd), 1);
            for (int d = 0; d < nd; ++d) {
                uint32_t dim = uint32_t(p.value.shape[d]);
                f.write(reinterpret_cast<const char*>(&dim), 4);
            }
            for (S v : p.value.v) {
                float fv = float(v);
                f.write(reinterpret_cast<const char*>(&fv), 4);
            }
        }
        if (!f) throw IoError("short write: " + bin_path);
    }
    nlohmann::json manifest{{"format", "gmflow-checkpoint-v1"},
                            {"seed", model.seed},
                            {"config", model_config_to_json(model.cfg)},
                            {"param_count", model.params.count()},
                            {"total_values", model.params.total_size()},
                            {"weights_sha256", Sha256::of_file(bin_path)}};
    std::ofstream f((std::filesystem::path(dir) / "checkpoint.json").string());
    if (!f) throw IoError("cannot write checkpoint manifest in " + dir);
    f << manifest.dump(2);
}

template <class S>
GmflowModel<S> load_checkpoint(const std::string& dir) {
    nlohmann::json manifest;
    {
        std::ifstream f((std::filesystem::path(dir) / "checkpoint.json").string());
        if (!f) throw IoError("cannot read checkpoint manifest in " + dir);
        try {
            f >> manifest;
        } catch (const std::exception& e) {
            throw IoError(std::string("bad checkpoint manifest: ") + e.what());
        }
    }
    GmflowModel<S> model(model_config_from_json(manifest.at("config")),
                         manifest.at("seed").get<uint64_t>());

    const std::string bin_path = (std::filesystem::path(dir) / "checkpoint.bin").string();
    std::ifstream f(bin_path, std::ios::binary);
    if (!f) throw IoError("cannot read " + bin_path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw IoError("bad checkpoint magic in " + bin_path);
    uint32_t count = 0;
    f.read(reinterpret_cast<char*>(&count), 4);
    if (count != model.params.count())
        throw IoError("checkpoint parameter count does not match the architecture");
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t name_len = 0;
        f.read(reinterpret_cast<char*>(&name_len), 2);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        uint8_t nd = 0;
        f.read(reinterpret_cast<char*>(&nd), 1);
        Shape shape;
        shape.nd = nd;
        for (int d = 0; d < nd; ++d) {
            uint32_t dim = 0;
            f.read(reinterpret_cast<char*>(&dim), 4);
            shape.d[size_t(d)] = int(dim);
        }
        Parameter<S>* p = model.params.find(name);
        if (!p) throw IoError("checkpoint names a parameter the architecture lacks: " + name);
        if (p->value.shape != shape)
            throw IoError("checkpoint shape mismatch for " + name);
        for (int64_t k = 0; k < p->value.size(); ++k) {
            float fv = 0;
            f.read(reinterpret_cast<char*>(&fv), 4);
            p->value[k] = S(fv);
        }
    }
    if (!f) throw IoError("truncated checkpoint: " + bin_path);
    return model;
}

inline std::string checkpoint_weights_hash(const std::string& dir) {
    return Sha256::of_file((std::filesystem::path(dir) / "checkpoint.bin").string());
}

}  // namespace gmflow
