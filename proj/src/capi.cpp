#include "duap.h"

#include <cstring>
#include <string>

#include "attack.hpp"
#include "common.hpp"
#include "dataset.hpp"
#include "encoder.hpp"
#include "image_io.hpp"
#include "runner.hpp"

using namespace duap;

struct duap_encoder {
    EncoderWeights weights;
};

struct duap_uap {
    Perturbation pert;
};

namespace {

thread_local std::string g_last_error;

duap_status status_from_code(ErrorCode code) {
    switch (code) {
        case ErrorCode::Config: return DUAP_E_CONFIG;
        case ErrorCode::Data: return DUAP_E_DATA;
        case ErrorCode::Shape: return DUAP_E_SHAPE;
        case ErrorCode::Range: return DUAP_E_RANGE;
        case ErrorCode::Format: return DUAP_E_FORMAT;
        case ErrorCode::Labels: return DUAP_E_LABELS;
        case ErrorCode::Grid: return DUAP_E_GRID;
        case ErrorCode::Layer: return DUAP_E_LAYER;
        case ErrorCode::Contract: return DUAP_E_CONTRACT;
        case ErrorCode::Internal: return DUAP_E_INTERNAL;
    }
    return DUAP_E_INTERNAL;
}

template <typename Fn>
duap_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return DUAP_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return status_from_code(e.code());
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return DUAP_E_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return DUAP_E_INTERNAL;
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out != nullptr) std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

duap_status require(bool ok, const char* message) {
    if (ok) return DUAP_OK;
    g_last_error = message;
    return DUAP_E_CONTRACT;
}

}  // namespace

extern "C" {

const char* duap_status_name(duap_status status) {
    switch (status) {
        case DUAP_OK: return "OK";
        case DUAP_E_CONFIG: return "E_CONFIG";
        case DUAP_E_DATA: return "E_DATA";
        case DUAP_E_SHAPE: return "E_SHAPE";
        case DUAP_E_RANGE: return "E_RANGE";
        case DUAP_E_FORMAT: return "E_FORMAT";
        case DUAP_E_LABELS: return "E_LABELS";
        case DUAP_E_GRID: return "E_GRID";
        case DUAP_E_LAYER: return "E_LAYER";
        case DUAP_E_CONTRACT: return "E_CONTRACT";
        case DUAP_E_INTERNAL: return "E_INTERNAL";
    }
    return "E_INTERNAL";
}

const char* duap_last_error(void) { return g_last_error.c_str(); }

const char* duap_version(void) { return "0.1.0"; }

void duap_string_free(char* s) { std::free(s); }

duap_status duap_encoder_build(const char* config_json, uint64_t seed, duap_encoder** out) {
    if (duap_status s = require(out != nullptr, "out must not be NULL")) return s;
    return guarded([&]() {
        std::string cfg = config_json != nullptr ? config_json : "{}";
        *out = new duap_encoder{build_encoder_from_json(cfg, seed)};
    });
}

duap_status duap_encoder_load(const char* path, duap_encoder** out) {
    if (duap_status s = require(out != nullptr && path != nullptr, "path/out must not be NULL")) {
        return s;
    }
    return guarded([&]() { *out = new duap_encoder{load_weights(path)}; });
}

duap_status duap_encoder_save(const duap_encoder* encoder, const char* path) {
    if (duap_status s =
            require(encoder != nullptr && path != nullptr, "encoder/path must not be NULL")) {
        return s;
    }
    return guarded([&]() { save_weights(encoder->weights, path); });
}

duap_status duap_encoder_config_json(const duap_encoder* encoder, char** json_out) {
    if (duap_status s =
            require(encoder != nullptr && json_out != nullptr, "encoder/out must not be NULL")) {
        return s;
    }
    return guarded([&]() { *json_out = dup_string(encoder_config_json_string(encoder->weights)); });
}

duap_status duap_encoder_embed_image(const duap_encoder* encoder, const char* image_path,
                                     double* embedding_out, size_t embedding_len) {
    if (duap_status s = require(encoder != nullptr && image_path != nullptr &&
                                    embedding_out != nullptr,
                                "arguments must not be NULL")) {
        return s;
    }
    return guarded([&]() {
        const EncoderWeights& w = encoder->weights;
        if (embedding_len != static_cast<size_t>(w.config.embed_dim)) {
            throw Error(ErrorCode::Shape, "embedding buffer must hold embed_dim doubles");
        }
        ImageTensor img = preprocess(read_image_file(image_path), w.config);
        ImageForward f = forward_image(w, img);
        std::memcpy(embedding_out, f.embedding.data(), sizeof(double) * embedding_len);
    });
}

void duap_encoder_free(duap_encoder* encoder) { delete encoder; }

duap_status duap_uap_load(const char* path, duap_uap** out) {
    if (duap_status s = require(out != nullptr && path != nullptr, "path/out must not be NULL")) {
        return s;
    }
    return guarded([&]() { *out = new duap_uap{load_uap(path)}; });
}

duap_status duap_uap_save(const duap_uap* uap, const char* path) {
    if (duap_status s = require(uap != nullptr && path != nullptr, "uap/path must not be NULL")) {
        return s;
    }
    return guarded([&]() { save_uap(uap->pert, path); });
}

duap_status duap_uap_info_json(const duap_uap* uap, char** json_out) {
    if (duap_status s = require(uap != nullptr && json_out != nullptr, "uap/out must not be NULL")) {
        return s;
    }
    return guarded([&]() { *json_out = dup_string(uap_info_json_string(uap->pert)); });
}

duap_status duap_uap_render_png(const duap_uap* uap, const char* path) {
    if (duap_status s = require(uap != nullptr && path != nullptr, "uap/path must not be NULL")) {
        return s;
    }
    return guarded([&]() { write_delta_png(uap->pert.delta, uap->pert.epsilon, path); });
}

void duap_uap_free(duap_uap* uap) { delete uap; }

duap_status duap_cmd_train(const char* config_json, const char* out_dir) {
    if (duap_status s = require(config_json != nullptr, "config must not be NULL")) return s;
    return guarded([&]() { cmd_train(config_json, out_dir != nullptr ? out_dir : ""); });
}

duap_status duap_cmd_eval(const char* config_json, const char* out_dir) {
    if (duap_status s = require(config_json != nullptr, "config must not be NULL")) return s;
    return guarded([&]() { cmd_eval(config_json, out_dir != nullptr ? out_dir : ""); });
}

duap_status duap_cmd_ablate(const char* config_json, const char* out_dir) {
    if (duap_status s = require(config_json != nullptr, "config must not be NULL")) return s;
    return guarded([&]() { cmd_ablate(config_json, out_dir != nullptr ? out_dir : ""); });
}

duap_status duap_cmd_visualize(const char* config_json, const char* out_dir) {
    if (duap_status s = require(config_json != nullptr, "config must not be NULL")) return s;
    return guarded([&]() { cmd_visualize(config_json, out_dir != nullptr ? out_dir : ""); });
}

duap_status duap_cmd_inspect(const char* path, char** json_out) {
    if (duap_status s = require(path != nullptr && json_out != nullptr,
                                "path/out must not be NULL")) {
        return s;
    }
    return guarded([&]() { *json_out = dup_string(cmd_inspect(path)); });
}

duap_status duap_default_train_config(char** json_out) {
    if (duap_status s = require(json_out != nullptr, "out must not be NULL")) return s;
    return guarded([&]() { *json_out = dup_string(default_train_config_json()); });
}

}  // extern "C"
