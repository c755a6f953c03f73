// duap command line: thin JSON-assembling shell over the shared library API.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "duap.h"

using nlohmann::json;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool quiet = false;
};

json load_base_config(const GlobalArgs& g) {
    if (g.config_path.empty()) return json::object();
    std::ifstream in(g.config_path);
    if (!in) {
        throw std::runtime_error("cannot open config file " + g.config_path);
    }
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw std::runtime_error("config file is not a JSON object: " + g.config_path);
    }
    return j;
}

void set_if(json& obj, const char* section, const char* key, const json& value, bool given) {
    if (given) obj[section][key] = value;
}

int fail(duap_status status) {
    json err{{"error", duap_status_name(status)}, {"message", duap_last_error()}};
    std::cerr << err.dump() << std::endl;
    return 1;
}

int run_command(duap_status (*fn)(const char*, const char*), const json& config,
                const GlobalArgs& g, const char* name) {
    std::string cfg = config.dump();
    duap_status status = fn(cfg.c_str(), g.out_dir.empty() ? nullptr : g.out_dir.c_str());
    if (status != DUAP_OK) return fail(status);
    if (!g.quiet) {
        std::string out = !g.out_dir.empty()
                              ? g.out_dir
                              : config.value("out_dir", std::string("out"));
        std::cout << name << ": done, artifacts in " << out << std::endl;
    }
    return 0;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Doubly-UAP toolkit: train, evaluate and analyze universal "
                 "adversarial perturbations against a ViT-style vision encoder"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs g;
    app.add_option("--config", g.config_path, "JSON run configuration file");
    app.add_option("--out", g.out_dir, "output directory (overrides config out_dir)");
    auto seed_opt = app.add_option("--seed", g.seed, "attack seed override");
    app.add_flag("--quiet", g.quiet, "suppress progress output");

    // shared flag storage
    std::string encoder_path, train_dir, eval_dir, labels, layers, target, loss;
    std::string eps, lr, uap_path, image_path, responses, task, thresholds, topk;
    std::uint64_t build_seed = 0;
    int batch = 0, epochs = 0, surrogate_steps = 0;
    std::string delta_init;

    auto* train = app.add_subcommand(
        "train", "optimize a Doubly-UAP on a frozen encoder (label-free)");
    train->add_option("--encoder", encoder_path, "encoder weights file (DUW1)");
    train->add_option("--build-seed", build_seed,
                      "build a deterministic encoder instead of loading one");
    train->add_option("--data", train_dir, "training image directory");
    train->add_option("--labels", labels, "labels CSV (file,label); optional for train");
    train->add_option("--layers", layers,
                      "1-indexed layer range \"14-17\", list \"14,15\", or segment "
                      "early|middle|late|all");
    train->add_option("--target", target, "values | attention | both");
    train->add_option("--loss", loss, "cossim | mse | std");
    train->add_option("--eps", eps, "L-inf budget, e.g. 16/255");
    train->add_option("--lr", lr, "Adam learning rate, e.g. 1/255");
    train->add_option("--batch", batch, "batch size");
    train->add_option("--epochs", epochs, "training epochs");
    train->add_option("--delta-init", delta_init, "zeros | uniform");

    auto* eval = app.add_subcommand("eval", "evaluate a UAP with the surrogate pipeline");
    eval->add_option("--encoder", encoder_path, "encoder weights file");
    eval->add_option("--uap", uap_path, "UAP file to evaluate");
    eval->add_option("--data", eval_dir, "evaluation image directory");
    eval->add_option("--labels", labels, "labels CSV (file,label)");
    eval->add_option("--responses", responses,
                     "external response CSV (id,clean,adv,label); bypasses the surrogate");
    eval->add_option("--task", task, "classification | captioning");
    eval->add_option("--thresholds", thresholds, "ASR thresholds, e.g. 0.9,0.8");
    eval->add_option("--topk", topk, "top-k list, e.g. 1,10");
    eval->add_option("--surrogate-steps", surrogate_steps, "surrogate head training steps");

    auto* ablate = app.add_subcommand("ablate", "run a sweep (layers|window|loss|eps|iters)");
    std::string kind, grid;
    ablate->add_option("kind", kind, "layers | window | loss | eps | iters")->required();
    ablate->add_option("--grid", grid, "comma-separated grid values");
    ablate->add_option("--encoder", encoder_path, "encoder weights file");
    ablate->add_option("--build-seed", build_seed, "build a deterministic encoder");
    ablate->add_option("--data", train_dir, "training image directory");
    ablate->add_option("--eval-data", eval_dir, "evaluation image directory");
    ablate->add_option("--labels", labels, "labels CSV for evaluation");
    ablate->add_option("--layers", layers, "layer selection for the template config");
    ablate->add_option("--target", target, "values | attention | both");
    ablate->add_option("--loss", loss, "template loss kind");
    ablate->add_option("--eps", eps, "template epsilon");
    ablate->add_option("--epochs", epochs, "template epochs");
    ablate->add_option("--batch", batch, "template batch size");

    auto* visualize = app.add_subcommand(
        "visualize", "emit clean/adversarial value heatmaps and the UAP render");
    visualize->add_option("--encoder", encoder_path, "encoder weights file");
    visualize->add_option("--uap", uap_path, "UAP file")->required();
    visualize->add_option("--image", image_path, "image to inspect")->required();
    visualize->add_option("--layers", layers, "layers to render (1-indexed)");

    auto* inspect = app.add_subcommand("inspect", "dump a weights/UAP/DIMG file header");
    std::string inspect_path;
    inspect->add_option("path", inspect_path, "file to inspect")->required();

    CLI11_PARSE(app, argc, argv);
    g.seed_given = seed_opt->count() > 0;

    try {
        json config = load_base_config(g);

        if (!encoder_path.empty()) {
            config["encoder"] = json{{"path", encoder_path}};
        } else if ((train->parsed() || ablate->parsed()) && !config.contains("encoder")) {
            json build = json::object();
            build["seed"] = build_seed;
            if (config.contains("encoder_config")) build["config"] = config["encoder_config"];
            config["encoder"] = json{{"build", build}};
        }

        set_if(config, "attack", "layers", layers, !layers.empty());
        set_if(config, "attack", "target", target, !target.empty());
        set_if(config, "attack", "loss", loss, !loss.empty());
        set_if(config, "attack", "epsilon", eps, !eps.empty());
        set_if(config, "attack", "learning_rate", lr, !lr.empty());
        set_if(config, "attack", "batch_size", batch, batch > 0);
        set_if(config, "attack", "epochs", epochs, epochs > 0);
        set_if(config, "attack", "delta_init", delta_init, !delta_init.empty());
        if (g.seed_given) config["attack"]["seed"] = g.seed;

        if (train->parsed()) {
            set_if(config, "data", "train_dir", train_dir, !train_dir.empty());
            set_if(config, "data", "labels", labels, !labels.empty());
            return run_command(&duap_cmd_train, config, g, "train");
        }
        if (eval->parsed()) {
            set_if(config, "data", "eval_dir", eval_dir, !eval_dir.empty());
            set_if(config, "data", "labels", labels, !labels.empty());
            if (!uap_path.empty()) config["uap"] = uap_path;
            if (!responses.empty()) config["responses"] = responses;
            if (!task.empty()) config["task"] = task;
            if (!thresholds.empty()) {
                json arr = json::array();
                for (const auto& t : split_commas(thresholds)) arr.push_back(std::stod(t));
                config["report"]["thresholds"] = arr;
            }
            if (!topk.empty()) {
                json arr = json::array();
                for (const auto& t : split_commas(topk)) arr.push_back(std::stoi(t));
                config["report"]["topk"] = arr;
            }
            if (surrogate_steps > 0) config["surrogate"]["steps"] = surrogate_steps;
            return run_command(&duap_cmd_eval, config, g, "eval");
        }
        if (ablate->parsed()) {
            config["kind"] = kind;
            if (!grid.empty()) {
                json arr = json::array();
                for (const auto& v : split_commas(grid)) {
                    if (kind == "iters") arr.push_back(std::stoi(v));
                    else arr.push_back(v);
                }
                config["grid"] = arr;
            }
            set_if(config, "data", "train_dir", train_dir, !train_dir.empty());
            set_if(config, "data", "eval_dir", eval_dir, !eval_dir.empty());
            set_if(config, "data", "labels", labels, !labels.empty());
            return run_command(&duap_cmd_ablate, config, g, "ablate");
        }
        if (visualize->parsed()) {
            config["uap"] = uap_path;
            config["image"] = image_path;
            if (!layers.empty()) config["layers"] = layers;
            return run_command(&duap_cmd_visualize, config, g, "visualize");
        }
        if (inspect->parsed()) {
            char* out = nullptr;
            duap_status status = duap_cmd_inspect(inspect_path.c_str(), &out);
            if (status != DUAP_OK) return fail(status);
            std::cout << out << std::endl;
            duap_string_free(out);
            return 0;
        }
    } catch (const std::exception& e) {
        json err{{"error", "E_CONFIG"}, {"message", e.what()}};
        std::cerr << err.dump() << std::endl;
        return 1;
    }
    return 0;
}
