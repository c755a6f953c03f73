#pragma once

#include <optional>
#include <string>

#include "attack.hpp"
#include "encoder.hpp"

namespace duap {

// Command entry points behind both the shared library API and the CLI.
// Each takes a JSON run configuration (see README for the schema), validates
// everything before touching the output directory, and throws duap::Error on
// failure. out_dir_override, when non-empty, replaces the JSON's out_dir.

void cmd_train(const std::string& config_json, const std::string& out_dir_override = "");
void cmd_eval(const std::string& config_json, const std::string& out_dir_override = "");
void cmd_ablate(const std::string& config_json, const std::string& out_dir_override = "");
void cmd_visualize(const std::string& config_json, const std::string& out_dir_override = "");

// header dump (weights / UAP / DIMG, sniffed by magic) as a JSON string
std::string cmd_inspect(const std::string& path);

// resolved defaults for a train run, as JSON
std::string default_train_config_json();

// "early|middle|late|all", "14-17", "14,15,16" or "17"; 1-indexed on the
// external surface, 0-indexed in the returned selection
std::vector<int> parse_layer_spec(const std::string& spec, int num_layers);

// "16/255" or a plain number
double parse_fraction(const std::string& text);

// worker cap: DUAP_THREADS when set, hardware concurrency otherwise
int worker_threads();

// JSON-facing helpers used by the C API
EncoderWeights build_encoder_from_json(const std::string& config_json, std::uint64_t seed);
std::string encoder_config_json_string(const EncoderWeights& w);
std::string uap_info_json_string(const Perturbation& p);

}  // namespace duap
