#include "runner.hpp"

#include <json.hpp>

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "analysis.hpp"
#include "binio.hpp"
#include "common.hpp"
#include "csv.hpp"
#include "dataset.hpp"
#include "eval.hpp"
#include "image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace duap {

namespace {

json parse_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::Config, "config is not valid JSON");
    if (!j.is_object()) throw Error(ErrorCode::Config, "config must be a JSON object");
    return j;
}

std::string iso_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::Format, "cannot open " + tmp + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw Error(ErrorCode::Format, "write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

// artifact writers that go through a temp path + atomic rename
template <typename Fn>
void emit_atomic(const std::string& path, Fn&& writer) {
    std::string tmp = path + ".tmp";
    writer(tmp);
    fs::rename(tmp, path);
}

EncoderConfig encoder_config_from_json(const json& j) {
    EncoderConfig c;
    c.image_resolution = j.value("image_resolution", 16);
    c.patch_size = j.value("patch_size", 4);
    c.num_layers = j.value("num_layers", 2);
    c.num_heads = j.value("num_heads", 4);
    c.embed_dim = j.value("embed_dim", 16);
    c.mlp_ratio = j.value("mlp_ratio", 2.0);
    if (j.contains("norm_mean")) c.norm_mean = j.at("norm_mean").get<std::vector<double>>();
    if (j.contains("norm_std")) c.norm_std = j.at("norm_std").get<std::vector<double>>();
    c.validate();
    return c;
}

json encoder_config_to_json(const EncoderConfig& c) {
    return json{{"image_resolution", c.image_resolution}, {"patch_size", c.patch_size},
                {"num_layers", c.num_layers},             {"num_heads", c.num_heads},
                {"embed_dim", c.embed_dim},               {"mlp_ratio", c.mlp_ratio},
                {"norm_mean", c.norm_mean},               {"norm_std", c.norm_std}};
}

struct EncoderSource {
    EncoderWeights weights;
    bool built = false;
    std::uint64_t build_seed = 0;
    json echo;
};

EncoderSource resolve_encoder(const json& root) {
    if (!root.contains("encoder")) {
        throw Error(ErrorCode::Config, "config needs an \"encoder\" section");
    }
    const json& e = root.at("encoder");
    EncoderSource src;
    if (e.contains("path")) {
        std::string path = e.at("path").get<std::string>();
        src.weights = load_weights(path);
        src.echo = json{{"path", path}};
    } else if (e.contains("build")) {
        const json& b = e.at("build");
        // missing fields fall back to the desk-scale toy encoder
        EncoderConfig cfg = encoder_config_from_json(b.value("config", json::object()));
        src.build_seed = b.value("seed", 7ull);
        src.weights = build_encoder(cfg, src.build_seed);
        src.built = true;
        src.echo = json{{"build", json{{"seed", src.build_seed},
                                       {"config", encoder_config_to_json(cfg)}}}};
    } else {
        throw Error(ErrorCode::Config, "encoder section needs \"path\" or \"build\"");
    }
    return src;
}

struct ResolvedAttack {
    AttackConfig config;
    std::string layers_spec;
};

double epsilon_from_json(const json& v) {
    if (v.is_string()) return parse_fraction(v.get<std::string>());
    if (v.is_number()) return v.get<double>();
    throw Error(ErrorCode::Config, "epsilon must be a number or an \"a/b\" string");
}

ResolvedAttack resolve_attack(const json& root, int num_layers) {
    ResolvedAttack out;
    const json a = root.value("attack", json::object());
    out.layers_spec = a.value("layers", std::string("middle"));
    out.config.selection.layers = parse_layer_spec(out.layers_spec, num_layers);
    out.config.selection.target = attack_target_from_name(a.value("target", std::string("values")));
    out.config.loss_kind = loss_kind_from_name(a.value("loss", std::string("cossim")));
    out.config.epsilon = a.contains("epsilon") ? epsilon_from_json(a.at("epsilon")) : 16.0 / 255.0;
    out.config.learning_rate =
        a.contains("learning_rate") ? epsilon_from_json(a.at("learning_rate")) : 1.0 / 255.0;
    out.config.batch_size = a.value("batch_size", 8);
    out.config.epochs = a.value("epochs", 3);
    out.config.seed = a.value("seed", 0ull);
    std::string init = a.value("delta_init", std::string("uniform"));
    if (init == "zeros") out.config.delta_init = DeltaInit::Zeros;
    else if (init == "uniform") out.config.delta_init = DeltaInit::Uniform;
    else throw Error(ErrorCode::Config, "delta_init must be \"zeros\" or \"uniform\"");
    out.config.validate();
    out.config.selection.validate(num_layers);
    return out;
}

json attack_echo(const ResolvedAttack& ra) {
    std::vector<int> one_indexed;
    for (int l : ra.config.selection.layers) one_indexed.push_back(l + 1);
    return json{{"layers", ra.layers_spec},
                {"layers_one_indexed", one_indexed},
                {"target", attack_target_name(ra.config.selection.target)},
                {"loss", loss_kind_name(ra.config.loss_kind)},
                {"epsilon", ra.config.epsilon},
                {"learning_rate", ra.config.learning_rate},
                {"batch_size", ra.config.batch_size},
                {"epochs", ra.config.epochs},
                {"seed", ra.config.seed},
                {"delta_init", ra.config.delta_init == DeltaInit::Zeros ? "zeros" : "uniform"}};
}

struct ReportSpec {
    std::vector<double> thresholds{0.9, 0.8};
    std::vector<int> ks{1, 10};
    int bins = 50;
};

ReportSpec resolve_report(const json& root, const std::string& task) {
    ReportSpec spec;
    if (task == "captioning") spec.thresholds = {0.7, 0.6};
    const json r = root.value("report", json::object());
    if (r.contains("thresholds")) spec.thresholds = r.at("thresholds").get<std::vector<double>>();
    if (r.contains("topk")) spec.ks = r.at("topk").get<std::vector<int>>();
    spec.bins = r.value("bins", 50);
    for (double th : spec.thresholds) {
        if (!(th > -1.0 && th <= 1.0)) {
            throw Error(ErrorCode::Config, "report thresholds must lie in (-1, 1]");
        }
    }
    if (spec.bins < 2) throw Error(ErrorCode::Config, "report bins must be >= 2");
    return spec;
}

std::string resolve_out_dir(const json& root, const std::string& override_dir) {
    std::string out = !override_dir.empty() ? override_dir
                                            : root.value("out_dir", std::string());
    if (out.empty()) throw Error(ErrorCode::Config, "config needs \"out_dir\"");
    return out;
}

void ensure_out_dir(const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw Error(ErrorCode::Data, "cannot create output directory " + out_dir);
}

std::string train_log_csv(const TrainLog& log) {
    // wall time stays out of the CSV so artifacts are bit-reproducible;
    // aggregate timing lands in the metadata JSON
    std::ostringstream out;
    out << "iteration,epoch,objective,mean_value_cossim\n";
    out.precision(17);
    for (const auto& r : log.records) {
        out << r.iteration << ',' << r.epoch << ',' << r.objective << ',' << r.mean_value_cossim
            << '\n';
    }
    return out.str();
}

json report_to_json(const EvalReport& report) {
    json asr_j = json::object();
    char key[32];
    for (const auto& [th, rate] : report.asr) {
        std::snprintf(key, sizeof key, "%g", th);
        asr_j[key] = rate;
    }
    json topk_j = json::object();
    for (const auto& [k, acc] : report.topk) topk_j[std::to_string(k)] = acc;
    return json{{"asr", asr_j},
                {"topk", topk_j},
                {"mean_similarity", report.mean_similarity},
                {"histogram", json{{"bins", report.histogram.bins},
                                   {"lo", -1.0},
                                   {"hi", 1.0},
                                   {"counts", report.histogram.counts}}}};
}

std::string sanitize_filename(const std::string& name) {
    std::string out;
    for (char c : name) {
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
    }
    return out;
}

struct EvalAssets {
    DatasetManifest manifest;
    std::vector<ImageTensor> images;
    std::vector<std::string> ids;
    std::vector<std::string> labels;
    std::vector<std::string> candidates;
    SurrogateHead head;
};

EvalAssets prepare_eval_assets(const EncoderWeights& weights, const std::string& eval_dir,
                               const std::string& labels_csv, int surrogate_steps) {
    if (labels_csv.empty()) {
        throw Error(ErrorCode::Labels, "evaluation needs a labels CSV");
    }
    EvalAssets assets;
    assets.manifest = ingest_dataset(eval_dir, labels_csv);
    assets.images = load_images(assets.manifest, weights.config);
    assets.ids = manifest_ids(assets.manifest);
    assets.labels = manifest_labels(assets.manifest);

    LabeledDataset labeled;
    for (std::size_t i = 0; i < assets.images.size(); ++i) {
        if (assets.labels[i].empty()) {
            throw Error(ErrorCode::Labels, "entry has no label: " + assets.ids[i]);
        }
        labeled.items.push_back({assets.images[i], assets.labels[i]});
    }
    assets.head = train_surrogate_head(weights, labeled, surrogate_steps);
    assets.candidates = assets.head.class_names;
    return assets;
}

}  // namespace

std::vector<int> parse_layer_spec(const std::string& spec, int num_layers) {
    if (spec.empty()) throw Error(ErrorCode::Config, "empty layer spec");
    if (spec == "all" || spec == "early" || spec == "middle" || spec == "late") {
        return segment_layers(num_layers, segment_from_name(spec)).layers;
    }
    auto parse_int = [](const std::string& s) {
        int v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) {
            throw Error(ErrorCode::Config, "bad layer index: " + s);
        }
        return v;
    };
    std::vector<int> one_indexed;
    auto dash = spec.find('-');
    if (dash != std::string::npos) {
        int lo = parse_int(spec.substr(0, dash));
        int hi = parse_int(spec.substr(dash + 1));
        if (lo > hi) throw Error(ErrorCode::Config, "layer range is reversed: " + spec);
        for (int l = lo; l <= hi; ++l) one_indexed.push_back(l);
    } else {
        std::stringstream ss(spec);
        std::string item;
        while (std::getline(ss, item, ',')) one_indexed.push_back(parse_int(item));
    }
    std::vector<int> layers;
    for (int l : one_indexed) {
        if (l < 1 || l > num_layers) {
            throw Error(ErrorCode::Range, "layer " + std::to_string(l) + " outside 1.." +
                                              std::to_string(num_layers));
        }
        layers.push_back(l - 1);
    }
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    return layers;
}

double parse_fraction(const std::string& text) {
    auto slash = text.find('/');
    try {
        if (slash == std::string::npos) return std::stod(text);
        double num = std::stod(text.substr(0, slash));
        double den = std::stod(text.substr(slash + 1));
        if (den == 0.0) throw Error(ErrorCode::Config, "zero denominator: " + text);
        return num / den;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        throw Error(ErrorCode::Config, "cannot parse number: " + text);
    }
}

int worker_threads() {
    if (const char* env = std::getenv("DUAP_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

std::string default_train_config_json() {
    json j{{"encoder", json{{"build", json{{"seed", 7},
                                           {"config", encoder_config_to_json(EncoderConfig{
                                                          16, 4, 2, 4, 16, 2.0})}}}}},
           {"attack", json{{"layers", "middle"},
                           {"target", "values"},
                           {"loss", "cossim"},
                           {"epsilon", 16.0 / 255.0},
                           {"learning_rate", 1.0 / 255.0},
                           {"batch_size", 8},
                           {"epochs", 3},
                           {"seed", 0},
                           {"delta_init", "uniform"}}},
           {"data", json{{"train_dir", ""}, {"eval_dir", ""}, {"labels", ""}}},
           {"report", json{{"thresholds", {0.9, 0.8}}, {"topk", {1, 10}}, {"bins", 50}}},
           {"out_dir", "out"}};
    return j.dump(2);
}

void cmd_train(const std::string& config_json, const std::string& out_dir_override) {
    json root = parse_json(config_json);
    std::string out_dir = resolve_out_dir(root, out_dir_override);

    EncoderSource enc = resolve_encoder(root);
    ResolvedAttack attack = resolve_attack(root, enc.weights.config.num_layers);

    const json data = root.value("data", json::object());
    std::string train_dir = data.value("train_dir", std::string());
    if (train_dir.empty()) throw Error(ErrorCode::Data, "config needs data.train_dir");
    std::string labels_csv = data.value("labels", std::string());

    DatasetManifest manifest = ingest_dataset(train_dir, labels_csv);
    std::vector<ImageTensor> images = load_images(manifest, enc.weights.config);

    ensure_out_dir(out_dir);
    auto t0 = std::chrono::steady_clock::now();
    auto [pert, log] = train_uap(enc.weights, images, attack.config);
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    emit_atomic(out_dir + "/uap.duap", [&](const std::string& p) { save_uap(pert, p); });
    emit_atomic(out_dir + "/uap.png",
                [&](const std::string& p) { write_delta_png(pert.delta, pert.epsilon, p); });
    write_file_atomic(out_dir + "/train_log.csv", train_log_csv(log));
    if (enc.built) {
        emit_atomic(out_dir + "/encoder.duw",
                    [&](const std::string& p) { save_weights(enc.weights, p); });
    }

    json meta{{"command", "train"},
              {"config", json{{"encoder", enc.echo},
                              {"attack", attack_echo(attack)},
                              {"data", json{{"train_dir", train_dir}, {"labels", labels_csv}}},
                              {"out_dir", out_dir}}},
              {"seed", attack.config.seed},
              {"data_hash", manifest.source_hash},
              {"num_images", images.size()},
              {"iterations", log.records.empty() ? 0 : log.records.back().iteration},
              {"final_objective", log.records.empty() ? 0.0 : log.records.back().objective},
              {"final_value_cossim",
               log.records.empty() ? 0.0 : log.records.back().mean_value_cossim},
              {"started_at", iso_now()},
              {"wall_seconds", wall}};
    write_file_atomic(out_dir + "/run_meta.json", meta.dump(2) + "\n");
}

void cmd_eval(const std::string& config_json, const std::string& out_dir_override) {
    json root = parse_json(config_json);
    std::string out_dir = resolve_out_dir(root, out_dir_override);
    std::string task = root.value("task", std::string("classification"));
    if (task != "classification" && task != "captioning") {
        throw Error(ErrorCode::Config, "task must be classification or captioning");
    }
    ReportSpec report_spec = resolve_report(root, task);
    auto embedder = default_text_embedder();

    ResponseSet responses;
    std::vector<std::string> candidates;
    json meta_data = json::object();

    if (root.contains("responses")) {
        // external response CSV bypasses the surrogate pipeline entirely
        std::string path = root.at("responses").get<std::string>();
        responses = read_response_csv(path);
        if (responses.items.empty()) throw Error(ErrorCode::Data, "response CSV is empty");
        meta_data["responses"] = path;
    } else {
        EncoderSource enc = resolve_encoder(root);
        if (!root.contains("uap")) throw Error(ErrorCode::Config, "config needs \"uap\"");
        std::string uap_path = root.at("uap").get<std::string>();
        Perturbation pert = load_uap(uap_path);
        if (pert.delta.channels != enc.weights.config.channels() ||
            pert.delta.height != enc.weights.config.image_resolution ||
            pert.delta.width != enc.weights.config.image_resolution) {
            throw Error(ErrorCode::Shape, "UAP dimensions do not match encoder input");
        }

        const json data = root.value("data", json::object());
        std::string eval_dir = data.value("eval_dir", std::string());
        if (eval_dir.empty()) throw Error(ErrorCode::Data, "config needs data.eval_dir");
        int steps = root.value("surrogate", json::object()).value("steps", 2000);
        EvalAssets assets = prepare_eval_assets(enc.weights, eval_dir,
                                                data.value("labels", std::string()), steps);
        responses = surrogate_response_set(enc.weights, assets.head, assets.images, assets.ids,
                                           assets.labels, &pert.delta);
        candidates = assets.candidates;
        meta_data["eval_dir"] = eval_dir;
        meta_data["data_hash"] = assets.manifest.source_hash;
        meta_data["uap"] = uap_path;
    }

    if (task == "captioning") {
        // clean responses serve as pseudo-ground-truth labels
        std::set<std::string> uniq;
        for (auto& item : responses.items) {
            item.label = item.clean;
            uniq.insert(item.clean);
        }
        candidates.assign(uniq.begin(), uniq.end());
    } else if (candidates.empty()) {
        std::set<std::string> uniq;
        for (const auto& item : responses.items) {
            if (item.label.empty()) {
                throw Error(ErrorCode::Labels, "response item " + item.id + " has no label");
            }
            uniq.insert(item.label);
        }
        candidates.assign(uniq.begin(), uniq.end());
    }

    EvalReport report = make_report(responses, *embedder, candidates, report_spec.thresholds,
                                    report_spec.ks, report_spec.bins);

    ensure_out_dir(out_dir);
    write_file_atomic(out_dir + "/eval_report.json", report_to_json(report).dump(2) + "\n");
    emit_atomic(out_dir + "/responses.csv",
                [&](const std::string& p) { write_response_csv(responses, p); });
    json meta{{"command", "eval"},
              {"task", task},
              {"thresholds", report_spec.thresholds},
              {"topk", report_spec.ks},
              {"num_items", responses.items.size()},
              {"num_candidates", candidates.size()},
              {"data", meta_data},
              {"started_at", iso_now()}};
    write_file_atomic(out_dir + "/run_meta.json", meta.dump(2) + "\n");
}

void cmd_ablate(const std::string& config_json, const std::string& out_dir_override) {
    json root = parse_json(config_json);
    std::string out_dir = resolve_out_dir(root, out_dir_override);
    std::string kind = root.value("kind", std::string());

    EncoderSource enc = resolve_encoder(root);
    const int num_layers = enc.weights.config.num_layers;

    // the grid is validated before the attack template so a bad grid value
    // always surfaces as E_GRID
    SweepSpec spec;
    const json grid = root.value("grid", json::array());

    if (kind == "layers") {
        if (!grid.empty()) {
            throw Error(ErrorCode::Grid, "the layers ablation uses the fixed 9-entry grid");
        }
        spec.variable = SweepVariable::Segment;
        spec.values = segment_grid(num_layers);
    } else if (kind == "window") {
        spec.variable = SweepVariable::WindowPosition;
        for (const auto& g : grid) {
            if (!g.is_string()) throw Error(ErrorCode::Grid, "window grid entries must be strings");
            SweepValue v;
            v.name = g.get<std::string>();
            LayerSelection sel;
            try {
                sel.layers = parse_layer_spec(v.name, num_layers);
            } catch (const Error& e) {
                throw Error(ErrorCode::Grid, std::string("bad window: ") + e.what());
            }
            v.selection = sel;  // target patched from the template below
            spec.values.push_back(std::move(v));
        }
    } else if (kind == "loss") {
        spec.variable = SweepVariable::Loss;
        for (const auto& g : grid) {
            if (!g.is_string()) throw Error(ErrorCode::Grid, "loss grid entries must be strings");
            SweepValue v;
            v.name = g.get<std::string>();
            try {
                v.loss = loss_kind_from_name(v.name);
            } catch (const Error& e) {
                throw Error(ErrorCode::Grid, e.what());
            }
            spec.values.push_back(std::move(v));
        }
        if (spec.values.empty()) {
            for (const char* name : {"std", "mse", "cossim"}) {
                SweepValue v;
                v.name = name;
                v.loss = loss_kind_from_name(name);
                spec.values.push_back(std::move(v));
            }
        }
    } else if (kind == "eps") {
        spec.variable = SweepVariable::Epsilon;
        std::vector<std::pair<std::string, double>> entries;
        if (grid.empty()) {
            for (int n : {4, 8, 12, 16}) {
                entries.emplace_back(std::to_string(n) + "/255", n / 255.0);
            }
        } else {
            for (const auto& g : grid) {
                if (g.is_string()) {
                    try {
                        entries.emplace_back(g.get<std::string>(),
                                             parse_fraction(g.get<std::string>()));
                    } catch (const Error& e) {
                        throw Error(ErrorCode::Grid, e.what());
                    }
                } else if (g.is_number()) {
                    entries.emplace_back(json(g).dump(), g.get<double>());
                } else {
                    throw Error(ErrorCode::Grid, "eps grid entries must be numbers or strings");
                }
            }
        }
        for (auto& [name, eps] : entries) {
            if (!(eps > 0.0 && eps < 1.0)) {
                throw Error(ErrorCode::Grid, "epsilon " + name + " outside (0, 1)");
            }
            SweepValue v;
            v.name = name;
            v.epsilon = eps;
            spec.values.push_back(std::move(v));
        }
    } else if (kind == "iters") {
        spec.variable = SweepVariable::Iterations;
        for (const auto& g : grid) {
            if (!g.is_number_integer() || g.get<int>() < 1) {
                throw Error(ErrorCode::Grid, "iters grid entries must be positive epoch counts");
            }
            SweepValue v;
            v.name = std::to_string(g.get<int>());
            v.epochs = g.get<int>();
            spec.values.push_back(std::move(v));
        }
    } else {
        throw Error(ErrorCode::Config, "kind must be one of layers, window, loss, eps, iters");
    }

    ResolvedAttack attack = resolve_attack(root, num_layers);
    spec.base = attack.config;
    if (kind == "window") {
        for (auto& v : spec.values) v.selection->target = spec.base.selection.target;
    }

    const json data = root.value("data", json::object());
    std::string train_dir = data.value("train_dir", std::string());
    std::string eval_dir = data.value("eval_dir", train_dir);
    if (train_dir.empty()) throw Error(ErrorCode::Data, "config needs data.train_dir");
    DatasetManifest manifest = ingest_dataset(train_dir);
    std::vector<ImageTensor> train_images = load_images(manifest, enc.weights.config);

    ReportSpec report_spec = resolve_report(root, "classification");
    int steps = root.value("surrogate", json::object()).value("steps", 2000);
    EvalAssets assets = prepare_eval_assets(enc.weights, eval_dir,
                                            data.value("labels", std::string()), steps);
    spec.protocol.head = std::move(assets.head);
    spec.protocol.candidate_labels = std::move(assets.candidates);
    spec.protocol.eval_images = std::move(assets.images);
    spec.protocol.eval_ids = std::move(assets.ids);
    spec.protocol.eval_labels = std::move(assets.labels);
    spec.protocol.thresholds = report_spec.thresholds;
    spec.protocol.ks = report_spec.ks;
    spec.protocol.histogram_bins = report_spec.bins;
    spec.protocol.embedder = default_text_embedder();

    SweepResult result = run_sweep(enc.weights, train_images, spec, worker_threads());

    ensure_out_dir(out_dir);
    std::ostringstream csv;
    csv.precision(17);
    csv << "value";
    for (double th : spec.protocol.thresholds) csv << ",asr@" << th;
    for (int k : spec.protocol.ks) csv << ",topk@" << k;
    csv << ",mean_sim,final_objective\n";
    json errors = json::object();
    for (const auto& row : result.rows) {
        csv << csv_quote(row.value);
        if (row.ok) {
            for (double th : spec.protocol.thresholds) csv << ',' << row.report.asr.at(th);
            for (int k : spec.protocol.ks) csv << ',' << row.report.topk.at(k);
            csv << ',' << row.report.mean_similarity << ',' << row.final_objective << '\n';
            std::string fname = "uap_" + sanitize_filename(row.value) + ".duap";
            emit_atomic(out_dir + "/" + fname,
                        [&](const std::string& p) { save_uap(row.uap, p); });
        } else {
            for (std::size_t i = 0; i < spec.protocol.thresholds.size() + spec.protocol.ks.size() + 2;
                 ++i) {
                csv << ",nan";
            }
            csv << '\n';
            errors[row.value] = row.error;
        }
    }
    write_file_atomic(out_dir + "/sweep.csv", csv.str());
    if (!errors.empty()) {
        write_file_atomic(out_dir + "/sweep_errors.json", errors.dump(2) + "\n");
    }
    json meta{{"command", "ablate"},
              {"kind", kind},
              {"rows", result.rows.size()},
              {"config", json{{"encoder", enc.echo}, {"attack", attack_echo(attack)}}},
              {"data_hash", manifest.source_hash},
              {"started_at", iso_now()}};
    write_file_atomic(out_dir + "/run_meta.json", meta.dump(2) + "\n");
}

void cmd_visualize(const std::string& config_json, const std::string& out_dir_override) {
    json root = parse_json(config_json);
    std::string out_dir = resolve_out_dir(root, out_dir_override);

    EncoderSource enc = resolve_encoder(root);
    if (!root.contains("uap")) throw Error(ErrorCode::Config, "config needs \"uap\"");
    Perturbation pert = load_uap(root.at("uap").get<std::string>());
    if (pert.delta.channels != enc.weights.config.channels() ||
        pert.delta.height != enc.weights.config.image_resolution ||
        pert.delta.width != enc.weights.config.image_resolution) {
        throw Error(ErrorCode::Shape, "UAP dimensions do not match encoder input");
    }
    if (!root.contains("image")) throw Error(ErrorCode::Config, "config needs \"image\"");
    ImageTensor img =
        preprocess(read_image_file(root.at("image").get<std::string>()), enc.weights.config);

    std::string layers_spec = root.value("layers", std::string("all"));
    std::vector<int> layers;
    try {
        layers = parse_layer_spec(layers_spec, enc.weights.config.num_layers);
    } catch (const Error& e) {
        throw Error(ErrorCode::Layer, e.what());
    }

    std::set<int> layer_set(layers.begin(), layers.end());
    ImageBatch clean_batch;
    clean_batch.items.push_back(img);
    ImageBatch adv_batch;
    adv_batch.items.push_back(apply_one(img, pert.delta));
    ForwardOutput clean = forward(enc.weights, clean_batch, layer_set, CaptureWhat::Values);
    ForwardOutput adv = forward(enc.weights, adv_batch, layer_set, CaptureWhat::Values);

    ensure_out_dir(out_dir);
    json uniformity = json::object();
    for (int l : layers) {
        HeatmapData ch = value_heatmap(clean.internals, l);
        HeatmapData ah = value_heatmap(adv.internals, l);
        std::string base = out_dir + "/layer_" + std::to_string(l + 1);
        emit_atomic(base + "_clean.png",
                    [&](const std::string& p) { write_matrix_png(ch.matrix, ch.min, ch.max, p); });
        emit_atomic(base + "_adv.png",
                    [&](const std::string& p) { write_matrix_png(ah.matrix, ah.min, ah.max, p); });
        json clean_side{{"min", ch.min}, {"max", ch.max}, {"layer", l + 1},
                        {"tokens", ch.matrix.rows}};
        json adv_side{{"min", ah.min}, {"max", ah.max}, {"layer", l + 1},
                      {"tokens", ah.matrix.rows}};
        write_file_atomic(base + "_clean.json", clean_side.dump(2) + "\n");
        write_file_atomic(base + "_adv.json", adv_side.dump(2) + "\n");

        double uc = token_uniformity(clean.internals, l);
        double ua = token_uniformity(adv.internals, l);
        uniformity[std::to_string(l + 1)] =
            json{{"clean", uc}, {"adv", ua}, {"delta", ua - uc}};
    }
    emit_atomic(out_dir + "/uap.png",
                [&](const std::string& p) { write_delta_png(pert.delta, pert.epsilon, p); });
    write_file_atomic(out_dir + "/uniformity.json", uniformity.dump(2) + "\n");
}

EncoderWeights build_encoder_from_json(const std::string& config_json, std::uint64_t seed) {
    json j = parse_json(config_json.empty() ? "{}" : config_json);
    return build_encoder(encoder_config_from_json(j), seed);
}

std::string encoder_config_json_string(const EncoderWeights& w) {
    return encoder_config_to_json(w.config).dump(2);
}

std::string uap_info_json_string(const Perturbation& p) {
    double mx = 0.0;
    for (double v : p.delta.d) mx = std::max(mx, std::abs(v));
    json j{{"channels", p.delta.channels}, {"height", p.delta.height},
           {"width", p.delta.width},       {"epsilon", p.epsilon},
           {"seed", p.seed},               {"max_abs_delta", mx}};
    return j.dump(2);
}

std::string cmd_inspect(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Format, "cannot open " + path);
    char magic[4];
    read_bytes(in, magic, 4, "magic");
    std::string m(magic, 4);
    json j;
    if (m == "DUW1") {
        EncoderWeights w = load_weights(path);
        j = json{{"type", "weights"}, {"config", encoder_config_to_json(w.config)},
                 {"tokens", w.config.num_tokens()}};
    } else if (m == "DUAP") {
        Perturbation p = load_uap(path);
        double mx = 0.0;
        for (double v : p.delta.d) mx = std::max(mx, std::abs(v));
        j = json{{"type", "uap"},
                 {"channels", p.delta.channels},
                 {"height", p.delta.height},
                 {"width", p.delta.width},
                 {"epsilon", p.epsilon},
                 {"seed", p.seed},
                 {"max_abs_delta", mx}};
    } else if (m == "DIMG") {
        ImageTensor img = read_dimg(path);
        j = json{{"type", "image"},
                 {"channels", img.channels},
                 {"height", img.height},
                 {"width", img.width}};
    } else {
        throw Error(ErrorCode::Format, "unrecognized file magic");
    }
    return j.dump(2);
}

}  // namespace duap
