#include "analysis.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

#include "common.hpp"

namespace duap {

Segment segment_from_name(const std::string& name) {
    if (name == "all") return Segment::All;
    if (name == "early") return Segment::Early;
    if (name == "middle") return Segment::Middle;
    if (name == "late") return Segment::Late;
    throw Error(ErrorCode::Config, "unknown segment: " + name);
}

const char* segment_name(Segment s) {
    switch (s) {
        case Segment::All: return "all";
        case Segment::Early: return "early";
        case Segment::Middle: return "middle";
        case Segment::Late: return "late";
    }
    return "?";
}

LayerSelection segment_layers(int num_layers, Segment segment) {
    if (num_layers < 1) throw Error(ErrorCode::Config, "num_layers must be >= 1");
    int third = num_layers / 3;
    int lo = 0, hi = num_layers;
    switch (segment) {
        case Segment::All: break;
        case Segment::Early: lo = 0; hi = third; break;
        case Segment::Middle: lo = third; hi = 2 * third; break;
        case Segment::Late: lo = 2 * third; hi = num_layers; break;
    }
    if (lo >= hi) {
        throw Error(ErrorCode::Range, std::string("segment '") + segment_name(segment) +
                                          "' is empty for " + std::to_string(num_layers) +
                                          " layers");
    }
    LayerSelection sel;
    for (int l = lo; l < hi; ++l) sel.layers.push_back(l);
    return sel;
}

LayerSelection window_selection(int num_layers, int start, int size) {
    if (size < 1) throw Error(ErrorCode::Range, "window size must be >= 1");
    if (start < 0 || start + size > num_layers) {
        throw Error(ErrorCode::Range, "window [" + std::to_string(start) + ", " +
                                          std::to_string(start + size) + ") outside 0.." +
                                          std::to_string(num_layers));
    }
    LayerSelection sel;
    for (int l = start; l < start + size; ++l) sel.layers.push_back(l);
    return sel;
}

HeatmapData value_heatmap(const CapturedInternals& internals, int layer, int item) {
    auto it = internals.values.find(layer);
    if (it == internals.values.end()) {
        throw Error(ErrorCode::Layer, "layer " + std::to_string(layer) + " was not captured");
    }
    if (item < 0 || item >= static_cast<int>(it->second.size())) {
        throw Error(ErrorCode::Range, "batch item out of range");
    }
    HeatmapData h;
    h.matrix = it->second[item];
    auto [mn, mx] = std::minmax_element(h.matrix.d.begin(), h.matrix.d.end());
    h.min = *mn;
    h.max = *mx;
    return h;
}

double token_uniformity_image(const Mat& values) {
    const int T = values.rows;
    if (T < 2) throw Error(ErrorCode::Data, "need at least 2 tokens");
    double sum = 0.0;
    long long pairs = 0;
    for (int i = 0; i < T; ++i) {
        for (int j = i + 1; j < T; ++j) {
            sum += cosine_similarity(values.row(i), values.row(j), values.cols);
            ++pairs;
        }
    }
    return sum / static_cast<double>(pairs);
}

double token_uniformity(const CapturedInternals& internals, int layer) {
    auto it = internals.values.find(layer);
    if (it == internals.values.end()) {
        throw Error(ErrorCode::Layer, "layer " + std::to_string(layer) + " was not captured");
    }
    if (it->second.empty()) throw Error(ErrorCode::Data, "no batch items captured");
    double sum = 0.0;
    for (const Mat& m : it->second) sum += token_uniformity_image(m);
    return sum / static_cast<double>(it->second.size());
}

const char* sweep_variable_name(SweepVariable v) {
    switch (v) {
        case SweepVariable::Segment: return "layers";
        case SweepVariable::WindowPosition: return "window";
        case SweepVariable::WindowSize: return "window_size";
        case SweepVariable::Loss: return "loss";
        case SweepVariable::Epsilon: return "eps";
        case SweepVariable::Iterations: return "iters";
    }
    return "?";
}

std::vector<SweepValue> segment_grid(int num_layers) {
    std::vector<SweepValue> grid;
    for (AttackTarget target : {AttackTarget::Attention, AttackTarget::Values}) {
        for (Segment seg : {Segment::All, Segment::Early, Segment::Middle, Segment::Late}) {
            SweepValue v;
            v.name = std::string(attack_target_name(target)) + "/" + segment_name(seg);
            LayerSelection sel = segment_layers(num_layers, seg);
            sel.target = target;
            v.selection = sel;
            grid.push_back(std::move(v));
        }
    }
    SweepValue both;
    both.name = "both/middle";
    LayerSelection sel = segment_layers(num_layers, Segment::Middle);
    sel.target = AttackTarget::Both;
    both.selection = sel;
    grid.push_back(std::move(both));
    return grid;
}

namespace {

SweepRow run_one_row(const EncoderWeights& w, const std::vector<ImageTensor>& train_images,
                     const SweepSpec& spec, const SweepValue& value) {
    SweepRow row;
    row.value = value.name;
    try {
        AttackConfig cfg = spec.base;
        if (value.selection) cfg.selection = *value.selection;
        if (value.loss) cfg.loss_kind = *value.loss;
        if (value.epsilon) cfg.epsilon = *value.epsilon;
        if (value.epochs) cfg.epochs = *value.epochs;

        auto [pert, log] = train_uap(w, train_images, cfg);
        row.uap = std::move(pert);
        if (!log.records.empty()) {
            row.final_objective = log.records.back().objective;
            row.final_value_cossim = log.records.back().mean_value_cossim;
            row.iterations = log.records.back().iteration;
        }

        const EvalProtocol& p = spec.protocol;
        ResponseSet responses = surrogate_response_set(w, p.head, p.eval_images, p.eval_ids,
                                                       p.eval_labels, &row.uap.delta);
        row.report = make_report(responses, *p.embedder, p.candidate_labels, p.thresholds, p.ks,
                                 p.histogram_bins);
        row.ok = true;
    } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
    }
    return row;
}

}  // namespace

SweepResult run_sweep(const EncoderWeights& w, const std::vector<ImageTensor>& train_images,
                      const SweepSpec& spec, int max_threads) {
    if (spec.values.size() < 2) {
        throw Error(ErrorCode::Grid, "a sweep needs at least 2 grid values");
    }
    if (!spec.protocol.embedder) throw Error(ErrorCode::Contract, "protocol embedder missing");

    SweepResult result;
    result.variable = spec.variable;
    result.rows.resize(spec.values.size());

    int workers = std::max(1, std::min<int>(max_threads, static_cast<int>(spec.values.size())));
    if (workers == 1) {
        for (std::size_t i = 0; i < spec.values.size(); ++i) {
            result.rows[i] = run_one_row(w, train_images, spec, spec.values[i]);
        }
        return result;
    }

    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int t = 0; t < workers; ++t) {
        pool.emplace_back([&]() {
            while (true) {
                std::size_t i = next.fetch_add(1);
                if (i >= spec.values.size()) break;
                result.rows[i] = run_one_row(w, train_images, spec, spec.values[i]);
            }
        });
    }
    for (auto& th : pool) th.join();
    return result;
}

}  // namespace duap
