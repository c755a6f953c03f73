#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "attack.hpp"
#include "eval.hpp"

namespace duap {

enum class Segment { All, Early, Middle, Late };

Segment segment_from_name(const std::string& name);
const char* segment_name(Segment s);

// Contiguous 0-indexed thirds; a remainder that does not divide by three goes
// to the late segment. Requesting a segment that comes out empty (fewer than
// three layers) is a range error.
LayerSelection segment_layers(int num_layers, Segment segment);

// {start, ..., start+size-1}, 0-indexed
LayerSelection window_selection(int num_layers, int start, int size);

struct HeatmapData {
    Mat matrix;  // tokens x embed_dim
    double min = 0.0;
    double max = 0.0;
};

// Raw value-vector matrix of one batch item for rendering.
HeatmapData value_heatmap(const CapturedInternals& internals, int layer, int item = 0);

// Mean pairwise cosine similarity across token value vectors, self-pairs
// excluded; the "vertical stripe" figure. Batch items are averaged.
double token_uniformity(const CapturedInternals& internals, int layer);
double token_uniformity_image(const Mat& values);

enum class SweepVariable { Segment, WindowPosition, WindowSize, Loss, Epsilon, Iterations };

const char* sweep_variable_name(SweepVariable v);

// One grid entry: row label plus the template overrides it applies.
struct SweepValue {
    std::string name;
    std::optional<LayerSelection> selection;
    std::optional<LossKind> loss;
    std::optional<double> epsilon;
    std::optional<int> epochs;
};

// Everything needed to score a trained UAP the same way for every row.
struct EvalProtocol {
    SurrogateHead head;
    std::vector<std::string> candidate_labels;
    std::vector<ImageTensor> eval_images;
    std::vector<std::string> eval_ids;
    std::vector<std::string> eval_labels;
    std::vector<double> thresholds = {0.9, 0.8};
    std::vector<int> ks = {1, 10};
    int histogram_bins = 50;
    std::shared_ptr<const TextEmbedder> embedder;
};

struct SweepSpec {
    SweepVariable variable = SweepVariable::Segment;
    std::vector<SweepValue> values;  // >= 2 (the segment grid is fixed at 9)
    AttackConfig base;               // seed/data order shared across rows
    EvalProtocol protocol;
};

// The fixed 9-row grid: {attention, value} x {all, early, middle, late} plus
// both@middle.
std::vector<SweepValue> segment_grid(int num_layers);

struct SweepRow {
    std::string value;
    bool ok = false;
    std::string error;
    Perturbation uap;
    EvalReport report;
    double final_objective = 0.0;
    double final_value_cossim = 0.0;
    int iterations = 0;
};

struct SweepResult {
    SweepVariable variable = SweepVariable::Segment;
    std::vector<SweepRow> rows;
};

// Trains and evaluates one UAP per grid value. Row failures are recorded in
// the row and do not stop the sweep. Rows are independent; max_threads > 1
// runs them concurrently with order-preserving assembly.
SweepResult run_sweep(const EncoderWeights& w, const std::vector<ImageTensor>& train_images,
                      const SweepSpec& spec, int max_threads = 1);

}  // namespace duap
