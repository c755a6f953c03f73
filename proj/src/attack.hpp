#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "encoder.hpp"

namespace duap {

enum class LossKind { CosSim, Mse, Std };
enum class AttackTarget { Values, Attention, Both };
enum class DeltaInit { Zeros, Uniform };

const char* loss_kind_name(LossKind k);
LossKind loss_kind_from_name(const std::string& name);
const char* attack_target_name(AttackTarget t);
AttackTarget attack_target_from_name(const std::string& name);

struct LayerSelection {
    std::vector<int> layers;  // 0-indexed, sorted, unique
    AttackTarget target = AttackTarget::Values;

    void validate(int num_layers) const;
};

// Single image-shaped delta with its L-infinity budget, in [0,1] pixel units.
struct Perturbation {
    ImageTensor delta;
    double epsilon = 16.0 / 255.0;
    std::uint64_t seed = 0;  // carried into the UAP file for provenance
};

struct AttackConfig {
    LayerSelection selection;
    LossKind loss_kind = LossKind::CosSim;
    double epsilon = 16.0 / 255.0;
    double learning_rate = 1.0 / 255.0;
    int batch_size = 8;
    int epochs = 3;
    std::uint64_t seed = 0;
    // Zeros is an exact stationary point of every self-comparison loss here
    // (clean == adversarial internals means zero gradient), so seeded uniform
    // init inside the ball is the default.
    DeltaInit delta_init = DeltaInit::Uniform;

    void validate() const;
};

struct TrainRecord {
    int iteration = 0;  // 1-based, monotonically increasing
    int epoch = 0;      // 0-based
    double objective = 0.0;
    double mean_value_cossim = 0.0;
    double wall_ms = 0.0;
};

struct TrainLog {
    std::vector<TrainRecord> records;
};

// layer -> per-image capture matrices (values: tokens x dim, attention:
// (heads*tokens) x tokens)
using InternalsSlice = std::map<int, std::vector<Mat>>;

// Negative mean per-token cosine similarity between matching rows, averaged
// over rows and batch per layer, then over layers. Range [-1, 1]; -1 when
// adversarial equals original.
double loss_cossim(const InternalsSlice& orig, const InternalsSlice& adv);
// Mean squared elementwise difference per layer, averaged over layers.
double loss_mse(const InternalsSlice& orig, const InternalsSlice& adv);
// Population standard deviation of the elementwise difference, per image and
// layer, averaged over batch then layers.
double loss_std(const InternalsSlice& orig, const InternalsSlice& adv);

// delta clamped to [-epsilon, +epsilon] elementwise; exact, no tolerance.
void project(Perturbation& pert);

// clamp(x + delta, 0, 1); the input batch is untouched.
ImageBatch apply(const ImageBatch& batch, const Perturbation& pert);
ImageTensor apply_one(const ImageTensor& img, const ImageTensor& delta);

// Objective of the layer-averaged loss between clean and adversarial
// internals: two forwards per image (clean and clamp(x + delta)), loss per
// selected layer, mean over layers. Target Both averages the value-term and
// attention-term objectives.
double uap_objective(const EncoderWeights& w, const ImageBatch& batch, const Perturbation& pert,
                     const AttackConfig& config);

struct ObjectiveResult {
    double value = 0.0;
    ImageTensor grad;  // d value / d delta, clamp-masked
};

ObjectiveResult uap_objective_with_grad(const EncoderWeights& w, const ImageBatch& batch,
                                        const Perturbation& pert, const AttackConfig& config);

// --- shared optimizer ------------------------------------------------------

// One Adam + projection loop shared by the internals attack and the three
// embedding baselines. eval_batch returns the reported objective, the value
// cosine log figure, and the gradient of the quantity being *minimized*.
struct StepEval {
    double objective = 0.0;
    double mean_value_cossim = 0.0;
    ImageTensor min_grad;
};

using BatchEvalFn = std::function<StepEval(const std::vector<int>& indices, const ImageTensor& delta)>;
using IterationObserver = std::function<void(const TrainRecord&, const Perturbation&)>;

std::pair<Perturbation, TrainLog> run_adam_loop(int channels, int height, int width,
                                                int dataset_size, const AttackConfig& config,
                                                const BatchEvalFn& eval_batch,
                                                const IterationObserver& observer = {});

// Label-free training loop: ascend the internals objective with
// Adam on delta, project after every step. Weights are never modified.
std::pair<Perturbation, TrainLog> train_uap(const EncoderWeights& w,
                                            const std::vector<ImageTensor>& dataset,
                                            const AttackConfig& config,
                                            const IterationObserver& observer = {});

// Mean clean-vs-adversarial per-token value cosine similarity over the given
// layers and images (the figure tracked in TrainLog and the transfer checks).
double mean_value_similarity(const EncoderWeights& w, const std::vector<ImageTensor>& images,
                             const ImageTensor& delta, const std::vector<int>& layers);

void save_uap(const Perturbation& pert, const std::string& path);
Perturbation load_uap(const std::string& path);

}  // namespace duap
