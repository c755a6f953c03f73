#include "attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

#include "binio.hpp"
#include "common.hpp"

namespace duap {

namespace {

constexpr double kNormFloor = 1e-12;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void check_slices(const InternalsSlice& orig, const InternalsSlice& adv) {
    if (orig.size() != adv.size()) {
        throw Error(ErrorCode::Contract, "internals slices cover different layers");
    }
    for (const auto& [layer, mats] : orig) {
        auto it = adv.find(layer);
        if (it == adv.end() || it->second.size() != mats.size()) {
            throw Error(ErrorCode::Contract, "internals slices cover different layers");
        }
        for (std::size_t b = 0; b < mats.size(); ++b) {
            if (!mats[b].same_shape(it->second[b])) {
                throw Error(ErrorCode::Contract, "internals slice shape mismatch");
            }
        }
    }
}

// mean over rows of cos(orig_row, adv_row); optionally adds
// coeff * d(term)/d(adv) into g
double cossim_term(const Mat& orig, const Mat& adv, double coeff = 0.0, Mat* g = nullptr) {
    double sum = 0.0;
    for (int r = 0; r < orig.rows; ++r) {
        const double* o = orig.row(r);
        const double* a = adv.row(r);
        sum += cosine_similarity(o, a, orig.cols);
        if (g != nullptr) {
            double sab = 0.0, so = 0.0, sa = 0.0;
            for (int j = 0; j < orig.cols; ++j) {
                sab += o[j] * a[j];
                so += o[j] * o[j];
                sa += a[j] * a[j];
            }
            double denom = std::sqrt(so * sa);
            if (denom >= kNormFloor && sa > 0.0) {
                double c = sab / denom;
                double k = coeff / orig.rows;
                double* grow = g->row(r);
                for (int j = 0; j < orig.cols; ++j) {
                    grow[j] += k * (o[j] / denom - c * a[j] / sa);
                }
            }
        }
    }
    return sum / orig.rows;
}

double mse_term(const Mat& orig, const Mat& adv, double coeff = 0.0, Mat* g = nullptr) {
    double sum = 0.0;
    const std::size_t n = orig.size();
    for (std::size_t i = 0; i < n; ++i) {
        double diff = adv.d[i] - orig.d[i];
        sum += diff * diff;
        if (g != nullptr) g->d[i] += coeff * 2.0 * diff / static_cast<double>(n);
    }
    return sum / static_cast<double>(n);
}

double std_term(const Mat& orig, const Mat& adv, double coeff = 0.0, Mat* g = nullptr) {
    const std::size_t n = orig.size();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += adv.d[i] - orig.d[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dv = (adv.d[i] - orig.d[i]) - mean;
        var += dv * dv;
    }
    var /= static_cast<double>(n);
    double sd = std::sqrt(var);
    if (g != nullptr && sd >= kNormFloor) {
        double k = coeff / (static_cast<double>(n) * sd);
        for (std::size_t i = 0; i < n; ++i) {
            g->d[i] += k * ((adv.d[i] - orig.d[i]) - mean);
        }
    }
    return sd;
}

using TermFn = double (*)(const Mat&, const Mat&, double, Mat*);

double slice_loss(const InternalsSlice& orig, const InternalsSlice& adv, TermFn term, double sign) {
    check_slices(orig, adv);
    if (orig.empty()) throw Error(ErrorCode::Contract, "empty internals slice");
    double layer_sum = 0.0;
    for (const auto& [layer, mats] : orig) {
        const auto& advs = adv.at(layer);
        double batch_sum = 0.0;
        for (std::size_t b = 0; b < mats.size(); ++b) {
            batch_sum += term(mats[b], advs[b], 0.0, nullptr);
        }
        layer_sum += sign * batch_sum / static_cast<double>(mats.size());
    }
    return layer_sum / static_cast<double>(orig.size());
}

TermFn term_for(LossKind kind) {
    switch (kind) {
        case LossKind::CosSim: return &cossim_term;
        case LossKind::Mse: return &mse_term;
        case LossKind::Std: return &std_term;
    }
    throw Error(ErrorCode::Internal, "unknown loss kind");
}

double sign_for(LossKind kind) { return kind == LossKind::CosSim ? -1.0 : 1.0; }

struct CleanCapture {
    std::map<int, Mat> values;
    std::map<int, Mat> attention;
    std::vector<double> embedding;
};

CleanCapture capture_clean(const EncoderWeights& w, const ImageTensor& img,
                           const std::vector<int>& layers, bool want_attention) {
    ImageForward f = forward_image(w, img);
    CleanCapture cc;
    for (int l : layers) {
        cc.values.emplace(l, *f.values.at(l));
        if (want_attention) cc.attention.emplace(l, *f.attention.at(l));
    }
    cc.embedding = f.embedding;
    return cc;
}

// Objective value and capture gradients for one adversarial image against its
// cached clean internals. Returns per-layer terms so the caller can assemble
// the batch objective in the same order as the slice-based losses.
struct PerImageEval {
    double value_term_sum = 0.0;      // sum over layers of the raw component term
    double attn_term_sum = 0.0;
    double value_cos_sum = 0.0;       // per-token value cosine, for the log
    ImageTensor pixel_grad;
};

PerImageEval eval_adversarial_image(const EncoderWeights& w, const CleanCapture& clean,
                                    const ImageTensor& img, const ImageTensor& delta,
                                    const AttackConfig& config, bool want_grad) {
    const auto& layers = config.selection.layers;
    const AttackTarget target = config.selection.target;
    const bool want_values = target != AttackTarget::Attention;
    const bool want_attn = target != AttackTarget::Values;
    const double comp_w = target == AttackTarget::Both ? 0.5 : 1.0;
    const double L = static_cast<double>(layers.size());
    const TermFn term = term_for(config.loss_kind);
    const double sign = sign_for(config.loss_kind);

    ImageTensor adv = apply_one(img, delta);
    ImageForward fwd = forward_image(w, adv);

    PerImageEval out;
    CaptureGrads grads;
    // coeff applies to d(term)/d(capture); the batch mean is applied by the caller
    const double coeff = want_grad ? comp_w * sign / L : 0.0;
    for (int l : layers) {
        const Mat& v_adv = *fwd.values.at(l);
        const Mat& v_clean = clean.values.at(l);
        if (want_values) {
            Mat* g = nullptr;
            if (want_grad) g = &grads.d_values.emplace(l, Mat(v_adv.rows, v_adv.cols)).first->second;
            out.value_term_sum += term(v_clean, v_adv, coeff, g);
        }
        if (want_attn) {
            const Mat& a_adv = *fwd.attention.at(l);
            const Mat& a_clean = clean.attention.at(l);
            Mat* g = nullptr;
            if (want_grad) g = &grads.d_attention.emplace(l, Mat(a_adv.rows, a_adv.cols)).first->second;
            out.attn_term_sum += term(a_clean, a_adv, coeff, g);
        }
        out.value_cos_sum += cossim_term(v_clean, v_adv);
    }

    if (want_grad) {
        out.pixel_grad = backward_image(w, fwd, grads);
        // clamp(x + delta) passes gradient only inside [0, 1]
        for (std::size_t i = 0; i < out.pixel_grad.d.size(); ++i) {
            double v = img.d[i] + delta.d[i];
            if (v < 0.0 || v > 1.0) out.pixel_grad.d[i] = 0.0;
        }
    }
    return out;
}

void validate_against_encoder(const EncoderWeights& w, const AttackConfig& config,
                              const ImageTensor& delta) {
    config.validate();
    config.selection.validate(w.config.num_layers);
    if (delta.channels != w.config.channels() || delta.height != w.config.image_resolution ||
        delta.width != w.config.image_resolution) {
        throw Error(ErrorCode::Shape, "perturbation shape does not match encoder input");
    }
}

}  // namespace

const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::CosSim: return "cossim";
        case LossKind::Mse: return "mse";
        case LossKind::Std: return "std";
    }
    return "?";
}

LossKind loss_kind_from_name(const std::string& name) {
    if (name == "cossim") return LossKind::CosSim;
    if (name == "mse") return LossKind::Mse;
    if (name == "std") return LossKind::Std;
    throw Error(ErrorCode::Config, "unknown loss kind: " + name);
}

const char* attack_target_name(AttackTarget t) {
    switch (t) {
        case AttackTarget::Values: return "values";
        case AttackTarget::Attention: return "attention";
        case AttackTarget::Both: return "both";
    }
    return "?";
}

AttackTarget attack_target_from_name(const std::string& name) {
    if (name == "values") return AttackTarget::Values;
    if (name == "attention") return AttackTarget::Attention;
    if (name == "both") return AttackTarget::Both;
    throw Error(ErrorCode::Config, "unknown attack target: " + name);
}

void LayerSelection::validate(int num_layers) const {
    if (layers.empty()) throw Error(ErrorCode::Config, "layer selection is empty");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i] < 0 || layers[i] >= num_layers) {
            throw Error(ErrorCode::Range,
                        "layer " + std::to_string(layers[i]) + " outside [0, " +
                            std::to_string(num_layers) + ")");
        }
        if (i > 0 && layers[i] <= layers[i - 1]) {
            throw Error(ErrorCode::Config, "layer selection must be sorted and unique");
        }
    }
}

void AttackConfig::validate() const {
    if (!(epsilon > 0.0 && epsilon < 1.0)) {
        throw Error(ErrorCode::Config, "epsilon must lie in (0, 1)");
    }
    if (!(learning_rate >= 0.0)) {
        throw Error(ErrorCode::Config, "learning rate must be non-negative");
    }
    if (epochs < 1) throw Error(ErrorCode::Config, "epochs must be >= 1");
    if (batch_size < 1) throw Error(ErrorCode::Config, "batch size must be >= 1");
}

double loss_cossim(const InternalsSlice& orig, const InternalsSlice& adv) {
    return slice_loss(orig, adv, &cossim_term, -1.0);
}

double loss_mse(const InternalsSlice& orig, const InternalsSlice& adv) {
    return slice_loss(orig, adv, &mse_term, 1.0);
}

double loss_std(const InternalsSlice& orig, const InternalsSlice& adv) {
    return slice_loss(orig, adv, &std_term, 1.0);
}

void project(Perturbation& pert) {
    for (auto& v : pert.delta.d) {
        if (v > pert.epsilon) v = pert.epsilon;
        if (v < -pert.epsilon) v = -pert.epsilon;
    }
}

ImageTensor apply_one(const ImageTensor& img, const ImageTensor& delta) {
    if (!img.same_shape(delta)) {
        throw Error(ErrorCode::Contract, "perturbation and image shapes differ");
    }
    ImageTensor out = img;
    for (std::size_t i = 0; i < out.d.size(); ++i) {
        out.d[i] = std::clamp(img.d[i] + delta.d[i], 0.0, 1.0);
    }
    return out;
}

ImageBatch apply(const ImageBatch& batch, const Perturbation& pert) {
    ImageBatch out;
    out.items.reserve(batch.items.size());
    for (const auto& img : batch.items) out.items.push_back(apply_one(img, pert.delta));
    return out;
}

double uap_objective(const EncoderWeights& w, const ImageBatch& batch, const Perturbation& pert,
                     const AttackConfig& config) {
    validate_against_encoder(w, config, pert.delta);
    if (batch.items.empty()) throw Error(ErrorCode::Data, "empty batch");

    std::set<int> layer_set(config.selection.layers.begin(), config.selection.layers.end());
    CaptureWhat what = CaptureWhat::Both;
    if (config.selection.target == AttackTarget::Values) what = CaptureWhat::Values;
    if (config.selection.target == AttackTarget::Attention) what = CaptureWhat::Attention;

    ForwardOutput clean = forward(w, batch, layer_set, what);
    ForwardOutput adv = forward(w, apply(batch, pert), layer_set, what);

    TermFn term = term_for(config.loss_kind);
    double sign = sign_for(config.loss_kind);
    switch (config.selection.target) {
        case AttackTarget::Values:
            return slice_loss(clean.internals.values, adv.internals.values, term, sign);
        case AttackTarget::Attention:
            return slice_loss(clean.internals.attention, adv.internals.attention, term, sign);
        case AttackTarget::Both:
            return 0.5 * slice_loss(clean.internals.values, adv.internals.values, term, sign) +
                   0.5 * slice_loss(clean.internals.attention, adv.internals.attention, term, sign);
    }
    throw Error(ErrorCode::Internal, "unknown attack target");
}

ObjectiveResult uap_objective_with_grad(const EncoderWeights& w, const ImageBatch& batch,
                                        const Perturbation& pert, const AttackConfig& config) {
    validate_against_encoder(w, config, pert.delta);
    if (batch.items.empty()) throw Error(ErrorCode::Data, "empty batch");

    const bool want_attn = config.selection.target != AttackTarget::Values;
    const double B = static_cast<double>(batch.items.size());
    const double L = static_cast<double>(config.selection.layers.size());
    const double sign = sign_for(config.loss_kind);
    const double comp_w = config.selection.target == AttackTarget::Both ? 0.5 : 1.0;

    ObjectiveResult res;
    res.grad = ImageTensor(batch.items[0].channels, batch.items[0].height, batch.items[0].width);
    double value_terms = 0.0, attn_terms = 0.0;
    for (const auto& img : batch.items) {
        CleanCapture clean = capture_clean(w, img, config.selection.layers, want_attn);
        PerImageEval ev = eval_adversarial_image(w, clean, img, pert.delta, config, true);
        value_terms += ev.value_term_sum;
        attn_terms += ev.attn_term_sum;
        for (std::size_t i = 0; i < res.grad.d.size(); ++i) res.grad.d[i] += ev.pixel_grad.d[i];
    }
    for (auto& g : res.grad.d) g /= B;

    double value = 0.0;
    if (config.selection.target != AttackTarget::Attention) {
        value += comp_w * sign * value_terms / (L * B);
    }
    if (want_attn) {
        value += comp_w * sign * attn_terms / (L * B);
    }
    res.value = value;
    return res;
}

std::pair<Perturbation, TrainLog> run_adam_loop(int channels, int height, int width,
                                                int dataset_size, const AttackConfig& config,
                                                const BatchEvalFn& eval_batch,
                                                const IterationObserver& observer) {
    config.validate();
    if (dataset_size <= 0) throw Error(ErrorCode::Data, "empty dataset");

    Perturbation pert;
    pert.delta = ImageTensor(channels, height, width);
    pert.epsilon = config.epsilon;
    pert.seed = config.seed;

    Rng rng(config.seed);
    if (config.delta_init == DeltaInit::Uniform) {
        for (auto& v : pert.delta.d) v = rng.uniform(-config.epsilon, config.epsilon);
    }
    project(pert);

    std::vector<double> m(pert.delta.size(), 0.0);
    std::vector<double> v(pert.delta.size(), 0.0);
    std::vector<int> order(dataset_size);
    for (int i = 0; i < dataset_size; ++i) order[i] = i;

    TrainLog log;
    int iteration = 0;
    int adam_t = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        for (int start = 0; start < dataset_size; start += config.batch_size) {
            auto t0 = std::chrono::steady_clock::now();
            int end = std::min(start + config.batch_size, dataset_size);
            std::vector<int> indices(order.begin() + start, order.begin() + end);
            StepEval ev = eval_batch(indices, pert.delta);
            if (!std::isfinite(ev.objective)) {
                throw Error(ErrorCode::Internal,
                            "non-finite objective at iteration " + std::to_string(iteration + 1));
            }
            for (double g : ev.min_grad.d) {
                if (!std::isfinite(g)) {
                    throw Error(ErrorCode::Internal,
                                "non-finite gradient at iteration " + std::to_string(iteration + 1));
                }
            }

            ++adam_t;
            double bc1 = 1.0 - std::pow(kAdamBeta1, adam_t);
            double bc2 = 1.0 - std::pow(kAdamBeta2, adam_t);
            for (std::size_t i = 0; i < pert.delta.d.size(); ++i) {
                double g = ev.min_grad.d[i];
                m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g;
                v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g * g;
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                pert.delta.d[i] -= config.learning_rate * mhat / (std::sqrt(vhat) + kAdamEps);
            }
            project(pert);

            ++iteration;
            TrainRecord rec;
            rec.iteration = iteration;
            rec.epoch = epoch;
            rec.objective = ev.objective;
            rec.mean_value_cossim = ev.mean_value_cossim;
            rec.wall_ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
            log.records.push_back(rec);
            if (observer) observer(rec, pert);
        }
    }
    return {std::move(pert), std::move(log)};
}

std::pair<Perturbation, TrainLog> train_uap(const EncoderWeights& w,
                                            const std::vector<ImageTensor>& dataset,
                                            const AttackConfig& config,
                                            const IterationObserver& observer) {
    if (dataset.empty()) throw Error(ErrorCode::Data, "empty dataset");
    Perturbation probe;
    probe.delta = ImageTensor(w.config.channels(), w.config.image_resolution, w.config.image_resolution);
    validate_against_encoder(w, config, probe.delta);

    const bool want_attn = config.selection.target != AttackTarget::Values;
    const double L = static_cast<double>(config.selection.layers.size());
    const double sign = sign_for(config.loss_kind);
    const double comp_w = config.selection.target == AttackTarget::Both ? 0.5 : 1.0;

    // Clean internals never change while delta trains; capture them once.
    std::vector<CleanCapture> clean;
    clean.reserve(dataset.size());
    for (const auto& img : dataset) {
        clean.push_back(capture_clean(w, img, config.selection.layers, want_attn));
    }

    BatchEvalFn eval = [&](const std::vector<int>& indices, const ImageTensor& delta) {
        StepEval out;
        out.min_grad = ImageTensor(delta.channels, delta.height, delta.width);
        const double B = static_cast<double>(indices.size());
        double value_terms = 0.0, attn_terms = 0.0, cos_sum = 0.0;
        for (int idx : indices) {
            PerImageEval ev =
                eval_adversarial_image(w, clean[idx], dataset[idx], delta, config, true);
            value_terms += ev.value_term_sum;
            attn_terms += ev.attn_term_sum;
            cos_sum += ev.value_cos_sum;
            for (std::size_t i = 0; i < out.min_grad.d.size(); ++i) {
                out.min_grad.d[i] += ev.pixel_grad.d[i];
            }
        }
        double objective = 0.0;
        if (config.selection.target != AttackTarget::Attention) {
            objective += comp_w * sign * value_terms / (L * B);
        }
        if (want_attn) objective += comp_w * sign * attn_terms / (L * B);
        out.objective = objective;
        out.mean_value_cossim = cos_sum / (L * B);
        // maximize the objective = Adam descent on its negation
        for (auto& g : out.min_grad.d) g = -g / B;
        return out;
    };

    return run_adam_loop(w.config.channels(), w.config.image_resolution, w.config.image_resolution,
                         static_cast<int>(dataset.size()), config, eval, observer);
}

double mean_value_similarity(const EncoderWeights& w, const std::vector<ImageTensor>& images,
                             const ImageTensor& delta, const std::vector<int>& layers) {
    if (images.empty()) throw Error(ErrorCode::Data, "no images");
    if (layers.empty()) throw Error(ErrorCode::Config, "no layers");
    double sum = 0.0;
    for (const auto& img : images) {
        ImageForward clean = forward_image(w, img);
        ImageForward adv = forward_image(w, apply_one(img, delta));
        for (int l : layers) {
            sum += cossim_term(*clean.values.at(l), *adv.values.at(l));
        }
    }
    return sum / (static_cast<double>(images.size()) * layers.size());
}

void save_uap(const Perturbation& pert, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Format, "cannot open " + path + " for writing");
    write_bytes(out, "DUAP", 4);
    write_u32(out, 1);
    write_u32(out, static_cast<std::uint32_t>(pert.delta.channels));
    write_u32(out, static_cast<std::uint32_t>(pert.delta.height));
    write_u32(out, static_cast<std::uint32_t>(pert.delta.width));
    write_f32(out, static_cast<float>(pert.epsilon));
    write_u64(out, pert.seed);
    write_f32_array(out, pert.delta.d);
    out.flush();
    if (!out) throw Error(ErrorCode::Format, "write failed for " + path);
}

Perturbation load_uap(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Format, "cannot open " + path);
    expect_magic(in, "DUAP", "UAP file");
    std::uint32_t version = read_u32(in, "version");
    if (version != 1) throw Error(ErrorCode::Format, "unsupported UAP version");
    std::uint32_t c = read_u32(in, "channels");
    std::uint32_t h = read_u32(in, "height");
    std::uint32_t wd = read_u32(in, "width");
    if (c == 0 || c > 16 || h == 0 || h > 1u << 14 || wd == 0 || wd > 1u << 14) {
        throw Error(ErrorCode::Format, "implausible UAP dimensions");
    }
    Perturbation pert;
    pert.epsilon = static_cast<double>(read_f32(in, "epsilon"));
    if (!(pert.epsilon > 0.0 && pert.epsilon <= 1.0)) {
        throw Error(ErrorCode::Format, "UAP epsilon outside (0, 1]");
    }
    pert.seed = read_u64(in, "seed");
    pert.delta = ImageTensor(static_cast<int>(c), static_cast<int>(h), static_cast<int>(wd));
    pert.delta.d = read_f32_array(in, pert.delta.size(), "delta data");
    char extra;
    if (in.read(&extra, 1).gcount() != 0) {
        throw Error(ErrorCode::Format, "trailing bytes in UAP file");
    }
    for (double v : pert.delta.d) {
        if (!std::isfinite(v) || std::abs(v) > pert.epsilon) {
            throw Error(ErrorCode::Format, "UAP delta violates its epsilon budget");
        }
    }
    return pert;
}

}  // namespace duap
