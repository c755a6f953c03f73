#include "baselines.hpp"

#include <cmath>

#include "common.hpp"

namespace duap {

namespace {

enum class BaselineKind { Text, Image, BothEmb };

struct CleanState {
    std::vector<double> embedding;
    std::map<int, Mat> values;  // selection layers, feeds the TrainLog figure
    std::vector<double> text_embedding;
};

void check_embedder(const EncoderWeights& w, const TextEmbedder* embedder) {
    if (embedder == nullptr) throw Error(ErrorCode::Contract, "text baseline needs an embedder");
    if (embedder->dim() != w.config.embed_dim) {
        throw Error(ErrorCode::Shape, "text embedder dim " + std::to_string(embedder->dim()) +
                                          " does not match encoder embed_dim " +
                                          std::to_string(w.config.embed_dim));
    }
}

std::vector<CleanState> build_clean(const EncoderWeights& w,
                                    const std::vector<const ImageTensor*>& images,
                                    const std::vector<std::string>& labels,
                                    const TextEmbedder* embedder, BaselineKind kind,
                                    const std::vector<int>& log_layers) {
    if (images.empty()) throw Error(ErrorCode::Data, "empty dataset");
    if (kind != BaselineKind::Image) check_embedder(w, embedder);

    std::vector<CleanState> clean;
    clean.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        ImageForward f = forward_image(w, *images[i]);
        CleanState cs;
        cs.embedding = f.embedding;
        for (int l : log_layers) cs.values.emplace(l, *f.values.at(l));
        if (kind != BaselineKind::Image) {
            if (labels[i].empty()) {
                throw Error(ErrorCode::Data, "image " + std::to_string(i) + " has no label");
            }
            cs.text_embedding = embedder->embed(photo_prompt(labels[i]));
        }
        clean.push_back(std::move(cs));
    }
    return clean;
}

struct PerImage {
    double objective = 0.0;
    ImageTensor grad;
    double value_cos = 0.0;
};

PerImage eval_image(const EncoderWeights& w, const CleanState& cs, const ImageTensor& img,
                    const ImageTensor& delta, BaselineKind kind,
                    const std::vector<int>& log_layers) {
    const int D = w.config.embed_dim;
    ImageTensor adv = apply_one(img, delta);
    ImageForward fwd = forward_image(w, adv);
    const double* e = fwd.embedding.data();

    PerImage out;
    CaptureGrads grads;
    grads.d_embedding.assign(D, 0.0);
    if (kind == BaselineKind::Text || kind == BaselineKind::BothEmb) {
        out.objective += cosine_similarity(e, cs.text_embedding.data(), D);
        add_cosine_grad_a(e, cs.text_embedding.data(), D, 1.0, grads.d_embedding.data());
    }
    if (kind == BaselineKind::Image || kind == BaselineKind::BothEmb) {
        out.objective += cosine_similarity(e, cs.embedding.data(), D);
        add_cosine_grad_a(e, cs.embedding.data(), D, 1.0, grads.d_embedding.data());
    }
    out.grad = backward_image(w, fwd, grads);
    for (std::size_t i = 0; i < out.grad.d.size(); ++i) {
        double v = img.d[i] + delta.d[i];
        if (v < 0.0 || v > 1.0) out.grad.d[i] = 0.0;
    }
    for (int l : log_layers) {
        const Mat& cv = cs.values.at(l);
        const Mat& av = *fwd.values.at(l);
        double s = 0.0;
        for (int r = 0; r < cv.rows; ++r) s += cosine_similarity(cv.row(r), av.row(r), cv.cols);
        out.value_cos += s / cv.rows;
    }
    if (!log_layers.empty()) out.value_cos /= static_cast<double>(log_layers.size());
    return out;
}

std::pair<Perturbation, TrainLog> run_baseline(const EncoderWeights& w,
                                               const std::vector<const ImageTensor*>& images,
                                               const std::vector<std::string>& labels,
                                               const TextEmbedder* embedder, BaselineKind kind,
                                               const AttackConfig& config,
                                               const IterationObserver& observer) {
    config.selection.validate(w.config.num_layers);
    std::vector<CleanState> clean =
        build_clean(w, images, labels, embedder, kind, config.selection.layers);

    BatchEvalFn eval = [&, kind](const std::vector<int>& indices, const ImageTensor& delta) {
        StepEval out;
        out.min_grad = ImageTensor(delta.channels, delta.height, delta.width);
        const double B = static_cast<double>(indices.size());
        double objective = 0.0, cos_log = 0.0;
        for (int idx : indices) {
            PerImage ev =
                eval_image(w, clean[idx], *images[idx], delta, kind, config.selection.layers);
            objective += ev.objective;
            cos_log += ev.value_cos;
            for (std::size_t i = 0; i < out.min_grad.d.size(); ++i) {
                out.min_grad.d[i] += ev.grad.d[i];
            }
        }
        out.objective = objective / B;
        out.mean_value_cossim = cos_log / B;
        for (auto& g : out.min_grad.d) g /= B;  // similarity is minimized directly
        return out;
    };

    return run_adam_loop(w.config.channels(), w.config.image_resolution, w.config.image_resolution,
                         static_cast<int>(images.size()), config, eval, observer);
}

BaselineObjective whole_dataset_objective(const EncoderWeights& w,
                                          const std::vector<const ImageTensor*>& images,
                                          const std::vector<std::string>& labels,
                                          const TextEmbedder* embedder, BaselineKind kind,
                                          const ImageTensor& delta) {
    std::vector<CleanState> clean = build_clean(w, images, labels, embedder, kind, {});
    BaselineObjective out;
    out.grad = ImageTensor(delta.channels, delta.height, delta.width);
    for (std::size_t i = 0; i < images.size(); ++i) {
        PerImage ev = eval_image(w, clean[i], *images[i], delta, kind, {});
        out.value += ev.objective;
        for (std::size_t j = 0; j < out.grad.d.size(); ++j) out.grad.d[j] += ev.grad.d[j];
    }
    const double B = static_cast<double>(images.size());
    out.value /= B;
    for (auto& g : out.grad.d) g /= B;
    return out;
}

std::vector<const ImageTensor*> image_ptrs(const LabeledDataset& dataset,
                                           std::vector<std::string>& labels) {
    std::vector<const ImageTensor*> images;
    for (const auto& item : dataset.items) {
        images.push_back(&item.image);
        labels.push_back(item.label);
    }
    return images;
}

}  // namespace

std::pair<Perturbation, TrainLog> train_text_emb_uap(const EncoderWeights& w,
                                                     const LabeledDataset& dataset,
                                                     const TextEmbedder& embedder,
                                                     const AttackConfig& config,
                                                     const IterationObserver& observer) {
    std::vector<std::string> labels;
    auto images = image_ptrs(dataset, labels);
    return run_baseline(w, images, labels, &embedder, BaselineKind::Text, config, observer);
}

std::pair<Perturbation, TrainLog> train_img_emb_uap(const EncoderWeights& w,
                                                    const std::vector<ImageTensor>& images,
                                                    const AttackConfig& config,
                                                    const IterationObserver& observer) {
    std::vector<const ImageTensor*> ptrs;
    for (const auto& img : images) ptrs.push_back(&img);
    return run_baseline(w, ptrs, {}, nullptr, BaselineKind::Image, config, observer);
}

std::pair<Perturbation, TrainLog> train_both_emb_uap(const EncoderWeights& w,
                                                     const LabeledDataset& dataset,
                                                     const TextEmbedder& embedder,
                                                     const AttackConfig& config,
                                                     const IterationObserver& observer) {
    std::vector<std::string> labels;
    auto images = image_ptrs(dataset, labels);
    return run_baseline(w, images, labels, &embedder, BaselineKind::BothEmb, config, observer);
}

BaselineObjective text_emb_objective(const EncoderWeights& w, const LabeledDataset& dataset,
                                     const TextEmbedder& embedder, const ImageTensor& delta) {
    std::vector<std::string> labels;
    auto images = image_ptrs(dataset, labels);
    return whole_dataset_objective(w, images, labels, &embedder, BaselineKind::Text, delta);
}

BaselineObjective img_emb_objective(const EncoderWeights& w,
                                    const std::vector<ImageTensor>& images,
                                    const ImageTensor& delta) {
    std::vector<const ImageTensor*> ptrs;
    for (const auto& img : images) ptrs.push_back(&img);
    return whole_dataset_objective(w, ptrs, {}, nullptr, BaselineKind::Image, delta);
}

BaselineObjective both_emb_objective(const EncoderWeights& w, const LabeledDataset& dataset,
                                     const TextEmbedder& embedder, const ImageTensor& delta) {
    std::vector<std::string> labels;
    auto images = image_ptrs(dataset, labels);
    return whole_dataset_objective(w, images, labels, &embedder, BaselineKind::BothEmb, delta);
}

}  // namespace duap
