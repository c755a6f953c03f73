#pragma once

#include <string>
#include <vector>

#include "attack.hpp"
#include "text_embed.hpp"

namespace duap {

struct LabeledImage {
    ImageTensor image;
    std::string label;
};

struct LabeledDataset {
    std::vector<LabeledImage> items;
};

// UAP-extended embedding baselines. All three minimize a cosine objective in
// embedding space and share the attack engine's Adam/projection loop, so the
// reported objective in the TrainLog is the similarity being minimized.
//
// The embedder must produce vectors of the encoder's embed_dim (it stands in
// for the matching text tower of a joint embedding space).

// (i) adversarial image embedding vs "A photo of <class>" text embedding
std::pair<Perturbation, TrainLog> train_text_emb_uap(const EncoderWeights& w,
                                                     const LabeledDataset& dataset,
                                                     const TextEmbedder& embedder,
                                                     const AttackConfig& config,
                                                     const IterationObserver& observer = {});

// (ii) clean vs adversarial image embeddings, label-free
std::pair<Perturbation, TrainLog> train_img_emb_uap(const EncoderWeights& w,
                                                    const std::vector<ImageTensor>& images,
                                                    const AttackConfig& config,
                                                    const IterationObserver& observer = {});

// (iii) equal-weight sum of (i) and (ii)
std::pair<Perturbation, TrainLog> train_both_emb_uap(const EncoderWeights& w,
                                                     const LabeledDataset& dataset,
                                                     const TextEmbedder& embedder,
                                                     const AttackConfig& config,
                                                     const IterationObserver& observer = {});

// Full-dataset objective values and delta-gradients of the three baselines,
// exposed so the gradients can be checked against finite differences.
struct BaselineObjective {
    double value = 0.0;
    ImageTensor grad;
};

BaselineObjective text_emb_objective(const EncoderWeights& w, const LabeledDataset& dataset,
                                     const TextEmbedder& embedder, const ImageTensor& delta);
BaselineObjective img_emb_objective(const EncoderWeights& w,
                                    const std::vector<ImageTensor>& images,
                                    const ImageTensor& delta);
BaselineObjective both_emb_objective(const EncoderWeights& w, const LabeledDataset& dataset,
                                     const TextEmbedder& embedder, const ImageTensor& delta);

}  // namespace duap
