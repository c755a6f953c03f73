#pragma once

#include <map>
#include <string>
#include <vector>

#include "baselines.hpp"
#include "encoder.hpp"
#include "text_embed.hpp"

namespace duap {

struct ResponseItem {
    std::string id;
    std::string clean;
    std::string adv;
    std::string label;
};

struct ResponseSet {
    std::vector<ResponseItem> items;
    void validate() const;  // unique ids
};

ResponseSet read_response_csv(const std::string& path);
void write_response_csv(const ResponseSet& responses, const std::string& path);

struct Histogram {
    int bins = 0;
    std::vector<long long> counts;  // equal-width over [-1, 1]
    long long total() const;
};

struct EvalReport {
    std::map<double, double> asr;   // threshold -> success rate
    std::map<int, double> topk;     // k -> accuracy (label within top k)
    double mean_similarity = 0.0;
    Histogram histogram;
};

// fraction of pairs whose clean/adv response similarity falls below threshold
double asr(const ResponseSet& responses, const TextEmbedder& embedder, double threshold);

// fraction of items whose ground-truth label ranks in the top k candidates by
// similarity to the adversarial response; ties broken by candidate index
double topk_accuracy(const ResponseSet& responses, const TextEmbedder& embedder,
                     const std::vector<std::string>& candidate_labels, int k);

double mean_similarity(const ResponseSet& responses, const TextEmbedder& embedder);

Histogram similarity_distribution(const ResponseSet& responses, const TextEmbedder& embedder,
                                  int bins);

// Report rows keep the requested k as the key but score at min(k, number of
// candidates): the label is always within the full candidate list, so the
// accuracy beyond it is the k = |candidates| value.
EvalReport make_report(const ResponseSet& responses, const TextEmbedder& embedder,
                       const std::vector<std::string>& candidate_labels,
                       const std::vector<double>& thresholds, const std::vector<int>& ks,
                       int bins);

// Linear classifier over frozen encoder embeddings; the desk-scale stand-in
// that turns images into response strings.
struct SurrogateHead {
    Mat weight;  // num_classes x embed_dim
    std::vector<double> bias;
    std::vector<std::string> class_names;
};

// argmax class name per image, ties resolved toward the lowest class index
std::vector<std::string> surrogate_respond(const EncoderWeights& w, const SurrogateHead& head,
                                           const ImageBatch& batch);

// Full-batch logistic regression; aborts with a diagnostic if training
// accuracy ends below min_train_accuracy (default matches the toy gate).
SurrogateHead train_surrogate_head(const EncoderWeights& w, const LabeledDataset& dataset,
                                   int steps, double min_train_accuracy = 0.9);

// Clean/adversarial surrogate responses over a labeled evaluation split.
// delta == nullptr produces a clean-vs-clean control set.
ResponseSet surrogate_response_set(const EncoderWeights& w, const SurrogateHead& head,
                                   const std::vector<ImageTensor>& images,
                                   const std::vector<std::string>& ids,
                                   const std::vector<std::string>& labels,
                                   const ImageTensor* delta);

}  // namespace duap
