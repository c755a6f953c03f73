#include "eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>

#include "csv.hpp"

namespace duap {

namespace {

// responses repeat heavily (class names), so embed each distinct string once
class EmbedCache {
public:
    EmbedCache(const TextEmbedder& embedder) : embedder_(embedder) {}

    const std::vector<double>& get(const std::string& s) {
        auto it = cache_.find(s);
        if (it != cache_.end()) return it->second;
        return cache_.emplace(s, embedder_.embed(s)).first->second;
    }

    double sim(const std::string& a, const std::string& b) {
        const auto& ea = get(a);
        const auto& eb = get(b);
        return cosine_similarity(ea.data(), eb.data(), static_cast<int>(ea.size()));
    }

private:
    const TextEmbedder& embedder_;
    std::unordered_map<std::string, std::vector<double>> cache_;
};

void require_nonempty(const ResponseSet& responses) {
    if (responses.items.empty()) throw Error(ErrorCode::Data, "empty response set");
}

Mat embed_batch(const EncoderWeights& w, const ImageBatch& batch) {
    return forward(w, batch, {}, CaptureWhat::None).embeddings;
}

int argmax_lowest(const double* v, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

}  // namespace

void ResponseSet::validate() const {
    std::set<std::string> ids;
    for (const auto& item : items) {
        if (!ids.insert(item.id).second) {
            throw Error(ErrorCode::Format, "duplicate response id: " + item.id);
        }
    }
}

ResponseSet read_response_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Format, "cannot open " + path);
    auto rows = csv_parse(in);
    if (rows.empty() || rows[0] != std::vector<std::string>{"id", "clean", "adv", "label"}) {
        throw Error(ErrorCode::Format, "response CSV must start with header id,clean,adv,label");
    }
    ResponseSet out;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != 4) {
            throw Error(ErrorCode::Format, "response CSV row " + std::to_string(r) + " has " +
                                               std::to_string(rows[r].size()) + " fields");
        }
        out.items.push_back({rows[r][0], rows[r][1], rows[r][2], rows[r][3]});
    }
    out.validate();
    return out;
}

void write_response_csv(const ResponseSet& responses, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Format, "cannot open " + path + " for writing");
    out << "id,clean,adv,label\n";
    for (const auto& item : responses.items) {
        out << csv_quote(item.id) << ',' << csv_quote(item.clean) << ',' << csv_quote(item.adv)
            << ',' << csv_quote(item.label) << '\n';
    }
    if (!out) throw Error(ErrorCode::Format, "write failed for " + path);
}

long long Histogram::total() const {
    long long t = 0;
    for (long long c : counts) t += c;
    return t;
}

double asr(const ResponseSet& responses, const TextEmbedder& embedder, double threshold) {
    require_nonempty(responses);
    if (!(threshold > -1.0 && threshold <= 1.0)) {
        throw Error(ErrorCode::Contract, "threshold must lie in (-1, 1]");
    }
    EmbedCache cache(embedder);
    long long hits = 0;
    for (const auto& item : responses.items) {
        if (cache.sim(item.clean, item.adv) < threshold) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(responses.items.size());
}

double topk_accuracy(const ResponseSet& responses, const TextEmbedder& embedder,
                     const std::vector<std::string>& candidate_labels, int k) {
    require_nonempty(responses);
    if (k < 1 || k > static_cast<int>(candidate_labels.size())) {
        throw Error(ErrorCode::Contract, "k must lie in [1, |candidates|]");
    }
    EmbedCache cache(embedder);
    long long correct = 0;
    for (const auto& item : responses.items) {
        auto label_it = std::find(candidate_labels.begin(), candidate_labels.end(), item.label);
        if (label_it == candidate_labels.end()) {
            throw Error(ErrorCode::Data, "label not in candidate list: " + item.label);
        }
        int label_idx = static_cast<int>(label_it - candidate_labels.begin());
        double label_sim = cache.sim(candidate_labels[label_idx], item.adv);
        // rank = candidates strictly ahead under (similarity desc, index asc)
        int rank = 0;
        for (int c = 0; c < static_cast<int>(candidate_labels.size()); ++c) {
            if (c == label_idx) continue;
            double s = cache.sim(candidate_labels[c], item.adv);
            if (s > label_sim || (s == label_sim && c < label_idx)) ++rank;
        }
        if (rank < k) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(responses.items.size());
}

double mean_similarity(const ResponseSet& responses, const TextEmbedder& embedder) {
    require_nonempty(responses);
    EmbedCache cache(embedder);
    double sum = 0.0;
    for (const auto& item : responses.items) sum += cache.sim(item.clean, item.adv);
    return sum / static_cast<double>(responses.items.size());
}

Histogram similarity_distribution(const ResponseSet& responses, const TextEmbedder& embedder,
                                  int bins) {
    require_nonempty(responses);
    if (bins < 2) throw Error(ErrorCode::Contract, "need at least 2 bins");
    EmbedCache cache(embedder);
    Histogram h;
    h.bins = bins;
    h.counts.assign(bins, 0);
    for (const auto& item : responses.items) {
        double s = cache.sim(item.clean, item.adv);
        int bin = static_cast<int>(std::floor((s + 1.0) * 0.5 * bins));
        bin = std::clamp(bin, 0, bins - 1);
        ++h.counts[bin];
    }
    return h;
}

EvalReport make_report(const ResponseSet& responses, const TextEmbedder& embedder,
                       const std::vector<std::string>& candidate_labels,
                       const std::vector<double>& thresholds, const std::vector<int>& ks,
                       int bins) {
    EvalReport report;
    for (double th : thresholds) report.asr[th] = asr(responses, embedder, th);
    for (int k : ks) {
        int effective = std::min(k, static_cast<int>(candidate_labels.size()));
        report.topk[k] = topk_accuracy(responses, embedder, candidate_labels, effective);
    }
    report.mean_similarity = mean_similarity(responses, embedder);
    report.histogram = similarity_distribution(responses, embedder, bins);
    return report;
}

std::vector<std::string> surrogate_respond(const EncoderWeights& w, const SurrogateHead& head,
                                           const ImageBatch& batch) {
    if (head.weight.cols != w.config.embed_dim ||
        head.weight.rows != static_cast<int>(head.class_names.size()) ||
        head.bias.size() != head.class_names.size()) {
        throw Error(ErrorCode::Contract, "surrogate head shape does not match encoder");
    }
    Mat emb = embed_batch(w, batch);
    const int K = head.weight.rows;
    std::vector<std::string> out;
    out.reserve(batch.items.size());
    std::vector<double> logits(K);
    for (int b = 0; b < emb.rows; ++b) {
        for (int k = 0; k < K; ++k) {
            logits[k] = head.bias[k] + dot(head.weight.row(k), emb.row(b), emb.cols);
        }
        out.push_back(head.class_names[argmax_lowest(logits.data(), K)]);
    }
    return out;
}

SurrogateHead train_surrogate_head(const EncoderWeights& w, const LabeledDataset& dataset,
                                   int steps, double min_train_accuracy) {
    if (dataset.items.empty()) throw Error(ErrorCode::Data, "empty dataset");
    std::set<std::string> class_set;
    for (const auto& item : dataset.items) {
        if (item.label.empty()) throw Error(ErrorCode::Data, "unlabeled image in dataset");
        class_set.insert(item.label);
    }
    if (class_set.size() < 2) throw Error(ErrorCode::Data, "need at least 2 classes");

    SurrogateHead head;
    head.class_names.assign(class_set.begin(), class_set.end());
    const int K = static_cast<int>(head.class_names.size());
    const int D = w.config.embed_dim;
    const int N = static_cast<int>(dataset.items.size());

    std::vector<int> targets(N);
    ImageBatch batch;
    for (int i = 0; i < N; ++i) {
        batch.items.push_back(dataset.items[i].image);
        targets[i] = static_cast<int>(
            std::find(head.class_names.begin(), head.class_names.end(), dataset.items[i].label) -
            head.class_names.begin());
    }
    Mat emb = embed_batch(w, batch);

    // full-batch Adam on multinomial cross-entropy, zero init: deterministic
    head.weight = Mat(K, D);
    head.bias.assign(K, 0.0);
    Mat mw(K, D), vw(K, D);
    std::vector<double> mb(K, 0.0), vb(K, 0.0);
    const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<double> logits(K), probs(K);
    Mat gw(K, D);
    std::vector<double> gb(K);

    for (int step = 1; step <= steps; ++step) {
        std::fill(gw.d.begin(), gw.d.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (int i = 0; i < N; ++i) {
            const double* e = emb.row(i);
            double mx = -1e300;
            for (int k = 0; k < K; ++k) {
                logits[k] = head.bias[k] + dot(head.weight.row(k), e, D);
                mx = std::max(mx, logits[k]);
            }
            double z = 0.0;
            for (int k = 0; k < K; ++k) {
                probs[k] = std::exp(logits[k] - mx);
                z += probs[k];
            }
            for (int k = 0; k < K; ++k) {
                double p = probs[k] / z - (k == targets[i] ? 1.0 : 0.0);
                gb[k] += p / N;
                double* grow = gw.row(k);
                for (int j = 0; j < D; ++j) grow[j] += p * e[j] / N;
            }
        }
        double c1 = 1.0 - std::pow(b1, step);
        double c2 = 1.0 - std::pow(b2, step);
        for (std::size_t i = 0; i < gw.d.size(); ++i) {
            mw.d[i] = b1 * mw.d[i] + (1 - b1) * gw.d[i];
            vw.d[i] = b2 * vw.d[i] + (1 - b2) * gw.d[i] * gw.d[i];
            head.weight.d[i] -= lr * (mw.d[i] / c1) / (std::sqrt(vw.d[i] / c2) + eps);
        }
        for (int k = 0; k < K; ++k) {
            mb[k] = b1 * mb[k] + (1 - b1) * gb[k];
            vb[k] = b2 * vb[k] + (1 - b2) * gb[k] * gb[k];
            head.bias[k] -= lr * (mb[k] / c1) / (std::sqrt(vb[k] / c2) + eps);
        }
    }

    int correct = 0;
    for (int i = 0; i < N; ++i) {
        const double* e = emb.row(i);
        for (int k = 0; k < K; ++k) {
            logits[k] = head.bias[k] + dot(head.weight.row(k), e, D);
        }
        if (argmax_lowest(logits.data(), K) == targets[i]) ++correct;
    }
    double accuracy = static_cast<double>(correct) / N;
    if (accuracy < min_train_accuracy) {
        throw Error(ErrorCode::Data, "surrogate head underfit: train accuracy " +
                                         std::to_string(accuracy) + " below gate " +
                                         std::to_string(min_train_accuracy));
    }
    return head;
}

ResponseSet surrogate_response_set(const EncoderWeights& w, const SurrogateHead& head,
                                   const std::vector<ImageTensor>& images,
                                   const std::vector<std::string>& ids,
                                   const std::vector<std::string>& labels,
                                   const ImageTensor* delta) {
    if (images.empty()) throw Error(ErrorCode::Data, "empty evaluation set");
    if (images.size() != ids.size() || images.size() != labels.size()) {
        throw Error(ErrorCode::Contract, "images, ids and labels must be parallel");
    }
    ImageBatch clean_batch;
    ImageBatch adv_batch;
    for (const auto& img : images) {
        clean_batch.items.push_back(img);
        adv_batch.items.push_back(delta != nullptr ? apply_one(img, *delta) : img);
    }
    std::vector<std::string> clean_resp = surrogate_respond(w, head, clean_batch);
    std::vector<std::string> adv_resp = surrogate_respond(w, head, adv_batch);
    ResponseSet out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        out.items.push_back({ids[i], clean_resp[i], adv_resp[i], labels[i]});
    }
    out.validate();
    return out;
}

}  // namespace duap
