#include "text_embed.hpp"

#include <cmath>

#include "common.hpp"
#include "tensor.hpp"

namespace duap {

double TextEmbedder::similarity(const std::string& a, const std::string& b) const {
    std::vector<double> ea = embed(a);
    std::vector<double> eb = embed(b);
    return cosine_similarity(ea.data(), eb.data(), static_cast<int>(ea.size()));
}

std::vector<double> TrigramEmbedder::embed(const std::string& text) const {
    std::vector<double> v(dim_, 0.0);
    auto bump = [&](const char* p, std::size_t n) {
        std::uint64_t h = fnv1a(p, n);
        int bucket = static_cast<int>(h % static_cast<std::uint64_t>(dim_));
        double s = (h >> 63) ? -1.0 : 1.0;
        v[bucket] += s;
    };
    if (text.size() >= 3) {
        for (std::size_t i = 0; i + 3 <= text.size(); ++i) bump(text.data() + i, 3);
    } else if (!text.empty()) {
        bump(text.data(), text.size());
    }
    double norm_sq = 0.0;
    for (double x : v) norm_sq += x * x;
    if (norm_sq == 0.0) {
        v[0] = 1.0;  // canonical unit vector for the empty string
        return v;
    }
    double inv = 1.0 / std::sqrt(norm_sq);
    for (double& x : v) x *= inv;
    return v;
}

std::shared_ptr<const TextEmbedder> default_text_embedder() {
    static const auto instance = std::make_shared<const TrigramEmbedder>(256);
    return instance;
}

std::string photo_prompt(const std::string& class_name) {
    return "A photo of " + class_name;
}

}  // namespace duap
