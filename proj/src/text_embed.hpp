#pragma once

#include <memory>
#include <string>
#include <vector>

namespace duap {

// Unit-norm deterministic sentence embeddings. The default implementation is
// a hashed character-trigram embedder; a real text encoder can be dropped in
// behind this interface without touching the metric code.
class TextEmbedder {
public:
    virtual ~TextEmbedder() = default;
    virtual int dim() const = 0;
    virtual std::vector<double> embed(const std::string& text) const = 0;

    double similarity(const std::string& a, const std::string& b) const;
};

class TrigramEmbedder : public TextEmbedder {
public:
    explicit TrigramEmbedder(int dim = 256) : dim_(dim) {}
    int dim() const override { return dim_; }
    std::vector<double> embed(const std::string& text) const override;

private:
    int dim_;
};

std::shared_ptr<const TextEmbedder> default_text_embedder();

// "A photo of {class}"
std::string photo_prompt(const std::string& class_name);

}  // namespace duap
