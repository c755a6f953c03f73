#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace duap {

struct EncoderConfig {
    int image_resolution = 224;  // pixels per side, square input
    int patch_size = 14;
    int num_layers = 24;
    int num_heads = 16;
    int embed_dim = 1024;
    double mlp_ratio = 4.0;
    std::vector<double> norm_mean = {0.5, 0.5, 0.5};  // applied inside forward
    std::vector<double> norm_std = {0.5, 0.5, 0.5};

    int patches_per_side() const { return image_resolution / patch_size; }
    int num_tokens() const { return patches_per_side() * patches_per_side() + 1; }
    int head_dim() const { return embed_dim / num_heads; }
    int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio + 0.5); }
    int channels() const { return static_cast<int>(norm_mean.size()); }

    void validate() const;  // throws Error(Config) on violated invariants
    bool operator==(const EncoderConfig&) const = default;
};

struct LayerWeights {
    std::vector<double> ln1_gamma, ln1_beta;
    Mat wq, wk, wv, wo;                      // embed_dim x embed_dim
    std::vector<double> bq, bk, bv, bo;
    std::vector<double> ln2_gamma, ln2_beta;
    Mat w1, w2;                              // embed_dim x hidden, hidden x embed_dim
    std::vector<double> b1, b2;

    bool operator==(const LayerWeights&) const = default;
};

struct EncoderWeights {
    EncoderConfig config;
    Mat patch_kernel;                 // (channels*patch*patch) x embed_dim
    std::vector<double> patch_bias;
    std::vector<double> cls_token;    // embed_dim
    Mat pos_embed;                    // tokens x embed_dim
    std::vector<LayerWeights> layers;
    std::vector<double> lnf_gamma, lnf_beta;
    Mat proj;                         // embed_dim x embed_dim, applied to the class token

    bool operator==(const EncoderWeights&) const = default;
};

// Deterministic construction: truncated-normal(sigma 0.02) projections, zero
// biases, unit layer norms. Every sampled value is quantized through float32
// so weights survive the float32 file format bit-exactly.
EncoderWeights build_encoder(const EncoderConfig& config, std::uint64_t seed);

struct ImageBatch {
    std::vector<ImageTensor> items;  // values in [0,1] pixel space
};

enum class CaptureWhat { None, Attention, Values, Both };

// Per-layer internals recorded during forward. Values are the per-token value
// projections before attention aggregation, heads concatenated (tokens x
// embed_dim). Attention is the softmax matrix with head-major rows
// ((heads*tokens) x tokens).
struct CapturedInternals {
    std::map<int, std::vector<Mat>> values;     // layer -> one Mat per batch item
    std::map<int, std::vector<Mat>> attention;
    int num_heads = 0;
};

struct ForwardOutput {
    Mat embeddings;  // batch x embed_dim
    CapturedInternals internals;
};

ForwardOutput forward(const EncoderWeights& w, const ImageBatch& batch,
                      const std::set<int>& capture_layers, CaptureWhat what);

// --- differentiable per-image path -----------------------------------------
//
// The attack engine needs d(loss)/d(pixels) for losses over captured
// internals and/or the output embedding. Weights are frozen, so the tape
// only has to support input gradients.

struct LayerTape {
    Mat x_in;          // block input (pre LN1)
    Mat h1;            // LN1 output
    std::vector<double> ln1_mean, ln1_rstd;
    Mat q, k, v;
    Mat attn;          // (heads*tokens) x tokens softmax rows
    Mat x_mid;         // after attention residual
    Mat h2;            // LN2 output
    std::vector<double> ln2_mean, ln2_rstd;
    Mat mlp_pre;       // pre-GELU activations
};

struct ImageForward {
    std::vector<double> embedding;
    std::map<int, const Mat*> values;     // views into the tape
    std::map<int, const Mat*> attention;
    struct Tape;
    std::shared_ptr<const Tape> tape;
};

struct ImageForward::Tape {
    std::vector<LayerTape> layers;
    Mat x_last;
    Mat y_final;       // LNf output
    std::vector<double> lnf_mean, lnf_rstd;
};

ImageForward forward_image(const EncoderWeights& w, const ImageTensor& img);

// Upstream gradients on captured internals / embedding; absent entries mean zero.
struct CaptureGrads {
    std::map<int, Mat> d_values;
    std::map<int, Mat> d_attention;
    std::vector<double> d_embedding;
};

// Gradient of the upstream loss with respect to the [0,1] pixel input.
ImageTensor backward_image(const EncoderWeights& w, const ImageForward& fwd,
                           const CaptureGrads& grads);

// Decoded raster prior to preprocessing: [0,1] values, 1 or 3 channels.
ImageTensor preprocess(const ImageTensor& raw, const EncoderConfig& config);

void save_weights(const EncoderWeights& w, const std::string& path);
EncoderWeights load_weights(const std::string& path);

}  // namespace duap
