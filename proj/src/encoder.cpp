#include "encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "common.hpp"

namespace duap {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * M_SQRT1_2)); }

double gelu_grad(double u) {
    return 0.5 * (1.0 + std::erf(u * M_SQRT1_2)) +
           u * std::exp(-0.5 * u * u) / std::sqrt(2.0 * M_PI);
}

// y = gamma * (x - mean)/sqrt(var + eps) + beta, per token row
Mat layer_norm(const Mat& x, const std::vector<double>& gamma, const std::vector<double>& beta,
               std::vector<double>& mean_out, std::vector<double>& rstd_out) {
    Mat y(x.rows, x.cols);
    mean_out.resize(x.rows);
    rstd_out.resize(x.rows);
    for (int t = 0; t < x.rows; ++t) {
        const double* xr = x.row(t);
        double mean = 0.0;
        for (int j = 0; j < x.cols; ++j) mean += xr[j];
        mean /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            double dv = xr[j] - mean;
            var += dv * dv;
        }
        var /= x.cols;
        double rstd = 1.0 / std::sqrt(var + kLnEps);
        mean_out[t] = mean;
        rstd_out[t] = rstd;
        double* yr = y.row(t);
        for (int j = 0; j < x.cols; ++j) {
            yr[j] = gamma[j] * ((xr[j] - mean) * rstd) + beta[j];
        }
    }
    return y;
}

// gradient wrt x given upstream g on the LN output
Mat layer_norm_backward(const Mat& g, const Mat& x, const std::vector<double>& gamma,
                        const std::vector<double>& mean, const std::vector<double>& rstd) {
    Mat gx(x.rows, x.cols);
    for (int t = 0; t < x.rows; ++t) {
        const double* gr = g.row(t);
        const double* xr = x.row(t);
        double m = mean[t];
        double r = rstd[t];
        double sum_gh = 0.0, sum_ghx = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            double gh = gr[j] * gamma[j];
            double xh = (xr[j] - m) * r;
            sum_gh += gh;
            sum_ghx += gh * xh;
        }
        double mg = sum_gh / x.cols;
        double mgx = sum_ghx / x.cols;
        double* out = gx.row(t);
        for (int j = 0; j < x.cols; ++j) {
            double gh = gr[j] * gamma[j];
            double xh = (xr[j] - m) * r;
            out[j] = r * (gh - mg - xh * mgx);
        }
    }
    return gx;
}

void softmax_row(double* row, int n) {
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    for (int j = 0; j < n; ++j) row[j] /= sum;
}

Mat sample_mat(Rng& rng, int rows, int cols, double sigma) {
    Mat m(rows, cols);
    for (auto& v : m.d) v = static_cast<double>(static_cast<float>(rng.trunc_normal(sigma)));
    return m;
}

// (channels*patch*patch) flattened patch vector, channel-major
void extract_patch(const ImageTensor& img, int patch, int py, int px, std::vector<double>& out,
                   const std::vector<double>& mean, const std::vector<double>& stddev) {
    int idx = 0;
    for (int c = 0; c < img.channels; ++c) {
        for (int dy = 0; dy < patch; ++dy) {
            for (int dx = 0; dx < patch; ++dx) {
                out[idx++] = (img.at(c, py * patch + dy, px * patch + dx) - mean[c]) / stddev[c];
            }
        }
    }
}

struct BlockResult {
    Mat x_out;
};

// One pre-norm transformer block; fills the tape as it goes.
BlockResult run_block(const EncoderConfig& cfg, const LayerWeights& lw, const Mat& x_in,
                      LayerTape& tape) {
    const int T = x_in.rows;
    const int D = cfg.embed_dim;
    const int H = cfg.num_heads;
    const int dh = cfg.head_dim();
    const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));

    tape.x_in = x_in;
    tape.h1 = layer_norm(x_in, lw.ln1_gamma, lw.ln1_beta, tape.ln1_mean, tape.ln1_rstd);
    tape.q = linear(tape.h1, lw.wq, lw.bq);
    tape.k = linear(tape.h1, lw.wk, lw.bk);
    tape.v = linear(tape.h1, lw.wv, lw.bv);

    tape.attn = Mat(H * T, T);
    Mat head_out(T, D);
    for (int h = 0; h < H; ++h) {
        int off = h * dh;
        for (int i = 0; i < T; ++i) {
            double* arow = tape.attn.row(h * T + i);
            const double* qrow = tape.q.row(i) + off;
            for (int j = 0; j < T; ++j) {
                arow[j] = alpha * dot(qrow, tape.k.row(j) + off, dh);
            }
            softmax_row(arow, T);
        }
        for (int i = 0; i < T; ++i) {
            const double* arow = tape.attn.row(h * T + i);
            double* orow = head_out.row(i) + off;
            for (int j = 0; j < T; ++j) {
                double a = arow[j];
                const double* vrow = tape.v.row(j) + off;
                for (int c = 0; c < dh; ++c) orow[c] += a * vrow[c];
            }
        }
    }

    Mat attn_out = linear(head_out, lw.wo, lw.bo);
    tape.x_mid = x_in;
    add_inplace(tape.x_mid, attn_out);

    tape.h2 = layer_norm(tape.x_mid, lw.ln2_gamma, lw.ln2_beta, tape.ln2_mean, tape.ln2_rstd);
    tape.mlp_pre = linear(tape.h2, lw.w1, lw.b1);
    Mat act(tape.mlp_pre.rows, tape.mlp_pre.cols);
    for (std::size_t i = 0; i < act.d.size(); ++i) act.d[i] = gelu(tape.mlp_pre.d[i]);
    Mat mlp_out = linear(act, lw.w2, lw.b2);

    BlockResult res;
    res.x_out = tape.x_mid;
    add_inplace(res.x_out, mlp_out);
    return res;
}

}  // namespace

void EncoderConfig::validate() const {
    if (image_resolution <= 0 || patch_size <= 0 || num_layers < 1 || num_heads <= 0 ||
        embed_dim <= 0 || mlp_ratio <= 0.0) {
        throw Error(ErrorCode::Config, "encoder config fields must be positive");
    }
    if (image_resolution % patch_size != 0) {
        throw Error(ErrorCode::Config, "image_resolution must be divisible by patch_size");
    }
    if (embed_dim % num_heads != 0) {
        throw Error(ErrorCode::Config, "embed_dim must be divisible by num_heads");
    }
    if (norm_mean.empty() || norm_mean.size() != norm_std.size()) {
        throw Error(ErrorCode::Config, "normalization mean/std must be non-empty and equal length");
    }
    for (double s : norm_std) {
        if (s <= 0.0) throw Error(ErrorCode::Config, "normalization std must be positive");
    }
}

EncoderWeights build_encoder(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);

    const int D = config.embed_dim;
    const int T = config.num_tokens();
    const int patch_dim = config.channels() * config.patch_size * config.patch_size;
    const int hidden = config.mlp_hidden();
    const double sigma = 0.02;

    EncoderWeights w;
    w.config = config;
    // Sampling order is fixed: patch kernel, class token, positional table,
    // then per layer wq, wk, wv, wo, w1, w2. Biases stay zero, norms identity.
    w.patch_kernel = sample_mat(rng, patch_dim, D, sigma);
    w.patch_bias.assign(D, 0.0);
    w.cls_token.resize(D);
    for (auto& v : w.cls_token) v = static_cast<double>(static_cast<float>(rng.trunc_normal(sigma)));
    w.pos_embed = sample_mat(rng, T, D, sigma);

    w.layers.resize(config.num_layers);
    for (auto& lw : w.layers) {
        lw.ln1_gamma.assign(D, 1.0);
        lw.ln1_beta.assign(D, 0.0);
        lw.wq = sample_mat(rng, D, D, sigma);
        lw.wk = sample_mat(rng, D, D, sigma);
        lw.wv = sample_mat(rng, D, D, sigma);
        lw.wo = sample_mat(rng, D, D, sigma);
        lw.bq.assign(D, 0.0);
        lw.bk.assign(D, 0.0);
        lw.bv.assign(D, 0.0);
        lw.bo.assign(D, 0.0);
        lw.ln2_gamma.assign(D, 1.0);
        lw.ln2_beta.assign(D, 0.0);
        lw.w1 = sample_mat(rng, D, hidden, sigma);
        lw.w2 = sample_mat(rng, hidden, D, sigma);
        lw.b1.assign(hidden, 0.0);
        lw.b2.assign(D, 0.0);
    }
    w.lnf_gamma.assign(D, 1.0);
    w.lnf_beta.assign(D, 0.0);
    w.proj = sample_mat(rng, D, D, sigma);
    return w;
}

ImageForward forward_image(const EncoderWeights& w, const ImageTensor& img) {
    const EncoderConfig& cfg = w.config;
    if (img.channels != cfg.channels() || img.height != cfg.image_resolution ||
        img.width != cfg.image_resolution) {
        throw Error(ErrorCode::Shape, "image shape does not match encoder input");
    }

    const int D = cfg.embed_dim;
    const int pps = cfg.patches_per_side();
    const int T = cfg.num_tokens();
    const int patch_dim = cfg.channels() * cfg.patch_size * cfg.patch_size;

    Mat tokens(T, D);
    for (int j = 0; j < D; ++j) tokens(0, j) = w.cls_token[j] + w.pos_embed(0, j);

    std::vector<double> patch_vec(patch_dim);
    for (int py = 0; py < pps; ++py) {
        for (int px = 0; px < pps; ++px) {
            int t = 1 + py * pps + px;
            extract_patch(img, cfg.patch_size, py, px, patch_vec, cfg.norm_mean, cfg.norm_std);
            double* row = tokens.row(t);
            for (int j = 0; j < D; ++j) {
                double acc = w.patch_bias[j];
                for (int k = 0; k < patch_dim; ++k) acc += patch_vec[k] * w.patch_kernel(k, j);
                row[j] = acc + w.pos_embed(t, j);
            }
        }
    }

    auto tape = std::make_shared<ImageForward::Tape>();
    tape->layers.resize(cfg.num_layers);
    Mat x = std::move(tokens);
    for (int l = 0; l < cfg.num_layers; ++l) {
        x = run_block(cfg, w.layers[l], x, tape->layers[l]).x_out;
    }
    tape->x_last = std::move(x);
    tape->y_final = layer_norm(tape->x_last, w.lnf_gamma, w.lnf_beta, tape->lnf_mean, tape->lnf_rstd);

    ImageForward out;
    out.embedding.resize(D);
    for (int j = 0; j < D; ++j) {
        double acc = 0.0;
        for (int k = 0; k < D; ++k) acc += tape->y_final(0, k) * w.proj(k, j);
        out.embedding[j] = acc;
    }
    for (int l = 0; l < cfg.num_layers; ++l) {
        out.values[l] = &tape->layers[l].v;
        out.attention[l] = &tape->layers[l].attn;
    }
    out.tape = std::move(tape);
    return out;
}

ForwardOutput forward(const EncoderWeights& w, const ImageBatch& batch,
                      const std::set<int>& capture_layers, CaptureWhat what) {
    for (int l : capture_layers) {
        if (l < 0 || l >= w.config.num_layers) {
            throw Error(ErrorCode::Range, "capture layer " + std::to_string(l) + " out of range");
        }
    }
    ForwardOutput out;
    out.embeddings = Mat(static_cast<int>(batch.items.size()), w.config.embed_dim);
    out.internals.num_heads = w.config.num_heads;
    bool want_attn = what == CaptureWhat::Attention || what == CaptureWhat::Both;
    bool want_vals = what == CaptureWhat::Values || what == CaptureWhat::Both;
    if (what != CaptureWhat::None) {
        for (int l : capture_layers) {
            if (want_vals) out.internals.values[l].reserve(batch.items.size());
            if (want_attn) out.internals.attention[l].reserve(batch.items.size());
        }
    }
    for (std::size_t b = 0; b < batch.items.size(); ++b) {
        ImageForward f = forward_image(w, batch.items[b]);
        std::memcpy(out.embeddings.row(static_cast<int>(b)), f.embedding.data(),
                    sizeof(double) * f.embedding.size());
        for (int l : capture_layers) {
            if (want_vals) out.internals.values[l].push_back(*f.values.at(l));
            if (want_attn) out.internals.attention[l].push_back(*f.attention.at(l));
        }
    }
    return out;
}

ImageTensor backward_image(const EncoderWeights& w, const ImageForward& fwd,
                           const CaptureGrads& grads) {
    const EncoderConfig& cfg = w.config;
    const ImageForward::Tape& tape = *fwd.tape;
    const int D = cfg.embed_dim;
    const int H = cfg.num_heads;
    const int dh = cfg.head_dim();
    const int T = cfg.num_tokens();
    const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat g_x(T, D);
    if (!grads.d_embedding.empty()) {
        Mat g_y(T, D);
        for (int k = 0; k < D; ++k) {
            double acc = 0.0;
            for (int j = 0; j < D; ++j) acc += grads.d_embedding[j] * w.proj(k, j);
            g_y(0, k) = acc;
        }
        g_x = layer_norm_backward(g_y, tape.x_last, w.lnf_gamma, tape.lnf_mean, tape.lnf_rstd);
    }

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const LayerWeights& lw = w.layers[l];
        const LayerTape& lt = tape.layers[l];

        // MLP half: x_out = x_mid + gelu(LN2(x_mid) W1 + b1) W2 + b2
        Mat g_act = matmul_nt(g_x, lw.w2);
        for (std::size_t i = 0; i < g_act.d.size(); ++i) g_act.d[i] *= gelu_grad(lt.mlp_pre.d[i]);
        Mat g_h2 = matmul_nt(g_act, lw.w1);
        Mat g_mid = layer_norm_backward(g_h2, lt.x_mid, lw.ln2_gamma, lt.ln2_mean, lt.ln2_rstd);
        add_inplace(g_mid, g_x);

        // attention half: x_mid = x_in + concat_h(A_h V_h) Wo + bo
        Mat g_head = matmul_nt(g_mid, lw.wo);
        Mat g_attn(H * T, T);
        Mat g_v(T, D);
        for (int h = 0; h < H; ++h) {
            int off = h * dh;
            for (int i = 0; i < T; ++i) {
                const double* ghrow = g_head.row(i) + off;
                double* garow = g_attn.row(h * T + i);
                for (int j = 0; j < T; ++j) {
                    garow[j] = dot(ghrow, lt.v.row(j) + off, dh);
                }
            }
            for (int j = 0; j < T; ++j) {
                double* gvrow = g_v.row(j) + off;
                for (int i = 0; i < T; ++i) {
                    double a = lt.attn(h * T + i, j);
                    const double* ghrow = g_head.row(i) + off;
                    for (int c = 0; c < dh; ++c) gvrow[c] += a * ghrow[c];
                }
            }
        }

        auto vit = grads.d_values.find(l);
        if (vit != grads.d_values.end()) add_inplace(g_v, vit->second);
        auto ait = grads.d_attention.find(l);
        if (ait != grads.d_attention.end()) add_inplace(g_attn, ait->second);

        // softmax rows: g_s = a .* (g_a - <g_a, a>)
        Mat g_q(T, D);
        Mat g_k(T, D);
        for (int h = 0; h < H; ++h) {
            int off = h * dh;
            for (int i = 0; i < T; ++i) {
                const double* arow = lt.attn.row(h * T + i);
                double* garow = g_attn.row(h * T + i);
                double inner = dot(garow, arow, T);
                for (int j = 0; j < T; ++j) garow[j] = arow[j] * (garow[j] - inner);
            }
            for (int i = 0; i < T; ++i) {
                const double* gsrow = g_attn.row(h * T + i);
                double* gqrow = g_q.row(i) + off;
                for (int j = 0; j < T; ++j) {
                    double gs = alpha * gsrow[j];
                    if (gs == 0.0) continue;
                    const double* krow = lt.k.row(j) + off;
                    double* gkrow = g_k.row(j) + off;
                    const double* qrow = lt.q.row(i) + off;
                    for (int c = 0; c < dh; ++c) {
                        gqrow[c] += gs * krow[c];
                        gkrow[c] += gs * qrow[c];
                    }
                }
            }
        }

        Mat g_h1 = matmul_nt(g_q, lw.wq);
        Mat g_k_in = matmul_nt(g_k, lw.wk);
        add_inplace(g_h1, g_k_in);
        Mat g_v_in = matmul_nt(g_v, lw.wv);
        add_inplace(g_h1, g_v_in);

        g_x = layer_norm_backward(g_h1, lt.x_in, lw.ln1_gamma, lt.ln1_mean, lt.ln1_rstd);
        add_inplace(g_x, g_mid);
    }

    // tokens -> pixels: class token and positional table are constants
    ImageTensor g_pix(cfg.channels(), cfg.image_resolution, cfg.image_resolution);
    const int pps = cfg.patches_per_side();
    const int P = cfg.patch_size;
    const int patch_dim = cfg.channels() * P * P;
    std::vector<double> g_vec(patch_dim);
    for (int py = 0; py < pps; ++py) {
        for (int px = 0; px < pps; ++px) {
            int t = 1 + py * pps + px;
            const double* grow = g_x.row(t);
            for (int k = 0; k < patch_dim; ++k) {
                g_vec[k] = dot(w.patch_kernel.row(k), grow, D);
            }
            int idx = 0;
            for (int c = 0; c < cfg.channels(); ++c) {
                double inv_std = 1.0 / cfg.norm_std[c];
                for (int dy = 0; dy < P; ++dy) {
                    for (int dx = 0; dx < P; ++dx) {
                        g_pix.at(c, py * P + dy, px * P + dx) = g_vec[idx++] * inv_std;
                    }
                }
            }
        }
    }
    return g_pix;
}

ImageTensor preprocess(const ImageTensor& raw, const EncoderConfig& config) {
    if (raw.channels == 0 || raw.height <= 0 || raw.width <= 0 || raw.d.empty()) {
        throw Error(ErrorCode::Data, "empty image");
    }
    if (raw.channels != 1 && raw.channels != 3) {
        throw Error(ErrorCode::Data, "images must have 1 or 3 channels");
    }
    const int C = config.channels();
    if (raw.channels == 3 && C != 3) {
        throw Error(ErrorCode::Data, "encoder expects " + std::to_string(C) + " channels");
    }

    const int R = config.image_resolution;
    ImageTensor out(C, R, R);
    const double sy = static_cast<double>(raw.height) / R;
    const double sx = static_cast<double>(raw.width) / R;
    for (int c = 0; c < C; ++c) {
        int src_c = raw.channels == 1 ? 0 : c;
        for (int y = 0; y < R; ++y) {
            double fy = (y + 0.5) * sy - 0.5;
            int y0 = static_cast<int>(std::floor(fy));
            double wy = fy - y0;
            int y0c = std::clamp(y0, 0, raw.height - 1);
            int y1c = std::clamp(y0 + 1, 0, raw.height - 1);
            for (int x = 0; x < R; ++x) {
                double fx = (x + 0.5) * sx - 0.5;
                int x0 = static_cast<int>(std::floor(fx));
                double wx = fx - x0;
                int x0c = std::clamp(x0, 0, raw.width - 1);
                int x1c = std::clamp(x0 + 1, 0, raw.width - 1);
                double v = (1 - wy) * ((1 - wx) * raw.at(src_c, y0c, x0c) + wx * raw.at(src_c, y0c, x1c)) +
                           wy * ((1 - wx) * raw.at(src_c, y1c, x0c) + wx * raw.at(src_c, y1c, x1c));
                out.at(c, y, x) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return out;
}

}  // namespace duap
