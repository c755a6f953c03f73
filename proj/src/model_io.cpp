#include <cstdint>
#include <fstream>
#include <functional>
#include <map>

#include "binio.hpp"
#include "encoder.hpp"

// DUW1 weight file: embedded config (7 x 32-bit fields plus per-channel
// mean/std arrays) followed by named float32 tensors.

namespace duap {

namespace {

void write_tensor(std::ostream& out, const std::string& name,
                  const std::vector<std::uint32_t>& dims, const std::vector<double>& data) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    write_bytes(out, name.data(), name.size());
    write_u32(out, static_cast<std::uint32_t>(dims.size()));
    std::size_t count = 1;
    for (auto dim : dims) {
        write_u32(out, dim);
        count *= dim;
    }
    if (count != data.size()) throw Error(ErrorCode::Internal, "tensor dims disagree with data");
    write_f32_array(out, data);
}

void write_mat(std::ostream& out, const std::string& name, const Mat& m) {
    write_tensor(out, name,
                 {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)}, m.d);
}

struct NamedTensor {
    std::vector<std::uint32_t> dims;
    std::vector<double> data;
};

std::string layer_key(int l, const char* field) {
    return "layers." + std::to_string(l) + "." + field;
}

}  // namespace

void save_weights(const EncoderWeights& w, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Format, "cannot open " + path + " for writing");
    const EncoderConfig& c = w.config;

    write_bytes(out, "DUW1", 4);
    write_u32(out, static_cast<std::uint32_t>(c.image_resolution));
    write_u32(out, static_cast<std::uint32_t>(c.patch_size));
    write_u32(out, static_cast<std::uint32_t>(c.num_layers));
    write_u32(out, static_cast<std::uint32_t>(c.num_heads));
    write_u32(out, static_cast<std::uint32_t>(c.embed_dim));
    write_f32(out, static_cast<float>(c.mlp_ratio));
    write_u32(out, static_cast<std::uint32_t>(c.channels()));
    write_f32_array(out, c.norm_mean);
    write_f32_array(out, c.norm_std);

    write_mat(out, "patch_kernel", w.patch_kernel);
    write_tensor(out, "patch_bias", {static_cast<std::uint32_t>(w.patch_bias.size())}, w.patch_bias);
    write_tensor(out, "cls_token", {static_cast<std::uint32_t>(w.cls_token.size())}, w.cls_token);
    write_mat(out, "pos_embed", w.pos_embed);
    for (int l = 0; l < c.num_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        auto vec = [&](const char* field, const std::vector<double>& v) {
            write_tensor(out, layer_key(l, field), {static_cast<std::uint32_t>(v.size())}, v);
        };
        vec("ln1_gamma", lw.ln1_gamma);
        vec("ln1_beta", lw.ln1_beta);
        write_mat(out, layer_key(l, "wq"), lw.wq);
        vec("bq", lw.bq);
        write_mat(out, layer_key(l, "wk"), lw.wk);
        vec("bk", lw.bk);
        write_mat(out, layer_key(l, "wv"), lw.wv);
        vec("bv", lw.bv);
        write_mat(out, layer_key(l, "wo"), lw.wo);
        vec("bo", lw.bo);
        vec("ln2_gamma", lw.ln2_gamma);
        vec("ln2_beta", lw.ln2_beta);
        write_mat(out, layer_key(l, "w1"), lw.w1);
        vec("b1", lw.b1);
        write_mat(out, layer_key(l, "w2"), lw.w2);
        vec("b2", lw.b2);
    }
    write_tensor(out, "lnf_gamma", {static_cast<std::uint32_t>(w.lnf_gamma.size())}, w.lnf_gamma);
    write_tensor(out, "lnf_beta", {static_cast<std::uint32_t>(w.lnf_beta.size())}, w.lnf_beta);
    write_mat(out, "proj", w.proj);
    out.flush();
    if (!out) throw Error(ErrorCode::Format, "write failed for " + path);
}

EncoderWeights load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Format, "cannot open " + path);
    expect_magic(in, "DUW1", "weight file");

    EncoderConfig c;
    c.image_resolution = static_cast<int>(read_u32(in, "image_resolution"));
    c.patch_size = static_cast<int>(read_u32(in, "patch_size"));
    c.num_layers = static_cast<int>(read_u32(in, "num_layers"));
    c.num_heads = static_cast<int>(read_u32(in, "num_heads"));
    c.embed_dim = static_cast<int>(read_u32(in, "embed_dim"));
    c.mlp_ratio = static_cast<double>(read_f32(in, "mlp_ratio"));
    std::uint32_t channels = read_u32(in, "channels");
    if (channels == 0 || channels > 16) throw Error(ErrorCode::Format, "implausible channel count");
    c.norm_mean = read_f32_array(in, channels, "norm_mean");
    c.norm_std = read_f32_array(in, channels, "norm_std");
    try {
        c.validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::Format, std::string("embedded config invalid: ") + e.what());
    }

    std::map<std::string, NamedTensor> tensors;
    while (true) {
        int first = in.peek();
        if (first == EOF) break;
        std::uint32_t name_len = read_u32(in, "tensor name length");
        if (name_len == 0 || name_len > 256) throw Error(ErrorCode::Format, "bad tensor name length");
        std::string name(name_len, '\0');
        read_bytes(in, name.data(), name_len, "tensor name");
        std::uint32_t rank = read_u32(in, "tensor rank");
        if (rank == 0 || rank > 4) throw Error(ErrorCode::Format, "bad tensor rank");
        NamedTensor t;
        std::size_t count = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            std::uint32_t dim = read_u32(in, "tensor dim");
            if (dim == 0 || count * dim > (1u << 28)) throw Error(ErrorCode::Format, "bad tensor dim");
            t.dims.push_back(dim);
            count *= dim;
        }
        t.data = read_f32_array(in, count, name.c_str());
        tensors.emplace(std::move(name), std::move(t));
    }

    auto take_vec = [&](const std::string& name, std::size_t expect) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error(ErrorCode::Format, "missing tensor " + name);
        const NamedTensor& t = it->second;
        if (t.dims.size() != 1 || t.dims[0] != expect) {
            throw Error(ErrorCode::Format, "tensor " + name + " has unexpected shape");
        }
        return t.data;
    };
    auto take_mat = [&](const std::string& name, int rows, int cols) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error(ErrorCode::Format, "missing tensor " + name);
        const NamedTensor& t = it->second;
        if (t.dims.size() != 2 || t.dims[0] != static_cast<std::uint32_t>(rows) ||
            t.dims[1] != static_cast<std::uint32_t>(cols)) {
            throw Error(ErrorCode::Format, "tensor " + name + " has unexpected shape");
        }
        Mat m(rows, cols);
        m.d = t.data;
        return m;
    };

    const int D = c.embed_dim;
    const int patch_dim = c.channels() * c.patch_size * c.patch_size;
    const int hidden = c.mlp_hidden();

    EncoderWeights w;
    w.config = c;
    w.patch_kernel = take_mat("patch_kernel", patch_dim, D);
    w.patch_bias = take_vec("patch_bias", D);
    w.cls_token = take_vec("cls_token", D);
    w.pos_embed = take_mat("pos_embed", c.num_tokens(), D);
    w.layers.resize(c.num_layers);
    for (int l = 0; l < c.num_layers; ++l) {
        LayerWeights& lw = w.layers[l];
        lw.ln1_gamma = take_vec(layer_key(l, "ln1_gamma"), D);
        lw.ln1_beta = take_vec(layer_key(l, "ln1_beta"), D);
        lw.wq = take_mat(layer_key(l, "wq"), D, D);
        lw.bq = take_vec(layer_key(l, "bq"), D);
        lw.wk = take_mat(layer_key(l, "wk"), D, D);
        lw.bk = take_vec(layer_key(l, "bk"), D);
        lw.wv = take_mat(layer_key(l, "wv"), D, D);
        lw.bv = take_vec(layer_key(l, "bv"), D);
        lw.wo = take_mat(layer_key(l, "wo"), D, D);
        lw.bo = take_vec(layer_key(l, "bo"), D);
        lw.ln2_gamma = take_vec(layer_key(l, "ln2_gamma"), D);
        lw.ln2_beta = take_vec(layer_key(l, "ln2_beta"), D);
        lw.w1 = take_mat(layer_key(l, "w1"), D, hidden);
        lw.b1 = take_vec(layer_key(l, "b1"), hidden);
        lw.w2 = take_mat(layer_key(l, "w2"), hidden, D);
        lw.b2 = take_vec(layer_key(l, "b2"), D);
    }
    w.lnf_gamma = take_vec("lnf_gamma", D);
    w.lnf_beta = take_vec("lnf_beta", D);
    w.proj = take_mat("proj", D, D);
    return w;
}

}  // namespace duap
