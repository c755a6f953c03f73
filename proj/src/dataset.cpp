#include "dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

#include "common.hpp"
#include "csv.hpp"
#include "image_io.hpp"

namespace fs = std::filesystem;

namespace duap {

namespace {

std::string to_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

}  // namespace

DatasetManifest ingest_dataset(const std::string& dir, const std::string& labels_csv) {
    fs::path root(dir);
    std::error_code ec;
    if (!fs::is_directory(root, ec)) {
        throw Error(ErrorCode::Data, "not a readable directory: " + dir);
    }

    DatasetManifest manifest;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        if (!is_supported_image(name)) continue;
        ManifestEntry me;
        me.path = entry.path().string();
        me.relpath = entry.path().lexically_relative(root).generic_string();
        manifest.entries.push_back(std::move(me));
    }
    if (manifest.entries.empty()) {
        throw Error(ErrorCode::Data, "no images found under " + dir);
    }
    std::sort(manifest.entries.begin(), manifest.entries.end(),
              [](const ManifestEntry& a, const ManifestEntry& b) { return a.relpath < b.relpath; });

    if (!labels_csv.empty()) {
        std::ifstream in(labels_csv, std::ios::binary);
        if (!in) throw Error(ErrorCode::Labels, "cannot open labels file " + labels_csv);
        auto rows = csv_parse(in);
        if (rows.empty() || rows[0] != std::vector<std::string>{"file", "label"}) {
            throw Error(ErrorCode::Labels, "labels CSV must start with header file,label");
        }
        std::map<std::string, ManifestEntry*> by_rel;
        for (auto& e : manifest.entries) by_rel[e.relpath] = &e;
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r].size() != 2) {
                throw Error(ErrorCode::Labels, "labels CSV row " + std::to_string(r) + " malformed");
            }
            auto it = by_rel.find(rows[r][0]);
            if (it == by_rel.end()) {
                throw Error(ErrorCode::Labels, "labels CSV references missing file " + rows[r][0]);
            }
            it->second->label = rows[r][1];
        }
    }

    // content-sensitive hash so identical directories hash identically
    std::uint64_t h = fnv1a("duap-manifest", 13);
    for (const auto& e : manifest.entries) {
        h = fnv1a(e.relpath.data(), e.relpath.size(), h);
        h = fnv1a("\0", 1, h);
        std::ifstream in(e.path, std::ios::binary);
        if (!in) throw Error(ErrorCode::Data, "cannot read " + e.path);
        char buf[4096];
        while (in.read(buf, sizeof buf) || in.gcount() > 0) {
            h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
        }
        h = fnv1a("\0", 1, h);
        h = fnv1a(e.label.data(), e.label.size(), h);
        h = fnv1a("\n", 1, h);
    }
    manifest.source_hash = to_hex(h);
    return manifest;
}

std::vector<ImageTensor> load_images(const DatasetManifest& manifest, const EncoderConfig& config) {
    std::vector<ImageTensor> out;
    out.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        out.push_back(preprocess(read_image_file(e.path), config));
    }
    return out;
}

LabeledDataset load_labeled_images(const DatasetManifest& manifest, const EncoderConfig& config) {
    LabeledDataset out;
    out.items.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        if (e.label.empty()) {
            throw Error(ErrorCode::Labels, "entry has no label: " + e.relpath);
        }
        out.items.push_back({preprocess(read_image_file(e.path), config), e.label});
    }
    return out;
}

std::vector<std::string> manifest_labels(const DatasetManifest& manifest) {
    std::vector<std::string> out;
    for (const auto& e : manifest.entries) out.push_back(e.label);
    return out;
}

std::vector<std::string> manifest_ids(const DatasetManifest& manifest) {
    std::vector<std::string> out;
    for (const auto& e : manifest.entries) out.push_back(e.relpath);
    return out;
}

}  // namespace duap
