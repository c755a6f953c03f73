#pragma once

#include <string>
#include <vector>

#include "baselines.hpp"
#include "encoder.hpp"

namespace duap {

struct ManifestEntry {
    std::string path;     // full path for loading
    std::string relpath;  // '/'-separated, the sort and label-join key
    std::string label;    // empty when unlabeled
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;  // lexicographic by relpath
    std::string source_hash;             // hex digest over paths, bytes and labels
};

// Recursively collects supported raster files (PNG, PPM/PGM, DIMG) under dir;
// optional labels CSV (header file,label) joins by relative path.
DatasetManifest ingest_dataset(const std::string& dir, const std::string& labels_csv = "");

// Decode + preprocess every entry to the encoder's input shape.
std::vector<ImageTensor> load_images(const DatasetManifest& manifest, const EncoderConfig& config);

// Same, but labels are required on every entry.
LabeledDataset load_labeled_images(const DatasetManifest& manifest, const EncoderConfig& config);

std::vector<std::string> manifest_labels(const DatasetManifest& manifest);
std::vector<std::string> manifest_ids(const DatasetManifest& manifest);

}  // namespace duap
