#pragma once

#include <string>
#include <vector>

#include "tensor.hpp"

namespace duap {

// Decoders return raw [0,1] tensors (1 or 3 channels); preprocess() resizes
// them to the encoder input. DIMG is the raw float32 test format, so fixtures
// never depend on an image codec.

bool is_supported_image(const std::string& filename);  // .png .ppm .pgm .dimg

ImageTensor read_image_file(const std::string& path);

ImageTensor read_dimg(const std::string& path);
void write_dimg(const ImageTensor& img, const std::string& path);

ImageTensor read_png(const std::string& path);
ImageTensor read_ppm(const std::string& path);

// 8-bit non-interlaced PNG emission
void write_png_gray(const std::string& path, const std::vector<unsigned char>& pixels, int width,
                    int height);
void write_png_rgb(const std::string& path, const std::vector<unsigned char>& pixels, int width,
                   int height);

// min/max-normalized grayscale render of a matrix (heatmaps)
void write_matrix_png(const Mat& m, double min_value, double max_value, const std::string& path);

// delta render at (delta/(2 eps) + 0.5) * 255, rounded
void write_delta_png(const ImageTensor& delta, double epsilon, const std::string& path);

}  // namespace duap
