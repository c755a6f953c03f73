#include "image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "binio.hpp"
#include "common.hpp"

namespace duap {

namespace {

std::string lower_ext(const std::string& name) {
    auto pos = name.rfind('.');
    if (pos == std::string::npos) return "";
    std::string ext = name.substr(pos);
    for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext;
}

std::vector<unsigned char> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Format, "cannot open " + path);
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                      std::istreambuf_iterator<char>());
}

std::uint32_t be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

const unsigned char kPngSignature[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

void write_chunk(std::ofstream& out, const char type[4], const std::vector<unsigned char>& data) {
    std::vector<unsigned char> buf;
    put_be32(buf, static_cast<std::uint32_t>(data.size()));
    buf.insert(buf.end(), type, type + 4);
    buf.insert(buf.end(), data.begin(), data.end());
    std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(crc32(0, reinterpret_cast<const Bytef*>(type), 4),
              data.empty() ? nullptr : data.data(), static_cast<uInt>(data.size())));
    put_be32(buf, crc);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void write_png(const std::string& path, const std::vector<unsigned char>& pixels, int width,
               int height, int channels) {
    if (width <= 0 || height <= 0 ||
        pixels.size() != static_cast<std::size_t>(width) * height * channels) {
        throw Error(ErrorCode::Contract, "pixel buffer does not match dimensions");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Format, "cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(kPngSignature), 8);

    std::vector<unsigned char> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(width));
    put_be32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);                                   // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);               // gray / rgb
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(out, "IHDR", ihdr);

    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    std::vector<unsigned char> raw;
    raw.reserve((stride + 1) * height);
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), pixels.begin() + y * stride, pixels.begin() + (y + 1) * stride);
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                  Z_DEFAULT_COMPRESSION) != Z_OK) {
        throw Error(ErrorCode::Internal, "deflate failed");
    }
    compressed.resize(bound);
    write_chunk(out, "IDAT", compressed);
    write_chunk(out, "IEND", {});
    out.flush();
    if (!out) throw Error(ErrorCode::Format, "write failed for " + path);
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

std::vector<unsigned char> inflate_all(const std::vector<unsigned char>& in,
                                       std::size_t expected) {
    std::vector<unsigned char> out(expected);
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) throw Error(ErrorCode::Internal, "inflate init failed");
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    int rc = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    if (rc != Z_STREAM_END || zs.total_out != expected) {
        throw Error(ErrorCode::Format, "corrupt compressed image data");
    }
    return out;
}

}  // namespace

bool is_supported_image(const std::string& filename) {
    std::string ext = lower_ext(filename);
    return ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".dimg";
}

ImageTensor read_image_file(const std::string& path) {
    std::string ext = lower_ext(path);
    if (ext == ".png") return read_png(path);
    if (ext == ".ppm" || ext == ".pgm") return read_ppm(path);
    if (ext == ".dimg") return read_dimg(path);
    throw Error(ErrorCode::Data, "unsupported image type: " + path);
}

ImageTensor read_dimg(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Format, "cannot open " + path);
    expect_magic(in, "DIMG", "raw image");
    std::uint32_t c = read_u32(in, "channels");
    std::uint32_t h = read_u32(in, "height");
    std::uint32_t w = read_u32(in, "width");
    if (c == 0 || (c != 1 && c != 3) || h == 0 || w == 0 || h > (1u << 14) || w > (1u << 14)) {
        throw Error(ErrorCode::Format, "implausible DIMG dimensions");
    }
    ImageTensor img(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
    img.d = read_f32_array(in, img.size(), "pixel data");
    for (double& v : img.d) {
        if (!std::isfinite(v) || v < -1e-6 || v > 1.0 + 1e-6) {
            throw Error(ErrorCode::Format, "DIMG pixel outside [0, 1]");
        }
        v = std::clamp(v, 0.0, 1.0);
    }
    return img;
}

void write_dimg(const ImageTensor& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Format, "cannot open " + path + " for writing");
    write_bytes(out, "DIMG", 4);
    write_u32(out, static_cast<std::uint32_t>(img.channels));
    write_u32(out, static_cast<std::uint32_t>(img.height));
    write_u32(out, static_cast<std::uint32_t>(img.width));
    write_f32_array(out, img.d);
    out.flush();
    if (!out) throw Error(ErrorCode::Format, "write failed for " + path);
}

ImageTensor read_png(const std::string& path) {
    std::vector<unsigned char> file = read_all(path);
    if (file.size() < 8 || std::memcmp(file.data(), kPngSignature, 8) != 0) {
        throw Error(ErrorCode::Format, "not a PNG file: " + path);
    }

    int width = 0, height = 0, bit_depth = 0, color_type = 0;
    std::vector<unsigned char> idat;
    std::size_t pos = 8;
    bool saw_ihdr = false, saw_iend = false;
    while (pos + 8 <= file.size() && !saw_iend) {
        std::uint32_t len = be32(&file[pos]);
        if (pos + 12 + len > file.size()) throw Error(ErrorCode::Format, "truncated PNG chunk");
        std::string type(reinterpret_cast<const char*>(&file[pos + 4]), 4);
        const unsigned char* data = &file[pos + 8];
        if (type == "IHDR") {
            if (len != 13) throw Error(ErrorCode::Format, "bad IHDR length");
            width = static_cast<int>(be32(data));
            height = static_cast<int>(be32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw Error(ErrorCode::Format, "interlaced PNG unsupported");
            saw_ihdr = true;
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            saw_iend = true;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || !saw_iend || idat.empty()) throw Error(ErrorCode::Format, "incomplete PNG");
    if (width <= 0 || height <= 0 || width > (1 << 14) || height > (1 << 14)) {
        throw Error(ErrorCode::Format, "implausible PNG dimensions");
    }
    if (bit_depth != 8) throw Error(ErrorCode::Format, "only 8-bit PNGs are supported");
    int channels;
    switch (color_type) {
        case 0: channels = 1; break;
        case 2: channels = 3; break;
        case 4: channels = 2; break;
        case 6: channels = 4; break;
        default: throw Error(ErrorCode::Format, "palette PNGs are unsupported");
    }

    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    std::vector<unsigned char> raw = inflate_all(idat, (stride + 1) * height);

    // undo per-scanline filters in place
    std::vector<unsigned char> prev(stride, 0);
    std::vector<unsigned char> cur(stride);
    int out_channels = channels >= 3 ? 3 : 1;  // alpha dropped
    ImageTensor img(out_channels, height, width);
    for (int y = 0; y < height; ++y) {
        const unsigned char* line = &raw[y * (stride + 1)];
        int filter = line[0];
        for (std::size_t i = 0; i < stride; ++i) {
            int x = line[1 + i];
            int a = i >= static_cast<std::size_t>(channels) ? cur[i - channels] : 0;
            int b = prev[i];
            int c = i >= static_cast<std::size_t>(channels) ? prev[i - channels] : 0;
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += paeth(a, b, c); break;
                default: throw Error(ErrorCode::Format, "bad PNG filter byte");
            }
            cur[i] = static_cast<unsigned char>(x & 0xff);
        }
        for (int px = 0; px < width; ++px) {
            for (int ch = 0; ch < out_channels; ++ch) {
                img.at(ch, y, px) = cur[px * channels + ch] / 255.0;
            }
        }
        std::swap(prev, cur);
    }
    return img;
}

ImageTensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Format, "cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5" && magic != "P6") {
        throw Error(ErrorCode::Format, "only binary P5/P6 PPM files are supported");
    }
    auto next_int = [&]() {
        // skip whitespace and '#' comments
        int c;
        while ((c = in.peek()) != EOF) {
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        long v = -1;
        in >> v;
        if (!in || v < 0) throw Error(ErrorCode::Format, "bad PPM header");
        return v;
    };
    long width = next_int();
    long height = next_int();
    long maxval = next_int();
    if (width <= 0 || height <= 0 || width > (1 << 14) || height > (1 << 14)) {
        throw Error(ErrorCode::Format, "implausible PPM dimensions");
    }
    if (maxval <= 0 || maxval > 255) {
        throw Error(ErrorCode::Format, "only 8-bit PPM files are supported");
    }
    in.get();  // single whitespace after maxval

    int channels = magic == "P6" ? 3 : 1;
    std::size_t count = static_cast<std::size_t>(width) * height * channels;
    std::vector<unsigned char> data(count);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count) {
        throw Error(ErrorCode::Format, "truncated PPM pixel data");
    }
    ImageTensor img(channels, static_cast<int>(height), static_cast<int>(width));
    std::size_t i = 0;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int ch = 0; ch < channels; ++ch) {
                img.at(ch, y, x) = data[i++] / static_cast<double>(maxval);
            }
        }
    }
    return img;
}

void write_png_gray(const std::string& path, const std::vector<unsigned char>& pixels, int width,
                    int height) {
    write_png(path, pixels, width, height, 1);
}

void write_png_rgb(const std::string& path, const std::vector<unsigned char>& pixels, int width,
                   int height) {
    write_png(path, pixels, width, height, 3);
}

void write_matrix_png(const Mat& m, double min_value, double max_value, const std::string& path) {
    std::vector<unsigned char> px(m.size());
    double span = max_value - min_value;
    for (std::size_t i = 0; i < m.d.size(); ++i) {
        double v = span > 0.0 ? (m.d[i] - min_value) / span : 0.0;
        px[i] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
    write_png_gray(path, px, m.cols, m.rows);
}

void write_delta_png(const ImageTensor& delta, double epsilon, const std::string& path) {
    if (delta.channels != 1 && delta.channels != 3) {
        throw Error(ErrorCode::Contract, "delta render needs 1 or 3 channels");
    }
    if (!(epsilon > 0.0)) throw Error(ErrorCode::Contract, "epsilon must be positive");
    std::vector<unsigned char> px(static_cast<std::size_t>(delta.height) * delta.width *
                                  delta.channels);
    std::size_t i = 0;
    for (int y = 0; y < delta.height; ++y) {
        for (int x = 0; x < delta.width; ++x) {
            for (int c = 0; c < delta.channels; ++c) {
                double v = (delta.at(c, y, x) / (2.0 * epsilon) + 0.5) * 255.0;
                px[i++] = static_cast<unsigned char>(std::clamp<long>(std::lround(v), 0, 255));
            }
        }
    }
    if (delta.channels == 3) {
        write_png_rgb(path, px, delta.width, delta.height);
    } else {
        write_png_gray(path, px, delta.width, delta.height);
    }
}

}  // namespace duap
