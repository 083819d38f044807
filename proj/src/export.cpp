#include "pcgen/export.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

namespace pcgen {

namespace fs = std::filesystem;

void write_ply(const fs::path& path, const PointCloud& pc) {
    std::ofstream f(path);
    if (!f) throw ExportError("cannot write " + path.string());
    f << "ply\nformat ascii 1.0\ncomment pcgen point cloud\nelement vertex " << pc.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    char buf[96];
    for (std::size_t i = 0; i < pc.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g\n", pc.xyz[3 * i], pc.xyz[3 * i + 1], pc.xyz[3 * i + 2]);
        f << buf;
    }
    if (!f) throw ExportError("write failed: " + path.string());
}

PointCloud read_ply(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ExportError("cannot read " + path.string());
    std::string line;
    auto bad = [&](const std::string& why) { return ExportError(path.string() + ": " + why); };
    if (!std::getline(f, line) || line != "ply") throw bad("missing 'ply' magic");
    if (!std::getline(f, line) || line != "format ascii 1.0") throw bad("not 'format ascii 1.0'");
    std::size_t count = 0;
    bool in_vertex = false, seen_vertex = false;
    std::vector<std::string> props;
    while (std::getline(f, line) && line != "end_header") {
        std::istringstream ss(line);
        std::string kw;
        ss >> kw;
        if (kw == "comment" || kw == "obj_info" || kw.empty()) continue;
        if (kw == "element") {
            std::string name;
            ss >> name >> count;
            in_vertex = name == "vertex";
            if (in_vertex) seen_vertex = true;
            else if (seen_vertex) throw bad("elements after vertex are not supported");
        } else if (kw == "property") {
            std::string type, name;
            ss >> type >> name;
            if (in_vertex) {
                if (type != "float" && type != "double" && type != "float32" && type != "float64")
                    throw bad("unsupported vertex property type " + type);
                props.push_back(name);
            }
        } else {
            throw bad("unexpected header line '" + line + "'");
        }
    }
    if (line != "end_header") throw bad("missing end_header");
    if (!seen_vertex) throw bad("no vertex element");
    const auto col = [&](const std::string& n) {
        const auto it = std::find(props.begin(), props.end(), n);
        if (it == props.end()) throw bad("missing vertex property " + n);
        return static_cast<std::size_t>(it - props.begin());
    };
    const std::size_t cx = col("x"), cy = col("y"), cz = col("z");
    PointCloud pc;
    pc.xyz.reserve(3 * count);
    std::vector<double> row(props.size());
    for (std::size_t i = 0; i < count; ++i) {
        for (auto& v : row)
            if (!(f >> v)) throw bad("truncated vertex data at vertex " + std::to_string(i));
        pc.xyz.push_back(static_cast<float>(row[cx]));
        pc.xyz.push_back(static_cast<float>(row[cy]));
        pc.xyz.push_back(static_cast<float>(row[cz]));
    }
    return pc;
}

nlohmann::json DepthPngEncoding::to_json() const {
    return {{"encoding", "uint16 grayscale, value = round(depth * scale), clamped to [1, 65535]"},
            {"scale", scale},
            {"decode", "depth = value / scale"},
            {"background_value", 0},
            {"mask_threshold", threshold}};
}

namespace {

struct PngWrite {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* fp = nullptr;
    ~PngWrite() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

struct PngRead {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* fp = nullptr;
    ~PngRead() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

// Rows of `bytes_per_row` bytes in network order, written with libpng.
void write_png_rows(const fs::path& path, int w, int h, int bit_depth, int color_type,
                    const std::vector<std::uint8_t>& data, std::size_t bytes_per_row) {
    PngWrite p;
    p.fp = std::fopen(path.c_str(), "wb");
    if (!p.fp) throw ExportError("cannot write " + path.string());
    p.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!p.png) throw ExportError("png_create_write_struct failed");
    p.info = png_create_info_struct(p.png);
    if (!p.info) throw ExportError("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(p.png))) throw ExportError("libpng error writing " + path.string());
    png_init_io(p.png, p.fp);
    png_set_IHDR(p.png, p.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(p.png, p.info);
    for (int y = 0; y < h; ++y)
        png_write_row(p.png, const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * bytes_per_row));
    png_write_end(p.png, nullptr);
}

}  // namespace

void write_depth_png(const fs::path& path, const DepthMaskView& view, const DepthPngEncoding& enc) {
    const int w = view.width, h = view.height;
    std::vector<std::uint8_t> data(static_cast<std::size_t>(w) * h * 2);
    for (std::size_t i = 0; i < view.pixels(); ++i) {
        std::uint16_t v = 0;
        if (view.mask[i] >= enc.threshold && std::isfinite(view.depth[i]))
            v = static_cast<std::uint16_t>(std::clamp(std::llround(view.depth[i] * enc.scale), 1LL, 65535LL));
        data[2 * i] = static_cast<std::uint8_t>(v >> 8);
        data[2 * i + 1] = static_cast<std::uint8_t>(v & 0xff);
    }
    write_png_rows(path, w, h, 16, PNG_COLOR_TYPE_GRAY, data, static_cast<std::size_t>(w) * 2);
}

Gray16 read_gray16_png(const fs::path& path) {
    PngRead p;
    p.fp = std::fopen(path.c_str(), "rb");
    if (!p.fp) throw ExportError("cannot read " + path.string());
    p.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!p.png) throw ExportError("png_create_read_struct failed");
    p.info = png_create_info_struct(p.png);
    if (!p.info) throw ExportError("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(p.png))) throw ExportError("libpng error reading " + path.string());
    png_init_io(p.png, p.fp);
    png_read_info(p.png, p.info);
    if (png_get_bit_depth(p.png, p.info) != 16 || png_get_color_type(p.png, p.info) != PNG_COLOR_TYPE_GRAY)
        throw ExportError(path.string() + ": not a 16-bit grayscale PNG");
    Gray16 g;
    g.width = static_cast<int>(png_get_image_width(p.png, p.info));
    g.height = static_cast<int>(png_get_image_height(p.png, p.info));
    std::vector<std::uint8_t> row(static_cast<std::size_t>(g.width) * 2);
    g.pixels.reserve(static_cast<std::size_t>(g.width) * g.height);
    for (int y = 0; y < g.height; ++y) {
        png_read_row(p.png, row.data(), nullptr);
        for (int x = 0; x < g.width; ++x)
            g.pixels.push_back(static_cast<std::uint16_t>((row[2 * x] << 8) | row[2 * x + 1]));
    }
    return g;
}

Tensor read_rgb_png(const fs::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw ExportError("cannot read PNG " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw ExportError("cannot decode PNG " + path.string() + ": " + msg);
    }
    const std::int64_t H = img.height, W = img.width;
    std::vector<float> out(static_cast<std::size_t>(3 * H * W));
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < H * W; ++i)
            out[static_cast<std::size_t>(c * H * W + i)] = static_cast<float>(buf[static_cast<std::size_t>(3 * i + c)]) / 255.0f;
    return Tensor::from_data({3, H, W}, std::move(out));
}

void write_rgb_png(const fs::path& path, const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3) throw ExportError("write_rgb_png: expected [3, H, W]");
    const auto H = image.dim(1), W = image.dim(2);
    const auto d = image.data();
    std::vector<std::uint8_t> data(static_cast<std::size_t>(3 * H * W));
    for (std::int64_t i = 0; i < H * W; ++i)
        for (std::int64_t c = 0; c < 3; ++c)
            data[static_cast<std::size_t>(3 * i + c)] = static_cast<std::uint8_t>(
                std::lround(std::clamp(d[static_cast<std::size_t>(c * H * W + i)], 0.0f, 1.0f) * 255.0f));
    write_png_rows(path, static_cast<int>(W), static_cast<int>(H), 8, PNG_COLOR_TYPE_RGB, data,
                   static_cast<std::size_t>(3 * W));
}

}  // namespace pcgen
