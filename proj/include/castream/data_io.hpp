#pragma once

// Synthetic shape dataset and zero-dependency image formats. Images are
// 3x32x32 reals in [0,1]; the class signal is the geometry of a single
// bright shape over a noise background, never its color, so heavy blurring
// genuinely destroys the evidence. Binary PPM (P6) and PGM (P5) carry
// images and masks; maxval is pinned to 255.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace castream {

namespace data {
constexpr std::int64_t kWidth = 32;
constexpr std::int64_t kHeight = 32;
constexpr std::int64_t kChannels = 3;
constexpr std::int64_t kClassCount = 4;
inline const char* kClassNames[kClassCount] = {"disk", "square", "triangle",
                                               "cross"};
// Object coverage bounds as a fraction of the image.
constexpr double kMinCoverage = 0.04;
constexpr double kMaxCoverage = 0.40;
}  // namespace data

struct SyntheticSample {
    std::vector<float> image;       // kChannels * kHeight * kWidth
    int label = 0;                  // index into kClassNames
    std::vector<std::uint8_t> mask;  // kHeight * kWidth, 1 inside the object
};

namespace detail {

// Rasterizers write 1 into the mask; all shapes are axis-aligned. Sizes are
// drawn so the coverage bound nearly always holds; the caller still
// re-checks and redraws on the rare miss.
inline void draw_disk(std::vector<std::uint8_t>& m, Rng& rng) {
    std::int64_t r = rng.uniform_int(4, 11);
    std::int64_t cx = rng.uniform_int(r + 1, data::kWidth - r - 2);
    std::int64_t cy = rng.uniform_int(r + 1, data::kHeight - r - 2);
    for (std::int64_t y = 0; y < data::kHeight; ++y)
        for (std::int64_t x = 0; x < data::kWidth; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
                m[static_cast<std::size_t>(y * data::kWidth + x)] = 1;
}

inline void draw_square(std::vector<std::uint8_t>& m, Rng& rng) {
    std::int64_t h = rng.uniform_int(3, 9);  // side 2h+1 in [7, 19]
    std::int64_t cx = rng.uniform_int(h + 1, data::kWidth - h - 2);
    std::int64_t cy = rng.uniform_int(h + 1, data::kHeight - h - 2);
    for (std::int64_t y = cy - h; y <= cy + h; ++y)
        for (std::int64_t x = cx - h; x <= cx + h; ++x)
            m[static_cast<std::size_t>(y * data::kWidth + x)] = 1;
}

inline void draw_triangle(std::vector<std::uint8_t>& m, Rng& rng) {
    // Upward isoceles: apex on top, linear widening toward the base.
    std::int64_t bh = rng.uniform_int(6, 11);   // base half-width
    std::int64_t ht = rng.uniform_int(9, 16);   // height
    std::int64_t cx = rng.uniform_int(bh + 1, data::kWidth - bh - 2);
    std::int64_t top = rng.uniform_int(1, data::kHeight - ht - 2);
    for (std::int64_t k = 0; k < ht; ++k) {
        std::int64_t half = (bh * k) / (ht - 1);
        std::int64_t y = top + k;
        for (std::int64_t x = cx - half; x <= cx + half; ++x)
            m[static_cast<std::size_t>(y * data::kWidth + x)] = 1;
    }
}

inline void draw_cross(std::vector<std::uint8_t>& m, Rng& rng) {
    std::int64_t la = rng.uniform_int(5, 9);  // arm half-length
    std::int64_t th = rng.uniform_int(1, 2);  // arm half-thickness
    std::int64_t cx = rng.uniform_int(la + 1, data::kWidth - la - 2);
    std::int64_t cy = rng.uniform_int(la + 1, data::kHeight - la - 2);
    for (std::int64_t y = cy - th; y <= cy + th; ++y)
        for (std::int64_t x = cx - la; x <= cx + la; ++x)
            m[static_cast<std::size_t>(y * data::kWidth + x)] = 1;
    for (std::int64_t y = cy - la; y <= cy + la; ++y)
        for (std::int64_t x = cx - th; x <= cx + th; ++x)
            m[static_cast<std::size_t>(y * data::kWidth + x)] = 1;
}

}  // namespace detail

// Balanced (within one) deterministic dataset: labels cycle through the
// classes; all randomness comes from the single seeded stream.
inline std::vector<SyntheticSample> generate_dataset(std::int64_t n,
                                                     std::uint64_t seed) {
    if (n < data::kClassCount)
        throw DomainError("dataset: need at least one sample per class");
    Rng rng(seed);
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<std::size_t>(n));
    const std::int64_t px = data::kWidth * data::kHeight;
    const std::int64_t min_px =
        static_cast<std::int64_t>(data::kMinCoverage * px) + 1;
    const std::int64_t max_px =
        static_cast<std::int64_t>(data::kMaxCoverage * px);

    for (std::int64_t i = 0; i < n; ++i) {
        SyntheticSample s;
        s.label = static_cast<int>(i % data::kClassCount);
        s.mask.assign(static_cast<std::size_t>(px), 0);
        for (int attempt = 0;; ++attempt) {
            std::fill(s.mask.begin(), s.mask.end(), 0);
            switch (s.label) {
                case 0: detail::draw_disk(s.mask, rng); break;
                case 1: detail::draw_square(s.mask, rng); break;
                case 2: detail::draw_triangle(s.mask, rng); break;
                default: detail::draw_cross(s.mask, rng); break;
            }
            std::int64_t cov = 0;
            for (std::uint8_t v : s.mask) cov += v;
            if (cov >= min_px && cov <= max_px) break;
            if (attempt > 64)
                throw InvariantError("dataset: cannot satisfy coverage bound");
        }

        s.image.assign(static_cast<std::size_t>(data::kChannels * px), 0.0f);
        float base[3], obj[3];
        for (int c = 0; c < 3; ++c) {
            base[c] = static_cast<float>(rng.uniform(0.15, 0.40));
            obj[c] = static_cast<float>(rng.uniform(0.60, 0.95));
        }
        for (std::int64_t p = 0; p < px; ++p) {
            bool inside = s.mask[static_cast<std::size_t>(p)] != 0;
            for (int c = 0; c < 3; ++c) {
                double v = inside ? obj[c] + rng.uniform(-0.05, 0.05)
                                  : base[c] + rng.uniform(-0.10, 0.10);
                if (v < 0.0) v = 0.0;
                if (v > 1.0) v = 1.0;
                s.image[static_cast<std::size_t>(c * px + p)] =
                    static_cast<float>(v);
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

template <typename T>
inline Tensor<T> to_tensor(const SyntheticSample& s) {
    Tensor<T> t =
        Tensor<T>::zeros({data::kChannels, data::kHeight, data::kWidth});
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t.data()[i] = static_cast<T>(s.image[static_cast<std::size_t>(i)]);
    return t;
}

// ---------------------------------------------------------------------------
// Netpbm binary formats

struct PnmImage {
    std::int64_t width = 0, height = 0;
    int channels = 1;  // 1 = PGM, 3 = PPM
    std::vector<std::uint8_t> bytes;
};

inline std::uint8_t quantize_unit(double v) {
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

namespace detail {

inline void pnm_write(const std::string& path, const PnmImage& img) {
    if (img.width < 1 || img.height < 1)
        throw DomainError("pnm: empty image");
    if (static_cast<std::int64_t>(img.bytes.size()) !=
        img.width * img.height * img.channels)
        throw ShapeError("pnm: byte count does not match dimensions");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.bytes.data()),
            static_cast<std::streamsize>(img.bytes.size()));
    if (!f) throw IoError("short write to '" + path + "'");
}

struct PnmParser {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;
    const std::string& path;

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError(path + ": " + what + " at byte " + std::to_string(pos));
    }

    int get() {
        if (pos >= buf.size()) fail("unexpected end of file");
        return buf[pos++];
    }

    void skip_space() {
        // Whitespace and '#' comments are both separators in the header.
        while (pos < buf.size()) {
            int c = buf[pos];
            if (c == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }

    std::int64_t parse_uint() {
        skip_space();
        if (pos >= buf.size() || buf[pos] < '0' || buf[pos] > '9')
            fail("expected an unsigned integer");
        std::int64_t v = 0;
        while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
            v = v * 10 + (buf[pos] - '0');
            if (v > 1 << 30) fail("integer out of range");
            ++pos;
        }
        return v;
    }
};

}  // namespace detail

inline PnmImage read_pnm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    detail::PnmParser p{buf, 0, path};

    int m0 = p.get(), m1 = p.get();
    PnmImage img;
    if (m0 == 'P' && m1 == '6') img.channels = 3;
    else if (m0 == 'P' && m1 == '5') img.channels = 1;
    else {
        p.pos = 0;
        p.fail("not a binary PPM/PGM (expected P6 or P5)");
    }
    img.width = p.parse_uint();
    img.height = p.parse_uint();
    std::int64_t maxval = p.parse_uint();
    if (maxval != 255) p.fail("unsupported maxval (only 255)");
    // Exactly one whitespace byte separates the header from the payload.
    int sep = p.get();
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') {
        --p.pos;
        p.fail("missing whitespace after maxval");
    }
    if (img.width < 1 || img.height < 1) p.fail("degenerate dimensions");
    std::size_t need = static_cast<std::size_t>(img.width * img.height *
                                                img.channels);
    if (buf.size() - p.pos < need) {
        p.pos = buf.size();
        p.fail("truncated pixel payload (need " + std::to_string(need) +
               " bytes)");
    }
    if (buf.size() - p.pos > need)
        p.fail("trailing bytes after pixel payload");
    img.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(p.pos),
                     buf.end());
    return img;
}

inline void write_ppm(const std::string& path, std::int64_t w, std::int64_t h,
                      const std::vector<std::uint8_t>& rgb) {
    detail::pnm_write(path, PnmImage{w, h, 3, rgb});
}

inline void write_pgm(const std::string& path, std::int64_t w, std::int64_t h,
                      const std::vector<std::uint8_t>& gray) {
    detail::pnm_write(path, PnmImage{w, h, 1, gray});
}

// Interleaves a planar (3,H,W) unit-range image into PPM byte order.
template <typename T>
inline std::vector<std::uint8_t> image_bytes(const Tensor<T>& img) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw ShapeError("image_bytes: expects a (3,H,W) tensor");
    std::int64_t h = img.dim(1), w = img.dim(2), px = h * w;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(px * 3));
    for (std::int64_t p = 0; p < px; ++p)
        for (int c = 0; c < 3; ++c)
            out[static_cast<std::size_t>(p * 3 + c)] =
                quantize_unit(static_cast<double>(img.data()[c * px + p]));
    return out;
}

// Deinterleaves decoded pixel bytes into a planar (C,H,W) unit-range tensor.
template <typename T>
inline Tensor<T> image_tensor(const PnmImage& img) {
    if (img.channels != 1 && img.channels != 3)
        throw DomainError("image_tensor: expects 1 or 3 channels");
    std::int64_t c = img.channels, px = img.height * img.width;
    if (static_cast<std::int64_t>(img.bytes.size()) != c * px)
        throw ShapeError("image_tensor: byte count does not match dims");
    Tensor<T> out = Tensor<T>::zeros({c, img.height, img.width});
    for (std::int64_t p = 0; p < px; ++p)
        for (std::int64_t k = 0; k < c; ++k)
            out.data()[k * px + p] =
                static_cast<T>(img.bytes[static_cast<std::size_t>(p * c + k)]) /
                static_cast<T>(255);
    return out;
}

// Saliency overlay: 0.5 alpha blend of a linear blue-to-red heat ramp.
template <typename T>
inline std::vector<std::uint8_t> overlay_bytes(const Tensor<T>& img,
                                               const std::vector<T>& saliency,
                                               std::int64_t sal_h,
                                               std::int64_t sal_w) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw ShapeError("overlay: expects a (3,H,W) image");
    if (sal_h != img.dim(1) || sal_w != img.dim(2))
        throw ShapeError("overlay: saliency dims do not match the image");
    std::int64_t px = sal_h * sal_w;
    if (static_cast<std::int64_t>(saliency.size()) != px)
        throw ShapeError("overlay: saliency size mismatch");
    std::vector<std::uint8_t> out(static_cast<std::size_t>(px * 3));
    for (std::int64_t p = 0; p < px; ++p) {
        double v = static_cast<double>(saliency[static_cast<std::size_t>(p)]);
        if (v < 0.0) v = 0.0;
        if (v > 1.0) v = 1.0;
        double heat[3] = {v, 0.0, 1.0 - v};
        for (int c = 0; c < 3; ++c) {
            double base = static_cast<double>(img.data()[c * px + p]);
            out[static_cast<std::size_t>(p * 3 + c)] =
                quantize_unit(0.5 * base + 0.5 * heat[c]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset directory layout: img_%05d.ppm, mask_%05d.pgm, labels.csv,
// meta.json. Bytes are a pure function of (samples, seed).

inline void save_dataset(const std::string& dir,
                         const std::vector<SyntheticSample>& samples,
                         std::uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::int64_t px = data::kWidth * data::kHeight;
    std::string labels = "index,label,class\n";
    char name[64];
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        std::vector<std::uint8_t> rgb(static_cast<std::size_t>(px * 3));
        for (std::int64_t p = 0; p < px; ++p)
            for (int c = 0; c < 3; ++c)
                rgb[static_cast<std::size_t>(p * 3 + c)] = quantize_unit(
                    s.image[static_cast<std::size_t>(c * px + p)]);
        std::snprintf(name, sizeof name, "img_%05zu.ppm", i);
        write_ppm(dir + "/" + name, data::kWidth, data::kHeight, rgb);

        std::vector<std::uint8_t> gray(static_cast<std::size_t>(px));
        for (std::int64_t p = 0; p < px; ++p)
            gray[static_cast<std::size_t>(p)] =
                s.mask[static_cast<std::size_t>(p)] ? 255 : 0;
        std::snprintf(name, sizeof name, "mask_%05zu.pgm", i);
        write_pgm(dir + "/" + name, data::kWidth, data::kHeight, gray);

        labels += std::to_string(i) + "," + std::to_string(s.label) + "," +
                  data::kClassNames[s.label] + "\n";
    }
    std::ofstream lf(dir + "/labels.csv", std::ios::binary);
    if (!lf) throw IoError("cannot write labels.csv");
    lf << labels;

    std::string meta = "{\n  \"classes\": [";
    for (std::int64_t c = 0; c < data::kClassCount; ++c) {
        if (c) meta += ", ";
        meta += std::string("\"") + data::kClassNames[c] + "\"";
    }
    meta += "],\n  \"height\": " + std::to_string(data::kHeight) +
            ",\n  \"n\": " + std::to_string(samples.size()) +
            ",\n  \"seed\": " + std::to_string(seed) +
            ",\n  \"width\": " + std::to_string(data::kWidth) + "\n}\n";
    std::ofstream mf(dir + "/meta.json", std::ios::binary);
    if (!mf) throw IoError("cannot write meta.json");
    mf << meta;
}

inline std::vector<SyntheticSample> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream lf(dir + "/labels.csv");
    if (!lf) throw IoError("cannot open '" + dir + "/labels.csv'");
    std::string line;
    if (!std::getline(lf, line) || line.rfind("index,label", 0) != 0)
        throw IoError(dir + "/labels.csv: bad header row");
    std::vector<SyntheticSample> out;
    const std::int64_t px = data::kWidth * data::kHeight;
    char name[64];
    while (std::getline(lf, line)) {
        if (line.empty()) continue;
        std::size_t c1 = line.find(',');
        std::size_t c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw IoError(dir + "/labels.csv: malformed row '" + line + "'");
        std::size_t idx = static_cast<std::size_t>(
            std::stoll(line.substr(0, c1)));
        int label = static_cast<int>(std::stol(line.substr(c1 + 1,
                                                           c2 - c1 - 1)));
        if (label < 0 || label >= data::kClassCount)
            throw IoError(dir + "/labels.csv: label out of range");

        std::snprintf(name, sizeof name, "img_%05zu.ppm", idx);
        PnmImage img = read_pnm(dir + "/" + name);
        if (img.channels != 3 || img.width != data::kWidth ||
            img.height != data::kHeight)
            throw IoError(std::string(name) + ": unexpected geometry");
        std::snprintf(name, sizeof name, "mask_%05zu.pgm", idx);
        PnmImage msk = read_pnm(dir + "/" + name);
        if (msk.channels != 1 || msk.width != data::kWidth ||
            msk.height != data::kHeight)
            throw IoError(std::string(name) + ": unexpected geometry");

        SyntheticSample s;
        s.label = label;
        s.image.assign(static_cast<std::size_t>(px * 3), 0.0f);
        for (std::int64_t p = 0; p < px; ++p)
            for (int c = 0; c < 3; ++c)
                s.image[static_cast<std::size_t>(c * px + p)] =
                    static_cast<float>(
                        img.bytes[static_cast<std::size_t>(p * 3 + c)]) /
                    255.0f;
        s.mask.assign(static_cast<std::size_t>(px), 0);
        for (std::int64_t p = 0; p < px; ++p)
            s.mask[static_cast<std::size_t>(p)] =
                msk.bytes[static_cast<std::size_t>(p)] >= 128 ? 1 : 0;
        out.push_back(std::move(s));
    }
    if (out.empty()) throw IoError(dir + ": dataset is empty");
    return out;
}

}  // namespace castream
