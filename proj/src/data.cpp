// SPDX-License-Identifier: Apache-2.0
#include "lsep/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "lsep/io.hpp"
#include "lsep/rng.hpp"

namespace fs = std::filesystem;

namespace lsep::data {

namespace {

void check_image(const Image& im, const char* what) {
    if (im.channels < 1 || im.height < 1 || im.width < 1)
        throw ValidationError(std::string(what) + ": non-positive image dims");
    if (static_cast<int64_t>(im.values.size()) != im.numel())
        throw ValidationError(std::string(what) + ": " + std::to_string(im.values.size()) +
                              " values for " + std::to_string(im.numel()) + " pixels");
}

// Next whitespace-delimited header token, with '#' comments running to end
// of line as the format allows.
std::string next_token(std::istream& is, const std::string& path) {
    std::string tok;
    int c = is.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = is.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = is.get();
    }
    while (c != EOF && !std::isspace(c) && c != '#') {
        tok.push_back(static_cast<char>(c));
        c = is.get();
    }
    if (c != EOF) is.unget();
    if (tok.empty()) throw ValidationError("read_ppm: truncated header in '" + path + "'");
    return tok;
}

int64_t header_number(std::istream& is, const std::string& path, const char* what) {
    const std::string tok = next_token(is, path);
    int64_t v = 0;
    for (char ch : tok) {
        if (ch < '0' || ch > '9')
            throw ValidationError("read_ppm: bad " + std::string(what) + " '" + tok + "' in '" +
                                  path + "'");
        v = v * 10 + (ch - '0');
        if (v > 1 << 20) throw ValidationError("read_ppm: implausible " + std::string(what) +
                                               " in '" + path + "'");
    }
    return v;
}

// Deterministic Fisher-Yates permutation of 0..n-1.
std::vector<int64_t> shuffled_indices(int64_t n, std::mt19937_64& eng) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), int64_t{0});
    for (int64_t i = n - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(uniform_int(eng, 0, i))]);
    return order;
}

constexpr char kDataMagic[8] = {'L', 'S', 'E', 'P', 'D', 'A', 'T', 'A'};
constexpr uint32_t kDataVersion = 1;

}  // namespace

Image read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("read_ppm: cannot open '" + path + "'");

    const std::string magic = next_token(is, path);
    int64_t channels = 0;
    if (magic == "P6")
        channels = 3;
    else if (magic == "P5")
        channels = 1;
    else
        throw ValidationError("read_ppm: '" + path + "' is not binary PPM/PGM (magic '" + magic +
                              "')");

    const int64_t width = header_number(is, path, "width");
    const int64_t height = header_number(is, path, "height");
    const int64_t maxval = header_number(is, path, "maxval");
    if (width < 1 || height < 1)
        throw ValidationError("read_ppm: empty image in '" + path + "'");
    if (maxval < 1 || maxval > 255)
        throw ValidationError("read_ppm: unsupported maxval " + std::to_string(maxval) + " in '" +
                              path + "' (8-bit only)");
    is.get();  // the single whitespace byte separating header and payload

    const int64_t n = channels * height * width;
    std::vector<unsigned char> bytes(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(bytes.data()), n);
    if (is.gcount() != n)
        throw ValidationError("read_ppm: truncated payload in '" + path + "', expected " +
                              std::to_string(n) + " bytes");

    // Interleaved samples -> channel planes.
    Image im;
    im.channels = channels;
    im.height = height;
    im.width = width;
    im.values.resize(static_cast<size_t>(n));
    // Divide rather than multiply by a reciprocal so byte b maps to exactly
    // the double b/maxval, matching every other byte-to-value site.
    const double denom = static_cast<double>(maxval);
    for (int64_t p = 0; p < height * width; ++p)
        for (int64_t c = 0; c < channels; ++c)
            im.values[static_cast<size_t>(c * height * width + p)] =
                static_cast<double>(bytes[static_cast<size_t>(p * channels + c)]) / denom;
    return im;
}

void write_ppm(const std::string& path, const Image& im) {
    check_image(im, "write_ppm");
    if (im.channels != 3 && im.channels != 1)
        throw ValidationError("write_ppm: only 1- or 3-channel images, got " +
                              std::to_string(im.channels));
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ValidationError("write_ppm: cannot open '" + path + "'");
    os << (im.channels == 3 ? "P6" : "P5") << "\n"
       << im.width << " " << im.height << "\n255\n";

    const int64_t plane = im.height * im.width;
    std::vector<unsigned char> bytes(static_cast<size_t>(im.numel()));
    for (int64_t p = 0; p < plane; ++p)
        for (int64_t c = 0; c < im.channels; ++c) {
            const double v = im.values[static_cast<size_t>(c * plane + p)];
            const long long q = std::llround(std::clamp(v, 0.0, 1.0) * 255.0);
            bytes[static_cast<size_t>(p * im.channels + c)] = static_cast<unsigned char>(q);
        }
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ValidationError("write_ppm: write failed for '" + path + "'");
}

Image resize_bilinear(const Image& im, int64_t out_height, int64_t out_width) {
    check_image(im, "resize_bilinear");
    if (out_height < 1 || out_width < 1)
        throw ValidationError("resize_bilinear: non-positive output size");
    if (out_height == im.height && out_width == im.width) return im;

    Image out;
    out.channels = im.channels;
    out.height = out_height;
    out.width = out_width;
    out.values.resize(static_cast<size_t>(out.numel()));

    // Half-pixel centers: src = (dst + 0.5) * in/out - 0.5, taps clamped to
    // the border.
    const double sy = static_cast<double>(im.height) / static_cast<double>(out_height);
    const double sx = static_cast<double>(im.width) / static_cast<double>(out_width);
    const int64_t in_plane = im.height * im.width;
    const int64_t out_plane = out_height * out_width;
    for (int64_t y = 0; y < out_height; ++y) {
        const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        int64_t y0 = static_cast<int64_t>(std::floor(fy));
        const double wy = fy - static_cast<double>(y0);
        const int64_t y1 = std::clamp<int64_t>(y0 + 1, 0, im.height - 1);
        y0 = std::clamp<int64_t>(y0, 0, im.height - 1);
        for (int64_t x = 0; x < out_width; ++x) {
            const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            int64_t x0 = static_cast<int64_t>(std::floor(fx));
            const double wx = fx - static_cast<double>(x0);
            const int64_t x1 = std::clamp<int64_t>(x0 + 1, 0, im.width - 1);
            x0 = std::clamp<int64_t>(x0, 0, im.width - 1);
            for (int64_t c = 0; c < im.channels; ++c) {
                const double* plane = im.values.data() + c * in_plane;
                const double top = (1.0 - wx) * plane[y0 * im.width + x0] +
                                   wx * plane[y0 * im.width + x1];
                const double bottom = (1.0 - wx) * plane[y1 * im.width + x0] +
                                      wx * plane[y1 * im.width + x1];
                out.values[static_cast<size_t>(c * out_plane + y * out_width + x)] =
                    (1.0 - wy) * top + wy * bottom;
            }
        }
    }
    return out;
}

Image center_crop(const Image& im, int64_t size) {
    check_image(im, "center_crop");
    if (size < 1) throw ValidationError("center_crop: non-positive size");
    if (im.height < size || im.width < size)
        throw ValidationError("center_crop: image " + std::to_string(im.height) + "x" +
                              std::to_string(im.width) + " smaller than crop " +
                              std::to_string(size));
    const int64_t off_y = (im.height - size) / 2;
    const int64_t off_x = (im.width - size) / 2;

    Image out;
    out.channels = im.channels;
    out.height = size;
    out.width = size;
    out.values.resize(static_cast<size_t>(out.numel()));
    for (int64_t c = 0; c < im.channels; ++c)
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x)
                out.values[static_cast<size_t>((c * size + y) * size + x)] =
                    im.values[static_cast<size_t>((c * im.height + off_y + y) * im.width +
                                                  off_x + x)];
    return out;
}

std::vector<double> to_model_range(const std::vector<double>& unit) {
    std::vector<double> out(unit.size());
    for (size_t i = 0; i < unit.size(); ++i) out[i] = 2.0 * unit[i] - 1.0;
    return out;
}

std::vector<double> to_display_range(const std::vector<double>& signed_values) {
    std::vector<double> out(signed_values.size());
    for (size_t i = 0; i < signed_values.size(); ++i) out[i] = 0.5 * (signed_values[i] + 1.0);
    return out;
}

Dataset ingest_folder(const std::string& root, int64_t image_size, int64_t channels) {
    if (image_size < 2) throw ValidationError("ingest_folder: image_size must be >= 2");
    if (channels != 1 && channels != 3)
        throw ValidationError("ingest_folder: channels must be 1 or 3");
    if (!fs::is_directory(root))
        throw ValidationError("ingest_folder: '" + root + "' is not a directory");

    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty())
        throw ValidationError("ingest_folder: no class folders under '" + root + "'");

    Dataset ds;
    ds.num_classes = static_cast<int64_t>(class_dirs.size());
    ds.channels = channels;
    ds.height = image_size;
    ds.width = image_size;

    for (size_t label = 0; label < class_dirs.size(); ++label) {
        ds.class_names.push_back(class_dirs[label].filename().string());
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(class_dirs[label])) {
            if (!entry.is_regular_file()) continue;
            const std::string ext = entry.path().extension().string();
            if (ext == ".ppm" || ext == ".pgm") files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());

        int64_t usable = 0;
        for (const auto& file : files) {
            Image im;
            try {
                im = read_ppm(file.string());
            } catch (const ValidationError&) {
                ++ds.skipped;
                continue;
            }
            if (im.channels != channels || im.height < 2 || im.width < 2) {
                ++ds.skipped;
                continue;
            }
            if (im.height != image_size || im.width != image_size) {
                // Shorter side to the target, then take the middle square.
                int64_t rh = image_size, rw = image_size;
                if (im.height <= im.width)
                    rw = std::llround(static_cast<double>(im.width) *
                                      static_cast<double>(image_size) /
                                      static_cast<double>(im.height));
                else
                    rh = std::llround(static_cast<double>(im.height) *
                                      static_cast<double>(image_size) /
                                      static_cast<double>(im.width));
                im = center_crop(resize_bilinear(im, rh, rw), image_size);
            }
            const std::vector<double> scaled = to_model_range(im.values);
            ds.values.insert(ds.values.end(), scaled.begin(), scaled.end());
            ds.labels.push_back(static_cast<int>(label));
            ++usable;
        }
        if (usable == 0)
            throw ValidationError("ingest_folder: class '" + ds.class_names.back() +
                                  "' has no usable images");
    }
    return ds;
}

void write_container(const std::string& path, const Dataset& ds) {
    if (ds.count() < 1) throw ValidationError("write_container: empty dataset");
    if (static_cast<int64_t>(ds.values.size()) != ds.count() * ds.sample_numel())
        throw ValidationError("write_container: value buffer does not match geometry");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ValidationError("write_container: cannot open '" + path + "'");

    io::write_magic(os, kDataMagic);
    io::write_u32(os, kDataVersion);
    io::write_u32(os, static_cast<uint32_t>(ds.num_classes));
    io::write_u64(os, static_cast<uint64_t>(ds.count()));
    io::write_u32(os, static_cast<uint32_t>(ds.channels));
    io::write_u32(os, static_cast<uint32_t>(ds.height));
    io::write_u32(os, static_cast<uint32_t>(ds.width));
    for (int label : ds.labels) io::write_u32(os, static_cast<uint32_t>(label));

    // 8-bit samples: exact for anything that itself came from 8-bit rasters.
    std::vector<unsigned char> bytes(ds.values.size());
    for (size_t i = 0; i < ds.values.size(); ++i) {
        const double unit = std::clamp(0.5 * (ds.values[i] + 1.0), 0.0, 1.0);
        bytes[i] = static_cast<unsigned char>(std::llround(unit * 255.0));
    }
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ValidationError("write_container: write failed for '" + path + "'");
}

Dataset ingest_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("ingest_container: cannot open '" + path + "'");
    io::expect_magic(is, kDataMagic, "ingest_container");
    const uint32_t version = io::read_u32(is, "ingest_container: version");
    if (version != kDataVersion)
        throw ValidationError("ingest_container: unsupported version " + std::to_string(version));

    Dataset ds;
    ds.num_classes = io::read_u32(is, "ingest_container: num_classes");
    const uint64_t count = io::read_u64(is, "ingest_container: count");
    ds.channels = io::read_u32(is, "ingest_container: channels");
    ds.height = io::read_u32(is, "ingest_container: height");
    ds.width = io::read_u32(is, "ingest_container: width");
    if (ds.num_classes < 1 || count < 1)
        throw ValidationError("ingest_container: empty dataset in '" + path + "'");
    if (ds.channels < 1 || ds.height < 1 || ds.width < 1 || ds.channels > 16 ||
        ds.height > 4096 || ds.width > 4096)
        throw ValidationError("ingest_container: implausible geometry in '" + path + "'");

    ds.labels.resize(static_cast<size_t>(count));
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t label = io::read_u32(is, "ingest_container: label");
        if (label >= static_cast<uint64_t>(ds.num_classes))
            throw ValidationError("ingest_container: label " + std::to_string(label) +
                                  " outside [0, " + std::to_string(ds.num_classes) + ")");
        ds.labels[static_cast<size_t>(i)] = static_cast<int>(label);
    }

    const int64_t n = static_cast<int64_t>(count) * ds.sample_numel();
    std::vector<unsigned char> bytes(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(bytes.data()), n);
    if (is.gcount() != n)
        throw ValidationError("ingest_container: truncated payload in '" + path + "'");
    if (is.peek() != EOF)
        throw ValidationError("ingest_container: trailing data in '" + path + "'");

    ds.values.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        ds.values[static_cast<size_t>(i)] =
            2.0 * (static_cast<double>(bytes[static_cast<size_t>(i)]) / 255.0) - 1.0;
    return ds;
}

LatentBatch gather(const Dataset& ds, const std::vector<int64_t>& indices) {
    if (indices.empty()) throw ValidationError("gather: empty index list");
    const int64_t per = ds.sample_numel();
    LatentBatch batch;
    batch.shape = {static_cast<int64_t>(indices.size()), ds.channels, ds.height, ds.width};
    batch.values.resize(indices.size() * static_cast<size_t>(per));
    batch.labels.resize(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        const int64_t src = indices[i];
        if (src < 0 || src >= ds.count())
            throw ValidationError("gather: index " + std::to_string(src) + " outside [0, " +
                                  std::to_string(ds.count()) + ")");
        std::copy_n(ds.values.data() + src * per, per,
                    batch.values.data() + static_cast<int64_t>(i) * per);
        batch.labels[i] = ds.labels[static_cast<size_t>(src)];
    }
    return batch;
}

EpochOrder::EpochOrder(int64_t count, int64_t batch_size, uint64_t seed)
    : count_(count), batch_size_(batch_size), seed_(seed) {
    if (count_ < 1) throw ValidationError("EpochOrder: empty dataset");
    if (batch_size_ < 1 || batch_size_ > count_)
        throw ValidationError("EpochOrder: batch size " + std::to_string(batch_size_) +
                              " outside [1, " + std::to_string(count_) + "]");
}

std::vector<int64_t> EpochOrder::order(int64_t epoch) const {
    if (epoch < 0) throw ValidationError("EpochOrder: negative epoch");
    auto eng = RngStream(seed_, "data-order").at(static_cast<uint64_t>(epoch));
    return shuffled_indices(count_, eng);
}

std::vector<int64_t> EpochOrder::batch(int64_t step) const {
    if (step < 0) throw ValidationError("EpochOrder: negative step");
    const int64_t per_epoch = batches_per_epoch();
    const std::vector<int64_t> perm = order(step / per_epoch);
    const int64_t slot = step % per_epoch;
    return {perm.begin() + slot * batch_size_, perm.begin() + (slot + 1) * batch_size_};
}

Prefetcher::Prefetcher(const Dataset& ds, const EpochOrder& order, int64_t first_step,
                       int64_t last_step, size_t capacity)
    : queue_(capacity) {
    if (first_step < 0 || last_step < first_step)
        throw ValidationError("Prefetcher: bad step range");
    producer_ = std::thread([this, &ds, order, first_step, last_step] {
        try {
            for (int64_t step = first_step; step < last_step; ++step)
                if (!queue_.push(gather(ds, order.batch(step)))) return;  // consumer left
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mu_);
            error_ = std::current_exception();
        }
        queue_.close();
    });
}

Prefetcher::~Prefetcher() {
    queue_.close();
    if (producer_.joinable()) producer_.join();
}

std::optional<LatentBatch> Prefetcher::next() {
    std::optional<LatentBatch> batch = queue_.pop();
    if (!batch) {
        std::lock_guard<std::mutex> lock(err_mu_);
        if (error_) std::rethrow_exception(error_);
    }
    return batch;
}

}  // namespace lsep::data
