// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <optional>
#include <queue>
#include <string>
#include <thread>
#include <vector>

#include "lsep/common.hpp"

namespace lsep::data {

// Single raster image, channel-major (c, h, w), values in display range
// [0, 1]. Dataset storage instead keeps model range [-1, 1]; the ingestion
// pipeline converts at the end.
struct Image {
    int64_t channels = 0;
    int64_t height = 0;
    int64_t width = 0;
    std::vector<double> values;

    int64_t numel() const { return channels * height * width; }
};

// Binary PPM (P6, 3 channels) / PGM (P5, 1 channel) with 8-bit samples.
// Bytes map to values b/255 on read; writes clamp to [0, 1] and round.
Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& im);

// Bilinear resampling with half-pixel centers and edge clamping. A
// same-size call returns the input unchanged.
Image resize_bilinear(const Image& im, int64_t out_height, int64_t out_width);

// Middle window of the given square size; the image must already be at
// least that large on both sides. Odd margins leave the extra row/column
// at the bottom/right.
Image center_crop(const Image& im, int64_t size);

// Display range [0, 1] <-> model range [-1, 1].
std::vector<double> to_model_range(const std::vector<double>& unit);
std::vector<double> to_display_range(const std::vector<double>& signed_values);

// A batch of data arrays (pixels or latents), the x0 of the interpolant,
// with the class labels alongside. Shape is (batch, channels, height,
// width) and values are row-major in model range.
struct LatentBatch {
    Shape shape;
    std::vector<double> values;
    std::vector<int> labels;
};

// In-memory labeled image set, every record preprocessed to the same
// (channels, size, size) geometry and model range. `skipped` counts inputs
// dropped during ingestion (unreadable, wrong channel count, degenerate
// size); `class_names` maps label id -> source folder name and is empty
// for container-borne sets.
struct Dataset {
    int64_t num_classes = 0;
    int64_t channels = 0;
    int64_t height = 0;
    int64_t width = 0;
    std::vector<double> values;  // (count, channels, height, width)
    std::vector<int> labels;     // dense in [0, num_classes)
    std::vector<std::string> class_names;
    int64_t skipped = 0;

    int64_t count() const { return static_cast<int64_t>(labels.size()); }
    int64_t sample_numel() const { return channels * height * width; }
    Shape sample_shape() const { return {channels, height, width}; }
};

// Directory-of-class-folders ingestion: every subdirectory of `root` is one
// class, labels assigned densely in sorted folder order, files visited in
// sorted name order. Images are resized (shorter side to `image_size`),
// center-cropped and mapped to model range. Unreadable files, wrong channel
// counts and degenerate sizes are skipped and counted; a class whose folder
// yields no usable image is an error.
Dataset ingest_folder(const std::string& root, int64_t image_size, int64_t channels);

// Single-file dataset container with 8-bit samples (exact for anything that
// came from PPM bytes). Class names are not stored; labels only.
void write_container(const std::string& path, const Dataset& ds);
Dataset ingest_container(const std::string& path);

// Copies the addressed records into one batch, labels included.
LatentBatch gather(const Dataset& ds, const std::vector<int64_t>& indices);

// Deterministic epoch shuffling addressed by global step: an epoch holds
// count/batch_size full batches (the remainder is dropped), and batch k of
// epoch e is a window into that epoch's permutation. Any step can be
// re-derived from the seed alone, so resuming needs no iterator state.
class EpochOrder {
public:
    EpochOrder(int64_t count, int64_t batch_size, uint64_t seed);

    int64_t batches_per_epoch() const { return count_ / batch_size_; }
    std::vector<int64_t> order(int64_t epoch) const;  // full permutation
    std::vector<int64_t> batch(int64_t step) const;   // batch_size indices

private:
    int64_t count_;
    int64_t batch_size_;
    uint64_t seed_;
};

// Bounded single-producer/single-consumer queue: push blocks while the
// queue holds `capacity` items (back pressure), pop blocks while empty.
// After close(), push returns false and pop drains then returns nullopt.
template <typename T>
class BoundedQueue {
public:
    explicit BoundedQueue(size_t capacity) : capacity_(capacity) {
        if (capacity_ == 0) throw ValidationError("BoundedQueue: capacity must be positive");
    }

    bool push(T v) {
        std::unique_lock<std::mutex> lock(mu_);
        not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
        if (closed_) return false;
        items_.push(std::move(v));
        not_empty_.notify_one();
        return true;
    }

    bool try_push(T v) {
        std::lock_guard<std::mutex> lock(mu_);
        if (closed_ || items_.size() >= capacity_) return false;
        items_.push(std::move(v));
        not_empty_.notify_one();
        return true;
    }

    std::optional<T> pop() {
        std::unique_lock<std::mutex> lock(mu_);
        not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
        if (items_.empty()) return std::nullopt;  // closed and drained
        T v = std::move(items_.front());
        items_.pop();
        not_full_.notify_one();
        return v;
    }

    bool try_pop(T& out) {
        std::lock_guard<std::mutex> lock(mu_);
        if (items_.empty()) return false;
        out = std::move(items_.front());
        items_.pop();
        not_full_.notify_one();
        return true;
    }

    void close() {
        std::lock_guard<std::mutex> lock(mu_);
        closed_ = true;
        not_empty_.notify_all();
        not_full_.notify_all();
    }

    size_t size() const {
        std::lock_guard<std::mutex> lock(mu_);
        return items_.size();
    }

private:
    mutable std::mutex mu_;
    std::condition_variable not_full_, not_empty_;
    std::queue<T> items_;
    size_t capacity_;
    bool closed_ = false;
};

// Producer thread assembling the batches for steps [first_step, last_step)
// ahead of the consumer, holding at most `capacity` of them. next() yields
// them in step order and returns nullopt once the range is exhausted.
// Destruction closes the queue and joins, so abandoning the stream early is
// safe.
class Prefetcher {
public:
    Prefetcher(const Dataset& ds, const EpochOrder& order, int64_t first_step,
               int64_t last_step, size_t capacity);
    ~Prefetcher();

    Prefetcher(const Prefetcher&) = delete;
    Prefetcher& operator=(const Prefetcher&) = delete;

    // Rethrows here if the producer failed.
    std::optional<LatentBatch> next();

private:
    BoundedQueue<LatentBatch> queue_;
    std::mutex err_mu_;
    std::exception_ptr error_;
    std::thread producer_;
};

// Pixel <-> latent interface mirroring encoder-based pipelines where the
// flow runs in a compressed space. The toolkit ships only the identity
// implementation; an external autoencoder would slot in here.
class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual Shape latent_shape(const Shape& pixel_shape) const = 0;
    virtual LatentBatch encode(const LatentBatch& pixels) const = 0;
    virtual LatentBatch decode(const LatentBatch& latents) const = 0;
};

// Identity codec: the flow runs directly in pixel space.
class PixelCodec : public LatentCodec {
public:
    Shape latent_shape(const Shape& pixel_shape) const override { return pixel_shape; }
    LatentBatch encode(const LatentBatch& pixels) const override { return pixels; }
    LatentBatch decode(const LatentBatch& latents) const override { return latents; }
};

}  // namespace lsep::data
