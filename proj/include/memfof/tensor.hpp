#pragma once

// Dense float32 tensor substrate. Row-major (channels, height, width) for
// images and feature maps; rank-3 volumes use (source-pixel, y, x). All ops
// are pure functions of immutable inputs and single-threaded, so results are
// bitwise reproducible for a fixed input.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace memfof {

struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};
struct ParamError : std::invalid_argument {
    explicit ParamError(const std::string& msg) : std::invalid_argument(msg) {}
};
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NotReadyError : std::runtime_error {
    explicit NotReadyError(const std::string& msg) : std::runtime_error(msg) {}
};

// Byte counter for live tensor payloads. The bench harness reads this instead
// of OS RSS so peak numbers are deterministic and comparable to the closed
// form memory model.
struct AllocStats {
    static std::atomic<long long> live;
    static std::atomic<long long> peak;

    static long long live_bytes() { return live.load(std::memory_order_relaxed); }
    static long long peak_bytes() { return peak.load(std::memory_order_relaxed); }
    static void reset_peak() { peak.store(live.load(std::memory_order_relaxed), std::memory_order_relaxed); }

    static void on_alloc(long long bytes) {
        long long now = live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
        long long prev = peak.load(std::memory_order_relaxed);
        while (now > prev && !peak.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
        }
    }
    static void on_free(long long bytes) { live.fetch_sub(bytes, std::memory_order_relaxed); }
};

template <class T>
struct CountingAllocator {
    using value_type = T;
    CountingAllocator() = default;
    template <class U>
    CountingAllocator(const CountingAllocator<U>&) {}

    T* allocate(std::size_t n) {
        AllocStats::on_alloc(static_cast<long long>(n * sizeof(T)));
        return static_cast<T*>(::operator new(n * sizeof(T)));
    }
    void deallocate(T* p, std::size_t n) {
        AllocStats::on_free(static_cast<long long>(n * sizeof(T)));
        ::operator delete(p);
    }
    bool operator==(const CountingAllocator&) const { return true; }
    bool operator!=(const CountingAllocator&) const { return false; }
};

using FloatVec = std::vector<float, CountingAllocator<float>>;

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(count(shape_)), 0.0f);
    }
    Tensor(std::vector<int> shape, float fill) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(count(shape_)), fill);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, float v) { return Tensor(std::move(shape), v); }

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    long long numel() const { return static_cast<long long>(data_.size()); }
    bool empty() const { return data_.empty(); }
    long long bytes() const { return numel() * static_cast<long long>(sizeof(float)); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& operator[](long long i) { return data_[static_cast<std::size_t>(i)]; }
    float operator[](long long i) const { return data_[static_cast<std::size_t>(i)]; }

    // rank-3 accessors (c, y, x)
    float& at(int c, int y, int x) {
        return data_[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
    }
    float at(int c, int y, int x) const {
        return data_[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
    }
    // rank-4 accessors (o, i, y, x)
    float& at4(int o, int i, int y, int x) {
        return data_[((static_cast<std::size_t>(o) * dim(1) + i) * dim(2) + y) * dim(3) + x];
    }
    float at4(int o, int i, int y, int x) const {
        return data_[((static_cast<std::size_t>(o) * dim(1) + i) * dim(2) + y) * dim(3) + x];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool bitwise_equal(const Tensor& other) const;
    bool all_finite() const;

    static long long count(const std::vector<int>& shape);

private:
    std::vector<int> shape_;
    FloatVec data_;
};

std::string shape_str(const std::vector<int>& shape);

// --- substrate ops -----------------------------------------------------

// Discrete cross-correlation. input (C,H,W), kernel (OC,C,KH,KW), zero padding.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);

// Gradient kernels for conv2d (used by the reverse-mode layer).
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& kernel, int stride, int padding,
                         int in_h, int in_w);
Tensor conv2d_grad_kernel(const Tensor& grad_out, const Tensor& input, int stride, int padding,
                          int kh, int kw);

// Non-overlapping 2x2 mean over the spatial dims of the trailing two axes.
// Odd trailing row/column is replicated so output dims are ceil(in/2). Only
// window == 2 is supported.
Tensor avg_pool2d(const Tensor& input, int window = 2);
Tensor avg_pool2d_grad(const Tensor& grad_out, int in_h, int in_w);

// Bilinear interpolation of input (C,H,W) at coords (2,Ho,Wo), channel 0 = x,
// channel 1 = y. Locations outside [0,W-1]x[0,H-1] contribute zeros.
Tensor bilinear_sample(const Tensor& input, const Tensor& coords);

// Numerically stabilized softmax along one axis.
Tensor softmax(const Tensor& input, int axis);

Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);
Tensor tanh_map(const Tensor& input);

// Bilinear resize with half-pixel centers and edge clamping (the usual image
// resize convention, distinct from the zero-padded flow lookup above).
Tensor resize_bilinear(const Tensor& input, int out_h, int out_w);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor concat_channels(const std::vector<const Tensor*>& parts);
Tensor slice_channels(const Tensor& input, int from, int to);
Tensor add_channel_bias(const Tensor& input, const Tensor& bias);

double mean(const Tensor& t);
double sum(const Tensor& t);
float max_abs(const Tensor& t);

}  // namespace memfof
