#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "satfuse/common.hpp"

namespace satfuse {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor and reverse-mode tape node in one. Values are
// immutable once the producing op has written them; only `grad` mutates
// afterwards (single-writer during a backward pass). Gradients accumulate
// with += so repeated backward passes sum; zero_grad() resets.
template <typename T>
class Tensor : public std::enable_shared_from_this<Tensor<T>> {
public:
    using Ptr = std::shared_ptr<Tensor<T>>;

    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // same length as data when requires_grad, else empty

    std::vector<Ptr> parents;
    std::function<void()> backward_fn;  // reads this->grad, accumulates into parents

    Tensor(Shape s, std::vector<T> d, bool rg = false)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        for (auto dim : shape)
            if (dim <= 0) throw DimensionError("tensor dim must be positive, got shape " + shape_str(shape));
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw DimensionError("data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        if (requires_grad) grad.assign(data.size(), T(0));
    }

    static Ptr zeros(Shape s, bool rg = false) {
        auto n = shape_numel(s);
        return std::make_shared<Tensor<T>>(std::move(s), std::vector<T>(static_cast<std::size_t>(n), T(0)), rg);
    }

    static Ptr full(Shape s, T v, bool rg = false) {
        auto n = shape_numel(s);
        return std::make_shared<Tensor<T>>(std::move(s), std::vector<T>(static_cast<std::size_t>(n), v), rg);
    }

    static Ptr from(Shape s, std::vector<T> d, bool rg = false) {
        return std::make_shared<Tensor<T>>(std::move(s), std::move(d), rg);
    }

    static Ptr scalar(T v, bool rg = false) { return from({1}, {v}, rg); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return shape[i]; }
    std::size_t rank() const { return shape.size(); }

    void ensure_grad() {
        requires_grad = true;
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }

    void accumulate_grad(std::span<const T> g) {
        if (!requires_grad) return;
        if (g.size() != data.size()) throw DimensionError("gradient size mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    Ptr detached() const {
        return from(shape, data, false);
    }

    template <typename U>
    std::shared_ptr<Tensor<U>> cast() const {
        std::vector<U> d(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) d[i] = static_cast<U>(data[i]);
        return Tensor<U>::from(shape, std::move(d), false);
    }
};

template <typename T>
using TensorPtr = typename Tensor<T>::Ptr;

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Thread-local switch: when grad mode is off, ops skip tape construction.
namespace detail {
inline thread_local bool g_grad_enabled = true;
}

inline bool grad_enabled() { return detail::g_grad_enabled; }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
    ~NoGradGuard() { detail::g_grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Reverse-mode sweep from `root` (a scalar unless `seed` is supplied).
// Topological order over the tape, then each node's backward_fn pushes its
// grad into the parents. Accumulates into existing grads.
template <typename T>
void backward(const TensorPtr<T>& root, const std::vector<T>* seed = nullptr) {
    if (!root->requires_grad) throw NumericError("backward() on a tensor without grad");
    if (seed) {
        if (static_cast<std::int64_t>(seed->size()) != root->numel())
            throw DimensionError("backward seed size mismatch");
    } else if (root->numel() != 1) {
        throw DimensionError("backward() without seed requires a scalar root");
    }

    std::vector<Tensor<T>*> order;
    std::unordered_set<Tensor<T>*> visited;
    std::vector<std::pair<Tensor<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor<T>* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    if (seed) {
        for (std::size_t i = 0; i < seed->size(); ++i) root->grad[i] += (*seed)[i];
    } else {
        root->grad[0] += T(1);
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

// ---------------------------------------------------------------------------
// TSR1 tensor file format: 8-byte magic "TSR1\0\0\0\0", one JSON header line
// {"shape":[...],"dtype":"f32"|"f64","order":"LE"}, newline, raw LE payload.

namespace detail {
template <typename T>
constexpr const char* tsr_dtype() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}
}  // namespace detail

template <typename T>
void write_tsr(const std::filesystem::path& path, const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path.string());
    static const char magic[8] = {'T', 'S', 'R', '1', 0, 0, 0, 0};
    os.write(magic, 8);
    std::ostringstream hdr;
    hdr << "{\"shape\":[";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
        if (i) hdr << ",";
        hdr << t.shape[i];
    }
    hdr << "],\"dtype\":\"" << detail::tsr_dtype<T>() << "\",\"order\":\"LE\"}\n";
    const std::string h = hdr.str();
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(T)));
    if (!os) throw IoError("short write: " + path.string());
}

// Parsed TSR1 header; used by the generic reader below.
struct TsrHeader {
    Shape shape;
    std::string dtype;
};

TsrHeader parse_tsr_header(const std::string& line);

template <typename T>
TensorPtr<T> read_tsr(const std::filesystem::path& path) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path.string());
    char magic[8];
    is.read(magic, 8);
    static const char want[8] = {'T', 'S', 'R', '1', 0, 0, 0, 0};
    if (!is || std::memcmp(magic, want, 8) != 0)
        throw FormatError("bad TSR1 magic in " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw FormatError("missing TSR1 header in " + path.string());
    const TsrHeader hdr = parse_tsr_header(line);
    if (hdr.dtype != detail::tsr_dtype<T>())
        throw FormatError("dtype " + hdr.dtype + " does not match requested type in " + path.string());
    const auto n = shape_numel(hdr.shape);
    std::vector<T> buf(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(T)));
    if (!is) throw FormatError("truncated TSR1 payload in " + path.string());
    return Tensor<T>::from(hdr.shape, std::move(buf));
}

}  // namespace satfuse
