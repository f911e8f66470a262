#pragma once

// Shared helpers for the test binaries.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "xmgc/image.hpp"
#include "xmgc/rng.hpp"
#include "xmgc/tensor.hpp"

namespace testutil {

/// Unique empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& label) {
        static std::uint64_t counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("xmgc_" + label + "_" + std::to_string(++counter) + "_" +
                 std::to_string(static_cast<std::uint64_t>(
                     std::hash<std::string>{}(label) & 0xffff)));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string str() const { return path_.string(); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline xmgc::Image random_image(int width, int height, xmgc::Rng& rng) {
    xmgc::Image img = xmgc::make_image(width, height);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(256));
    return img;
}

inline xmgc::Tensor random_tensor(const xmgc::Shape& shape, xmgc::Rng& rng, double lo = -1.0,
                                  double hi = 1.0, bool requires_grad = false) {
    return xmgc::Tensor::uniform(shape, rng, lo, hi, requires_grad);
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]));
    return worst;
}

/// Relative elementwise agreement with an absolute floor, suitable for f32
/// results checked against f64 oracles.
inline bool close(double a, double b, double rel = 1e-4, double abs_floor = 1e-5) {
    const double diff = std::abs(a - b);
    return diff <= abs_floor + rel * std::max(std::abs(a), std::abs(b));
}

}  // namespace testutil
