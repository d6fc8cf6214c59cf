#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "wdstagnn/numerics/tensor.hpp"

namespace test_support {

inline wdstagnn::Tensor random_tensor(wdstagnn::Shape shape, std::mt19937_64 &rng, double lo = -1.0, double hi = 1.0) {
    wdstagnn::Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (double &v : t.values()) {
        v = u(rng);
    }
    return t;
}

/// Fresh empty directory under the system temp path, removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string &tag) {
        path_ = std::filesystem::temp_directory_path() / ("wdstagnn_" + tag + "_" + std::to_string(std::random_device{}()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir &) = delete;
    TempDir &operator=(const TempDir &) = delete;

    std::string file(const std::string &name) const { return (path_ / name).string(); }
    const std::filesystem::path &path() const { return path_; }

private:
    std::filesystem::path path_;
};

} // namespace test_support
