#pragma once

#include <gtest/gtest.h>
#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <unistd.h>

#include "attrinet/attrinet.hpp"

namespace testing_support {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("attrinet_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

/// Small architecture that keeps network tests fast.
inline attrinet::ArchConfig tiny_arch(int C = 3, int size = 16) {
  auto a = attrinet::ArchConfig::desk(C, size);
  a.gen_channels = 4;
  a.critic_channels = 4;
  a.res_blocks = 1;
  a.critic_layers = 2;
  a.pool_factor = 4;
  return a;
}

/// Central finite-difference gradient of a scalar function of `x` (double precision).
inline torch::Tensor numeric_grad(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x,
                                  double h = 1e-6) {
  auto g = torch::zeros_like(x);
  auto flat = x.clone().contiguous();
  auto* p = flat.data_ptr<double>();
  auto* gp = g.data_ptr<double>();
  for (int64_t i = 0; i < flat.numel(); ++i) {
    double old = p[i];
    p[i] = old + h;
    double up = f(flat);
    p[i] = old - h;
    double down = f(flat);
    p[i] = old;
    gp[i] = (up - down) / (2 * h);
  }
  return g;
}

/// max |a-b| / max(1e-8, max |b|)
inline double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
  double denom = std::max(1e-8, b.abs().max().item<double>());
  return (a - b).abs().max().item<double>() / denom;
}

template <typename F>
std::string error_code_of(F&& f) {
  try {
    f();
  } catch (const attrinet::Error& e) {
    return e.code();
  }
  return "";
}

}  // namespace testing_support
