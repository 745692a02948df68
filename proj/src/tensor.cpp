#include "gimlab/tensor.hpp"

#include <cmath>
#include <sstream>

namespace gimlab {

int64_t Tensor::numel_of(const std::vector<int64_t>& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= d;
  }
  return n;
}

Tensor Tensor::full(std::vector<int64_t> s, double v) {
  Tensor t(std::move(s));
  for (auto& x : t.data) x = v;
  return t;
}

Tensor Tensor::from(std::vector<int64_t> s, std::vector<double> d) {
  if (numel_of(s) != static_cast<int64_t>(d.size()))
    throw std::invalid_argument("Tensor::from: size mismatch");
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(d);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

}  // namespace gimlab
