#include "cfl/tensor.hpp"

#include <cmath>
#include <sstream>

#include "cfl/errors.hpp"

namespace cfl {

std::size_t shape_product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw StructuralError("tensor dimension must be positive, got " + std::to_string(d));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    std::ostringstream os;
    os << "tensor data length " << data_.size() << " does not match shape " << shape_str();
    throw StructuralError(os.str());
  }
}

double Tensor::value() const {
  if (data_.size() != 1) throw StructuralError("value() requires a scalar, shape is " + shape_str());
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ",";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

}  // namespace cfl
