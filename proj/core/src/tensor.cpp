#include "deepmts/tensor.hpp"

#include <numeric>
#include <sstream>

namespace deepmts {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Volume5 as_volume5(const Shape& shape) {
  if (shape.size() != 5) throw ValidationError("expected 5-D activation, got " + to_string(shape));
  return {shape[0], shape[1], shape[2], shape[3], shape[4]};
}

}  // namespace deepmts
