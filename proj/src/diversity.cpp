#include "dtok/diversity.hpp"

#include <cmath>

namespace dtok {

namespace {

// (m, m) with zeros on the diagonal, ones elsewhere
Tensor offdiagonal_ones(int64_t m) {
  std::vector<double> values(m * m, 1.0);
  for (int64_t i = 0; i < m; ++i) values[i * m + i] = 0.0;
  return Tensor::from({m, m}, std::move(values));
}

void check_maps_shape(const Tensor& maps) {
  if (maps.rank() != 3) {
    throw ShapeError("attention maps must be (n, m, s), got " + shape_str(maps.shape()));
  }
}

}  // namespace

Tensor diversity_loss(const Tensor& maps) {
  check_maps_shape(maps);
  const int64_t n = maps.shape()[0];
  const int64_t m = maps.shape()[1];
  if (m == 1) return mul_scalar(reduce_sum_all(maps), 0.0);  // no pairs, but keep grad flow
  Tensor gram = matmul(maps, transpose_last2(maps));         // (n, m, m)
  Tensor off = mul(square(gram), offdiagonal_ones(m));
  return mul_scalar(reduce_sum_all(off), 1.0 / static_cast<double>(n));
}

Tensor pairwise_overlap_matrix(const Tensor& maps) {
  check_maps_shape(maps);
  return square(matmul(maps, transpose_last2(maps)));
}

double mean_offdiagonal_overlap(const Tensor& maps) {
  check_maps_shape(maps);
  const int64_t n = maps.shape()[0];
  const int64_t m = maps.shape()[1];
  const int64_t s = maps.shape()[2];
  if (m == 1) return 0.0;
  double total = 0.0;
  for (int64_t k = 0; k < n; ++k) {
    const double* base = maps.data().data() + k * m * s;
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < m; ++j) {
        if (i == j) continue;
        double dot = 0.0;
        for (int64_t p = 0; p < s; ++p) dot += base[i * s + p] * base[j * s + p];
        total += dot * dot;
      }
    }
  }
  return total / static_cast<double>(n * m * (m - 1));
}

Tensor combined_loss(const Tensor& task_loss, const std::vector<Tensor>& maps_list,
                     double lambda) {
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw NumericError("lambda must be finite and non-negative");
  }
  if (lambda == 0.0 || maps_list.empty()) return task_loss;
  Tensor total = diversity_loss(maps_list[0]);
  for (size_t i = 1; i < maps_list.size(); ++i) {
    total = add(total, diversity_loss(maps_list[i]));
  }
  Tensor mean_div = mul_scalar(total, 1.0 / static_cast<double>(maps_list.size()));
  return add(task_loss, mul_scalar(mean_div, lambda));
}

}  // namespace dtok
