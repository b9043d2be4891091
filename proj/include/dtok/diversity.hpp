#ifndef DTOK_DIVERSITY_HPP
#define DTOK_DIVERSITY_HPP

#include <vector>

#include "dtok/tensor.hpp"

// The diversity objective: a pairwise squared-inner-product penalty that
// pushes distinct tokens' attention maps toward orthogonal (disjoint)
// support.

namespace dtok {

// Sum over examples and ordered token pairs (i, j), i != j, of
// <alpha_i, alpha_j>^2 over positions, divided by the batch size so the
// weight transfers across batch sizes. maps: (n, m, s) -> scalar.
Tensor diversity_loss(const Tensor& maps);

// Per example, O[i][j] = <alpha_i, alpha_j>^2. (n, m, s) -> (n, m, m),
// symmetric. The loss above equals the batch mean of each O's off-diagonal
// total.
Tensor pairwise_overlap_matrix(const Tensor& maps);

// Mean of the off-diagonal entries of every example's overlap matrix; the
// overlap figure reported by evaluation. Returns 0 when m == 1.
double mean_offdiagonal_overlap(const Tensor& maps);

// task_loss + lambda * (mean over the listed map stacks of their diversity
// loss). lambda = 0 returns task_loss unchanged, bit for bit.
Tensor combined_loss(const Tensor& task_loss, const std::vector<Tensor>& maps_list,
                     double lambda);

}  // namespace dtok

#endif  // DTOK_DIVERSITY_HPP
