#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hicl/router.hpp"

namespace hicl {

/// |A ∩ B| / |A ∪ B| of two ascending index sets; 1 when both are empty.
double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b);

struct JaccardAnalysis {
  /// Cell (i, j): mean Jaccard of active sets of a task-i and a task-j test
  /// sample, both encoded by task i's expert.
  Tensor matrix;
  double intra = 0.0;  // mean of the diagonal
  double inter = 0.0;  // mean of the off-diagonal cells
};

JaccardAnalysis jaccard_analysis(const HiclModel& model, const TaskStream& stream, std::size_t tasks,
                                 std::size_t pairs_per_cell = 200, std::uint64_t seed = 0);

/// M[i][j] = cos(u_i, u_j). Rows and columns of cold prototypes are zero.
Tensor prototype_similarity_matrix(const HiclModel& model);

struct RoutingMatrix {
  Tensor counts;      // tasks x experts, hard-gate selections on the test splits
  Tensor normalized;  // each row divided by its sum
};

RoutingMatrix routing_matrix(const HiclModel& model, const TaskStream& stream, std::size_t tasks);

/// CSV with a header row "<corner>,<col>0,<col>1,..." and rows "<row>i,...".
std::string matrix_csv(const Tensor& m, const std::string& corner, const std::string& row_prefix,
                       const std::string& col_prefix);

}  // namespace hicl
