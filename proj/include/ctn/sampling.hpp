#pragma once

// Geometric kernels that build the point hierarchy: farthest point sampling
// and fixed-size neighbourhood queries. Distances are evaluated in double
// precision so tie-breaking is stable.

#include <cstddef>
#include <span>
#include <vector>

#include "ctn/pointcloud.hpp"

namespace ctn {

/// One radius/member-count pair of a grouping scale.
struct GroupingScale {
  double radius = 0.0;
  std::size_t members = 0;
};

/// Scales ordered by strictly increasing radius.
struct GroupingSpec {
  std::vector<GroupingScale> scales;

  /// Throws std::invalid_argument unless radii increase strictly and K > 0.
  void validate() const;
};

/// Fixed-size neighbourhoods stored row-major: centers x members.
struct Neighborhoods {
  std::size_t centers = 0;
  std::size_t members = 0;
  std::vector<std::size_t> center_index;  // per row
  std::vector<std::size_t> index;         // centers * members

  std::span<const std::size_t> row(std::size_t c) const {
    return {index.data() + c * members, members};
  }
};

/// Greedy farthest point sampling. The first pick is the point farthest from
/// the centroid (ties: lexicographically smallest coordinates, then lowest
/// index); each later pick maximizes the distance to the chosen set (ties:
/// lowest index). Returned in selection order.
std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> positions, std::size_t count);

/// The center, then members within radius (inclusive) in index order. When
/// more than K-1 others are in range the nearest K-1 are kept (ties: smaller
/// coordinates, then lower index), so the member set is independent of input
/// order. Short rows are padded with the first non-center member, or with the
/// center when nothing else is in range.
Neighborhoods ball_query(std::span<const Vec3> positions, std::span<const std::size_t> centers,
                         double radius, std::size_t members);

/// The center followed by its K-1 nearest other points (ties: lowest index).
Neighborhoods knn_query(std::span<const Vec3> positions, std::span<const std::size_t> centers,
                        std::size_t members);

}  // namespace ctn
