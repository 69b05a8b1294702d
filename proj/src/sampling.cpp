#include "ctn/sampling.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <string>

namespace ctn {

namespace {

double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

void check_centers(std::span<const Vec3> positions, std::span<const std::size_t> centers) {
  for (std::size_t c : centers) {
    if (c >= positions.size()) {
      throw std::out_of_range("center index " + std::to_string(c) + " outside cloud of " +
                              std::to_string(positions.size()) + " points");
    }
  }
}

}  // namespace

void GroupingSpec::validate() const {
  if (scales.empty()) throw std::invalid_argument("grouping spec needs at least one scale");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i].radius > 0.0) || scales[i].members == 0) {
      throw std::invalid_argument("grouping scale " + std::to_string(i) +
                                  " needs a positive radius and member count");
    }
    if (i > 0 && !(scales[i].radius > scales[i - 1].radius)) {
      throw std::invalid_argument("grouping radii must increase strictly");
    }
  }
}

std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> positions, std::size_t count) {
  const std::size_t n = positions.size();
  if (count == 0 || count > n) {
    throw std::invalid_argument("farthest_point_sample: cannot pick " + std::to_string(count) +
                                " of " + std::to_string(n) + " points");
  }
  Vec3 centroid{0, 0, 0};
  for (const auto& p : positions) {
    for (int d = 0; d < 3; ++d) centroid[d] += p[d];
  }
  for (double& c : centroid) c /= static_cast<double>(n);

  std::size_t first = 0;
  double best = squared_distance(positions[0], centroid);
  for (std::size_t i = 1; i < n; ++i) {
    const double d = squared_distance(positions[i], centroid);
    if (d > best || (d == best && positions[i] < positions[first])) {
      best = d;
      first = i;
    }
  }

  std::vector<std::size_t> picked{first};
  picked.reserve(count);
  std::vector<double> gap(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  taken[first] = 1;
  std::size_t last = first;
  while (picked.size() < count) {
    std::size_t next = 0;
    double far = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      gap[i] = std::min(gap[i], squared_distance(positions[i], positions[last]));
      if (!taken[i] && gap[i] > far) {
        far = gap[i];
        next = i;
      }
    }
    picked.push_back(next);
    taken[next] = 1;
    last = next;
  }
  return picked;
}

Neighborhoods ball_query(std::span<const Vec3> positions, std::span<const std::size_t> centers,
                         double radius, std::size_t members) {
  if (!(radius > 0.0) || members == 0) {
    throw std::invalid_argument("ball_query: radius and member count must be positive");
  }
  check_centers(positions, centers);
  Neighborhoods out;
  out.centers = centers.size();
  out.members = members;
  out.center_index.assign(centers.begin(), centers.end());
  out.index.reserve(centers.size() * members);
  const double r2 = radius * radius;
  std::vector<std::pair<double, std::size_t>> inside;
  for (std::size_t c : centers) {
    inside.clear();
    for (std::size_t j = 0; j < positions.size(); ++j) {
      const double d = squared_distance(positions[j], positions[c]);
      if (j != c && d <= r2) inside.emplace_back(d, j);
    }
    if (inside.size() > members - 1) {
      // Keep the nearest members; ties go to the smaller coordinates so the
      // kept set does not depend on input order.
      const auto take = static_cast<std::ptrdiff_t>(members - 1);
      std::nth_element(inside.begin(), inside.begin() + take, inside.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        if (positions[a.second] != positions[b.second]) return positions[a.second] < positions[b.second];
        return a.second < b.second;
      });
      inside.resize(members - 1);
      std::sort(inside.begin(), inside.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
    }
    out.index.push_back(c);
    for (const auto& [d, j] : inside) out.index.push_back(j);
    const std::size_t pad = inside.empty() ? c : inside.front().second;
    out.index.resize(out.index.size() + members - 1 - inside.size(), pad);
  }
  return out;
}

Neighborhoods knn_query(std::span<const Vec3> positions, std::span<const std::size_t> centers,
                        std::size_t members) {
  if (members == 0 || members > positions.size()) {
    throw std::invalid_argument("knn_query: K=" + std::to_string(members) + " invalid for " +
                                std::to_string(positions.size()) + " points");
  }
  check_centers(positions, centers);
  Neighborhoods out;
  out.centers = centers.size();
  out.members = members;
  out.center_index.assign(centers.begin(), centers.end());
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t c : centers) {
    order.clear();
    for (std::size_t j = 0; j < positions.size(); ++j) {
      if (j != c) order.emplace_back(squared_distance(positions[j], positions[c]), j);
    }
    const auto take = static_cast<std::ptrdiff_t>(members - 1);
    std::partial_sort(order.begin(), order.begin() + take, order.end());
    out.index.push_back(c);
    for (std::ptrdiff_t t = 0; t < take; ++t) out.index.push_back(order[static_cast<std::size_t>(t)].second);
  }
  return out;
}

}  // namespace ctn
