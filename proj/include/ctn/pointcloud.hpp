#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ctn {

using Vec3 = std::array<double, 3>;

/// Points with unit normals in model units, optionally labelled.
struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> normals;
  std::optional<std::size_t> label;

  std::size_t size() const { return positions.size(); }
  bool operator==(const PointCloud&) const = default;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& message, std::size_t line)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + message : message),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

enum class CloudFormat { xyz, off, ply };

/// Guesses the format from the file extension (.xyz/.txt, .off, .ply).
CloudFormat format_from_path(const std::filesystem::path& path);

PointCloud parse_xyz(std::istream& in);
PointCloud parse_off(std::istream& in);
/// ASCII PLY only; uses nx/ny/nz vertex properties when present.
PointCloud parse_ply(std::istream& in);

PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format);
PointCloud load_cloud(const std::filesystem::path& path);

/// Six columns "x y z nx ny nz" at round-trip precision; a seventh column
/// holds per-point scores when given.
void write_xyz(std::ostream& out, const PointCloud& cloud, std::span<const double> scores = {});
void save_xyz(const std::filesystem::path& path, const PointCloud& cloud,
              std::span<const double> scores = {});

/// Smallest-eigenvector normals of the k-nearest-neighbour covariance,
/// flipped to point away from the centroid. Neighbourhoods of rank < 2 get
/// the fallback normal (0, 0, 1).
PointCloud estimate_normals(PointCloud cloud, std::size_t k = 16);

/// Centers on the centroid and scales the farthest point to unit norm.
PointCloud normalize(PointCloud cloud);

/// Draws m points uniformly: without replacement when m <= N, with
/// replacement otherwise. Deterministic for a given seed.
PointCloud resample(const PointCloud& cloud, std::size_t m, std::uint64_t seed);

enum class ShapeKind { sphere, cube, cylinder, cone, torus, plane, two_spheres, l_bracket };

ShapeKind shape_from_name(std::string_view name);
std::string_view shape_name(ShapeKind kind);
/// The eight synthetic classes in label order.
std::vector<ShapeKind> default_shape_classes();

/// Area-uniform surface samples of the canonical (unaugmented) shape with
/// analytic normals.
PointCloud sample_shape(ShapeKind kind, std::size_t points, std::mt19937_64& rng);

struct Dataset {
  std::vector<PointCloud> clouds;
  std::vector<std::string> class_names;
  std::string split = "train";

  std::size_t size() const { return clouds.size(); }
  std::size_t num_classes() const { return class_names.size(); }
};

/// Synthetic classification set: every sample gets a random rotation about
/// the z (up) axis, a per-axis scale in [0.8, 1.2], Gaussian noise of
/// sigma noise_sigma along the normal, then normalization.
Dataset synth_dataset(const std::vector<ShapeKind>& classes, std::size_t per_class,
                      std::size_t points, double noise_sigma, std::uint64_t seed,
                      std::string split = "train");

/// Writes every cloud as XYZ under dir/<split>/ and a manifest
/// dir/<split>.json listing {path, label} pairs plus class names.
std::filesystem::path write_manifest(const Dataset& dataset, const std::filesystem::path& dir);

/// Loads a manifest; with points set, each cloud is resampled (seeded by
/// its position in the manifest) and normalized.
Dataset load_manifest(const std::filesystem::path& manifest,
                      std::optional<std::size_t> points = std::nullopt, std::uint64_t seed = 0);

}  // namespace ctn
