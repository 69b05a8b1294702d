// Python module ctn3d._core: sampling, metrics, costs, synthetic data and
// trained-model inference on numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "ctn/checkpoint.hpp"
#include "ctn/costs.hpp"
#include "ctn/gradsuite.hpp"
#include "ctn/metrics.hpp"
#include "ctn/network.hpp"
#include "ctn/pointcloud.hpp"
#include "ctn/saliency.hpp"
#include "ctn/sampling.hpp"

namespace py = pybind11;
using namespace ctn;

namespace {

using Points = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Indices = py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>;

std::vector<Vec3> to_vec3(const Points& a, const char* what) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw std::invalid_argument(std::string(what) + ": expected shape (N, 3)");
  std::vector<Vec3> out(static_cast<std::size_t>(a.shape(0)));
  std::copy_n(a.data(), 3 * out.size(), out.front().data());
  return out;
}

Points from_vec3(const std::vector<Vec3>& v) {
  Points out({static_cast<py::ssize_t>(v.size()), py::ssize_t{3}});
  if (!v.empty()) std::copy_n(v.front().data(), 3 * v.size(), out.mutable_data());
  return out;
}

std::vector<std::size_t> to_indices(const Indices& a) {
  std::vector<std::size_t> out(static_cast<std::size_t>(a.size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (a.data()[i] < 0) throw std::invalid_argument("indices must be non-negative");
    out[i] = static_cast<std::size_t>(a.data()[i]);
  }
  return out;
}

template <typename T, typename Range>
py::array_t<T> vector_array(const Range& values) {
  py::array_t<T> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(values.size())});
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

Indices neighborhood_array(const Neighborhoods& n) {
  Indices out({static_cast<py::ssize_t>(n.centers), static_cast<py::ssize_t>(n.members)});
  std::copy(n.index.begin(), n.index.end(), out.mutable_data());
  return out;
}

PointCloud make_cloud(const Points& positions, const std::optional<Points>& normals) {
  PointCloud cloud;
  cloud.positions = to_vec3(positions, "positions");
  if (normals) {
    cloud.normals = to_vec3(*normals, "normals");
    if (cloud.normals.size() != cloud.positions.size()) throw std::invalid_argument("normals: row count differs");
  } else {
    cloud = estimate_normals(std::move(cloud));
  }
  return cloud;
}

py::tuple cloud_tuple(const PointCloud& c) { return py::make_tuple(from_vec3(c.positions), from_vec3(c.normals)); }

ModelOptions options(std::size_t points, std::size_t classes, std::size_t scales, const std::string& mechanism,
                     const std::string& op, bool pos_enc) {
  ModelOptions o;
  o.points = points;
  o.classes = classes;
  o.scales = scales;
  o.mechanism = parse_mechanism(mechanism);
  o.op = parse_operator(op);
  o.position_encoding = pos_enc;
  return o;
}

struct PyModel {
  Model<float> model;
  std::vector<std::string> class_names;

  std::vector<PointCloud> batch(const Points& positions, const std::optional<Points>& normals) const {
    const std::size_t n = model.config().points;
    if (positions.ndim() == 2) {
      std::optional<Points> nn = normals;
      return {make_cloud(positions, nn)};
    }
    if (positions.ndim() != 3 || positions.shape(2) != 3 || static_cast<std::size_t>(positions.shape(1)) != n) {
      throw std::invalid_argument("positions: expected shape (B, " + std::to_string(n) + ", 3)");
    }
    if (normals && (normals->ndim() != 3 || normals->shape(0) != positions.shape(0) ||
                    normals->shape(1) != positions.shape(1) || normals->shape(2) != 3)) {
      throw std::invalid_argument("normals: shape differs from positions");
    }
    std::vector<PointCloud> out;
    for (py::ssize_t b = 0; b < positions.shape(0); ++b) {
      PointCloud c;
      c.positions.resize(n);
      std::copy_n(positions.data(b, 0, 0), 3 * n, c.positions.front().data());
      if (normals) {
        c.normals.resize(n);
        std::copy_n(normals->data(b, 0, 0), 3 * n, c.normals.front().data());
      } else {
        c = estimate_normals(std::move(c));
      }
      out.push_back(std::move(c));
    }
    return out;
  }

  py::array_t<float> logits(const Points& positions, const std::optional<Points>& normals) const {
    const auto clouds = batch(positions, normals);
    std::vector<const PointCloud*> ptrs;
    for (const auto& c : clouds) ptrs.push_back(&c);
    NoGradGuard no_grad;
    const Tensor<float> out = model.logits(ptrs, Mode::eval);
    py::array_t<float> result({static_cast<py::ssize_t>(out.shape()[0]), static_cast<py::ssize_t>(out.shape()[1])});
    std::copy(out.data().begin(), out.data().end(), result.mutable_data());
    return result;
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Point-cloud classification with local feature aggregation and vector attention";

  m.def(
      "fps", [](const Points& positions, std::size_t count) {
        const auto p = to_vec3(positions, "positions");
        const auto picked = farthest_point_sample(p, count);
        return vector_array<std::int64_t>(picked);
      },
      py::arg("positions"), py::arg("count"), "Farthest point sampling; indices in selection order.");

  m.def(
      "ball_query", [](const Points& positions, const Indices& centers, double radius, std::size_t members) {
        const auto p = to_vec3(positions, "positions");
        return neighborhood_array(ball_query(p, to_indices(centers), radius, members));
      },
      py::arg("positions"), py::arg("centers"), py::arg("radius"), py::arg("members"),
      "Fixed-size radius neighbourhoods, one row per center, center first.");

  m.def(
      "knn", [](const Points& positions, const Indices& centers, std::size_t members) {
        const auto p = to_vec3(positions, "positions");
        return neighborhood_array(knn_query(p, to_indices(centers), members));
      },
      py::arg("positions"), py::arg("centers"), py::arg("members"), "Center plus its nearest other points.");

  m.def(
      "metrics", [](const Indices& labels, const Indices& predicted, std::size_t classes) {
        const Metrics r = compute_metrics(to_indices(labels), to_indices(predicted), classes);
        py::dict d;
        d["mean_accuracy"] = r.mean_accuracy;
        d["overall_accuracy"] = r.overall_accuracy;
        d["confusion"] = r.confusion;
        return d;
      },
      py::arg("labels"), py::arg("predicted"), py::arg("classes"), "Mean class accuracy, overall accuracy, confusion.");

  m.def(
      "count_costs",
      [](std::size_t points, std::size_t classes, std::size_t scales, const std::string& mechanism,
         const std::string& op, bool pos_enc) {
        const Costs c = count_costs(make_model_config(options(points, classes, scales, mechanism, op, pos_enc)));
        py::dict d;
        d["parameters"] = c.parameters;
        d["macs"] = c.macs;
        d["flops"] = c.flops();
        return d;
      },
      py::arg("points") = 1024, py::arg("classes") = 40, py::arg("scales") = 3, py::arg("mechanism") = "offset",
      py::arg("operator") = "sub", py::arg("pos_enc") = true, "Analytic parameter and FLOP count.");

  m.def(
      "synth",
      [](std::size_t per_class, std::size_t points, double noise, std::uint64_t seed, std::size_t classes) {
        auto kinds = default_shape_classes();
        if (classes == 0 || classes > kinds.size()) throw std::invalid_argument("classes must be in [1, 8]");
        kinds.resize(classes);
        const Dataset data = synth_dataset(kinds, per_class, points, noise, seed);
        const auto b = static_cast<py::ssize_t>(data.size());
        Points pos({b, static_cast<py::ssize_t>(points), py::ssize_t{3}});
        Points nrm({b, static_cast<py::ssize_t>(points), py::ssize_t{3}});
        Indices labels(std::vector<py::ssize_t>{b});
        for (py::ssize_t i = 0; i < b; ++i) {
          const PointCloud& c = data.clouds[static_cast<std::size_t>(i)];
          std::copy_n(c.positions.front().data(), 3 * points, pos.mutable_data(i, 0, 0));
          std::copy_n(c.normals.front().data(), 3 * points, nrm.mutable_data(i, 0, 0));
          labels.mutable_data()[i] = static_cast<std::int64_t>(*c.label);
        }
        return py::make_tuple(pos, nrm, labels, data.class_names);
      },
      py::arg("per_class"), py::arg("points") = 1024, py::arg("noise") = 0.01, py::arg("seed") = 1,
      py::arg("classes") = 8, "Synthetic shape dataset: (positions, normals, labels, class_names).");

  m.def(
      "load_cloud", [](const std::filesystem::path& path) { return cloud_tuple(load_cloud(path)); }, py::arg("path"),
      "Reads .xyz, .off or .ply; returns (positions, normals).");
  m.def(
      "normalize", [](const Points& positions, const std::optional<Points>& normals) {
        return cloud_tuple(normalize(make_cloud(positions, normals)));
      },
      py::arg("positions"), py::arg("normals") = py::none(), "Centers on the centroid and scales into the unit ball.");
  m.def(
      "resample", [](const Points& positions, const std::optional<Points>& normals, std::size_t count,
                     std::uint64_t seed) { return cloud_tuple(resample(make_cloud(positions, normals), count, seed)); },
      py::arg("positions"), py::arg("normals") = py::none(), py::arg("count") = 1024, py::arg("seed") = 1);

  m.def(
      "grad_suite", [](const std::string& scope, std::uint64_t seed) {
        py::list out;
        for (const auto& c : run_grad_suite(scope, seed)) {
          py::dict d;
          d["scope"] = c.scope;
          d["name"] = c.name;
          d["max_rel_error"] = c.report.max_rel_error;
          d["tolerance"] = c.tolerance;
          d["passed"] = c.report.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("scope") = "all", py::arg("seed") = 1, "Finite-difference gradient checks (ops, blocks, model, all).");

  py::class_<PyModel>(m, "Model")
      .def(py::init([](std::size_t points, std::size_t classes, std::size_t scales, const std::string& mechanism,
                       const std::string& op, bool pos_enc, std::uint64_t seed) {
             return PyModel{Model<float>(make_model_config(options(points, classes, scales, mechanism, op, pos_enc)), seed),
                            {}};
           }),
           py::arg("points") = 1024, py::arg("classes") = 40, py::arg("scales") = 3, py::arg("mechanism") = "offset",
           py::arg("operator") = "sub", py::arg("pos_enc") = true, py::arg("seed") = 1)
      .def_static(
          "load", [](const std::filesystem::path& path) {
            const Checkpoint ckpt = load_checkpoint(path);
            return PyModel{restore_model(ckpt), ckpt.class_names};
          },
          py::arg("path"), "Restores a trained model from checkpoint.json.")
      .def_property_readonly("points", [](const PyModel& p) { return p.model.config().points; })
      .def_property_readonly("classes", [](const PyModel& p) { return p.model.config().classes; })
      .def_readonly("class_names", &PyModel::class_names)
      .def_property_readonly("parameter_count", [](const PyModel& p) { return p.model.store().parameter_count(); })
      .def("logits", &PyModel::logits, py::arg("positions"), py::arg("normals") = py::none(),
           "Eval-mode logits for (N, 3) or (B, N, 3) positions; normals are estimated when omitted.")
      .def(
          "classify",
          [](const PyModel& p, const std::filesystem::path& path, std::uint64_t seed) {
            const PointCloud cloud = normalize(resample(load_cloud(path), p.model.config().points, seed));
            const auto l = p.logits(from_vec3(cloud.positions), from_vec3(cloud.normals));
            const Tensor<float> probs = softmax(Tensor<float>({1, static_cast<std::size_t>(l.shape(1))},
                                                              std::vector<float>(l.data(), l.data() + l.size())),
                                               1);
            return std::vector<float>(probs.data().begin(), probs.data().end());
          },
          py::arg("path"), py::arg("seed") = 1, "Class probabilities for a cloud file.")
      .def(
          "saliency",
          [](PyModel& p, const Points& positions, const std::optional<Points>& normals, std::size_t target) {
            const SaliencyResult r = saliency(p.model, make_cloud(positions, normals), target);
            return py::make_tuple(vector_array<double>(r.scores),
                                  r.degenerate);
          },
          py::arg("positions"), py::arg("normals") = py::none(), py::arg("target") = 0,
          "Per-point scores in [0, 1] and a degenerate flag.");
}
