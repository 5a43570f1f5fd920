#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "covmerge/costmodel.hpp"
#include "covmerge/cov.hpp"
#include "covmerge/linalg.hpp"
#include "covmerge/merge.hpp"
#include "covmerge/tensor_store.hpp"
#include "covmerge/toy.hpp"

namespace py = pybind11;
using namespace covmerge;

namespace {

py::array tensor_to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  if (t.dtype == Dtype::f64) {
    py::array_t<double> arr(shape);
    std::memcpy(arr.mutable_data(), t.data.data(), t.data.size());
    return arr;
  }
  py::array_t<float> arr(shape);
  std::memcpy(arr.mutable_data(), t.data.data(), t.data.size());
  return arr;
}

Tensor array_to_tensor(const py::array& value) {
  const bool is_f32 = py::isinstance<py::array_t<float>>(value);
  Tensor t;
  t.dtype = is_f32 ? Dtype::f32 : Dtype::f64;
  std::vector<std::size_t> shape;
  for (py::ssize_t i = 0; i < value.ndim(); ++i) {
    shape.push_back(static_cast<std::size_t>(value.shape(i)));
  }
  if (is_f32) {
    const auto arr = py::array_t<float, py::array::c_style | py::array::forcecast>::ensure(value);
    t = Tensor::zeros(shape, Dtype::f32);
    std::memcpy(t.data.data(), arr.data(), t.data.size());
  } else {
    const auto arr = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(value);
    t = Tensor::zeros(shape, Dtype::f64);
    std::memcpy(t.data.data(), arr.data(), t.data.size());
  }
  return t;
}

MergeConfig config_from_kwargs(const std::string& method, py::object alpha, double pinv_rtol,
                               double tsv_rank_fraction,
                               const std::vector<std::string>& always_average) {
  MergeConfig cfg;
  cfg.method = merge_method_from_string(method);
  if (!alpha.is_none()) cfg.alpha = alpha.cast<double>();
  cfg.pinv_rtol = pinv_rtol;
  cfg.tsv_rank_fraction = tsv_rank_fraction;
  cfg.always_average_patterns = always_average;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Data-free model merging: interference-minimization rules, covariance "
            "estimation from task vectors, checkpoint I/O and the merge cost model.";

  py::register_exception<FormatError>(m, "FormatError");
  py::register_exception<NumericalError>(m, "NumericalError");

  py::class_<Checkpoint>(m, "Checkpoint")
      .def(py::init<>())
      .def_readwrite("name", &Checkpoint::name)
      .def_readwrite("metadata", &Checkpoint::metadata)
      .def("tensor_names",
           [](const Checkpoint& c) {
             std::vector<std::string> names;
             for (const auto& [n, t] : c.tensors) names.push_back(n);
             return names;
           })
      .def("get", [](const Checkpoint& c, const std::string& name) {
        return tensor_to_array(c.tensors.at(name));
      })
      .def("set",
           [](Checkpoint& c, const std::string& name, const py::array& value) {
             c.tensors[name] = array_to_tensor(value);
           })
      .def("arrays",
           [](const Checkpoint& c) {
             py::dict out;
             for (const auto& [n, t] : c.tensors) out[py::str(n)] = tensor_to_array(t);
             return out;
           })
      .def("__eq__", [](const Checkpoint& a, const Checkpoint& b) { return a == b; })
      .def("__len__", [](const Checkpoint& c) { return c.tensors.size(); });

  py::class_<TaskVector>(m, "TaskVector")
      .def_readonly("task_id", &TaskVector::task_id)
      .def("get", [](const TaskVector& tv, const std::string& name) {
        return tensor_to_array(tv.deltas.at(name));
      })
      .def("tensor_names", [](const TaskVector& tv) {
        std::vector<std::string> names;
        for (const auto& [n, t] : tv.deltas) names.push_back(n);
        return names;
      });

  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
  m.def("save_checkpoint", &save_checkpoint, py::arg("checkpoint"), py::arg("path"));
  m.def("compute_task_vector", &compute_task_vector, py::arg("pretrained"),
        py::arg("fine_tuned"), py::arg("task_id"));

  m.def("svd",
        [](const Matrix& a) {
          const SvdFactors f = svd(a);
          return py::make_tuple(f.u, f.singular_values, f.vt);
        },
        py::arg("a"));
  m.def("pinv", &pinv, py::arg("a"), py::arg("rtol") = 0.0);
  m.def("frobenius_inner", &frobenius_inner, py::arg("a"), py::arg("b"));
  m.def("angular_distance", &angular_distance, py::arg("a"), py::arg("b"));
  m.def("spectral_norm", &spectral_norm, py::arg("a"));
  m.def("pearson", &pearson, py::arg("x"), py::arg("y"));

  m.def("empirical_covariance", &empirical_covariance, py::arg("samples"));
  m.def("actmat_gram", &actmat_gram, py::arg("delta"));
  m.def("kappa", &kappa, py::arg("c"), py::arg("c_hat"));

  m.def("merge_average", &merge_average, py::arg("ws"));
  m.def("merge_task_arithmetic", &merge_task_arithmetic, py::arg("w0"), py::arg("deltas"),
        py::arg("alpha"));
  m.def("merge_interference", &merge_interference, py::arg("ws"), py::arg("cs"),
        py::arg("rtol") = 0.0);
  m.def("merge_actmat", &merge_actmat, py::arg("ws"), py::arg("deltas"), py::arg("rtol") = 0.0);
  m.def("merge_iso_c", &merge_iso_c, py::arg("w0"), py::arg("deltas"), py::arg("alpha"));
  m.def("merge_tsv",
        [](const Matrix& w0, const std::vector<Matrix>& deltas, double alpha,
           double rank_fraction) { return merge_tsv(w0, deltas, alpha, rank_fraction); },
        py::arg("w0"), py::arg("deltas"), py::arg("alpha"), py::arg("rank_fraction") = 1.0);
  m.def("brute_force_minimizer", &brute_force_minimizer, py::arg("ws"), py::arg("cs"),
        py::arg("max_steps") = 2000000, py::arg("lr") = 0.0, py::arg("tol") = 1e-10);

  m.def("merge_checkpoints",
        [](const Checkpoint& pretrained, const std::vector<Checkpoint>& experts,
           const std::string& method, py::object alpha, double pinv_rtol,
           double tsv_rank_fraction, const std::vector<std::string>& always_average,
           py::object covariances) {
          TaskSet ts;
          ts.pretrained = pretrained;
          ts.experts = experts;
          if (!covariances.is_none()) {
            std::size_t index = 0;
            for (const auto& layer_map :
                 covariances.cast<std::vector<std::map<std::string, Matrix>>>()) {
              CovarianceBundle b;
              b.task_id = "task-" + std::to_string(index++);
              b.layer_covs = layer_map;
              ts.covariances.push_back(std::move(b));
            }
          }
          const MergeOutcome out = merge(
              ts, config_from_kwargs(method, alpha, pinv_rtol, tsv_rank_fraction, always_average));
          return py::make_tuple(out.merged, out.warnings);
        },
        py::arg("pretrained"), py::arg("experts"), py::arg("method"),
        py::arg("alpha") = py::none(), py::arg("pinv_rtol") = 0.0,
        py::arg("tsv_rank_fraction") = 1.0,
        py::arg("always_average") = std::vector<std::string>{"embed"},
        py::arg("covariances") = py::none());

  m.def("flops",
        [](const std::string& method, std::int64_t t, std::int64_t n, std::int64_t l) {
          const FlopCount c = flops({merge_method_from_string(method), t, n, l});
          return py::make_tuple(c.merge_flops, c.preprocess_flops);
        },
        py::arg("method"), py::arg("t"), py::arg("n"), py::arg("l") = 1);
  m.def("expensive_ops",
        [](const std::string& method, std::int64_t t) {
          return expensive_ops(merge_method_from_string(method), t);
        },
        py::arg("method"), py::arg("t"));
}
