#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <iostream>
#include <sstream>

#include "mtuda/aalp.hpp"
#include "mtuda/cli.hpp"
#include "mtuda/data.hpp"
#include "mtuda/error.hpp"
#include "mtuda/metrics.hpp"
#include "mtuda/spectral.hpp"

namespace py = pybind11;
using namespace mtuda;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

template <class T, class A>
Grid<T> to_grid(const A& a, const char* what) {
  require(a.ndim() == 2, ErrorKind::shape_mismatch, std::string(what) + " must be 2-D");
  Grid<T> g(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), g.values().begin());
  return g;
}

template <class T>
py::array_t<T> to_array(const Grid<T>& g) {
  py::array_t<T> out({g.rows(), g.cols()});
  std::copy(g.values().begin(), g.values().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mean-teacher domain adaptation toolkit";

  py::register_exception<Error>(m, "Error", PyExc_ValueError);

  m.def(
      "fft_style_transfer",
      [](const DoubleArray& src, const DoubleArray& tgt, double beta) {
        return to_array(fft_style_transfer(to_grid<double>(src, "src"), to_grid<double>(tgt, "tgt"), beta));
      },
      py::arg("src"), py::arg("tgt"), py::arg("beta") = 0.04,
      "Swap the low-frequency amplitude of src for tgt's; phase is kept.");
  m.def(
      "histogram_match",
      [](const DoubleArray& src, const DoubleArray& tgt, std::size_t bins) {
        return to_array(histogram_match(to_grid<double>(src, "src"), to_grid<double>(tgt, "tgt"), bins));
      },
      py::arg("src"), py::arg("tgt"), py::arg("bins") = 256);

  m.def(
      "iou",
      [](const ByteArray& pred, const ByteArray& truth, std::uint8_t cls) {
        return iou(to_grid<std::uint8_t>(pred, "pred"), to_grid<std::uint8_t>(truth, "truth"), cls);
      },
      py::arg("pred"), py::arg("truth"), py::arg("cls") = 1);
  m.def(
      "dice",
      [](const ByteArray& pred, const ByteArray& truth, std::uint8_t cls) {
        return dice_score(to_grid<std::uint8_t>(pred, "pred"), to_grid<std::uint8_t>(truth, "truth"), cls);
      },
      py::arg("pred"), py::arg("truth"), py::arg("cls") = 1);
  m.def(
      "sample_stats",
      [](const std::vector<double>& v) {
        const auto s = sample_stats(v);
        return py::make_tuple(s.mean, s.std);
      },
      "Mean and sample standard deviation.");

  m.def(
      "select_patch",
      [](const DoubleArray& saliency, std::size_t image_rows, std::size_t image_cols, std::size_t patch_h,
         std::size_t patch_w) {
        const auto g = to_grid<double>(saliency, "saliency");
        double mean = 0;
        for (double v : g.values()) mean += v;
        mean /= static_cast<double>(g.size());
        const auto sel = select_patch({g, mean}, image_rows, image_cols, patch_h, patch_w);
        py::dict d;
        d["row"] = sel.bounds.row;
        d["col"] = sel.bounds.col;
        d["height"] = sel.bounds.height;
        d["width"] = sel.bounds.width;
        d["fallback"] = sel.fallback;
        d["component_size"] = sel.component_size;
        return d;
      },
      py::arg("saliency"), py::arg("image_rows"), py::arg("image_cols"), py::arg("patch_h"), py::arg("patch_w"));

  m.def(
      "synthetic_pair",
      [](int image_size, int cases, int slices_per_case, std::uint64_t seed) {
        SyntheticConfig c;
        c.image_size = image_size;
        c.cases = cases;
        c.slices_per_case = slices_per_case;
        c.validate();
        const auto d = gen_synthetic_domains(c, seed);
        auto pack = [](const std::vector<LabeledImage>& images) {
          py::list out;
          for (const auto& im : images) out.append(py::make_tuple(to_array(im.pixels), to_array(im.mask()), im.case_id));
          return out;
        };
        return py::make_tuple(pack(d.source), pack(d.target));
      },
      py::arg("image_size") = 64, py::arg("cases") = 4, py::arg("slices_per_case") = 2, py::arg("seed") = 0,
      "Source and target lists of (image, mask, case_id).");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the command-line tool in-process; returns (exit_code, stdout, stderr).");
}
