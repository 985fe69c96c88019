#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <kdc/checkpoint.hpp>
#include <kdc/data.hpp>
#include <kdc/evalstats.hpp>
#include <kdc/labelspace.hpp>
#include <kdc/losses.hpp>
#include <kdc/pipeline.hpp>

#include <algorithm>
#include <string>
#include <vector>

namespace py = pybind11;

namespace {

using Vec = std::vector<double>;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vec(const kdc::Label& l) { return {l.probs().begin(), l.probs().end()}; }

py::tuple loss_tuple(const kdc::LossValue& v) { return py::make_tuple(v.value, v.grad_logits); }

kdc::ResultMatrix result_matrix(const std::vector<std::string>& methods,
                                const std::vector<std::string>& datasets, Array values) {
    if (values.ndim() != 2) throw std::invalid_argument("values must be a 2-d array (datasets x methods)");
    kdc::ResultMatrix m;
    m.methods = methods;
    m.datasets = datasets;
    if (static_cast<std::size_t>(values.shape(0)) != datasets.size() ||
        static_cast<std::size_t>(values.shape(1)) != methods.size()) {
        throw std::invalid_argument("values shape does not match datasets x methods");
    }
    m.values.assign(values.data(), values.data() + values.size());
    m.validate();
    return m;
}

py::dict friedman_dict(const kdc::FriedmanResult& f) {
    py::dict d;
    d["statistic"] = f.statistic;
    d["p_value"] = f.p_value;
    d["dof"] = f.dof;
    d["average_ranks"] = f.average_ranks;
    return d;
}

kdc::CalibrationStrategy parse_strategy(const std::string& s) {
    if (s == "ct" || s == "translate") return kdc::CalibrationStrategy::Translate;
    if (s == "cr" || s == "reorder") return kdc::CalibrationStrategy::Reorder;
    throw std::invalid_argument("unknown calibration strategy: " + s);
}

kdc::SeriesDataset make_dataset(Array series, const std::vector<std::size_t>& classes,
                                std::size_t num_classes, const std::string& name, bool test) {
    if (series.ndim() != 2) throw std::invalid_argument("series must be a 2-d array (N x length)");
    kdc::SeriesDataset d;
    d.name = name;
    d.split = test ? kdc::Split::Test : kdc::Split::Train;
    d.length = static_cast<std::size_t>(series.shape(1));
    if (num_classes == 0 && !classes.empty()) num_classes = *std::max_element(classes.begin(), classes.end()) + 1;
    d.num_classes = num_classes;
    d.series.assign(series.data(), series.data() + series.size());
    d.classes = classes;
    for (std::size_t k = 0; k < num_classes; ++k) d.class_labels.push_back(std::to_string(k));
    d.validate();
    return d;
}

Array dataset_series(const kdc::SeriesDataset& d) {
    Array out({d.size(), d.length});
    std::copy(d.series.begin(), d.series.end(), out.mutable_data());
    return out;
}

py::dict report_dict(const kdc::RunReport& r) {
    return py::module_::import("json").attr("loads")(kdc::report_json(r));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Calibrated knowledge distillation for time-series classification";

    py::register_exception<kdc::TrainingAborted>(m, "TrainingAborted", PyExc_RuntimeError);

    // label space
    m.def("softmax", [](const Vec& z) { return to_vec(kdc::softmax(kdc::Logits(z))); }, py::arg("logits"));
    m.def("softmax_tempered", [](const Vec& z, double tau) { return to_vec(kdc::softmax_tempered(kdc::Logits(z), tau)); },
          py::arg("logits"), py::arg("tau"));
    m.def("hard_label", [](std::size_t c, std::size_t n) { return to_vec(kdc::hard_label({c}, n)); },
          py::arg("cls"), py::arg("num_classes"));
    m.def("smooth_hard_label", [](const Vec& hard, double eps) { return to_vec(kdc::smooth_hard_label(kdc::Label(hard), eps)); },
          py::arg("hard"), py::arg("eps"));
    m.def("label_distance", [](const Vec& a, const Vec& b) { return kdc::label_distance(kdc::Label(a), kdc::Label(b)); });
    m.def("min_wrong_distance", &kdc::min_wrong_distance);
    m.def("needs_calibration", [](const Vec& t, const Vec& h) { return kdc::needs_calibration(kdc::Label(t), kdc::Label(h)); },
          py::arg("teacher"), py::arg("hard"));
    m.def("calibrate_translate", [](const Vec& t, const Vec& h) { return to_vec(kdc::calibrate_translate(kdc::Label(t), kdc::Label(h))); },
          py::arg("teacher"), py::arg("hard"));
    m.def("calibrate_reorder", [](const Vec& t, std::size_t c) { return to_vec(kdc::calibrate_reorder(kdc::Label(t), {c})); },
          py::arg("teacher"), py::arg("cls"));
    m.def("calibrate_set",
          [](const std::vector<Vec>& teacher, const std::vector<std::size_t>& classes, const std::string& strategy) {
              if (teacher.size() != classes.size()) throw std::invalid_argument("teacher and classes differ in length");
              std::vector<kdc::Label> t, h;
              for (std::size_t i = 0; i < teacher.size(); ++i) {
                  t.emplace_back(teacher[i]);
                  h.push_back(kdc::hard_label({classes[i]}, teacher[i].size()));
              }
              std::vector<Vec> out;
              for (const auto& l : kdc::calibrate_set(t, h, parse_strategy(strategy))) out.push_back(to_vec(l));
              return out;
          },
          py::arg("teacher"), py::arg("classes"), py::arg("strategy"));

    // losses, each returning (value, gradient w.r.t. logits)
    m.def("ce_loss", [](const Vec& hard, const Vec& pred) { return loss_tuple(kdc::ce_loss(kdc::Label(hard), kdc::Label(pred))); });
    m.def("ls_loss", [](const Vec& hard, const Vec& pred, double eps) {
        return loss_tuple(kdc::ls_loss(kdc::Label(hard), kdc::Label(pred), eps));
    });
    m.def("kl_div", [](const Vec& p, const Vec& q) { return loss_tuple(kdc::kl_div(kdc::Label(p), kdc::Label(q))); });
    m.def("kdc_loss", [](const Vec& cal, const Vec& pred) { return loss_tuple(kdc::kdc_loss(kdc::Label(cal), kdc::Label(pred))); });
    m.def("loss_from_logits",
          [](const std::string& kind, const Vec& logits, std::size_t cls, const Vec& soft) {
              return loss_tuple(kdc::loss_from_logits(kdc::parse_loss_kind(kind), logits, {cls, soft}));
          },
          py::arg("kind"), py::arg("logits"), py::arg("cls"), py::arg("soft") = Vec{});

    // statistics
    m.def("accuracy", [](const std::vector<std::size_t>& p, const std::vector<std::size_t>& t) { return kdc::accuracy(p, t); });
    m.def("friedman_test",
          [](const std::vector<std::string>& methods, const std::vector<std::string>& datasets, Array values) {
              return friedman_dict(kdc::friedman_test(result_matrix(methods, datasets, values)));
          },
          py::arg("methods"), py::arg("datasets"), py::arg("values"));
    m.def("wilcoxon_signed_rank", [](const Vec& a, const Vec& b) {
        auto w = kdc::wilcoxon_signed_rank(a, b);
        py::dict d;
        d["statistic"] = w.statistic;
        d["w_plus"] = w.w_plus;
        d["w_minus"] = w.w_minus;
        d["p_value"] = w.p_value;
        d["n"] = w.n;
        d["zeros"] = w.zeros;
        return d;
    });
    m.def("wilcoxon_exact_p", [](const Vec& a, const Vec& b) { return kdc::wilcoxon_exact_p(a, b); });
    m.def("holm_correct", [](const Vec& p, double alpha) { return kdc::holm_correct(p, alpha); },
          py::arg("pvalues"), py::arg("alpha") = 0.05);
    m.def("cd_diagram_data",
          [](const std::vector<std::string>& methods, const std::vector<std::string>& datasets, Array values, double alpha) {
              auto cd = kdc::cd_diagram_data(result_matrix(methods, datasets, values), alpha);
              py::list pairs;
              for (const auto& p : cd.pairs) {
                  py::dict e;
                  e["a"] = cd.methods[p.a];
                  e["b"] = cd.methods[p.b];
                  e["p_value"] = p.p_value;
                  e["reject"] = p.reject;
                  e["degenerate"] = p.degenerate;
                  pairs.append(e);
              }
              py::list cliques;
              for (const auto& c : cd.cliques) {
                  py::list names;
                  for (auto k : c) names.append(cd.methods[k]);
                  cliques.append(names);
              }
              py::dict d;
              d["methods"] = cd.methods;
              d["average_ranks"] = cd.average_ranks;
              d["friedman"] = friedman_dict(cd.friedman);
              d["pairs"] = pairs;
              d["cliques"] = cliques;
              d["alpha"] = cd.alpha;
              return d;
          },
          py::arg("methods"), py::arg("datasets"), py::arg("values"), py::arg("alpha") = 0.05);

    // data
    py::class_<kdc::SeriesDataset>(m, "SeriesDataset")
        .def(py::init(&make_dataset), py::arg("series"), py::arg("classes"), py::arg("num_classes") = 0,
             py::arg("name") = "dataset", py::arg("test") = false)
        .def_readonly("name", &kdc::SeriesDataset::name)
        .def_readonly("length", &kdc::SeriesDataset::length)
        .def_readonly("num_classes", &kdc::SeriesDataset::num_classes)
        .def_readonly("classes", &kdc::SeriesDataset::classes)
        .def_readonly("class_labels", &kdc::SeriesDataset::class_labels)
        .def_property_readonly("series", &dataset_series)
        .def("__len__", &kdc::SeriesDataset::size);

    py::class_<kdc::DatasetPair>(m, "DatasetPair")
        .def(py::init([](kdc::SeriesDataset train, kdc::SeriesDataset test) { return kdc::DatasetPair{train, test}; }),
             py::arg("train"), py::arg("test"))
        .def_readonly("train", &kdc::DatasetPair::train)
        .def_readonly("test", &kdc::DatasetPair::test);

    m.def("load_ucr_dataset", &kdc::load_ucr_dataset, py::arg("root"), py::arg("name"));
    m.def("znormalize", &kdc::znormalize, py::arg("data"));
    m.def("exclude_problematic", &kdc::exclude_problematic, py::arg("names"));

    // models and pipeline
    py::class_<kdc::ModelParams>(m, "ModelParams")
        .def_property_readonly("depth", [](const kdc::ModelParams& p) { return p.config.depth; })
        .def_property_readonly("num_classes", [](const kdc::ModelParams& p) { return p.config.num_classes; })
        .def_property_readonly("num_weights", [](const kdc::ModelParams& p) { return p.weights.size(); })
        .def("predict", &kdc::predict_classes, py::arg("data"))
        .def("accuracy", &kdc::evaluate_accuracy, py::arg("data"))
        .def("logits",
             [](const kdc::ModelParams& p, const kdc::SeriesDataset& d) {
                 auto z = kdc::predict_logits(p, d.as_batch());
                 Array out({d.size(), p.config.num_classes});
                 std::copy(z.begin(), z.end(), out.mutable_data());
                 return out;
             },
             py::arg("data"))
        .def("save", [](const kdc::ModelParams& p, const std::filesystem::path& path) { kdc::save_checkpoint(path, p); })
        .def_static("load", &kdc::load_checkpoint, py::arg("path"))
        .def("__eq__", [](const kdc::ModelParams& a, const kdc::ModelParams& b) { return a == b; });

    m.def("init_student", [](std::size_t c, std::uint64_t seed) { return kdc::init_params(kdc::student_config(c), seed); },
          py::arg("num_classes"), py::arg("seed") = 0);
    m.def("init_teacher", [](std::size_t c, std::uint64_t seed) { return kdc::init_params(kdc::teacher_config(c), seed); },
          py::arg("num_classes"), py::arg("seed") = 0);

    py::class_<kdc::ExperimentConfig>(m, "ExperimentConfig")
        .def(py::init([](const std::string& text) { return kdc::parse_experiment_config(text); }), py::arg("text") = "")
        .def("set",
             [](kdc::ExperimentConfig& c, const std::string& key, const std::string& value) {
                 c = kdc::parse_experiment_config(key + "=" + value + "\n", c);
             })
        .def("to_text", [](const kdc::ExperimentConfig& c) { return kdc::to_text(c); })
        .def("hash", [](const kdc::ExperimentConfig& c, const std::string& method) {
            return kdc::config_hash(c, kdc::parse_method(method));
        });

    py::class_<kdc::TeacherResult>(m, "TeacherResult")
        .def_readonly("params", &kdc::TeacherResult::params)
        .def_readonly("selected_run", &kdc::TeacherResult::selected_run)
        .def_readonly("seeds", &kdc::TeacherResult::seeds)
        .def_readonly("train_accuracy", &kdc::TeacherResult::train_accuracy)
        .def_readonly("holdout_accuracy", &kdc::TeacherResult::holdout_accuracy)
        .def_readonly("seconds", &kdc::TeacherResult::seconds);

    py::class_<kdc::TeacherLabels>(m, "TeacherLabels")
        .def_readonly("num_classes", &kdc::TeacherLabels::num_classes)
        .def_readonly("logits", &kdc::TeacherLabels::logits)
        .def_property_readonly("labels", [](const kdc::TeacherLabels& t) {
            std::vector<Vec> out;
            for (const auto& l : t.labels) out.push_back(to_vec(l));
            return out;
        });

    m.def("prepare_dataset", py::overload_cast<kdc::DatasetPair, const kdc::ExperimentConfig&>(&kdc::prepare_dataset),
          py::arg("data"), py::arg("config"));
    m.def("train_teacher", &kdc::train_teacher, py::arg("data"), py::arg("config"), py::arg("runs") = 1,
          py::call_guard<py::gil_scoped_release>());
    m.def("generate_teacher_labels", &kdc::generate_teacher_labels, py::arg("teacher"), py::arg("train"));
    m.def("run_method",
          [](const std::string& method, const kdc::DatasetPair& data, const kdc::ExperimentConfig& cfg, std::size_t runs,
             const kdc::TeacherLabels* teacher) {
              kdc::RunArtifacts art;
              {
                  py::gil_scoped_release release;
                  art = kdc::run_method(kdc::parse_method(method), data, cfg, runs, teacher);
              }
              return py::make_tuple(report_dict(art.report), art.models);
          },
          py::arg("method"), py::arg("data"), py::arg("config"), py::arg("runs") = 1, py::arg("teacher") = nullptr);
}
