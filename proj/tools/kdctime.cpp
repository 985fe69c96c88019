// Command-line driver for the teacher -> labels -> calibration -> student
// flow. Artifacts live under <workdir>/<dataset>/.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "kdc/checkpoint.hpp"
#include "kdc/data.hpp"
#include "kdc/evalstats.hpp"
#include "kdc/pipeline.hpp"
#include "kdc/soft_label_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace kdc;

namespace {

struct Common {
    std::string ucr_root;
    std::string config;
    std::string workdir = "kdc_work";
    std::vector<std::string> settings;
    std::int64_t seed = -1;
    std::size_t workers = 0;
};

ExperimentConfig experiment(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
    std::string overrides;
    for (const auto& s : c.settings) overrides += s + "\n";
    cfg = parse_experiment_config(overrides, cfg);
    if (c.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(c.seed);
    if (c.workers > 0) cfg.workers = c.workers;
    cfg.validate();
    return cfg;
}

fs::path ucr_root(const Common& c) {
    if (auto r = resolve_ucr_root(c.ucr_root)) return *r;
    throw std::runtime_error("no UCR root: pass --ucr-root or set KDC_UCR_ROOT");
}

fs::path dataset_dir(const Common& c, const std::string& dataset) {
    const fs::path d = fs::path(c.workdir) / dataset;
    fs::create_directories(d);
    return d;
}

std::string fixed(double v, int digits = 4) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(digits);
    s << v;
    return s.str();
}

TeacherLabels read_teacher_outputs(const fs::path& dir) {
    const auto logits = read_logits(dir / "teacher_logits.csv");
    const auto labels = read_soft_labels(dir / "teacher_labels.csv");
    if (logits.rows.size() != labels.labels.size()) {
        throw std::runtime_error(dir.string() + ": teacher logits and labels differ in length; rerun gen-labels");
    }
    return TeacherLabels{logits.num_classes, logits.rows, labels.labels};
}

int cmd_train_teacher(const Common& c, const std::string& dataset, std::size_t runs) {
    auto cfg = experiment(c);
    if (runs > 0) cfg.teacher_runs = runs;
    const auto data = prepare_dataset(ucr_root(c), dataset, cfg);
    const auto res = train_teacher(data, cfg, cfg.teacher_runs);
    const auto dir = dataset_dir(c, dataset);
    save_checkpoint(dir / "teacher.kdc", res.params);
    json j;
    j["dataset"] = dataset;
    j["selected_run"] = res.selected_run;
    j["selection"] = cfg.teacher_selection == TeacherSelection::Holdout ? "holdout" : "train";
    j["seeds"] = res.seeds;
    j["train_accuracy"] = res.train_accuracy;
    j["holdout_accuracy"] = res.holdout_accuracy;
    j["seconds"] = res.seconds;
    write_file_atomic(dir / "teacher.json", j.dump(2) + "\n");
    for (std::size_t r = 0; r < res.seeds.size(); ++r) {
        std::cout << "run " << r << " seed " << res.seeds[r] << "  train " << fixed(res.train_accuracy[r]) << "  test "
                  << fixed(res.holdout_accuracy[r]) << "  " << fixed(res.seconds[r], 1) << " s"
                  << (r == res.selected_run ? "  <- selected" : "") << "\n";
    }
    std::cout << "wrote " << (dir / "teacher.kdc").string() << "\n";
    return 0;
}

int cmd_gen_labels(const Common& c, const std::string& dataset, const std::string& checkpoint) {
    const auto cfg = experiment(c);
    const auto data = prepare_dataset(ucr_root(c), dataset, cfg);
    const auto dir = dataset_dir(c, dataset);
    const fs::path ckpt = checkpoint.empty() ? dir / "teacher.kdc" : fs::path(checkpoint);
    const auto teacher = load_checkpoint(ckpt);
    const auto out = generate_teacher_labels(teacher, data.train);
    const std::string source = "teacher-" + dataset + "-" + fnv1a_hex(ckpt.filename().string());
    write_logits(dir / "teacher_logits.csv", out.logits, source);
    write_soft_labels(dir / "teacher_labels.csv", out.labels, source);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < out.labels.size(); ++i) wrong += out.labels[i].argmax() != data.train.classes[i];
    std::cout << out.labels.size() << " labels, teacher wrong on " << wrong << "; wrote "
              << (dir / "teacher_labels.csv").string() << " and teacher_logits.csv\n";
    return 0;
}

int cmd_calibrate(const Common& c, const std::string& dataset, const std::string& strategy) {
    const auto cfg = experiment(c);
    const auto data = prepare_dataset(ucr_root(c), dataset, cfg);
    const auto dir = dataset_dir(c, dataset);
    const auto teacher = read_teacher_outputs(dir);
    const Method m = strategy == "ct" ? Method::kdct() : Method::kdcr();
    const auto targets = build_targets(m, data.train, &teacher);
    std::vector<Label> labels;
    std::size_t changed = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        labels.emplace_back(targets[i].soft);
        changed += labels.back() != teacher.labels[i];
    }
    const fs::path out = dir / ("calibrated_" + strategy + ".csv");
    write_soft_labels(out, labels, "calibrated-" + strategy + "-" + dataset);
    std::cout << changed << " of " << labels.size() << " labels calibrated; every target peaks at its class; wrote "
              << out.string() << "\n";
    return 0;
}

int cmd_train_student(const Common& c, const std::string& dataset, const std::string& method_text, std::size_t runs) {
    const auto cfg = experiment(c);
    const Method method = parse_method(method_text);
    const auto data = prepare_dataset(ucr_root(c), dataset, cfg);
    const auto dir = dataset_dir(c, dataset);
    std::optional<TeacherLabels> teacher;
    if (method.needs_teacher()) teacher = read_teacher_outputs(dir);
    const auto art = run_method(method, data, cfg, runs, teacher ? &*teacher : nullptr);
    const fs::path students = dir / "students" / method.spec();
    fs::create_directories(students);
    for (std::size_t r = 0; r < art.models.size(); ++r) {
        save_checkpoint(students / ("run" + std::to_string(r) + ".kdc"), art.models[r]);
    }
    fs::create_directories(dir / "reports");
    const fs::path report = dir / "reports" / (method.spec() + ".json");
    save_report(report, art.report);
    const auto& rep = art.report;
    for (std::size_t r = 0; r < rep.accuracies.size(); ++r) {
        std::cout << "run " << r << " seed " << rep.seeds[r] << "  acc " << fixed(rep.accuracies[r]) << "  epochs "
                  << rep.epochs[r] << "  " << fixed(rep.train_seconds[r], 1) << " s\n";
    }
    std::cout << rep.method << " on " << dataset << ": " << fixed(rep.mean) << " +- " << fixed(rep.std)
              << "; wrote " << report.string() << "\n";
    return 0;
}

int cmd_evaluate(const Common& c, const std::string& dataset, const std::string& checkpoint) {
    const auto cfg = experiment(c);
    const auto data = prepare_dataset(ucr_root(c), dataset, cfg);
    const fs::path ckpt = checkpoint.empty() ? dataset_dir(c, dataset) / "teacher.kdc" : fs::path(checkpoint);
    const auto model = load_checkpoint(ckpt);
    std::cout << ckpt.string() << ": train " << fixed(evaluate_accuracy(model, data.train)) << "  test "
              << fixed(evaluate_accuracy(model, data.test)) << "\n";
    return 0;
}

int cmd_compare(const Common& c, const std::vector<std::string>& methods, const std::vector<std::string>& datasets,
                const std::string& out, double alpha) {
    ResultMatrix m;
    for (const auto& text : methods) m.methods.push_back(parse_method(text).name());
    m.datasets = datasets;
    json runs = json::object();
    for (const auto& d : datasets) {
        for (const auto& text : methods) {
            const auto spec = parse_method(text).spec();
            const fs::path p = fs::path(c.workdir) / d / "reports" / (spec + ".json");
            if (!fs::exists(p)) throw std::runtime_error("missing " + p.string() + "; run train-student first");
            const auto rep = load_report(p);
            m.values.push_back(rep.mean);
            runs[d][rep.method] = rep.accuracies;
        }
    }
    m.validate();
    const auto cd = cd_diagram_data(m, alpha);

    std::cout << "average ranks (1 = best) over " << datasets.size() << " datasets\n";
    for (std::size_t k = 0; k < cd.methods.size(); ++k) {
        std::cout << "  " << cd.methods[k] << "  " << fixed(cd.average_ranks[k], 3) << "\n";
    }
    std::cout << "Friedman chi2 " << fixed(cd.friedman.statistic, 4) << " (dof " << cd.friedman.dof << "), p "
              << cd.friedman.p_value << "\n";
    std::cout << "pairwise Wilcoxon, Holm alpha " << alpha << "\n";
    for (const auto& p : cd.pairs) {
        std::cout << "  " << cd.methods[p.a] << " vs " << cd.methods[p.b] << "  p " << p.p_value
                  << (p.degenerate ? " (too few nonzero differences)" : "") << (p.reject ? "  significant" : "") << "\n";
    }
    std::cout << "cliques:";
    for (const auto& cl : cd.cliques) {
        std::cout << " {";
        for (std::size_t i = 0; i < cl.size(); ++i) std::cout << (i ? ", " : "") << cd.methods[cl[i]];
        std::cout << "}";
    }
    std::cout << "\n";

    json j;
    j["methods"] = cd.methods;
    j["datasets"] = datasets;
    json acc = json::array();
    for (std::size_t d = 0; d < m.num_datasets(); ++d) {
        json row = json::array();
        for (std::size_t k = 0; k < m.num_methods(); ++k) row.push_back(m.at(d, k));
        acc.push_back(row);
    }
    j["mean_accuracy"] = acc;
    j["runs"] = runs;
    j["average_ranks"] = cd.average_ranks;
    j["friedman"] = {{"statistic", cd.friedman.statistic}, {"dof", cd.friedman.dof}, {"p_value", cd.friedman.p_value}};
    j["alpha"] = alpha;
    json pairs = json::array();
    for (const auto& p : cd.pairs) {
        pairs.push_back({{"a", cd.methods[p.a]},
                         {"b", cd.methods[p.b]},
                         {"p_value", p.p_value},
                         {"reject", p.reject},
                         {"degenerate", p.degenerate}});
    }
    j["pairs"] = pairs;
    json cliques = json::array();
    for (const auto& cl : cd.cliques) {
        json names = json::array();
        for (auto k : cl) names.push_back(cd.methods[k]);
        cliques.push_back(names);
    }
    j["cliques"] = cliques;
    write_file_atomic(out, j.dump(2) + "\n");
    std::cout << "wrote " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge distillation with calibrated teacher labels for time-series classification"};
    app.require_subcommand(1);
    app.fallthrough();
    Common c;
    app.add_option("--ucr-root", c.ucr_root, "UCR archive root (default: $KDC_UCR_ROOT)");
    app.add_option("--config", c.config, "key=value experiment config file")->check(CLI::ExistingFile);
    app.add_option("--workdir", c.workdir, "artifact directory")->capture_default_str();
    app.add_option("--set", c.settings, "override one config key, e.g. --set max_epochs=128");
    app.add_option("--seed", c.seed, "base seed (run r uses seed + r)");
    app.add_option("--workers", c.workers, "concurrent training runs");

    std::string dataset, method = "kdcr", strategy = "cr", checkpoint, out = "report.json";
    std::size_t runs = 0, student_runs = 10;
    std::vector<std::string> methods{"itime", "lstime", "kdtime", "kdct", "kdcr"}, datasets;
    double alpha = 0.05;

    auto* tt = app.add_subcommand("train-teacher", "train the depth-6 teacher, keep the best run");
    tt->add_option("--dataset", dataset)->required();
    tt->add_option("--runs", runs, "teacher trainings (default: teacher_runs from config)");

    auto* gl = app.add_subcommand("gen-labels", "write teacher logits and soft labels for the training split");
    gl->add_option("--dataset", dataset)->required();
    gl->add_option("--checkpoint", checkpoint, "teacher checkpoint (default: <workdir>/<dataset>/teacher.kdc)");

    auto* ca = app.add_subcommand("calibrate", "calibrate wrongly predicted teacher labels");
    ca->add_option("--dataset", dataset)->required();
    ca->add_option("--strategy", strategy)->check(CLI::IsMember({"ct", "cr"}))->capture_default_str();

    auto* ts = app.add_subcommand("train-student", "train depth-3 students and write a run report");
    ts->add_option("--dataset", dataset)->required();
    ts->add_option("--method", method, "itime | lstime[:eps] | kdtime[:eps:tau] | kdct | kdcr")->capture_default_str();
    ts->add_option("--runs", student_runs)->capture_default_str();

    auto* ev = app.add_subcommand("evaluate", "train and test accuracy of a checkpoint");
    ev->add_option("--dataset", dataset)->required();
    ev->add_option("--checkpoint", checkpoint, "model checkpoint (default: the teacher)");

    auto* cmp = app.add_subcommand("compare", "Friedman / Wilcoxon-Holm comparison of stored run reports");
    cmp->add_option("--methods", methods)->delimiter(',')->capture_default_str();
    cmp->add_option("--datasets", datasets)->delimiter(',')->required();
    cmp->add_option("--out", out)->capture_default_str();
    cmp->add_option("--alpha", alpha)->capture_default_str();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*tt) return cmd_train_teacher(c, dataset, runs);
        if (*gl) return cmd_gen_labels(c, dataset, checkpoint);
        if (*ca) return cmd_calibrate(c, dataset, strategy);
        if (*ts) return cmd_train_student(c, dataset, method, student_runs);
        if (*ev) return cmd_evaluate(c, dataset, checkpoint);
        if (*cmp) return cmd_compare(c, methods, datasets, out, alpha);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
