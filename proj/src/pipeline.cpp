#include "kdc/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <mutex>
#include <sstream>
#include <thread>

#include "kdc/evalstats.hpp"
#include "kdc/soft_label_io.hpp"

namespace kdc {

namespace {

using json = nlohmann::json;

// Runs fn(0..n-1) on up to `workers` threads; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::invalid_argument("config: " + key + " expects true/false, got '" + v + "'");
}

std::size_t parse_count(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != v.size() || v.empty() || v[0] == '-') {
        throw std::invalid_argument("config: " + key + " expects a non-negative integer, got '" + v + "'");
    }
    return static_cast<std::size_t>(out);
}

double elapsed(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

// ---- methods ---------------------------------------------------------------

std::string Method::name() const {
    switch (kind) {
        case Kind::ITime: return "ITime";
        case Kind::LSTime: return "LSTime";
        case Kind::KDTime: return "KDTime";
        case Kind::KDCT: return "KDCT";
        case Kind::KDCR: return "KDCR";
    }
    return "?";
}

std::string Method::spec() const {
    switch (kind) {
        case Kind::ITime: return "itime";
        case Kind::LSTime: return "lstime:" + format_double(eps);
        case Kind::KDTime: return "kdtime:" + format_double(eps) + ":" + format_double(tau);
        case Kind::KDCT: return "kdct";
        case Kind::KDCR: return "kdcr";
    }
    return "?";
}

LossKind Method::loss() const {
    switch (kind) {
        case Kind::ITime: return CrossEntropy{};
        case Kind::LSTime: return LabelSmoothing{eps};
        case Kind::KDTime: return KnowledgeDistillation{eps, tau};
        case Kind::KDCT:
        case Kind::KDCR: return CalibratedDistillation{};
    }
    return CrossEntropy{};
}

std::optional<CalibrationStrategy> Method::calibration() const noexcept {
    if (kind == Kind::KDCT) return CalibrationStrategy::Translate;
    if (kind == Kind::KDCR) return CalibrationStrategy::Reorder;
    return std::nullopt;
}

Method parse_method(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(trim(p));
    if (parts.empty()) throw std::invalid_argument("empty method name");
    std::string head = parts[0];
    for (char& ch : head) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    auto number = [&](std::size_t i) {
        try {
            return parse_double(parts.at(i));
        } catch (const std::exception&) {
            throw std::invalid_argument("method '" + text + "': bad parameter");
        }
    };
    Method m;
    if (head == "itime" && parts.size() == 1) {
        m = Method::itime();
    } else if (head == "lstime" && parts.size() <= 2) {
        m = Method::lstime(parts.size() == 2 ? number(1) : 0.5);
    } else if (head == "kdtime" && (parts.size() == 1 || parts.size() == 3)) {
        m = parts.size() == 3 ? Method::kdtime(number(1), number(2)) : Method::kdtime();
    } else if (head == "kdct" && parts.size() == 1) {
        m = Method::kdct();
    } else if (head == "kdcr" && parts.size() == 1) {
        m = Method::kdcr();
    } else {
        throw std::invalid_argument("unknown method '" + text + "' (itime, lstime[:eps], kdtime[:eps:tau], kdct, kdcr)");
    }
    validate(m.loss());
    return m;
}

// ---- configuration ---------------------------------------------------------

void ExperimentConfig::validate() const {
    train.validate();
    if (teacher_runs == 0) throw std::invalid_argument("teacher_runs must be >= 1");
    if (workers == 0) throw std::invalid_argument("workers must be >= 1");
}

ExperimentConfig parse_experiment_config(const std::string& text, ExperimentConfig cfg) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (apply_setting(cfg.train, key, value)) continue;
        if (key == "znormalize") {
            cfg.znormalize = parse_bool(key, value);
        } else if (key == "teacher_selection") {
            if (value == "train" || value == "training_accuracy") {
                cfg.teacher_selection = TeacherSelection::TrainingAccuracy;
            } else if (value == "holdout") {
                cfg.teacher_selection = TeacherSelection::Holdout;
            } else {
                throw std::invalid_argument("config: teacher_selection expects train or holdout");
            }
        } else if (key == "teacher_runs") {
            cfg.teacher_runs = parse_count(key, value);
        } else if (key == "workers") {
            cfg.workers = parse_count(key, value);
        } else {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_experiment_config(ss.str());
}

std::string to_text(const ExperimentConfig& cfg) {
    std::string out = to_text(cfg.train);
    out += std::string("znormalize=") + (cfg.znormalize ? "true" : "false") + "\n";
    out += std::string("teacher_selection=") +
           (cfg.teacher_selection == TeacherSelection::Holdout ? "holdout" : "train") + "\n";
    out += "teacher_runs=" + std::to_string(cfg.teacher_runs) + "\n";
    out += "workers=" + std::to_string(cfg.workers) + "\n";
    return out;
}

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string config_hash(const ExperimentConfig& cfg, const Method& method) {
    ExperimentConfig c = cfg;
    c.train.loss = method.loss();
    c.workers = 1;
    return fnv1a_hex(to_text(c) + "method=" + method.spec() + "\n");
}

// ---- data and models ----------------------------------------------------------

DatasetPair prepare_dataset(DatasetPair raw, const ExperimentConfig& cfg) {
    raw.train.validate();
    raw.test.validate();
    if (cfg.znormalize) {
        raw.train = znormalize(raw.train);
        raw.test = znormalize(raw.test);
    }
    return raw;
}

DatasetPair prepare_dataset(const std::filesystem::path& root, const std::string& name,
                            const ExperimentConfig& cfg) {
    return prepare_dataset(load_ucr_dataset(root, name), cfg);
}

NetworkConfig student_config(std::size_t num_classes) {
    NetworkConfig c;
    c.depth = 3;
    c.num_classes = num_classes;
    return c;
}

NetworkConfig teacher_config(std::size_t num_classes) {
    NetworkConfig c;
    c.depth = 6;
    c.num_classes = num_classes;
    return c;
}

std::vector<std::size_t> predict_classes(const ModelParams& params, const SeriesDataset& data) {
    const std::size_t C = params.config.num_classes;
    const auto logits = predict_logits(params, data.as_batch());
    std::vector<std::size_t> out(data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double* row = logits.data() + i * C;
        std::size_t best = 0;
        for (std::size_t k = 1; k < C; ++k) {
            if (row[k] > row[best]) best = k;
        }
        out[i] = best;
    }
    return out;
}

double evaluate_accuracy(const ModelParams& params, const SeriesDataset& data) {
    return accuracy(predict_classes(params, data), data.classes);
}

TeacherResult train_teacher(const DatasetPair& data, const ExperimentConfig& cfg, std::size_t n_runs) {
    cfg.validate();
    if (n_runs == 0) throw std::invalid_argument("train_teacher: n_runs must be >= 1");
    TeacherResult res;
    std::vector<std::optional<ModelParams>> models(n_runs);
    res.seeds.resize(n_runs);
    res.train_accuracy.resize(n_runs);
    res.holdout_accuracy.resize(n_runs);
    res.seconds.resize(n_runs);
    const std::vector<SampleTarget> targets = build_targets(Method::itime(), data.train, nullptr);
    parallel_for(n_runs, cfg.workers, [&](std::size_t r) {
        const std::uint64_t seed = cfg.train.seed + r;
        TrainConfig tc = cfg.train;
        tc.loss = CrossEntropy{};
        tc.seed = seed;
        const auto start = std::chrono::steady_clock::now();
        FitResult fr = fit(init_params(teacher_config(data.train.num_classes), seed), data.train, targets, tc);
        res.seeds[r] = seed;
        res.seconds[r] = elapsed(start);
        res.train_accuracy[r] = evaluate_accuracy(fr.params, data.train);
        res.holdout_accuracy[r] = evaluate_accuracy(fr.params, data.test);
        models[r] = std::move(fr.params);
    });
    const auto& score = cfg.teacher_selection == TeacherSelection::Holdout ? res.holdout_accuracy : res.train_accuracy;
    for (std::size_t r = 1; r < n_runs; ++r) {
        if (score[r] > score[res.selected_run]) res.selected_run = r;
    }
    res.params = std::move(*models[res.selected_run]);
    return res;
}

TeacherLabels generate_teacher_labels(const ModelParams& teacher, const SeriesDataset& train) {
    if (teacher.config.num_classes != train.num_classes) {
        throw std::invalid_argument("teacher has " + std::to_string(teacher.config.num_classes) +
                                    " classes, dataset has " + std::to_string(train.num_classes));
    }
    const std::size_t C = train.num_classes;
    const auto z = predict_logits(teacher, train.as_batch());
    TeacherLabels out;
    out.num_classes = C;
    for (std::size_t i = 0; i < train.size(); ++i) {
        std::vector<double> row(z.begin() + static_cast<std::ptrdiff_t>(i * C),
                                z.begin() + static_cast<std::ptrdiff_t>((i + 1) * C));
        out.labels.push_back(softmax(Logits(row)));
        out.logits.push_back(std::move(row));
    }
    return out;
}

std::vector<Label> hard_labels(const SeriesDataset& data) {
    std::vector<Label> out;
    out.reserve(data.size());
    for (auto c : data.classes) out.push_back(hard_label(ClassIndex{c}, data.num_classes));
    return out;
}

std::size_t calibration_violations(std::span<const SampleTarget> targets) {
    std::size_t bad = 0;
    for (const auto& t : targets) {
        if (t.soft.empty() || t.cls >= t.soft.size()) {
            ++bad;
            continue;
        }
        for (std::size_t k = 0; k < t.soft.size(); ++k) {
            if (k != t.cls && t.soft[k] > t.soft[t.cls]) {
                ++bad;
                break;
            }
        }
    }
    return bad;
}

std::vector<SampleTarget> build_targets(const Method& method, const SeriesDataset& train,
                                        const TeacherLabels* teacher) {
    std::vector<SampleTarget> out(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) out[i].cls = train.classes[i];
    if (!method.needs_teacher()) return out;
    if (!teacher) throw std::invalid_argument(method.name() + " needs teacher labels");
    if (teacher->labels.size() != train.size() || teacher->logits.size() != train.size() ||
        teacher->num_classes != train.num_classes) {
        throw std::invalid_argument("teacher labels do not match the training split");
    }
    if (method.kind == Method::Kind::KDTime) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i].soft = softmax_tempered(Logits(teacher->logits[i]), method.tau).values();
        }
        return out;
    }
    const auto hard = hard_labels(train);
    const auto calibrated = calibrate_set(teacher->labels, hard, *method.calibration());
    for (std::size_t i = 0; i < out.size(); ++i) out[i].soft = calibrated[i].values();
    if (const std::size_t bad = calibration_violations(out); bad != 0) {
        throw std::logic_error(method.name() + ": " + std::to_string(bad) +
                               " calibrated targets do not favour the true class");
    }
    return out;
}

// ---- runs and reports ------------------------------------------------------------

void RunReport::summarize() {
    if (accuracies.empty()) {
        mean = std = 0.0;
        return;
    }
    double s = 0.0;
    for (double a : accuracies) s += a;
    mean = s / static_cast<double>(accuracies.size());
    double sq = 0.0;
    for (double a : accuracies) sq += (a - mean) * (a - mean);
    std = std::sqrt(sq / static_cast<double>(accuracies.size()));
}

RunArtifacts run_method(const Method& method, const DatasetPair& data, const ExperimentConfig& cfg,
                        std::size_t n_runs, const TeacherLabels* teacher) {
    cfg.validate();
    if (n_runs == 0) throw std::invalid_argument("run_method: n_runs must be >= 1");
    const auto targets = build_targets(method, data.train, teacher);
    RunArtifacts out;
    RunReport& rep = out.report;
    rep.dataset = data.train.name;
    rep.method = method.name();
    rep.config_hash = config_hash(cfg, method);
    if (method.calibration()) {
        for (std::size_t i = 0; i < targets.size(); ++i) {
            if (targets[i].soft != teacher->labels[i].values()) ++rep.calibrated;
        }
    }
    rep.accuracies.resize(n_runs);
    rep.train_seconds.resize(n_runs);
    rep.test_seconds.resize(n_runs);
    rep.epochs.resize(n_runs);
    rep.seeds.resize(n_runs);
    std::vector<std::optional<ModelParams>> models(n_runs);
    parallel_for(n_runs, cfg.workers, [&](std::size_t r) {
        const std::uint64_t seed = cfg.train.seed + r;
        TrainConfig tc = cfg.train;
        tc.loss = method.loss();
        tc.seed = seed;
        const auto start = std::chrono::steady_clock::now();
        FitResult fr = fit(init_params(student_config(data.train.num_classes), seed), data.train, targets, tc);
        rep.train_seconds[r] = elapsed(start);
        const auto test_start = std::chrono::steady_clock::now();
        rep.accuracies[r] = evaluate_accuracy(fr.params, data.test);
        rep.test_seconds[r] = elapsed(test_start);
        rep.epochs[r] = fr.history.size();
        rep.seeds[r] = seed;
        models[r] = std::move(fr.params);
    });
    for (auto& m : models) out.models.push_back(std::move(*m));
    rep.summarize();
    return out;
}

std::string report_json(const RunReport& r) {
    json j;
    j["dataset"] = r.dataset;
    j["method"] = r.method;
    j["accuracies"] = r.accuracies;
    j["mean"] = r.mean;
    j["std"] = r.std;
    j["train_seconds"] = r.train_seconds;
    j["test_seconds"] = r.test_seconds;
    j["epochs"] = r.epochs;
    j["config_hash"] = r.config_hash;
    j["seeds"] = r.seeds;
    j["calibrated"] = r.calibrated;
    return j.dump(2);
}

RunReport report_from_json(const std::string& text) {
    RunReport r;
    try {
        const json j = json::parse(text);
        r.dataset = j.at("dataset").get<std::string>();
        r.method = j.at("method").get<std::string>();
        r.accuracies = j.at("accuracies").get<std::vector<double>>();
        r.mean = j.at("mean").get<double>();
        r.std = j.at("std").get<double>();
        r.train_seconds = j.at("train_seconds").get<std::vector<double>>();
        r.test_seconds = j.at("test_seconds").get<std::vector<double>>();
        r.epochs = j.at("epochs").get<std::vector<std::size_t>>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        r.calibrated = j.at("calibrated").get<std::size_t>();
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("run report: ") + e.what());
    }
    const std::size_t n = r.accuracies.size();
    if (r.train_seconds.size() != n || r.test_seconds.size() != n || r.epochs.size() != n || r.seeds.size() != n) {
        throw std::runtime_error("run report: per-run fields differ in length");
    }
    RunReport check = r;
    check.summarize();
    if (std::abs(check.mean - r.mean) > 1e-12 || std::abs(check.std - r.std) > 1e-12) {
        throw std::runtime_error("run report: mean/std inconsistent with accuracies");
    }
    return r;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out << text;
        out.flush();
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void save_report(const std::filesystem::path& path, const RunReport& report) {
    write_file_atomic(path, report_json(report) + "\n");
}

RunReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open report " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return report_from_json(ss.str());
}

}  // namespace kdc
