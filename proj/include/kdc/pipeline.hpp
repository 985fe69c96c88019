#pragma once

// Teacher -> labels -> calibration -> student flow, the baselines around
// it, and run reports.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kdc/data.hpp"
#include "kdc/labelspace.hpp"
#include "kdc/losses.hpp"
#include "kdc/network.hpp"
#include "kdc/optim.hpp"

namespace kdc {

struct Method {
    enum class Kind { ITime, LSTime, KDTime, KDCT, KDCR };
    Kind kind = Kind::ITime;
    double eps = 0.5;  ///< LSTime, KDTime
    double tau = 8.0;  ///< KDTime

    static Method itime() { return {Kind::ITime}; }
    static Method lstime(double eps = 0.5) { return {Kind::LSTime, eps}; }
    static Method kdtime(double eps = 0.5, double tau = 8.0) { return {Kind::KDTime, eps, tau}; }
    static Method kdct() { return {Kind::KDCT}; }
    static Method kdcr() { return {Kind::KDCR}; }

    /// "ITime", "LSTime", ...
    std::string name() const;
    /// Round-trips through parse_method: "itime", "lstime:0.5", "kdtime:0.5:8", ...
    std::string spec() const;
    LossKind loss() const;
    bool needs_teacher() const noexcept { return kind == Kind::KDTime || kind == Kind::KDCT || kind == Kind::KDCR; }
    std::optional<CalibrationStrategy> calibration() const noexcept;

    friend bool operator==(const Method&, const Method&) = default;
};

Method parse_method(const std::string& text);

enum class TeacherSelection {
    TrainingAccuracy,  ///< eval-mode accuracy on the training split
    Holdout,           ///< accuracy on the test split (peeks at test data)
};

struct ExperimentConfig {
    TrainConfig train;  ///< schedule shared by teacher and students; loss and seed are set per run
    bool znormalize = true;
    TeacherSelection teacher_selection = TeacherSelection::TrainingAccuracy;
    std::size_t teacher_runs = 1;
    std::size_t workers = 1;  ///< concurrent runs inside run_method / train_teacher

    void validate() const;
};

/// `key=value` lines; `#` starts a comment. Unknown keys are an error.
ExperimentConfig parse_experiment_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string to_text(const ExperimentConfig& cfg);

/// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(const std::string& text);
std::string config_hash(const ExperimentConfig& cfg, const Method& method);

/// Loads both splits and applies z-normalization when configured.
DatasetPair prepare_dataset(const std::filesystem::path& root, const std::string& name,
                            const ExperimentConfig& cfg);
DatasetPair prepare_dataset(DatasetPair raw, const ExperimentConfig& cfg);

NetworkConfig student_config(std::size_t num_classes);
NetworkConfig teacher_config(std::size_t num_classes);

std::vector<std::size_t> predict_classes(const ModelParams& params, const SeriesDataset& data);
double evaluate_accuracy(const ModelParams& params, const SeriesDataset& data);

struct TeacherResult {
    ModelParams params;
    std::size_t selected_run = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<double> train_accuracy;
    std::vector<double> holdout_accuracy;
    std::vector<double> seconds;
};

/// Depth-6 CE training under seeds base_seed + r; keeps the run that scores
/// best under cfg.teacher_selection (earliest run on ties).
TeacherResult train_teacher(const DatasetPair& data, const ExperimentConfig& cfg, std::size_t n_runs);

struct TeacherLabels {
    std::size_t num_classes = 0;
    std::vector<std::vector<double>> logits;
    std::vector<Label> labels;
};

/// Eval-mode teacher outputs for every sample of `train`.
TeacherLabels generate_teacher_labels(const ModelParams& teacher, const SeriesDataset& train);

std::vector<Label> hard_labels(const SeriesDataset& data);

/// Per-sample training targets for `method`. KD-family methods need the
/// teacher outputs. KDCT/KDCR targets are checked to put their maximum on
/// the true class; a violation throws std::logic_error.
std::vector<SampleTarget> build_targets(const Method& method, const SeriesDataset& train,
                                        const TeacherLabels* teacher);

/// Number of targets whose soft label does not single out the true class
/// (argmax with ties broken toward it).
std::size_t calibration_violations(std::span<const SampleTarget> targets);

struct RunReport {
    std::string dataset;
    std::string method;
    std::vector<double> accuracies;
    double mean = 0.0;
    double std = 0.0;  ///< population standard deviation
    std::vector<double> train_seconds;
    std::vector<double> test_seconds;
    std::vector<std::size_t> epochs;
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
    std::size_t calibrated = 0;  ///< targets changed by calibration

    /// Recomputes mean and std from accuracies.
    void summarize();
    friend bool operator==(const RunReport&, const RunReport&) = default;
};

struct RunArtifacts {
    RunReport report;
    std::vector<ModelParams> models;  ///< one per run
};

/// n_runs student trainings (depth 3) under seeds base_seed + r, reporting
/// test accuracy.
RunArtifacts run_method(const Method& method, const DatasetPair& data, const ExperimentConfig& cfg,
                        std::size_t n_runs, const TeacherLabels* teacher = nullptr);

void save_report(const std::filesystem::path& path, const RunReport& report);
RunReport load_report(const std::filesystem::path& path);

std::string report_json(const RunReport& report);
RunReport report_from_json(const std::string& text);

/// Writes `text` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace kdc
