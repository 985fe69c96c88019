#include "kdc/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <stdexcept>

#include "kdc/soft_label_io.hpp"

namespace kdc {

namespace {

struct RawSplit {
    std::vector<std::string> labels;
    std::vector<double> values;
    std::size_t length = 0;
};

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == '\t' || line[i] == ',') {
            out.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

RawSplit read_raw(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    RawSplit raw;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto fields = split_fields(body);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (fields.size() < 2) throw std::runtime_error(where + ": row has no values");
        const std::size_t len = fields.size() - 1;
        if (raw.labels.empty()) {
            raw.length = len;
        } else if (len != raw.length) {
            throw std::runtime_error(where + ": expected " + std::to_string(raw.length) +
                                     " values, found " + std::to_string(len));
        }
        std::string label = trim(fields[0]);
        if (label.empty()) throw std::runtime_error(where + ": empty class label");
        for (std::size_t i = 1; i < fields.size(); ++i) {
            double v;
            try {
                v = parse_double(fields[i]);
            } catch (const std::invalid_argument&) {
                throw std::runtime_error(where + ": cannot parse value " + std::to_string(i));
            }
            if (!std::isfinite(v)) {
                throw std::runtime_error(where + ": non-finite value in column " + std::to_string(i));
            }
            raw.values.push_back(v);
        }
        raw.labels.push_back(std::move(label));
    }
    if (raw.labels.empty()) throw std::runtime_error(path.string() + ": no series");
    return raw;
}

// Sorted distinct labels; numeric order if all parse as numbers.
std::vector<std::string> label_order(const std::vector<std::string>& labels) {
    std::vector<std::string> distinct(labels);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    std::vector<double> numeric;
    bool all_numeric = true;
    for (const auto& s : distinct) {
        try {
            const double v = parse_double(s);
            if (!std::isfinite(v)) all_numeric = false;
            numeric.push_back(v);
        } catch (const std::invalid_argument&) {
            all_numeric = false;
            break;
        }
    }
    if (!all_numeric) return distinct;
    std::vector<std::size_t> idx(distinct.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return numeric[a] < numeric[b];
    });
    // "1" and "1.0" are one class.
    std::vector<std::string> out;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (k > 0 && numeric[idx[k]] == numeric[idx[k - 1]]) {
            throw std::runtime_error("ambiguous class labels " + distinct[idx[k - 1]] + " and " +
                                     distinct[idx[k]]);
        }
        out.push_back(distinct[idx[k]]);
    }
    return out;
}

SeriesDataset encode(const std::filesystem::path& path, RawSplit raw, const std::vector<std::string>& order) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < order.size(); ++i) index.emplace(order[i], i);
    SeriesDataset d;
    d.name = path.stem().string();
    for (const char* suffix : {"_TRAIN", "_TEST"}) {
        const std::string s(suffix);
        if (d.name.size() > s.size() && d.name.ends_with(s)) {
            d.split = s == "_TEST" ? Split::Test : Split::Train;
            d.name.resize(d.name.size() - s.size());
            break;
        }
    }
    d.length = raw.length;
    d.num_classes = order.size();
    d.class_labels = order;
    d.series = std::move(raw.values);
    d.classes.reserve(raw.labels.size());
    for (std::size_t i = 0; i < raw.labels.size(); ++i) {
        const auto it = index.find(raw.labels[i]);
        if (it == index.end()) {
            throw std::runtime_error(path.string() + ": row " + std::to_string(i + 1) +
                                     ": unknown class label " + raw.labels[i]);
        }
        d.classes.push_back(it->second);
    }
    return d;
}

}  // namespace

FeatureMap SeriesDataset::as_batch() const { return FeatureMap(size(), 1, length, series); }

void SeriesDataset::validate() const {
    if (classes.empty() || length == 0) throw std::invalid_argument(name + ": empty dataset");
    if (series.size() != classes.size() * length) throw std::invalid_argument(name + ": ragged series");
    if (num_classes < 2) throw std::invalid_argument(name + ": fewer than 2 classes");
    for (auto c : classes) {
        if (c >= num_classes) throw std::invalid_argument(name + ": class out of range");
    }
    for (double v : series) {
        if (!std::isfinite(v)) throw std::invalid_argument(name + ": non-finite value");
    }
}

SeriesDataset load_ucr_tsv(const std::filesystem::path& path, const std::vector<std::string>* labels) {
    RawSplit raw = read_raw(path);
    const std::vector<std::string> order = labels ? *labels : label_order(raw.labels);
    return encode(path, std::move(raw), order);
}

DatasetPair load_ucr_dataset(const std::filesystem::path& root, const std::string& name) {
    const auto dir = root / name;
    const auto train_path = dir / (name + "_TRAIN.tsv");
    const auto test_path = dir / (name + "_TEST.tsv");
    RawSplit train = read_raw(train_path);
    RawSplit test = read_raw(test_path);
    if (train.length != test.length) {
        throw std::runtime_error(name + ": train and test series lengths differ");
    }
    std::vector<std::string> all(train.labels);
    all.insert(all.end(), test.labels.begin(), test.labels.end());
    const auto order = label_order(all);
    DatasetPair out{encode(train_path, std::move(train), order), encode(test_path, std::move(test), order)};
    out.train.name = out.test.name = name;
    out.train.split = Split::Train;
    out.test.split = Split::Test;
    return out;
}

void write_ucr_tsv(const std::filesystem::path& path, const SeriesDataset& data) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::size_t c = data.classes[i];
        out << (c < data.class_labels.size() ? data.class_labels[c] : std::to_string(c));
        for (double v : data.row(i)) out << '\t' << format_double(v);
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::optional<std::filesystem::path> resolve_ucr_root(const std::string& flag) {
    if (!flag.empty()) return std::filesystem::path(flag);
    if (const char* env = std::getenv("KDC_UCR_ROOT"); env && *env) return std::filesystem::path(env);
    return std::nullopt;
}

const std::vector<std::string>& problematic_datasets() {
    static const std::vector<std::string> names{
        "AllGestureWiimoteX", "AllGestureWiimoteY",   "AllGestureWiimoteZ",    "DodgerLoopDay",
        "DodgerLoopGame",     "DodgerLoopWeekend",    "GestureMidAirD1",       "GestureMidAirD2",
        "GestureMidAirD3",    "GesturePebbleZ1",      "GesturePebbleZ2",       "MelbournePedestrian",
        "PickupGestureWiimoteZ", "PLAID",             "ShakeGestureWiimoteZ"};
    return names;
}

const std::vector<std::string>& ucr_archive_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> v{
            "ACSF1", "Adiac", "ArrowHead", "Beef", "BeetleFly", "BirdChicken", "BME", "Car", "CBF",
            "Chinatown", "ChlorineConcentration", "CinCECGTorso", "Coffee", "Computers", "CricketX",
            "CricketY", "CricketZ", "Crop", "DiatomSizeReduction", "DistalPhalanxOutlineAgeGroup",
            "DistalPhalanxOutlineCorrect", "DistalPhalanxTW", "Earthquakes", "ECG200", "ECG5000",
            "ECGFiveDays", "ElectricDevices", "EOGHorizontalSignal", "EOGVerticalSignal",
            "EthanolLevel", "FaceAll", "FaceFour", "FacesUCR", "FiftyWords", "Fish", "FordA", "FordB",
            "FreezerRegularTrain", "FreezerSmallTrain", "Fungi", "GunPoint", "GunPointAgeSpan",
            "GunPointMaleVersusFemale", "GunPointOldVersusYoung", "Ham", "HandOutlines", "Haptics",
            "Herring", "HouseTwenty", "InlineSkate", "InsectEPGRegularTrain", "InsectEPGSmallTrain",
            "InsectWingbeatSound", "ItalyPowerDemand", "LargeKitchenAppliances", "Lightning2",
            "Lightning7", "Mallat", "Meat", "MedicalImages", "MiddlePhalanxOutlineAgeGroup",
            "MiddlePhalanxOutlineCorrect", "MiddlePhalanxTW", "MixedShapesRegularTrain",
            "MixedShapesSmallTrain", "MoteStrain", "NonInvasiveFetalECGThorax1",
            "NonInvasiveFetalECGThorax2", "OliveOil", "OSULeaf", "PhalangesOutlinesCorrect",
            "Phoneme", "PigAirwayPressure", "PigArtPressure", "PigCVP", "Plane", "PowerCons",
            "ProximalPhalanxOutlineAgeGroup", "ProximalPhalanxOutlineCorrect", "ProximalPhalanxTW",
            "RefrigerationDevices", "Rock", "ScreenType", "SemgHandGenderCh2", "SemgHandMovementCh2",
            "SemgHandSubjectCh2", "ShapeletSim", "ShapesAll", "SmallKitchenAppliances",
            "SmoothSubspace", "SonyAIBORobotSurface1", "SonyAIBORobotSurface2", "StarLightCurves",
            "Strawberry", "SwedishLeaf", "Symbols", "SyntheticControl", "ToeSegmentation1",
            "ToeSegmentation2", "Trace", "TwoLeadECG", "TwoPatterns", "UMD", "UWaveGestureLibraryAll",
            "UWaveGestureLibraryX", "UWaveGestureLibraryY", "UWaveGestureLibraryZ", "Wafer", "Wine",
            "WordSynonyms", "Worms", "WormsTwoClass", "Yoga"};
        const auto& bad = problematic_datasets();
        v.insert(v.end(), bad.begin(), bad.end());
        std::sort(v.begin(), v.end());
        return v;
    }();
    return names;
}

std::vector<std::string> exclude_problematic(const std::vector<std::string>& names) {
    const auto& bad = problematic_datasets();
    std::vector<std::string> out;
    for (const auto& n : names) {
        if (std::find(bad.begin(), bad.end(), n) == bad.end()) out.push_back(n);
    }
    return out;
}

void znormalize_series(std::span<double> s) {
    if (s.empty()) return;
    double mean = 0.0;
    for (double v : s) mean += v;
    mean /= static_cast<double>(s.size());
    double sq = 0.0;
    for (double v : s) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(s.size()));
    if (sd < 1e-8) {
        std::fill(s.begin(), s.end(), 0.0);
        return;
    }
    for (double& v : s) v = (v - mean) / sd;
}

SeriesDataset znormalize(const SeriesDataset& data) {
    SeriesDataset out = data;
    for (std::size_t i = 0; i < out.size(); ++i) {
        znormalize_series(std::span<double>(out.series.data() + i * out.length, out.length));
    }
    return out;
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size, Rng& rng) {
    if (n == 0) throw std::invalid_argument("batch_iter: empty dataset");
    if (batch_size == 0) throw std::invalid_argument("batch_iter: batch size must be >= 1");
    const auto order = rng.permutation(n);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
        const std::size_t end = std::min(n, begin + batch_size);
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(begin),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                 std::uint64_t seed) {
    Rng rng(seed);
    return batch_iter(n, batch_size, rng);
}

}  // namespace kdc
