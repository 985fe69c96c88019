#include "kdc/soft_label_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kdc {

namespace {

struct Header {
    std::size_t num_classes = 0;
    std::size_t count = 0;
    std::string source;
    std::string kind;
};

std::string header_line(std::size_t c, std::size_t n, const std::string& source,
                        const std::string& kind) {
    if (source.empty() || source.find_first_of(" \t\r\n") != std::string::npos) {
        throw std::invalid_argument("soft-label source id must be non-empty without whitespace");
    }
    std::string line = "# C=" + std::to_string(c) + " N=" + std::to_string(n) + " source=" + source;
    if (!kind.empty()) line += " kind=" + kind;
    return line;
}

std::size_t parse_count(const std::string& text, const std::string& key) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw std::runtime_error("soft-label header: bad value for " + key + ": '" + text + "'");
    }
    return v;
}

Header parse_header(const std::string& line) {
    std::istringstream in(line);
    std::string hash;
    in >> hash;
    if (hash != "#") throw std::runtime_error("soft-label header must start with '# '");
    Header h;
    bool have_c = false, have_n = false, have_source = false;
    std::string field;
    while (in >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) throw std::runtime_error("soft-label header: bad field " + field);
        const std::string key = field.substr(0, eq);
        const std::string value = field.substr(eq + 1);
        if (key == "C") {
            h.num_classes = parse_count(value, key);
            have_c = true;
        } else if (key == "N") {
            h.count = parse_count(value, key);
            have_n = true;
        } else if (key == "source") {
            h.source = value;
            have_source = true;
        } else if (key == "kind") {
            h.kind = value;
        } else {
            throw std::runtime_error("soft-label header: unknown field " + key);
        }
    }
    if (!have_c || !have_n || !have_source) {
        throw std::runtime_error("soft-label header needs C=, N= and source=");
    }
    return h;
}

void write_rows(const std::filesystem::path& path, const std::string& header,
                const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << header << '\n';
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out << ',';
            out << format_double(row[i]);
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::pair<Header, std::vector<std::vector<double>>> read_rows(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty file");
    Header h = parse_header(line);
    std::vector<std::vector<double>> rows;
    rows.reserve(h.count);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<double> row;
        row.reserve(h.num_classes);
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            const auto token = std::string_view(line).substr(
                start, comma == std::string::npos ? std::string::npos : comma - start);
            try {
                row.push_back(parse_double(token));
            } catch (const std::invalid_argument&) {
                throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                                         ": bad number '" + std::string(token) + "'");
            }
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (row.size() != h.num_classes) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(h.num_classes) + " values, got " +
                                     std::to_string(row.size()));
        }
        rows.push_back(std::move(row));
    }
    if (rows.size() != h.count) {
        throw std::runtime_error(path.string() + ": header says N=" + std::to_string(h.count) +
                                 " but file has " + std::to_string(rows.size()) + " records");
    }
    return {std::move(h), std::move(rows)};
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw std::runtime_error("format_double failed");
    return std::string(buf, ptr);
}

double parse_double(std::string_view token) {
    while (!token.empty() && (token.front() == ' ' || token.front() == '\t')) token.remove_prefix(1);
    while (!token.empty() && (token.back() == ' ' || token.back() == '\t' || token.back() == '\r')) {
        token.remove_suffix(1);
    }
    if (!token.empty() && token.front() == '+') token.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
    if (token.empty() || ec != std::errc{} || ptr != token.data() + token.size()) {
        throw std::invalid_argument("not a number: '" + std::string(token) + "'");
    }
    return v;
}

void write_soft_labels(const std::filesystem::path& path, const std::vector<Label>& labels,
                       const std::string& source) {
    if (labels.empty()) throw std::invalid_argument("write_soft_labels: no labels");
    const std::size_t c = labels.front().size();
    std::vector<std::vector<double>> rows;
    rows.reserve(labels.size());
    for (const Label& l : labels) {
        if (l.size() != c) throw std::invalid_argument("write_soft_labels: ragged label set");
        rows.push_back(l.values());
    }
    write_rows(path, header_line(c, labels.size(), source, ""), rows);
}

SoftLabelFile read_soft_labels(const std::filesystem::path& path) {
    auto [h, rows] = read_rows(path);
    if (!h.kind.empty()) {
        throw std::runtime_error(path.string() + ": expected soft labels, found kind=" + h.kind);
    }
    SoftLabelFile out;
    out.source = h.source;
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        try {
            out.labels.emplace_back(std::move(rows[i]));
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error(path.string() + ": record " + std::to_string(i) + ": " +
                                     e.what());
        }
    }
    return out;
}

void write_logits(const std::filesystem::path& path, const std::vector<std::vector<double>>& rows,
                  const std::string& source) {
    if (rows.empty()) throw std::invalid_argument("write_logits: no rows");
    const std::size_t c = rows.front().size();
    for (const auto& r : rows) {
        if (r.size() != c) throw std::invalid_argument("write_logits: ragged rows");
    }
    write_rows(path, header_line(c, rows.size(), source, "logits"), rows);
}

LogitsFile read_logits(const std::filesystem::path& path) {
    auto [h, rows] = read_rows(path);
    if (h.kind != "logits") throw std::runtime_error(path.string() + ": not a logits file");
    return LogitsFile{h.source, h.num_classes, std::move(rows)};
}

}  // namespace kdc
