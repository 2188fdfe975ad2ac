#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "spdelab/error.hpp"
#include "spdelab/hash.hpp"

namespace spdelab {

/// Shortest decimal string that parses back to exactly `v`.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

/// Builds a CSV document in memory. Fields are written verbatim; the
/// library never emits commas or quotes inside a field.
class CsvWriter {
public:
    explicit CsvWriter(std::initializer_list<std::string> header) { row(std::vector<std::string>(header)); }
    explicit CsvWriter(const std::vector<std::string>& header) { row(header); }

    CsvWriter& row(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out_ << ',';
            out_ << fields[i];
        }
        out_ << '\n';
        return *this;
    }

    std::string str() const { return out_.str(); }

private:
    std::ostringstream out_;
};

/// Writes `content` to `path` and returns its FNV-1a hash.
inline std::string write_text_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path.string() + " for writing");
    f << content;
    if (!f) throw Error("write failed for " + path.string());
    return fnv1a_hex(content);
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read " + path.string());
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

} // namespace spdelab
