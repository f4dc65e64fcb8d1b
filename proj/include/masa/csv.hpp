#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "masa/errors.hpp"

namespace masa {

// Locale-independent shortest-within-precision formatting ('.' decimal separator).
inline std::string format_number(double v, int significant = 9) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, significant);
    return std::string(buf, res.ptr);
}

inline double parse_number(std::string_view s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ContractError("not a number: '" + std::string(s) + "'");
    }
    return v;
}

// Minimal CSV builder; cells never contain separators or quotes in this project.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) { row(header); }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

    std::string str() const { return out_.str(); }

    void save(const std::filesystem::path& path) const { write_file(path, str()); }

    static void write_file(const std::filesystem::path& path, const std::string& content) {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + path.string() + " for writing");
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f) throw IoError("write failed for " + path.string());
    }

private:
    std::ostringstream out_;
};

// Strict reader: every row must have the header's column count.
inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        std::vector<std::string> cells;
        std::size_t start = 0;
        while (true) {
            const std::size_t pos = line.find(',', start);
            cells.push_back(line.substr(start, pos - start));
            if (pos == std::string::npos) break;
            start = pos + 1;
        }
        if (!rows.empty() && cells.size() != rows.front().size()) {
            throw IoError(path.string() + ": row " + std::to_string(rows.size()) + " has " +
                          std::to_string(cells.size()) + " cells, header has " + std::to_string(rows.front().size()));
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

} // namespace masa
