#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedseq::csv {

// Splits one CSV line. Handles double-quoted fields with "" escapes; the
// ingestion schemas never need more than that.
inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"' && field.empty()) {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(std::move(field));
  return out;
}

struct Row {
  long line_number;  // 1-based, header is line 1
  std::vector<std::string> fields;
};

// Reads a whole CSV file and checks the header. Throws on I/O failure or a
// header mismatch; per-row problems are the caller's concern.
inline std::vector<Row> read_file(const std::string& path,
                                  const std::vector<std::string>& expected_header) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open CSV file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV file: " + path);
  auto header = split_line(line);
  if (header != expected_header) {
    std::ostringstream msg;
    msg << path << ": unexpected header, want";
    for (const auto& h : expected_header) msg << ' ' << h;
    throw std::runtime_error(msg.str());
  }
  std::vector<Row> rows;
  long n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    rows.push_back(Row{n, split_line(line)});
  }
  return rows;
}

inline bool parse_int64(const std::string& s, std::int64_t& out) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto r = std::from_chars(b, e, out);
  return r.ec == std::errc{} && r.ptr == e;
}

inline bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto r = std::from_chars(b, e, out);
  return r.ec == std::errc{} && r.ptr == e;
}

// Shortest round-trip representation; keeps emitted files byte-stable.
inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace fedseq::csv
