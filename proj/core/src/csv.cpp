#include "qvae/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qvae {

std::string format_sig9(double value) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.9g", value);
  return buffer;
}

namespace {

bool needs_quoting(const std::string& field) {
  return field.find_first_of(",\"\n\r") != std::string::npos;
}

std::string quoted(const std::string& field) {
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

void write_row(std::ostream& os, const std::vector<std::string>& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) os << ',';
    os << (needs_quoting(row[i]) ? quoted(row[i]) : row[i]);
  }
  os << '\n';
}

}  // namespace

void emit_csv(const CsvTable& table, const std::string& path) {
  for (const auto& row : table.rows)
    if (row.size() != table.header.size())
      throw std::invalid_argument("emit_csv: row width differs from header");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("emit_csv: cannot open " + path);
  write_row(os, table.header);
  for (const auto& row : table.rows) write_row(os, row);
  os.flush();
  if (!os) throw std::runtime_error("emit_csv: write failed: " + path);
}

CsvTable parse_csv_text(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> current;
  std::string field;
  bool in_quotes = false;
  bool row_has_content = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    switch (c) {
      case '"':
        in_quotes = true;
        row_has_content = true;
        break;
      case ',':
        current.push_back(std::move(field));
        field.clear();
        row_has_content = true;
        break;
      case '\r':
        break;
      case '\n':
        if (row_has_content || !field.empty() || !current.empty()) {
          current.push_back(std::move(field));
          field.clear();
          records.push_back(std::move(current));
          current.clear();
          row_has_content = false;
        }
        break;
      default:
        field += c;
        row_has_content = true;
    }
  }
  if (in_quotes) throw std::runtime_error("parse_csv: unterminated quote");
  if (row_has_content || !field.empty() || !current.empty()) {
    current.push_back(std::move(field));
    records.push_back(std::move(current));
  }
  if (records.empty()) throw std::runtime_error("parse_csv: empty input");
  CsvTable table;
  table.header = std::move(records.front());
  table.rows.assign(records.begin() + 1, records.end());
  return table;
}

CsvTable parse_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("parse_csv: cannot open " + path);
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return parse_csv_text(buffer.str());
}

}  // namespace qvae
