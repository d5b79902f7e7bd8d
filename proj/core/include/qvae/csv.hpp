#pragma once

#include <string>
#include <vector>

namespace qvae {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// Decimal text with 9 significant digits ("%.9g").
std::string format_sig9(double value);

// RFC-4180-style output: header row first, fields containing commas, quotes
// or newlines are quoted (quotes doubled), newline-terminated. Rows must
// match the header width.
void emit_csv(const CsvTable& table, const std::string& path);

CsvTable parse_csv(const std::string& path);
CsvTable parse_csv_text(const std::string& text);

}  // namespace qvae
