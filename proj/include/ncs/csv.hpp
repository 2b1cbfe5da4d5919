#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace ncs {

/// Shortest round-trip decimal form; NaN is written as an empty cell.
std::string format_double(double v);

/// Plain CSV table. The first line written is the column header.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  void add_row(std::vector<std::string> cells);
  std::size_t rows() const noexcept { return rows_.size(); }
  const std::vector<std::string>& columns() const noexcept { return columns_; }

  std::string str() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace ncs
