#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

namespace gradcorr {

/// Comma-separated writer. Doubles are printed with 17 significant digits
/// so values round-trip exactly.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);

  template <typename... Ts>
  void row(const Ts&... values) {
    std::string line;
    bool first = true;
    ((append(line, values, first), first = false), ...);
    write_line(line);
  }

  void row_strings(const std::vector<std::string>& cells);

 private:
  template <typename T>
  static void append(std::string& line, const T& v, bool first) {
    if (!first) line += ',';
    if constexpr (std::is_floating_point_v<T>) {
      line += format_double(static_cast<double>(v));
    } else if constexpr (std::is_arithmetic_v<T>) {
      line += std::to_string(v);
    } else {
      line += std::string(v);
    }
  }
  static std::string format_double(double v);
  void write_line(const std::string& line);

  std::filesystem::path path_;
  std::ofstream out_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws FormatError if absent.
  std::size_t column(const std::string& name) const;
};

/// Plain CSV without quoting. Throws IoError / FormatError.
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace gradcorr
