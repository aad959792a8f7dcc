#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace iclgd {

// One metric value with its experiment coordinates. Rows that do not vary
// along a coordinate use 0 (lr, epoch, n_demos) or -1 (ordering_id meaning
// "aggregate over orderings").
struct MetricReport {
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
  std::size_t n_demos = 0;
  double lr = 0.0;
  std::size_t epoch = 0;
  long ordering_id = -1;
  std::string method;  // ICL | GD | GD-hat-mid | GD-hat-deep | SGD | Adam | ...

  bool operator==(const MetricReport&) const = default;
};

inline constexpr std::string_view kCsvHeader = "metric,value,seed,n_demos,lr,epoch,ordering_id,method";

// Shortest round-trip decimal form.
std::string format_double(double v);

// Sort key order: method, metric, seed, n_demos, lr, epoch, ordering_id.
void sort_rows(std::vector<MetricReport>& rows);

std::string to_csv(std::vector<MetricReport> rows);
void write_csv(const std::vector<MetricReport>& rows, const std::filesystem::path& path);

// Parses a CSV produced by to_csv; throws on any row that violates the schema.
std::vector<MetricReport> parse_csv(std::string_view text);

// Long-format per-figure data: mean and population std across seeds for each
// (method, metric, n_demos, lr, epoch).
std::string plot_data_csv(const std::vector<MetricReport>& rows);

}  // namespace iclgd
