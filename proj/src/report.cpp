#include "iclgd/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace iclgd {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

auto key(const MetricReport& r) {
  return std::tie(r.method, r.metric, r.seed, r.n_demos, r.lr, r.epoch, r.ordering_id);
}

template <class T>
T parse_number(std::string_view field, const char* name) {
  T v{};
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
    throw std::invalid_argument(std::string("csv: bad ") + name + " field '" + std::string(field) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

void sort_rows(std::vector<MetricReport>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return key(a) < key(b); });
}

std::string to_csv(std::vector<MetricReport> rows) {
  sort_rows(rows);
  std::string out(kCsvHeader);
  out += '\n';
  for (const auto& r : rows) {
    if (!std::isfinite(r.value)) throw std::invalid_argument("csv: non-finite value for " + r.metric);
    if (r.metric.find(',') != std::string::npos || r.method.find(',') != std::string::npos) {
      throw std::invalid_argument("csv: commas are not allowed in metric or method names");
    }
    out += r.metric + ',' + format_double(r.value) + ',' + std::to_string(r.seed) + ',' +
           std::to_string(r.n_demos) + ',' + format_double(r.lr) + ',' + std::to_string(r.epoch) + ',' +
           std::to_string(r.ordering_id) + ',' + r.method + '\n';
  }
  return out;
}

void write_csv(const std::vector<MetricReport>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_csv(rows);
}

std::vector<MetricReport> parse_csv(std::string_view text) {
  std::vector<MetricReport> rows;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != kCsvHeader) throw std::invalid_argument("csv: unexpected header '" + std::string(line) + "'");
      header = false;
      continue;
    }
    const auto f = split(line);
    if (f.size() != 8) throw std::invalid_argument("csv: expected 8 fields in '" + std::string(line) + "'");
    if (f[0].empty() || f[7].empty()) throw std::invalid_argument("csv: empty metric or method");
    MetricReport r;
    r.metric = std::string(f[0]);
    r.value = parse_number<double>(f[1], "value");
    r.seed = parse_number<std::uint64_t>(f[2], "seed");
    r.n_demos = parse_number<std::size_t>(f[3], "n_demos");
    r.lr = parse_number<double>(f[4], "lr");
    r.epoch = parse_number<std::size_t>(f[5], "epoch");
    r.ordering_id = parse_number<long>(f[6], "ordering_id");
    r.method = std::string(f[7]);
    if (!std::isfinite(r.value)) throw std::invalid_argument("csv: non-finite value");
    rows.push_back(std::move(r));
  }
  if (header) throw std::invalid_argument("csv: missing header");
  return rows;
}

std::string plot_data_csv(const std::vector<MetricReport>& rows) {
  using Key = std::tuple<std::string, std::string, std::size_t, double, std::size_t>;
  std::map<Key, std::vector<double>> groups;
  for (const auto& r : rows) {
    if (r.ordering_id >= 0) continue;
    groups[{r.method, r.metric, r.n_demos, r.lr, r.epoch}].push_back(r.value);
  }
  std::ostringstream out;
  out << "method,metric,n_demos,lr,epoch,mean,std,count\n";
  for (const auto& [k, vals] : groups) {
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double ss = 0.0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    out << std::get<0>(k) << ',' << std::get<1>(k) << ',' << std::get<2>(k) << ',' << format_double(std::get<3>(k))
        << ',' << std::get<4>(k) << ',' << format_double(mean) << ','
        << format_double(std::sqrt(ss / static_cast<double>(vals.size()))) << ',' << vals.size() << '\n';
  }
  return out.str();
}

}  // namespace iclgd
