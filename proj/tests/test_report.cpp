#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "iclgd/report.hpp"
#include "iclgd/serialize.hpp"

using namespace iclgd;

namespace {

std::vector<MetricReport> sample_rows() {
  return {
      {"sen", 0.125, 2, 8, 1e-4, 200, -1, "SGD"},
      {"accuracy", 0.75, 0, 8, 0.0, 0, -1, "ICL"},
      {"token_overlap", 1.0 / 3.0, 1, 4, 5e-5, 20, 3, "GD-hat-deep"},
      {"accuracy", 0.5, 0, 2, 1e-5, 40, -1, "GD"},
      {"accuracy", 0.25, 1, 2, 1e-5, 40, -1, "GD"},
  };
}

}  // namespace

TEST_CASE("csv header and sort order") {
  const std::string csv = to_csv(sample_rows());
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "metric,value,seed,n_demos,lr,epoch,ordering_id,method");
  std::vector<std::string> methods;
  while (std::getline(in, line)) methods.push_back(line.substr(line.rfind(',') + 1));
  CHECK(methods == std::vector<std::string>{"GD", "GD", "GD-hat-deep", "ICL", "SGD"});
}

TEST_CASE("csv round trip is exact") {
  auto rows = sample_rows();
  const auto back = parse_csv(to_csv(rows));
  sort_rows(rows);
  CHECK(back == rows);
  CHECK(to_csv(back) == to_csv(rows));
}

TEST_CASE("csv output does not depend on input row order") {
  auto rows = sample_rows();
  const std::string a = to_csv(rows);
  std::reverse(rows.begin(), rows.end());
  CHECK(to_csv(rows) == a);
}

TEST_CASE("csv schema violations") {
  CHECK_THROWS_AS(parse_csv("metric,value\nx,1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_csv(""), std::invalid_argument);
  const std::string header = "metric,value,seed,n_demos,lr,epoch,ordering_id,method\n";
  CHECK_THROWS_AS(parse_csv(header + "acc,abc,0,1,0,0,-1,GD\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_csv(header + "acc,1,0,1,0,0,-1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_csv(header + "acc,nan,0,1,0,0,-1,GD\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_csv(header + ",1,0,1,0,0,-1,GD\n"), std::invalid_argument);
  CHECK(parse_csv(header).empty());

  std::vector<MetricReport> bad{{"acc", NAN, 0, 1, 0, 0, -1, "GD"}};
  CHECK_THROWS_AS(to_csv(bad), std::invalid_argument);
  std::vector<MetricReport> comma{{"a,b", 1.0, 0, 1, 0, 0, -1, "GD"}};
  CHECK_THROWS_AS(to_csv(comma), std::invalid_argument);
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.125, -2.5e-7}) {
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("plot data aggregates across seeds") {
  const std::string plot = plot_data_csv(sample_rows());
  CHECK(plot.find("method,metric,n_demos,lr,epoch,mean,std,count\n") == 0);
  CHECK(plot.find("GD,accuracy,2,1e-05,40,0.375,0.125,2\n") != std::string::npos);
  // Per-ordering rows are not aggregated.
  CHECK(plot.find("GD-hat-deep") == std::string::npos);
}

TEST_CASE("checkpoint JSON round trip") {
  SeededRng rng(1);
  ArchSpec a;
  a.layers = 2;
  a.width = 4;
  a.heads = 2;
  a.vocab_size = 13;
  a.max_len = 8;
  a.ffn_hidden = 3;
  Checkpoint ck{40, init_transformer(a, rng), 1.25};
  const Json j = to_json(ck);
  CHECK(j.at("format") == "iclgd-checkpoint");
  CHECK(j.at("version") == 1);
  const Checkpoint back = checkpoint_from_json(j);
  CHECK(back.step == 40);
  CHECK(back.held_out_loss == 1.25);
  CHECK(back.params == ck.params);

  const auto dir = std::filesystem::temp_directory_path() / "iclgd_test_report";
  std::filesystem::create_directories(dir);
  save_checkpoint(ck, dir / "ck.json");
  CHECK(load_checkpoint(dir / "ck.json").params == ck.params);

  Json broken = j;
  broken["matrices"][0]["data"].erase(0);
  CHECK_THROWS(checkpoint_from_json(broken));
  Json wrong = j;
  wrong["format"] = "other";
  CHECK_THROWS(checkpoint_from_json(wrong));
  CHECK_THROWS(load_checkpoint(dir / "missing.json"));

  SeededRng r2(2);
  Checkpoint cont{0, init_transformer(ArchSpec::toy_continuous(2, 1, 2), r2), 0.5};
  CHECK(checkpoint_from_json(to_json(cont)).params == cont.params);
}
