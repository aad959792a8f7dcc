#include "iclgd/serialize.hpp"

#include <fstream>
#include <map>
#include <stdexcept>

namespace iclgd {

Json to_json(const Matrix& m) {
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.values().begin(), m.values().end())}};
}

Matrix matrix_from_json(const Json& j) {
  return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

Json to_json(const ArchSpec& a) {
  return Json{{"variant", a.variant == ModelVariant::discrete ? "discrete" : "continuous"},
              {"attention", a.attention == AttentionKind::softmax ? "softmax" : "linear"},
              {"causal", a.causal},
              {"layers", a.layers},
              {"width", a.width},
              {"heads", a.heads},
              {"vocab_size", a.vocab_size},
              {"max_len", a.max_len},
              {"ffn_hidden", a.ffn_hidden},
              {"d_x", a.d_x},
              {"d_y", a.d_y},
              {"init_std", a.init_std}};
}

ArchSpec arch_from_json(const Json& j) {
  ArchSpec a;
  const std::string variant = j.value("variant", std::string("discrete"));
  if (variant == "continuous") {
    a = ArchSpec::toy_continuous(j.value("d_x", std::size_t{2}), j.value("d_y", std::size_t{1}),
                                 j.value("layers", std::size_t{1}));
  } else if (variant != "discrete") {
    throw std::invalid_argument("arch: unknown variant '" + variant + "'");
  }
  const std::string attention = j.value("attention", a.attention == AttentionKind::softmax ? "softmax" : "linear");
  if (attention != "softmax" && attention != "linear") {
    throw std::invalid_argument("arch: unknown attention '" + attention + "'");
  }
  a.attention = attention == "softmax" ? AttentionKind::softmax : AttentionKind::linear;
  a.causal = j.value("causal", a.causal);
  a.layers = j.value("layers", a.layers);
  a.width = j.value("width", a.width);
  a.heads = j.value("heads", a.heads);
  a.vocab_size = j.value("vocab_size", a.vocab_size);
  a.max_len = j.value("max_len", a.max_len);
  a.ffn_hidden = j.value("ffn_hidden", a.ffn_hidden);
  a.d_x = j.value("d_x", a.d_x);
  a.d_y = j.value("d_y", a.d_y);
  a.init_std = j.value("init_std", a.init_std);
  a.validate();
  return a;
}

Json to_json(const TokenVocabulary& v) {
  return Json{{"size", v.size}, {"delimiter", v.delimiter}, {"features", v.features}, {"labels", v.labels}};
}

TokenVocabulary vocabulary_from_json(const Json& j) {
  TokenVocabulary v = TokenVocabulary::standard();
  v.size = j.value("size", v.size);
  v.delimiter = j.value("delimiter", v.delimiter);
  if (j.contains("features")) v.features = j.at("features").get<std::vector<TokenId>>();
  if (j.contains("labels")) v.labels = j.at("labels").get<std::vector<TokenId>>();
  v.validate();
  return v;
}

Json to_json(const RegressionTask& t, std::uint64_t seed) {
  return Json{{"kind", "regression"}, {"d_x", t.d_x()},        {"d_y", t.d_y()},
              {"input_std", t.input_std}, {"w_star", to_json(t.w_star)}, {"id", t.id},
              {"seed", seed}};
}

Json to_json(const TokenTask& t, std::uint64_t seed) {
  Json table = Json::array();
  for (std::size_t i = 0; i < t.table.size(); ++i) table.push_back({t.vocab.features[i], t.table[i]});
  return Json{{"kind", "token"}, {"vocab", to_json(t.vocab)}, {"table", table}, {"id", t.id}, {"seed", seed}};
}

RegressionTask regression_task_from_json(const Json& j) {
  if (j.at("kind") != "regression") throw std::invalid_argument("task: expected kind 'regression'");
  RegressionTask t;
  t.w_star = matrix_from_json(j.at("w_star"));
  t.input_std = j.value("input_std", 1.0);
  t.id = j.value("id", std::uint64_t{0});
  return t;
}

TokenTask token_task_from_json(const Json& j) {
  if (j.at("kind") != "token") throw std::invalid_argument("task: expected kind 'token'");
  TokenTask t;
  t.vocab = vocabulary_from_json(j.at("vocab"));
  std::map<TokenId, TokenId> table;
  for (const auto& row : j.at("table")) table[row.at(0).get<TokenId>()] = row.at(1).get<TokenId>();
  for (TokenId f : t.vocab.features) {
    auto it = table.find(f);
    if (it == table.end()) throw std::invalid_argument("task: table misses feature " + std::to_string(f));
    t.table.push_back(it->second);
  }
  t.id = j.value("id", std::uint64_t{0});
  t.validate();
  return t;
}

Json to_json(const DemonstrationSet& d, std::uint64_t seed) {
  Json pairs = Json::array();
  if (d.is_continuous()) {
    for (const auto& p : d.regression()) pairs.push_back({{"x", to_json(p.x)}, {"y", to_json(p.y)}});
  } else {
    for (const auto& p : d.tokens()) pairs.push_back({{"x", p.x}, {"y", p.y}});
  }
  return Json{{"kind", d.is_continuous() ? "regression" : "token"}, {"task_id", d.task_id}, {"seed", seed},
              {"pairs", pairs}};
}

DemonstrationSet demonstrations_from_json(const Json& j) {
  DemonstrationSet d;
  d.task_id = j.value("task_id", std::uint64_t{0});
  const std::string kind = j.at("kind");
  if (kind == "regression") {
    std::vector<RegressionPair> pairs;
    for (const auto& p : j.at("pairs")) pairs.push_back({matrix_from_json(p.at("x")), matrix_from_json(p.at("y"))});
    d.pairs = std::move(pairs);
  } else if (kind == "token") {
    std::vector<TokenPair> pairs;
    for (const auto& p : j.at("pairs")) pairs.push_back({p.at("x").get<TokenId>(), p.at("y").get<TokenId>()});
    d.pairs = std::move(pairs);
  } else {
    throw std::invalid_argument("demonstrations: unknown kind '" + kind + "'");
  }
  return d;
}

Json to_json(const Checkpoint& c) {
  Json mats = Json::array();
  c.params.for_each([&](const ParamId& id, const Matrix& m) {
    Json jm = to_json(m);
    jm["name"] = id.name();
    mats.push_back(std::move(jm));
  });
  Json j{{"format", "iclgd-checkpoint"}, {"version", 1}, {"step", c.step}, {"arch", to_json(c.params.arch)},
         {"matrices", mats}};
  j["held_out_loss"] = std::isfinite(c.held_out_loss) ? Json(c.held_out_loss) : Json(nullptr);
  return j;
}

Checkpoint checkpoint_from_json(const Json& j) {
  if (j.value("format", std::string()) != "iclgd-checkpoint") {
    throw std::invalid_argument("checkpoint: missing format tag 'iclgd-checkpoint'");
  }
  if (j.value("version", 0) != 1) throw std::invalid_argument("checkpoint: unsupported version");
  Checkpoint c;
  c.step = j.at("step").get<std::size_t>();
  if (j.contains("held_out_loss") && !j.at("held_out_loss").is_null()) c.held_out_loss = j.at("held_out_loss");

  const ArchSpec arch = arch_from_json(j.at("arch"));
  SeededRng rng(0);
  c.params = init_transformer(arch, rng);
  std::map<std::string, Matrix> by_name;
  for (const auto& jm : j.at("matrices")) by_name.emplace(jm.at("name").get<std::string>(), matrix_from_json(jm));
  c.params.for_each([&](const ParamId& id, Matrix& m) {
    auto it = by_name.find(id.name());
    if (it == by_name.end()) throw std::invalid_argument("checkpoint: missing matrix " + id.name());
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols()) {
      throw std::invalid_argument("checkpoint: matrix " + id.name() + " has shape " +
                                  it->second.shape_string() + ", expected " + m.shape_string());
    }
    m = std::move(it->second);
  });
  return c;
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Json::parse(in);
}

void write_json_file(const Json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) { write_json_file(to_json(c), path); }

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(read_json_file(path)); }

Json to_json(const EquivalenceReport& r, std::uint64_t seed) {
  return Json{{"d_x", r.d_x}, {"d_y", r.d_y}, {"n", r.n}, {"eta", r.eta}, {"seed", seed},
              {"max_abs_diff", r.max_abs_diff}, {"pass", r.pass}};
}

}  // namespace iclgd
