#pragma once

// JSON encodings for experiment artifacts. Matrices are written as
//   {"rows": R, "cols": C, "data": [row-major values]}
// and doubles are emitted with round-trip precision.

#include <filesystem>
#include <vector>

#include "json.hpp"

#include "iclgd/construction.hpp"
#include "iclgd/tasks.hpp"
#include "iclgd/training.hpp"
#include "iclgd/transformer.hpp"

namespace iclgd {

using Json = nlohmann::json;

Json to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);

Json to_json(const ArchSpec& a);
ArchSpec arch_from_json(const Json& j);

Json to_json(const RegressionTask& t, std::uint64_t seed);
Json to_json(const TokenTask& t, std::uint64_t seed);
RegressionTask regression_task_from_json(const Json& j);
TokenTask token_task_from_json(const Json& j);
TokenVocabulary vocabulary_from_json(const Json& j);
Json to_json(const TokenVocabulary& v);

Json to_json(const DemonstrationSet& d, std::uint64_t seed);
DemonstrationSet demonstrations_from_json(const Json& j);

// {"format": "iclgd-checkpoint", "version": 1, "step", "held_out_loss",
//  "arch", "matrices": [{"name", "rows", "cols", "data"}, ...]}
Json to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const Json& j);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Json to_json(const EquivalenceReport& r, std::uint64_t seed);

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const Json& j, const std::filesystem::path& path);

}  // namespace iclgd
