#pragma once

// Report plumbing shared by the CLI commands: every artifact embeds its
// config and seed, volatile timings live under keys ending in
// "_seconds" so determinism checks can strip them, and outputs are
// validated against the JSON schema subset shipped under docs/schemas.

#include <string>
#include <vector>

#include "json.hpp"

namespace longvid::report {

// removes every object member whose key ends in "_seconds", recursively;
// what remains must be byte-identical across reruns with the same seed
nlohmann::json strip_volatile(const nlohmann::json& doc);

// schema subset: type, properties, required, items, enum. Returns one
// human-readable message per violation; empty means valid.
std::vector<std::string> validate_schema(const nlohmann::json& doc,
                                         const nlohmann::json& schema);

// wraps a payload with the shared envelope: config, seed, and the
// generation timestamp (volatile)
nlohmann::json envelope(const nlohmann::json& config, uint64_t seed,
                        nlohmann::json payload);

std::string render_csv(const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows);

// checks a CSV document against a column-list schema ({"columns": [...]})
std::vector<std::string> validate_csv(const std::string& text,
                                      const nlohmann::json& schema);

// two-column whitespace table for gnuplot scaling curves
std::string render_gnuplot(const std::string& comment,
                           const std::vector<std::pair<double, double>>& points);

}  // namespace longvid::report
