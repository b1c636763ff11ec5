#pragma once

#include <set>
#include <string>

#include "json.hpp"
#include "latmerge/merge.hpp"

namespace latmerge {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                                const std::string& context) {
  require(j.is_object(), ErrorKind::validation, context + ": expected a JSON object");
  for (const auto& [k, v] : j.items())
    require(allowed.count(k) != 0, ErrorKind::validation, context + ": unknown key '" + k + "'");
}

inline nlohmann::json merge_spec_to_json(const MergeSpec& s) {
  nlohmann::json j;
  j["method"] = method_name(s.method);
  j["lambdas"] = s.lambdas;
  j["weight_x"] = s.weight_x ? nlohmann::json(*s.weight_x) : nlohmann::json(nullptr);
  j["drop_p"] = s.drop_p;
  j["top_k_percent"] = s.top_k_percent;
  j["seed"] = s.seed;
  j["knots_inner"] = s.knots_inner ? merge_spec_to_json(*s.knots_inner) : nlohmann::json(nullptr);
  return j;
}

inline MergeSpec merge_spec_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"method", "lambdas", "weight_x", "drop_p", "top_k_percent", "seed", "knots_inner"},
                      "merge spec");
  MergeSpec s;
  try {
    if (j.contains("method")) s.method = parse_method(j.at("method").get<std::string>());
    if (j.contains("lambdas")) {
      const auto& l = j.at("lambdas");
      s.lambdas = l.is_array() ? l.get<std::vector<double>>() : std::vector<double>{l.get<double>()};
    }
    if (j.contains("weight_x") && !j.at("weight_x").is_null()) s.weight_x = j.at("weight_x").get<double>();
    if (j.contains("drop_p")) s.drop_p = j.at("drop_p").get<double>();
    if (j.contains("top_k_percent")) s.top_k_percent = j.at("top_k_percent").get<double>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("knots_inner") && !j.at("knots_inner").is_null())
      s.knots_inner = std::make_shared<const MergeSpec>(merge_spec_from_json(j.at("knots_inner")));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("merge spec: ") + e.what());
  }
  validate(s);
  return s;
}

}  // namespace latmerge
