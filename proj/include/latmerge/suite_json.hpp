#pragma once

#include "json.hpp"
#include "latmerge/merge_json.hpp"
#include "latmerge/toy_bench.hpp"

namespace latmerge {

inline nlohmann::json suite_options_to_json(const SuiteOptions& o) {
  return {{"seed", o.seed},
          {"d_model", o.d_model},
          {"d_ff", o.d_ff},
          {"classes", o.classes},
          {"probes_per_set", o.probes_per_set},
          {"trigger", o.trigger},
          {"refuse_prior", o.refuse_prior},
          {"teacher_gain", o.teacher_gain},
          {"malicious_content", o.malicious_content},
          {"lr", o.lr},
          {"base_steps", o.base_steps},
          {"tune_steps", o.tune_steps},
          {"expert_steps", o.expert_steps},
          {"max_attempts", o.max_attempts}};
}

inline SuiteOptions suite_options_from_json(const nlohmann::json& j) {
  SuiteOptions o;
  const nlohmann::json defaults = suite_options_to_json(o);
  std::set<std::string> keys;
  for (const auto& [k, v] : defaults.items()) keys.insert(k);
  reject_unknown_keys(j, keys, "suite");
  nlohmann::json merged = defaults;
  merged.update(j);
  try {
    o.seed = merged.at("seed").get<std::uint64_t>();
    o.d_model = merged.at("d_model").get<std::size_t>();
    o.d_ff = merged.at("d_ff").get<std::size_t>();
    o.classes = merged.at("classes").get<std::size_t>();
    o.probes_per_set = merged.at("probes_per_set").get<std::size_t>();
    o.trigger = merged.at("trigger").get<double>();
    o.refuse_prior = merged.at("refuse_prior").get<double>();
    o.teacher_gain = merged.at("teacher_gain").get<double>();
    o.malicious_content = merged.at("malicious_content").get<double>();
    o.lr = merged.at("lr").get<double>();
    o.base_steps = merged.at("base_steps").get<int>();
    o.tune_steps = merged.at("tune_steps").get<int>();
    o.expert_steps = merged.at("expert_steps").get<int>();
    o.max_attempts = merged.at("max_attempts").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("suite: ") + e.what());
  }
  require(o.lr > 0 && o.base_steps >= 0 && o.tune_steps >= 0 && o.expert_steps >= 0 && o.max_attempts >= 1,
          ErrorKind::validation, "suite: lr must be positive, step counts non-negative, max_attempts >= 1");
  return o;
}

}  // namespace latmerge
