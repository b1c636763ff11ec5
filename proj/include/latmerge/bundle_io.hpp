#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "latmerge/merge_json.hpp"
#include "latmerge/trojan.hpp"
#include "latmerge/weights.hpp"

namespace latmerge {

inline nlohmann::json attack_config_to_json(const AttackConfig& c) {
  return {{"alpha", c.alpha},         {"beta", c.beta},           {"n", c.n},
          {"max_iters", c.max_iters}, {"step_size", c.step_size}, {"init_scale", c.init_scale},
          {"tol", c.tol},             {"seed", c.seed}};
}

inline AttackConfig attack_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"alpha", "beta", "n", "max_iters", "step_size", "init_scale", "tol", "seed"},
                      "attack config");
  AttackConfig c;
  auto list = [](const nlohmann::json& v) {
    return v.is_array() ? v.get<std::vector<double>>() : std::vector<double>{v.get<double>()};
  };
  try {
    if (j.contains("alpha")) c.alpha = list(j.at("alpha"));
    if (j.contains("beta")) c.beta = list(j.at("beta"));
    if (j.contains("n")) c.n = j.at("n").get<std::size_t>();
    if (j.contains("max_iters")) c.max_iters = j.at("max_iters").get<int>();
    if (j.contains("step_size")) c.step_size = j.at("step_size").get<double>();
    if (j.contains("init_scale")) c.init_scale = j.at("init_scale").get<double>();
    if (j.contains("tol")) c.tol = j.at("tol").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("attack config: ") + e.what());
  }
  validate(c);
  return c;
}

inline std::string bundle_component_name(const std::string& layer, std::size_t i) {
  return "attack/" + layer + "/" + std::to_string(i);
}

inline std::string bundle_target_name(const std::string& layer) { return "attack/" + layer + "/sct"; }

inline WeightMap bundle_to_weight_map(const AttackBundle& b) {
  WeightMap w;
  for (const auto& [layer, comps] : b.components)
    for (std::size_t i = 0; i < comps.size(); ++i) w.entries.emplace(bundle_component_name(layer, i), comps[i]);
  for (const auto& [layer, sct] : b.targets) w.entries.emplace(bundle_target_name(layer), sct.delta_w);
  w.metadata = {{"format", "attack-bundle"}, {"n", std::to_string(b.config.n)}};
  return w;
}

// Trace columns as flat arrays so they drop straight into a CSV.
inline nlohmann::json bundle_sidecar(const AttackBundle& b) {
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [layer, trace] : b.traces) {
    nlohmann::json t;
    std::vector<int> iters;
    std::vector<double> obj, step;
    const std::size_t n = trace.empty() ? 0 : trace.front().l1.size();
    std::vector<std::vector<double>> l1(n), l2(n);
    for (const auto& e : trace) {
      iters.push_back(e.iter);
      obj.push_back(e.objective);
      step.push_back(e.step);
      for (std::size_t i = 0; i < n; ++i) {
        l1[i].push_back(e.l1[i]);
        l2[i].push_back(e.l2[i]);
      }
    }
    t["iter"] = iters;
    t["objective"] = obj;
    t["step"] = step;
    t["l1"] = l1;
    t["l2"] = l2;
    layers[layer] = {{"mode", sct_mode_name(b.targets.at(layer).mode)}, {"trace", t}};
  }
  return {{"config", attack_config_to_json(b.config)}, {"layers", layers}};
}

inline void save_bundle(const AttackBundle& b, const std::filesystem::path& weights,
                        const std::filesystem::path& sidecar) {
  save_weights(bundle_to_weight_map(b), weights);
  atomic_write(sidecar, bundle_sidecar(b).dump(2) + "\n");
}

inline AttackBundle load_bundle(const std::filesystem::path& weights, const std::filesystem::path& sidecar) {
  const WeightMap w = load_weights(weights);
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(read_text(sidecar));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, sidecar.string() + ": " + e.what());
  }
  AttackBundle b;
  b.config = attack_config_from_json(side.at("config"));
  for (const auto& [layer, info] : side.at("layers").items()) {
    SctMatrix sct{w.at(bundle_target_name(layer)), layer, parse_sct_mode(info.at("mode").get<std::string>())};
    b.targets[layer] = sct;
    std::vector<Tensor> comps;
    for (std::size_t i = 0; i < b.config.n; ++i) comps.push_back(w.at(bundle_component_name(layer, i)));
    b.components[layer] = std::move(comps);
    const auto& t = info.at("trace");
    const auto iters = t.at("iter").get<std::vector<int>>();
    const auto obj = t.at("objective").get<std::vector<double>>();
    const auto step = t.at("step").get<std::vector<double>>();
    const auto l1 = t.at("l1").get<std::vector<std::vector<double>>>();
    const auto l2 = t.at("l2").get<std::vector<std::vector<double>>>();
    std::vector<TraceEntry> trace;
    for (std::size_t k = 0; k < iters.size(); ++k) {
      TraceEntry e{iters[k], {}, {}, obj[k], step[k]};
      for (std::size_t i = 0; i < l1.size(); ++i) {
        e.l1.push_back(l1[i][k]);
        e.l2.push_back(l2[i][k]);
      }
      trace.push_back(std::move(e));
    }
    b.traces[layer] = std::move(trace);
  }
  return b;
}

}  // namespace latmerge
