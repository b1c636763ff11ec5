// latmerge: merging, latent-attack synthesis and toy-bench runs from JSON configs.
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "latmerge/bundle_io.hpp"
#include "latmerge/merge_json.hpp"
#include "latmerge/suite_json.hpp"
#include "latmerge/toy_bench.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace latmerge;

namespace {

struct Invocation {
  std::string config_path;
  std::vector<std::string> sets;
};

// `--set a.b=v`: v is parsed as JSON when it parses, else taken as a string.
void apply_set(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, ErrorKind::validation,
          "--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    require(!part.empty(), ErrorKind::validation, "--set: empty key segment in '" + key + "'");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

json resolve_config(const Invocation& inv) {
  json cfg = json::object();
  if (!inv.config_path.empty()) {
    try {
      cfg = json::parse(read_text(inv.config_path));
    } catch (const json::exception& e) {
      fail(ErrorKind::validation, inv.config_path + ": " + e.what());
    }
    require(cfg.is_object(), ErrorKind::validation, inv.config_path + ": config must be a JSON object");
  }
  for (const auto& s : inv.sets) apply_set(cfg, s);
  return cfg;
}

std::string need_string(const json& cfg, const std::string& key) {
  require(cfg.contains(key) && cfg.at(key).is_string(), ErrorKind::validation,
          "config key '" + key + "' must be a string path");
  return cfg.at(key).get<std::string>();
}

std::vector<std::string> need_paths(const json& cfg, const std::string& key) {
  require(cfg.contains(key) && cfg.at(key).is_array(), ErrorKind::validation,
          "config key '" + key + "' must be a list of paths");
  std::vector<std::string> out;
  for (const auto& v : cfg.at(key)) {
    require(v.is_string(), ErrorKind::validation, "config key '" + key + "' must hold strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

json object_or_empty(const json& cfg, const std::string& key) {
  return cfg.contains(key) ? cfg.at(key) : json::object();
}

void emit(const json& summary) { std::cout << summary.dump() << std::endl; }

std::string file_hash(const fs::path& p) { return sha256_file(p); }

json input_hashes(const std::vector<std::string>& paths) {
  json out = json::object();
  for (const auto& p : paths) out[p] = file_hash(p);
  return out;
}

Tensor labels_tensor(const std::vector<std::size_t>& labels) {
  const Shape shape{labels.size()};
  return Tensor(shape, std::vector<float>(labels.begin(), labels.end()));
}

MergeSpec default_merge_spec() {
  MergeSpec s;
  s.lambdas = {1.0};
  s.weight_x = 0.5;
  return s;
}

MergeSpec merge_spec_or_default(const json& cfg) {
  return cfg.contains("merge") ? merge_spec_from_json(cfg.at("merge")) : default_merge_spec();
}

// --- subcommands -------------------------------------------------------------

int cmd_merge(const json& cfg) {
  reject_unknown_keys(cfg, {"base", "models", "output", "merge"}, "merge config");
  const MergeSpec spec = merge_spec_from_json(object_or_empty(cfg, "merge"));
  const std::string base_path = need_string(cfg, "base");
  const WeightMap base = load_weights(base_path);
  std::vector<WeightMap> models;
  std::vector<std::string> inputs{base_path};
  for (const auto& p : need_paths(cfg, "models")) {
    models.push_back(load_weights(p));
    inputs.push_back(p);
  }
  const WeightMap merged = merge_models(base, models, spec);
  const fs::path out = need_string(cfg, "output");
  save_weights(merged, out);
  emit({{"command", "merge"},
        {"method", method_name(spec.method)},
        {"lambdas", spec.lambdas},
        {"x", spec.weight_x ? json(*spec.weight_x) : json(nullptr)},
        {"p", spec.drop_p},
        {"K", spec.top_k_percent},
        {"seed", spec.seed},
        {"output", out.string()},
        {"sha256", file_hash(out)},
        {"inputs", input_hashes(inputs)},
        {"config", cfg}});
  return 0;
}

// Layers whose names end in the up-projection suffix recorded in metadata.
std::vector<std::string> default_layers(const WeightMap& m) {
  auto it = m.metadata.find("up_projection");
  const std::string suffix = it != m.metadata.end() ? it->second : toy_names::up_suffix;
  std::vector<std::string> out;
  for (const auto& [name, t] : m.entries)
    if (name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      out.push_back(name);
  return out;
}

int cmd_attack(const json& cfg) {
  reject_unknown_keys(cfg, {"models", "sct", "aligned", "unaligned", "layers", "probes", "attack", "output_dir"},
                      "attack config");
  AttackConfig acfg = attack_config_from_json(object_or_empty(cfg, "attack"));
  std::vector<WeightMap> models;
  const auto model_paths = need_paths(cfg, "models");
  for (const auto& p : model_paths) models.push_back(load_weights(p));
  require(!models.empty(), ErrorKind::validation, "attack: no models given");
  acfg.n = models.size();
  validate(acfg);
  for (std::size_t i = 1; i < models.size(); ++i) check_compatible(models[0], models[i]);

  std::vector<std::string> layers;
  if (cfg.contains("layers")) layers = need_paths(cfg, "layers");
  else layers = default_layers(models[0]);
  require(!layers.empty(), ErrorKind::validation, "attack: no target layers");

  std::vector<std::string> inputs = model_paths;
  inputs.push_back(need_string(cfg, "probes"));
  std::map<std::string, SctMatrix> targets;
  if (cfg.contains("sct")) {
    inputs.push_back(need_string(cfg, "sct"));
    const WeightMap sct = load_weights(need_string(cfg, "sct"));
    auto mode_it = sct.metadata.find("mode");
    const SctMode mode = mode_it != sct.metadata.end() ? parse_sct_mode(mode_it->second) : SctMode::model_diff;
    for (const auto& l : layers) targets[l] = SctMatrix{sct.at(l), l, mode};
  } else {
    require(cfg.contains("aligned") && cfg.contains("unaligned"), ErrorKind::validation,
            "attack: give either sct or the aligned/unaligned pair");
    inputs.push_back(need_string(cfg, "aligned"));
    inputs.push_back(need_string(cfg, "unaligned"));
    const WeightMap a = load_weights(need_string(cfg, "aligned"));
    const WeightMap u = load_weights(need_string(cfg, "unaligned"));
    for (const auto& l : layers) targets[l] = extract_sct_model_diff(a.at(l), u.at(l), l);
  }
  for (const auto& [l, t] : targets) require_same_shape(t.delta_w.shape(), models[0].at(l).shape(), "attack '" + l + "'");

  const WeightMap probe_file = load_weights(need_string(cfg, "probes"));
  std::map<std::string, ProbeBatch> probes;
  for (const auto& l : layers) {
    const std::string specific = "probes/" + l;
    const Tensor& x = probe_file.contains(specific) ? probe_file.at(specific) : probe_file.at("probes/malicious");
    probes[l] = ProbeBatch{x, ProbeRole::malicious, {}};
  }

  const AttackBundle bundle = synthesize_bundle(models, targets, probes, acfg);
  const fs::path dir = need_string(cfg, "output_dir");
  json outputs = json::array();
  for (std::size_t i = 0; i < models.size(); ++i) {
    const fs::path p = dir / ("attacked_" + std::to_string(i) + ".safetensors");
    save_weights(apply_attack(models[i], bundle, i), p);
    outputs.push_back({{"path", p.string()}, {"sha256", file_hash(p)}});
  }
  const fs::path bw = dir / "bundle.safetensors", bj = dir / "bundle.json";
  save_bundle(bundle, bw, bj);

  json final = json::object();
  for (const auto& [l, trace] : bundle.traces)
    final[l] = {{"l1", trace.back().l1}, {"l2", trace.back().l2}, {"objective", trace.back().objective},
                {"iterations", trace.back().iter}};
  emit({{"command", "attack"},
        {"final", final},
        {"constraint_residual", constraint_residual(bundle)},
        {"attacked", outputs},
        {"bundle", {{"weights", bw.string()}, {"sha256", file_hash(bw)}, {"trace", bj.string()}}},
        {"inputs", input_hashes(inputs)},
        {"config", cfg},
        {"attack", attack_config_to_json(acfg)}});
  return 0;
}

int cmd_extract_sct(const json& cfg) {
  reject_unknown_keys(cfg, {"mode", "aligned", "unaligned", "model", "probes", "layer", "output", "scale",
                            "flip_fraction", "safe_weight", "max_doublings"},
                      "extract-sct config");
  const SctMode mode = parse_sct_mode(cfg.value("mode", std::string("model_diff")));
  const std::string layer = cfg.value("layer", toy_names::up);
  SctMatrix sct;
  std::vector<std::string> inputs;
  if (mode == SctMode::model_diff) {
    inputs = {need_string(cfg, "aligned"), need_string(cfg, "unaligned")};
    const WeightMap a = load_weights(need_string(cfg, "aligned"));
    const WeightMap u = load_weights(need_string(cfg, "unaligned"));
    sct = extract_sct_model_diff(a.at(layer), u.at(layer), layer);
  } else {
    require(layer == toy_names::up, ErrorKind::validation,
            "gradient_contrast extraction supports the toy up-projection only");
    inputs = {need_string(cfg, "model"), need_string(cfg, "probes")};
    const ToyModel m = toy_from_weight_map(load_weights(need_string(cfg, "model")));
    const WeightMap pf = load_weights(need_string(cfg, "probes"));
    ContrastOptions opt;
    opt.scale = cfg.value("scale", opt.scale);
    opt.flip_fraction = cfg.value("flip_fraction", opt.flip_fraction);
    opt.safe_weight = cfg.value("safe_weight", opt.safe_weight);
    opt.max_doublings = cfg.value("max_doublings", opt.max_doublings);
    sct = extract_sct_gradient_contrast(m, {pf.at("probes/benign"), ProbeRole::safe, {}},
                                        {pf.at("probes/malicious"), ProbeRole::unsafe, {}}, opt);
  }
  WeightMap out;
  out.entries.emplace(layer, sct.delta_w);
  out.metadata = {{"mode", sct_mode_name(sct.mode)}, {"layer", layer}};
  const fs::path p = need_string(cfg, "output");
  save_weights(out, p);
  emit({{"command", "extract-sct"},
        {"mode", sct_mode_name(mode)},
        {"layer", layer},
        {"frobenius_norm", frobenius_norm(sct.delta_w)},
        {"output", p.string()},
        {"sha256", file_hash(p)},
        {"inputs", input_hashes(inputs)},
        {"config", cfg}});
  return 0;
}

SuiteOptions suite_from(const json& cfg) { return suite_options_from_json(object_or_empty(cfg, "suite")); }

int cmd_toy_gen(const json& cfg) {
  reject_unknown_keys(cfg, {"suite", "output_dir"}, "toy-gen config");
  const SuiteOptions o = suite_from(cfg);
  const ToySuite s = make_toy_suite(o);
  const fs::path dir = need_string(cfg, "output_dir");
  const std::map<std::string, const ToyModel*> models = {
      {"base", &s.m_base}, {"safe", &s.m_safe}, {"unsafe", &s.m_unsafe},
      {"expert_0", &s.experts[0]}, {"expert_1", &s.experts[1]}};
  json files = json::object();
  for (const auto& [name, m] : models) {
    const fs::path p = dir / (name + ".safetensors");
    save_weights(to_weight_map(*m), p);
    files[name] = {{"path", p.string()}, {"sha256", file_hash(p)}};
  }
  WeightMap probes;
  probes.entries.emplace("probes/malicious", s.malicious.inputs);
  probes.entries.emplace("probes/malicious_eval", s.malicious_eval.inputs);
  probes.entries.emplace("probes/benign", s.benign.inputs);
  probes.entries.emplace("probes/benign_eval", s.benign_eval.inputs);
  probes.entries.emplace("labels/benign", labels_tensor(s.benign.labels));
  probes.entries.emplace("labels/benign_eval", labels_tensor(s.benign_eval.labels));
  probes.entries.emplace("split", Tensor(Shape{s.split.size()}, s.split));
  probes.metadata = {{"refuse_class", std::to_string(s.m_safe.refuse_class)}};
  const fs::path pp = dir / "probes.safetensors";
  save_weights(probes, pp);
  files["probes"] = {{"path", pp.string()}, {"sha256", file_hash(pp)}};
  emit({{"command", "toy-gen"},
        {"derived_seed", s.seed},
        {"attempts", s.attempts},
        {"hs_safe", harmful_score(s.m_safe, s.malicious_eval)},
        {"hs_unsafe", harmful_score(s.m_unsafe, s.malicious_eval)},
        {"expert_accuracy", {capability_accuracy(s.experts[0], expert_task_probes(s, 0)),
                             capability_accuracy(s.experts[1], expert_task_probes(s, 1))}},
        {"files", files},
        {"suite", suite_options_to_json(o)}});
  return 0;
}

std::string bench_csv(const ExperimentTable& t) {
  std::string out = "row,harmful_score,accuracy,nll,ppl\n";
  for (const auto& [name, r] : t.rows)
    out += name + "," + format_sig6(r.harmful_score) + "," + format_sig6(r.accuracy) + "," +
           format_sig6(r.nll) + "," + format_sig6(r.ppl) + "\n";
  return out;
}

int cmd_bench(const json& cfg) {
  reject_unknown_keys(cfg, {"suite", "merge", "attack", "output"}, "bench config");
  const SuiteOptions o = suite_from(cfg);
  const MergeSpec spec = merge_spec_or_default(cfg);
  const AttackConfig acfg = attack_config_from_json(object_or_empty(cfg, "attack"));
  const ToySuite s = make_toy_suite(o);
  const ExperimentTable t = run_attack_experiment(s, spec, acfg);
  const fs::path out = need_string(cfg, "output");
  const std::string csv = bench_csv(t);
  atomic_write(out, csv);
  json rows = json::object();
  for (const auto& [name, r] : t.rows)
    rows[name] = {{"hs", r.harmful_score}, {"acc", r.accuracy}, {"nll", r.nll}, {"ppl", r.ppl}};
  emit({{"command", "bench"},
        {"rows", rows},
        {"final_l1", t.final_l1},
        {"final_l2", t.final_l2},
        {"constraint_residual", t.constraint_residual},
        {"output", out.string()},
        {"sha256", sha256_hex(csv)},
        {"derived_seed", s.seed},
        {"suite", suite_options_to_json(o)},
        {"merge", merge_spec_to_json(spec)},
        {"attack", attack_config_to_json(acfg)}});
  return 0;
}

int cmd_sweep(const json& cfg) {
  reject_unknown_keys(cfg, {"suite", "axis", "grid", "merge", "attack", "output"}, "sweep config");
  const SweepAxis axis = parse_axis(cfg.value("axis", std::string("lambda")));
  std::vector<double> grid = default_grid(axis);
  if (cfg.contains("grid")) {
    try {
      grid = cfg.at("grid").get<std::vector<double>>();
    } catch (const json::exception& e) {
      fail(ErrorKind::validation, std::string("sweep grid: ") + e.what());
    }
  }
  require(!grid.empty() && std::is_sorted(grid.begin(), grid.end()), ErrorKind::validation,
          "sweep grid must be non-empty and sorted");
  const MergeSpec fixed = cfg.contains("merge") ? merge_spec_from_json(cfg.at("merge")) : default_fixed_spec(axis);
  const AttackConfig acfg = attack_config_from_json(object_or_empty(cfg, "attack"));
  const SuiteOptions o = suite_from(cfg);
  const ToySuite s = make_toy_suite(o);
  const auto rows = sweep(s, axis, grid, fixed, acfg);
  const std::string csv = sweep_csv(rows);
  const fs::path out = need_string(cfg, "output");
  atomic_write(out, csv);
  json hs = json::array();
  for (const auto& r : rows) hs.push_back({r.value, r.hs_merged});
  emit({{"command", "sweep"},
        {"axis", axis_name(axis)},
        {"hs_merged", hs},
        {"output", out.string()},
        {"sha256", sha256_hex(csv)},
        {"derived_seed", s.seed},
        {"suite", suite_options_to_json(o)},
        {"merge", merge_spec_to_json(fixed)},
        {"attack", attack_config_to_json(acfg)}});
  return 0;
}

int cmd_sam_search(const json& cfg) {
  reject_unknown_keys(cfg, {"suite", "attack", "models", "base", "probes"}, "sam-search config");
  ToyModel m1, m2, base;
  ProbeBatch probes;
  json source;
  if (cfg.contains("models")) {
    const auto paths = need_paths(cfg, "models");
    require(paths.size() == 2, ErrorKind::validation, "sam-search: models must list two files");
    m1 = toy_from_weight_map(load_weights(paths[0]));
    m2 = toy_from_weight_map(load_weights(paths[1]));
    base = toy_from_weight_map(load_weights(need_string(cfg, "base")));
    probes = {load_weights(need_string(cfg, "probes")).at("probes/malicious"), ProbeRole::malicious, {}};
    source = {{"inputs", input_hashes({paths[0], paths[1], need_string(cfg, "base"), need_string(cfg, "probes")})}};
  } else {
    const SuiteOptions o = suite_from(cfg);
    const AttackConfig acfg = attack_config_from_json(object_or_empty(cfg, "attack"));
    const ToySuite s = make_toy_suite(o);
    const auto attacked = attacked_experts(s, synthesize_for_suite(s, acfg));
    m1 = attacked[0];
    m2 = attacked[1];
    base = merge_base(s);
    probes = s.malicious;
    source = {{"suite", suite_options_to_json(o)}, {"attack", attack_config_to_json(acfg)}, {"derived_seed", s.seed}};
  }
  const double x = safety_aware_merge_search(m1, m2, probes, base);
  emit({{"command", "sam-search"},
        {"x_star", x},
        {"degeneracy", std::min(x, 1.0 - x)},
        {"loss_at_x_star", refusal_loss(m1, m2, base, probes, x)},
        {"loss_at_half", refusal_loss(m1, m2, base, probes, 0.5)},
        {"source", source}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latmerge: model merging and latent merge-attack toolkit"};
  app.require_subcommand(1);
  std::map<std::string, std::function<int(const json&)>> handlers = {
      {"merge", cmd_merge},         {"attack", cmd_attack}, {"extract-sct", cmd_extract_sct},
      {"toy-gen", cmd_toy_gen},     {"bench", cmd_bench},   {"sweep", cmd_sweep},
      {"sam-search", cmd_sam_search}};
  const std::map<std::string, std::string> blurbs = {
      {"merge", "merge weight files with task arithmetic, DARE, TIES or KnOTS"},
      {"attack", "synthesize latent attack components and write attacked models"},
      {"extract-sct", "extract the safety-critical transformation of a layer"},
      {"toy-gen", "generate a toy suite (models and probes)"},
      {"bench", "run the six-row attack experiment on a toy suite"},
      {"sweep", "sweep one merge hyperparameter and write CSV"},
      {"sam-search", "run the safety-aware merge weight search"}};
  std::map<std::string, Invocation> invocations;
  for (const auto& [name, blurb] : blurbs) {
    auto* sub = app.add_subcommand(name, blurb);
    auto& inv = invocations[name];
    sub->add_option("--config", inv.config_path, "JSON config file");
    sub->add_option("--set", inv.sets, "override key=value (dotted keys for nesting)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::validation);
  }

  for (const auto& [name, handler] : handlers) {
    if (!app.got_subcommand(name)) continue;
    try {
      const json cfg = resolve_config(invocations[name]);
      std::cerr << "latmerge " << name << " config " << cfg.dump() << "\n";
      return handler(cfg);
    } catch (const Error& e) {
      std::cerr << "latmerge " << name << ": " << e.what() << "\n";
      return static_cast<int>(e.kind());
    } catch (const json::exception& e) {
      std::cerr << "latmerge " << name << ": " << e.what() << "\n";
      return static_cast<int>(ErrorKind::validation);
    } catch (const fs::filesystem_error& e) {
      std::cerr << "latmerge " << name << ": " << e.what() << "\n";
      return static_cast<int>(ErrorKind::io);
    } catch (const std::exception& e) {
      std::cerr << "latmerge " << name << ": " << e.what() << "\n";
      return static_cast<int>(ErrorKind::io);
    }
  }
  return static_cast<int>(ErrorKind::validation);
}
