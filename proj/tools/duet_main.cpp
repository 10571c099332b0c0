#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "duet/agent.hpp"
#include "duet/envsim.hpp"
#include "duet/log.hpp"
#include "duet/model.hpp"
#include "duet/trace.hpp"
#include "duet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw duet::DataError("cannot open file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw duet::DataError("cannot open file for writing: " + path);
  f << content;
  if (!f) throw duet::DataError("failed writing file: " + path);
}

struct Manifest {
  uint64_t seed = 0;
  duet::EnvConfig env;
  duet::Vocabulary vocab;
  duet::InstructionStyle style = duet::InstructionStyle::kGoalOriented;
  std::vector<duet::HouseData> houses;
};

Manifest load_manifest(const std::string& path) {
  const json j = json::parse(read_file(path));
  if (!j.contains("schema_version") || j["schema_version"].get<int>() != 1)
    throw duet::DataError("manifest: unsupported schema version");
  Manifest m;
  m.seed = j["seed"].get<uint64_t>();
  const json& c = j["env_config"];
  m.env = {c["node_count"].get<int>(),      c["mean_degree"].get<double>(),
           c["n_views"].get<int>(),         c["m_objects"].get<int>(),
           c["room_count"].get<int>(),      c["object_class_count"].get<int>(),
           c["feature_dim"].get<int>()};
  m.vocab = {j["vocabulary"]["room_count"].get<int>(),
             j["vocabulary"]["object_class_count"].get<int>()};
  m.style = j.value("style", "goal_oriented") == "step_by_step"
                ? duet::InstructionStyle::kStepByStep
                : duet::InstructionStyle::kGoalOriented;
  const fs::path dir = fs::path(path).parent_path();
  for (const json& h : j["houses"]) {
    const std::string file = (dir / h["file"].get<std::string>()).string();
    m.houses.push_back(duet::house_from_json(read_file(file)));
  }
  return m;
}

duet::DuetConfig model_config_for(const Manifest& m, const std::string& config_path) {
  if (!config_path.empty()) {
    duet::DuetConfig cfg = duet::DuetConfig::from_json(read_file(config_path));
    if (cfg.input_dim != m.env.feature_dim)
      throw duet::DataError("model config input_dim does not match the dataset feature_dim");
    return cfg;
  }
  return duet::DuetConfig::desk(m.vocab, m.env);
}

std::vector<duet::EpisodeRef> train_refs(const Manifest& m) {
  std::vector<duet::EpisodeRef> refs;
  for (const duet::HouseData& h : m.houses)
    for (const duet::Episode& e : h.episodes)
      if (e.split == duet::Split::kTrain) refs.push_back({&h.env, &e});
  return refs;
}

duet::Split split_from_string(const std::string& s) {
  if (s == "train") return duet::Split::kTrain;
  if (s == "seen") return duet::Split::kSeen;
  if (s == "unseen") return duet::Split::kUnseen;
  throw duet::DataError("unknown split: " + s);
}

int cmd_gen_env(uint64_t seed, int houses, int nodes, double split_ratio, double mean_degree,
                int views, int objects, int rooms, int classes, int feature_dim,
                const std::string& style, int train_eps, int seen_eps, int unseen_eps,
                const std::string& out_dir) {
  if (houses < 1) throw duet::DataError("gen-env: --houses must be >= 1");
  if (split_ratio <= 0.0 || split_ratio > 1.0)
    throw duet::DataError("gen-env: --split-ratio must be in (0,1]");
  duet::DatasetConfig cfg;
  cfg.houses = houses;
  cfg.unseen_ratio = 1.0 - split_ratio;
  cfg.train_episodes = train_eps;
  cfg.seen_episodes = seen_eps;
  cfg.unseen_episodes = unseen_eps;
  cfg.env.node_count = nodes;
  cfg.env.mean_degree = mean_degree;
  cfg.env.n_views = views;
  cfg.env.m_objects = objects;
  cfg.env.room_count = rooms;
  cfg.env.object_class_count = classes;
  cfg.env.feature_dim = feature_dim;
  cfg.style = style == "step_by_step" ? duet::InstructionStyle::kStepByStep
                                      : duet::InstructionStyle::kGoalOriented;
  const std::vector<duet::HouseData> dataset = duet::build_dataset(seed, cfg);
  const duet::Vocabulary vocab{cfg.env.room_count, cfg.env.object_class_count};

  fs::create_directories(out_dir);
  json manifest;
  manifest["schema_version"] = 1;
  manifest["seed"] = seed;
  manifest["style"] = style;
  manifest["env_config"] = {{"node_count", cfg.env.node_count},
                            {"mean_degree", cfg.env.mean_degree},
                            {"n_views", cfg.env.n_views},
                            {"m_objects", cfg.env.m_objects},
                            {"room_count", cfg.env.room_count},
                            {"object_class_count", cfg.env.object_class_count},
                            {"feature_dim", cfg.env.feature_dim}};
  manifest["vocabulary"] = {{"room_count", vocab.room_count},
                            {"object_class_count", vocab.object_class_count}};
  json house_list = json::array();
  for (const duet::HouseData& h : dataset) {
    char name[64];
    std::snprintf(name, sizeof(name), "house_%03d.json", h.env.house_id);
    write_file((fs::path(out_dir) / name).string(), duet::house_to_json(h, vocab));
    house_list.push_back({{"id", h.env.house_id},
                          {"file", name},
                          {"split", duet::split_name(h.house_split)}});
  }
  manifest["houses"] = house_list;
  write_file((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2));
  duet::log_info("wrote %zu houses to %s", dataset.size(), out_dir.c_str());
  return kExitOk;
}

int cmd_train(bool is_finetune, const std::string& manifest_path,
              const std::string& model_config_path, const std::string& init_ckpt, int steps,
              uint64_t seed, double lr, double lambda, int t_max, const std::string& out_ckpt,
              const std::string& log_path, const std::string& eval_split) {
  const Manifest m = load_manifest(manifest_path);
  const duet::DuetConfig cfg = model_config_for(m, model_config_path);
  duet::DuetModel model(cfg, seed);
  if (!init_ckpt.empty()) model.store().load(init_ckpt);

  duet::TrainConfig tc;
  tc.steps = steps;
  tc.seed = seed;
  tc.adamw.lr = lr;
  tc.lambda = lambda;
  tc.t_max = t_max;
  const std::vector<duet::EpisodeRef> dataset = train_refs(m);
  std::vector<duet::LossReport> reports;
  if (steps > 0)
    reports = is_finetune ? duet::finetune(model, dataset, tc) : duet::pretrain(model, dataset, tc);

  model.store().save(out_ckpt);
  write_file(out_ckpt + ".config.json", cfg.to_json());
  std::vector<std::string> extra;
  if (!eval_split.empty()) {
    duet::EvalOptions eo;
    eo.run.t_max = t_max;
    eo.run.fusion = cfg.fusion;
    const duet::EvalResult r =
        duet::evaluate_split(m.houses, split_from_string(eval_split), model, eo);
    json snap;
    snap["eval"] = {{"split", eval_split}, {"episodes", r.report.episodes},
                    {"sr", r.report.sr},   {"spl", r.report.spl},
                    {"osr", r.report.osr}, {"rgs", r.report.rgs}};
    extra.push_back(snap.dump());
  }
  if (!log_path.empty()) duet::write_loss_log(log_path, reports, extra);
  return kExitOk;
}

int cmd_evaluate(const std::string& manifest_path, const std::string& ckpt,
                 const std::string& model_config_path, const std::string& split,
                 const std::string& fusion, bool no_gasa, const std::string& policy, int t_max,
                 int workers, uint64_t seed, const std::string& out_csv,
                 const std::string& traces_dir) {
  const Manifest m = load_manifest(manifest_path);
  std::string config_path = model_config_path;
  if (config_path.empty() && !ckpt.empty() && fs::exists(ckpt + ".config.json"))
    config_path = ckpt + ".config.json";
  duet::DuetConfig cfg = model_config_for(m, config_path);
  if (no_gasa) cfg.use_gasa = false;
  duet::DuetModel model(cfg, seed);
  if (!ckpt.empty()) model.store().load(ckpt);

  duet::EvalOptions eo;
  eo.workers = workers;
  eo.run.t_max = t_max;
  eo.run.fusion = duet::fusion_from_string(fusion);
  eo.run.seed = seed;
  if (policy == "expert") {
    eo.run.policy = duet::PolicyKind::kExpert;
    eo.run.expert = [](const duet::EnvGraph& env, const duet::TopoMap& map,
                       const duet::Episode& ep) {
      return duet::pid_expert(env, map, ep.goal_nodes);
    };
  } else if (policy == "random") {
    eo.run.policy = duet::PolicyKind::kRandom;
  } else if (policy != "model") {
    throw duet::DataError("unknown policy: " + policy);
  }

  const duet::EvalResult result =
      duet::evaluate_split(m.houses, split_from_string(split), model, eo);
  write_file(out_csv, duet::metrics_to_csv(result.report));
  if (!traces_dir.empty()) {
    fs::create_directories(traces_dir);
    for (size_t i = 0; i < result.trajectories.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof(name), "trace_%05d.json", result.episodes[i]->id);
      write_file((fs::path(traces_dir) / name).string(),
                 duet::trajectory_to_trace_json(*result.envs[i], *result.episodes[i],
                                                result.trajectories[i]));
    }
  }
  duet::log_info("evaluated %d episodes: SR=%.3f SPL=%.3f", result.report.episodes,
                 result.report.sr, result.report.spl);
  return kExitOk;
}

int cmd_trace_plot(const std::string& trace_path, const std::string& out_path) {
  const std::string svg = duet::trace_to_svg(read_file(trace_path));
  write_file(out_path, svg);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-scale graph-transformer navigation agent on synthetic graph worlds"};
  app.require_subcommand(1);

  // gen-env
  auto* gen = app.add_subcommand("gen-env", "Generate environments, episodes and a manifest");
  uint64_t gen_seed = 1;
  int gen_houses = 50, gen_nodes = 20;
  double gen_split = 0.8, gen_degree = 3.5;
  int gen_views = 8, gen_objects = 3, gen_rooms = 6, gen_classes = 24, gen_fdim = 32;
  std::string gen_style = "goal_oriented", gen_out = "dataset";
  int gen_train_eps = 8, gen_seen_eps = 2, gen_unseen_eps = 6;
  gen->add_option("--seed", gen_seed, "Master seed")->capture_default_str();
  gen->add_option("--houses", gen_houses, "Number of houses")->capture_default_str();
  gen->add_option("--nodes", gen_nodes, "Nodes per house")->capture_default_str();
  gen->add_option("--split-ratio", gen_split, "Fraction of houses used for training")
      ->capture_default_str();
  gen->add_option("--mean-degree", gen_degree, "Target mean node degree")->capture_default_str();
  gen->add_option("--views", gen_views, "Views per panorama")->capture_default_str();
  gen->add_option("--objects", gen_objects, "Objects per node")->capture_default_str();
  gen->add_option("--rooms", gen_rooms, "Room label count")->capture_default_str();
  gen->add_option("--classes", gen_classes, "Object class count")->capture_default_str();
  gen->add_option("--feature-dim", gen_fdim, "Raw feature dimension")->capture_default_str();
  gen->add_option("--style", gen_style, "Instruction style: goal_oriented|step_by_step")
      ->capture_default_str();
  gen->add_option("--train-eps", gen_train_eps, "Train episodes per train house")
      ->capture_default_str();
  gen->add_option("--seen-eps", gen_seen_eps, "Seen-split episodes per train house")
      ->capture_default_str();
  gen->add_option("--unseen-eps", gen_unseen_eps, "Episodes per unseen house")
      ->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->capture_default_str();

  // pretrain / finetune
  std::string tr_manifest, tr_model_config, tr_init, tr_out = "checkpoint.bin", tr_log,
              tr_eval_split;
  int tr_steps = 800, tr_tmax = 15;
  uint64_t tr_seed = 1;
  double tr_lr = 1e-3, tr_lambda = 0.2;
  auto add_train_opts = [&](CLI::App* cmd, bool finetune) {
    cmd->add_option("--manifest", tr_manifest, "Dataset manifest path")->required();
    cmd->add_option("--model-config", tr_model_config,
                    "Model config JSON (defaults to desk scale)");
    if (finetune) cmd->add_option("--init", tr_init, "Initial checkpoint")->required();
    cmd->add_option("--steps", tr_steps, "Optimizer steps")->capture_default_str();
    cmd->add_option("--seed", tr_seed, "Training seed")->capture_default_str();
    cmd->add_option("--lr", tr_lr, "AdamW learning rate")->capture_default_str();
    if (finetune)
      cmd->add_option("--lambda", tr_lambda, "Balance factor for the cloning term")
          ->capture_default_str();
    cmd->add_option("--t-max", tr_tmax, "Rollout decision budget")->capture_default_str();
    cmd->add_option("--out", tr_out, "Output checkpoint")->capture_default_str();
    cmd->add_option("--log", tr_log, "JSON-lines loss log");
    cmd->add_option("--eval-split", tr_eval_split, "Append an eval snapshot for this split");
  };
  auto* pre = app.add_subcommand("pretrain", "Behavior cloning + auxiliary objectives");
  add_train_opts(pre, false);
  auto* fin = app.add_subcommand("finetune", "Policy learning with the interactive demonstrator");
  add_train_opts(fin, true);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Run a split and write the metrics CSV");
  std::string ev_manifest, ev_ckpt, ev_model_config, ev_split = "unseen", ev_fusion = "dynamic",
              ev_policy = "model", ev_out = "metrics.csv", ev_traces;
  bool ev_no_gasa = false;
  int ev_tmax = 15, ev_workers = 1;
  uint64_t ev_seed = 1;
  ev->add_option("--manifest", ev_manifest, "Dataset manifest path")->required();
  ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint (omit for a fresh init)");
  ev->add_option("--model-config", ev_model_config, "Model config JSON");
  ev->add_option("--split", ev_split, "train|seen|unseen")->capture_default_str();
  ev->add_option("--fusion", ev_fusion, "dynamic|average|coarse|fine")->capture_default_str();
  ev->add_flag("--no-gasa", ev_no_gasa, "Disable the graph-aware attention bias");
  ev->add_option("--policy", ev_policy, "model|expert|random")->capture_default_str();
  ev->add_option("--t-max", ev_tmax, "Decision budget")->capture_default_str();
  ev->add_option("--workers", ev_workers, "Parallel evaluation workers")->capture_default_str();
  ev->add_option("--seed", ev_seed, "Seed for stochastic policies")->capture_default_str();
  ev->add_option("--out", ev_out, "Metrics CSV path")->capture_default_str();
  ev->add_option("--dump-traces", ev_traces, "Directory for per-episode trace JSON");

  // trace-plot
  auto* tp = app.add_subcommand("trace-plot", "Render a trace JSON to SVG");
  std::string tp_trace, tp_out = "trace.svg";
  tp->add_option("--trace", tp_trace, "Trace JSON path")->required();
  tp->add_option("--out", tp_out, "Output SVG path")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed())
      return cmd_gen_env(gen_seed, gen_houses, gen_nodes, gen_split, gen_degree, gen_views,
                         gen_objects, gen_rooms, gen_classes, gen_fdim, gen_style, gen_train_eps,
                         gen_seen_eps, gen_unseen_eps, gen_out);
    if (pre->parsed())
      return cmd_train(false, tr_manifest, tr_model_config, "", tr_steps, tr_seed, tr_lr,
                       tr_lambda, tr_tmax, tr_out, tr_log, tr_eval_split);
    if (fin->parsed())
      return cmd_train(true, tr_manifest, tr_model_config, tr_init, tr_steps, tr_seed, tr_lr,
                       tr_lambda, tr_tmax, tr_out, tr_log, tr_eval_split);
    if (ev->parsed())
      return cmd_evaluate(ev_manifest, ev_ckpt, ev_model_config, ev_split, ev_fusion, ev_no_gasa,
                          ev_policy, ev_tmax, ev_workers, ev_seed, ev_out, ev_traces);
    if (tp->parsed()) return cmd_trace_plot(tp_trace, tp_out);
  } catch (const duet::NumericError& e) {
    duet::log_error("%s", e.what());
    return kExitNumeric;
  } catch (const duet::DataError& e) {
    duet::log_error("%s", e.what());
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    duet::log_error("malformed input: %s", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    duet::log_error("%s", e.what());
    return kExitData;
  }
  return kExitUsage;
}
