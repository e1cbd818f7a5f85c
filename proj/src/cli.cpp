#include "hmeta/cli.hpp"

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hmeta/checkpoint.hpp"
#include "hmeta/errors.hpp"
#include "hmeta/eval.hpp"
#include "hmeta/graph.hpp"
#include "hmeta/memory.hpp"
#include "hmeta/tensor.hpp"
#include "hmeta/transformer.hpp"

#ifndef HMETA_VERSION
#define HMETA_VERSION "unversioned"
#endif

namespace hmeta {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string format_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// config parsing

json parse_json_text(const std::string& text) {
  try {
    return json::parse(text, nullptr, /*allow_exceptions=*/true,
                       /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t stop =
        std::min(text.size(), e.byte > 0 ? e.byte - 1 : std::size_t{0});
    for (std::size_t i = 0; i < stop; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("config parse error at line " + std::to_string(line) +
                      ", column " + std::to_string(col) + ": " + e.what());
  }
}

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) {
    throw ConfigError("config section '" + path + "' must be an object");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError("unknown config key: " +
                        (path.empty() ? it.key() : path + "." + it.key()));
    }
  }
}

[[noreturn]] void type_error(const std::string& path, const char* key,
                             const char* want) {
  throw ConfigError("config key " + (path.empty() ? "" : path + ".") + key +
                    ": expected " + want);
}

void get_i64(const json& j, const std::string& path, const char* key,
             std::int64_t& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer()) type_error(path, key, "an integer");
  out = v.get<std::int64_t>();
}

void get_f64(const json& j, const std::string& path, const char* key,
             double& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number()) type_error(path, key, "a number");
  out = v.get<double>();
}

void get_bool(const json& j, const std::string& path, const char* key,
              bool& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_boolean()) type_error(path, key, "a boolean");
  out = v.get<bool>();
}

void get_str(const json& j, const std::string& path, const char* key,
             std::string& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_string()) type_error(path, key, "a string");
  out = v.get<std::string>();
}

void get_strs(const json& j, const std::string& path, const char* key,
              std::vector<std::string>& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array()) type_error(path, key, "an array of strings");
  std::vector<std::string> items;
  for (const json& e : v) {
    if (!e.is_string()) type_error(path, key, "an array of strings");
    items.push_back(e.get<std::string>());
  }
  out = std::move(items);
}

void get_u64s(const json& j, const std::string& path, const char* key,
              std::vector<std::uint64_t>& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array()) type_error(path, key, "an array of unsigned integers");
  std::vector<std::uint64_t> items;
  for (const json& e : v) {
    if (!e.is_number_integer() || (e.is_number_integer() && e.is_number_unsigned() == false && e.get<std::int64_t>() < 0)) {
      type_error(path, key, "an array of unsigned integers");
    }
    items.push_back(e.get<std::uint64_t>());
  }
  out = std::move(items);
}

std::vector<Family> names_to_families(const std::vector<std::string>& names) {
  std::vector<Family> fams;
  fams.reserve(names.size());
  for (const std::string& n : names) fams.push_back(family_from_name(n));
  return fams;
}

std::vector<std::string> family_names(const std::vector<Family>& fams) {
  std::vector<std::string> names;
  names.reserve(fams.size());
  for (Family f : fams) names.push_back(family_name(f));
  return names;
}

}  // namespace

PolicyConfig RunConfig::policy_config() const {
  PolicyConfig p = policy;
  const MDPSpaces spaces;
  p.state_dim = spaces.state_dim;
  p.action_dim = spaces.action_dim;
  p.k = train.k;
  p.s = train.s;
  return p;
}

void RunConfig::validate() const {
  if (architecture != "htrmrl" && architecture != "flat" &&
      architecture != "recurrent") {
    throw ConfigError("unknown architecture '" + architecture +
                      "' (want htrmrl, flat or recurrent)");
  }
  train.validate();
  if (policy.d_model < 1 || policy.heads < 1 || policy.d_ff < 1 ||
      policy.blocks < 1 || policy.blocks_t2 < 0 || policy.flat_n < 1 ||
      policy.gru_hidden < 1 || policy.head_hidden < 1) {
    throw ConfigError("policy dimensions must be positive");
  }
  if (policy.d_model % policy.heads != 0) {
    throw ConfigError("d_model must be divisible by heads");
  }
  if (eval_every < 0 || checkpoint_every < 0) {
    throw ConfigError("schedules must be non-negative env-step counts");
  }
  if (eval_tasks < 1 || eval_episodes < 1) {
    throw ConfigError("eval needs at least one task and one episode");
  }
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size()) {
    throw ConfigError("duplicate seeds would collide on run directories");
  }
  if (dist.mln) {
    if (dist.train_families.empty() || dist.test_families.empty()) {
      throw ConfigError("mln needs non-empty train and test family lists");
    }
    for (Family f : dist.train_families) {
      for (Family g : dist.test_families) {
        if (f == g) {
          throw ConfigError("family '" + family_name(f) +
                            "' appears in both train and test lists");
        }
      }
    }
  }
}

RunConfig parse_run_config(const std::string& text) {
  const json j = parse_json_text(text);
  check_keys(j, "", {"env", "policy", "train", "eval", "out_dir", "seeds"});
  RunConfig cfg;

  if (j.contains("env")) {
    const json& e = j.at("env");
    check_keys(e, "env",
               {"mln", "ml1_family", "train_families", "test_families",
                "annulus_lo", "annulus_hi"});
    get_bool(e, "env", "mln", cfg.dist.mln);
    std::string fam;
    get_str(e, "env", "ml1_family", fam);
    if (!fam.empty()) cfg.dist.ml1_family = family_from_name(fam);
    std::vector<std::string> names;
    get_strs(e, "env", "train_families", names);
    if (e.contains("train_families")) {
      cfg.dist.train_families = names_to_families(names);
    }
    names.clear();
    get_strs(e, "env", "test_families", names);
    if (e.contains("test_families")) {
      cfg.dist.test_families = names_to_families(names);
    }
    get_f64(e, "env", "annulus_lo", cfg.dist.annulus_lo);
    get_f64(e, "env", "annulus_hi", cfg.dist.annulus_hi);
  }

  if (j.contains("policy")) {
    const json& p = j.at("policy");
    check_keys(p, "policy",
               {"architecture", "d_model", "heads", "d_ff", "blocks",
                "blocks_t2", "flat_n", "gru_hidden", "head_hidden",
                "state_concat", "random_episode_windows"});
    get_str(p, "policy", "architecture", cfg.architecture);
    if (cfg.architecture == "hierarchical") cfg.architecture = "htrmrl";
    get_i64(p, "policy", "d_model", cfg.policy.d_model);
    get_i64(p, "policy", "heads", cfg.policy.heads);
    get_i64(p, "policy", "d_ff", cfg.policy.d_ff);
    get_i64(p, "policy", "blocks", cfg.policy.blocks);
    get_i64(p, "policy", "blocks_t2", cfg.policy.blocks_t2);
    get_i64(p, "policy", "flat_n", cfg.policy.flat_n);
    get_i64(p, "policy", "gru_hidden", cfg.policy.gru_hidden);
    get_i64(p, "policy", "head_hidden", cfg.policy.head_hidden);
    get_bool(p, "policy", "state_concat", cfg.policy.state_concat);
    get_bool(p, "policy", "random_episode_windows",
             cfg.policy.random_episode_windows);
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train",
               {"meta_steps", "tasks_per_batch", "episodes_per_task", "k", "s",
                "clip_eps", "ppo_epochs", "minibatch", "value_coef",
                "entropy_coef", "gae_lambda", "lr", "grad_clip"});
    get_i64(t, "train", "meta_steps", cfg.train.meta_steps);
    get_i64(t, "train", "tasks_per_batch", cfg.train.tasks_per_batch);
    get_i64(t, "train", "episodes_per_task", cfg.train.episodes_per_task);
    get_i64(t, "train", "k", cfg.train.k);
    get_i64(t, "train", "s", cfg.train.s);
    get_f64(t, "train", "clip_eps", cfg.train.clip_eps);
    get_i64(t, "train", "ppo_epochs", cfg.train.ppo_epochs);
    get_i64(t, "train", "minibatch", cfg.train.minibatch);
    get_f64(t, "train", "value_coef", cfg.train.value_coef);
    get_f64(t, "train", "entropy_coef", cfg.train.entropy_coef);
    get_f64(t, "train", "gae_lambda", cfg.train.gae_lambda);
    get_f64(t, "train", "lr", cfg.train.lr);
    get_f64(t, "train", "grad_clip", cfg.train.grad_clip);
  }

  if (j.contains("eval")) {
    const json& v = j.at("eval");
    check_keys(v, "eval", {"every", "tasks", "episodes", "checkpoint_every"});
    get_i64(v, "eval", "every", cfg.eval_every);
    get_i64(v, "eval", "tasks", cfg.eval_tasks);
    get_i64(v, "eval", "episodes", cfg.eval_episodes);
    get_i64(v, "eval", "checkpoint_every", cfg.checkpoint_every);
  }

  get_str(j, "", "out_dir", cfg.out_dir);
  get_u64s(j, "", "seeds", cfg.seeds);

  cfg.validate();
  return cfg;
}

std::string serialize_run_config(const RunConfig& cfg) {
  json j;
  json e;
  e["mln"] = cfg.dist.mln;
  e["ml1_family"] = family_name(cfg.dist.ml1_family);
  e["train_families"] = family_names(cfg.dist.train_families);
  e["test_families"] = family_names(cfg.dist.test_families);
  e["annulus_lo"] = cfg.dist.annulus_lo;
  e["annulus_hi"] = cfg.dist.annulus_hi;
  j["env"] = e;

  json p;
  p["architecture"] = cfg.architecture;
  p["d_model"] = cfg.policy.d_model;
  p["heads"] = cfg.policy.heads;
  p["d_ff"] = cfg.policy.d_ff;
  p["blocks"] = cfg.policy.blocks;
  p["blocks_t2"] = cfg.policy.blocks_t2;
  p["flat_n"] = cfg.policy.flat_n;
  p["gru_hidden"] = cfg.policy.gru_hidden;
  p["head_hidden"] = cfg.policy.head_hidden;
  p["state_concat"] = cfg.policy.state_concat;
  p["random_episode_windows"] = cfg.policy.random_episode_windows;
  j["policy"] = p;

  json t;
  t["meta_steps"] = cfg.train.meta_steps;
  t["tasks_per_batch"] = cfg.train.tasks_per_batch;
  t["episodes_per_task"] = cfg.train.episodes_per_task;
  t["k"] = cfg.train.k;
  t["s"] = cfg.train.s;
  t["clip_eps"] = cfg.train.clip_eps;
  t["ppo_epochs"] = cfg.train.ppo_epochs;
  t["minibatch"] = cfg.train.minibatch;
  t["value_coef"] = cfg.train.value_coef;
  t["entropy_coef"] = cfg.train.entropy_coef;
  t["gae_lambda"] = cfg.train.gae_lambda;
  t["lr"] = cfg.train.lr;
  t["grad_clip"] = cfg.train.grad_clip;
  j["train"] = t;

  json v;
  v["every"] = cfg.eval_every;
  v["tasks"] = cfg.eval_tasks;
  v["episodes"] = cfg.eval_episodes;
  v["checkpoint_every"] = cfg.checkpoint_every;
  j["eval"] = v;

  j["out_dir"] = cfg.out_dir;
  j["seeds"] = cfg.seeds;

  return j.dump(2) + "\n";
}

namespace {

json parse_override_value(const std::string& key, const std::string& raw) {
  json v;
  bool parsed = false;
  try {
    json candidate = json::parse(raw);
    if (candidate.is_primitive() || candidate.is_array()) {
      v = std::move(candidate);
      parsed = true;
    }
  } catch (const json::exception&) {
  }
  if (!parsed) {
    if (raw.find(',') != std::string::npos) {
      v = json::array();
      std::stringstream ss(raw);
      std::string item;
      while (std::getline(ss, item, ',')) {
        bool item_parsed = false;
        try {
          json x = json::parse(item);
          if (x.is_primitive() && !x.is_null()) {
            v.push_back(std::move(x));
            item_parsed = true;
          }
        } catch (const json::exception&) {
        }
        if (!item_parsed) v.push_back(item);
      }
    } else {
      v = raw;
    }
  }
  const bool list_key = key == "seeds" || key == "train_families" ||
                        key == "test_families";
  if (list_key && !v.is_array()) {
    json a = json::array();
    a.push_back(std::move(v));
    v = std::move(a);
  }
  return v;
}

}  // namespace

std::string apply_overrides(const std::string& text,
                            const std::vector<std::string>& overrides) {
  json j = parse_json_text(text);
  for (const std::string& o : overrides) {
    const std::size_t eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override must look like key=value: '" + o + "'");
    }
    const std::string path = o.substr(0, eq);
    const std::string value = o.substr(eq + 1);
    std::vector<std::string> parts;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) {
      if (part.empty()) throw ConfigError("bad override path: '" + path + "'");
      parts.push_back(part);
    }
    if (parts.empty()) throw ConfigError("bad override path: '" + path + "'");
    json* cur = &j;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!cur->is_object()) {
        throw ConfigError("override path '" + path +
                          "' descends into a non-object value");
      }
      json& next = (*cur)[parts[i]];
      if (next.is_null()) next = json::object();
      cur = &next;
    }
    if (!cur->is_object()) {
      throw ConfigError("override path '" + path +
                        "' descends into a non-object value");
    }
    (*cur)[parts.back()] = parse_override_value(parts.back(), value);
  }
  return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  std::string text = buf.str();
  if (!overrides.empty()) text = apply_overrides(text, overrides);
  try {
    return parse_run_config(text);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string config_hash(const RunConfig& cfg) {
  const std::string s = serialize_run_config(cfg);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// run directories

ResultStore::ResultStore(const std::string& dir) : dir_(dir) {
  if (completed(dir)) {
    throw ConfigError("run directory already holds a completed run: " + dir);
  }
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "checkpoints", ec);
  if (ec) {
    throw ConfigError("cannot create run directory " + dir + ": " +
                      ec.message());
  }
}

std::string ResultStore::path(const std::string& rel) const {
  return (fs::path(dir_) / rel).string();
}

void ResultStore::write_text(const std::string& rel,
                             const std::string& content) {
  const std::string p = path(rel);
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + p);
  os << content;
  os.flush();
  if (!os) throw ConfigError("short write to " + p);
}

std::string ResultStore::checkpoint_path(std::int64_t step) const {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "step_%012lld.ckpt",
                static_cast<long long>(step));
  return path(std::string("checkpoints/") + buf);
}

void ResultStore::finalize(const RunConfig& cfg, const std::string& command,
                           std::uint64_t seed) {
  json m;
  m["architecture"] = cfg.architecture;
  m["command"] = command;
  m["completed"] = true;
  m["config_hash"] = config_hash(cfg);
  m["seed"] = seed;
  m["version"] = HMETA_VERSION;
  write_text("manifest.json", m.dump(2) + "\n");
}

bool ResultStore::completed(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!is) return false;
  try {
    json m = json::parse(is);
    return m.is_object() && m.value("completed", false);
  } catch (const json::exception&) {
    return false;
  }
}

std::string resolve_out_dir(const std::string& out_dir) {
  fs::path p(out_dir);
  if (p.is_absolute()) return p.string();
  if (const char* root = std::getenv("HMETA_OUT")) {
    if (*root != '\0') return (fs::path(root) / p).string();
  }
  return p.string();
}

// ---------------------------------------------------------------------------
// train

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path);
  os << content;
  os.flush();
  if (!os) throw ConfigError("short write to " + path);
}

/// Final train-split success rate; NaN when no update ever ran.
double last_train_success(const std::vector<MetricsRow>& rows) {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
    if (it->split == "train") return it->success_rate;
  }
  return std::nan("");
}

void write_metrics_svg(ResultStore& store,
                       const std::vector<MetricsRow>& rows) {
  LineSeries train_s, test_s;
  train_s.name = "train";
  test_s.name = "test";
  for (const MetricsRow& r : rows) {
    LineSeries& s = r.split == "test" ? test_s : train_s;
    s.x.push_back(static_cast<double>(r.env_steps));
    s.y.push_back(r.success_rate);
  }
  std::vector<LineSeries> series;
  if (!train_s.x.empty()) series.push_back(std::move(train_s));
  if (!test_s.x.empty()) series.push_back(std::move(test_s));
  if (series.empty()) return;
  std::ostringstream os;
  svg_lines(os, series, "success rate vs env steps");
  store.write_text("metrics.svg", os.str());
}

TrainResult train_one(const RunConfig& cfg, std::uint64_t seed,
                      const std::string& dir) {
  ResultStore store(dir);
  store.write_text("config.json", serialize_run_config(cfg));

  TrainConfig tcfg = cfg.train;
  tcfg.seed = seed;
  MetaTrainOptions opts;
  opts.eval_every = cfg.eval_every;
  opts.eval_tasks = cfg.eval_tasks;
  opts.eval_episodes = cfg.eval_episodes;
  opts.checkpoint_every = cfg.checkpoint_every;
  opts.on_checkpoint = [&store](const Policy& p, std::int64_t step) {
    save_checkpoint(store.checkpoint_path(step), p.params());
  };
  // stream rows so long runs can be watched; the final write below
  // replaces the file with the same content
  std::ofstream live(store.path("metrics.csv"));
  bool live_header = false;
  opts.on_metrics = [&live, &live_header](const MetricsRow& row) {
    std::ostringstream os;
    write_metrics_csv(os, {row});
    std::string text = os.str();
    if (live_header) text.erase(0, text.find('\n') + 1);
    live_header = true;
    live << text << std::flush;
  };

  TrainResult res =
      meta_train(cfg.architecture, cfg.policy_config(), tcfg, cfg.dist, opts);
  live.close();

  save_checkpoint(store.path("final.ckpt"), res.policy->params());
  std::ostringstream csv;
  write_metrics_csv(csv, res.metrics);
  store.write_text("metrics.csv", csv.str());
  write_metrics_svg(store, res.metrics);
  store.finalize(cfg, "train", seed);
  return res;
}

}  // namespace

std::vector<std::string> cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const fs::path root = resolve_out_dir(cfg.out_dir);
  std::vector<std::string> dirs;
  for (std::uint64_t seed : cfg.seeds) {
    const std::string dir = (root / ("seed" + std::to_string(seed))).string();
    TrainResult res = train_one(cfg, seed, dir);
    const double fin = last_train_success(res.metrics);
    std::cout << dir << ": " << res.updates << " updates, " << res.env_steps
              << " env steps";
    if (!std::isnan(fin)) std::cout << ", final train success " << fin;
    std::cout << "\n";
    dirs.push_back(dir);
  }
  return dirs;
}

// ---------------------------------------------------------------------------
// eval / export (shared loading)

namespace {

struct LoadedRun {
  RunConfig cfg;
  std::unique_ptr<Policy> policy;
};

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

LoadedRun load_run(const std::string& run_dir, const std::string& checkpoint) {
  const fs::path dir(run_dir);
  RunConfig cfg = parse_run_config(read_file((dir / "config.json").string()));

  json manifest;
  try {
    manifest = json::parse(read_file((dir / "manifest.json").string()));
  } catch (const json::exception& e) {
    throw ConfigError("bad manifest in " + run_dir + ": " + e.what());
  }
  if (!manifest.value("completed", false)) {
    throw ConfigError("run is not complete: " + run_dir);
  }
  const std::string arch = manifest.value("architecture", "");
  if (arch != cfg.architecture) {
    throw ConfigError("manifest architecture '" + arch +
                      "' does not match the config snapshot '" +
                      cfg.architecture + "'");
  }
  if (manifest.value("config_hash", "") != config_hash(cfg)) {
    throw ConfigError("manifest hash does not match the config snapshot in " +
                      run_dir);
  }

  LoadedRun run;
  run.policy = make_policy(cfg.architecture, cfg.policy_config(), 0);
  const std::string ckpt =
      checkpoint.empty() ? (dir / "final.ckpt").string() : checkpoint;
  load_checkpoint(ckpt, run.policy->params());
  run.cfg = std::move(cfg);
  return run;
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "test") return Split::kTest;
  throw ConfigError("split must be 'train' or 'test', got '" + name + "'");
}

}  // namespace

std::string cmd_eval(const EvalArgs& args) {
  if (args.tasks < 1 || args.episodes < 1) {
    throw ConfigError("eval needs tasks >= 1 and episodes >= 1");
  }
  const Split split = parse_split(args.split);
  LoadedRun run = load_run(args.run_dir, args.checkpoint);
  Rng rng(args.seed);

  std::ostringstream os;
  os << "task,family,split,success,sem,disc_return\n";
  std::vector<double> successes, returns;
  for (std::int64_t i = 0; i < args.tasks; ++i) {
    const TaskSpec task = sample_task(run.cfg.dist, split, rng);
    const AdaptResult r = adapt_and_eval(*run.policy, task, args.episodes,
                                         run.cfg.train.k, run.cfg.train.s,
                                         rng);
    const double ok = r.success.back() ? 1.0 : 0.0;
    const double ret = r.disc_returns.back();
    os << i << ',' << family_name(task.family) << ',' << args.split << ','
       << format_num(ok) << ",0," << format_num(ret) << "\n";
    successes.push_back(ok);
    returns.push_back(ret);
  }
  double mean_s = 0.0, mean_r = 0.0;
  for (std::size_t i = 0; i < successes.size(); ++i) {
    mean_s += successes[i];
    mean_r += returns[i];
  }
  mean_s /= static_cast<double>(successes.size());
  mean_r /= static_cast<double>(returns.size());
  const std::string agg_family =
      run.cfg.dist.mln ? "all" : family_name(run.cfg.dist.ml1_family);
  os << "all," << agg_family << ',' << args.split << ',' << format_num(mean_s)
     << ',' << format_num(standard_error(successes)) << ','
     << format_num(mean_r) << "\n";

  const std::string out =
      args.out_csv.empty()
          ? (fs::path(args.run_dir) / ("eval_" + args.split + ".csv")).string()
          : args.out_csv;
  write_file(out, os.str());
  std::cout << out << ": success " << mean_s << " +/- "
            << standard_error(successes) << " over " << args.tasks
            << " tasks\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// ablate

namespace {

struct Variant {
  std::string name;
  std::function<void(RunConfig&)> apply;
};

std::vector<Variant> compare_variants(const std::string& axis) {
  if (axis.empty() || axis == "none") {
    return {{"base", [](RunConfig&) {}}};
  }
  if (axis == "sampling") {
    return {{"window_tail",
             [](RunConfig& c) { c.policy.random_episode_windows = false; }},
            {"window_random",
             [](RunConfig& c) { c.policy.random_episode_windows = true; }}};
  }
  if (axis == "state_concat") {
    return {{"state_concat",
             [](RunConfig& c) { c.policy.state_concat = true; }},
            {"task_only",
             [](RunConfig& c) { c.policy.state_concat = false; }}};
  }
  if (axis == "blocks") {
    return {{"blocks1", [](RunConfig& c) { c.policy.blocks = 1; }},
            {"blocks2", [](RunConfig& c) { c.policy.blocks = 2; }}};
  }
  throw ConfigError("unknown compare axis '" + axis +
                    "' (want sampling, state_concat or blocks)");
}

}  // namespace

std::vector<AblateCell> ablate_grid(const AblateArgs& args) {
  if (args.ks.empty() || args.ss.empty()) {
    throw ConfigError("ablation grid needs at least one k and one s");
  }
  for (std::int64_t k : args.ks) {
    if (k < 1) throw ConfigError("grid k values must be positive");
  }
  for (std::int64_t s : args.ss) {
    if (s < 1) throw ConfigError("grid s values must be positive");
  }
  const std::vector<Variant> variants = compare_variants(args.compare);
  std::vector<AblateCell> cells;
  for (std::int64_t k : args.ks) {
    for (std::int64_t s : args.ss) {
      for (const Variant& v : variants) cells.push_back({k, s, v.name});
    }
  }
  return cells;
}

std::string cmd_ablate(const RunConfig& base, const AblateArgs& args) {
  base.validate();
  const std::vector<AblateCell> cells = ablate_grid(args);
  const std::vector<Variant> variants = compare_variants(args.compare);
  const fs::path root = resolve_out_dir(base.out_dir);

  std::ostringstream os;
  os << "k,s,variant,mean_success,sem,seeds\n";
  for (const AblateCell& cell : cells) {
    RunConfig cfg = base;
    cfg.train.k = cell.k;
    cfg.train.s = cell.s;
    for (const Variant& v : variants) {
      if (v.name == cell.variant) v.apply(cfg);
    }
    cfg.validate();

    const std::string cell_name = "k" + std::to_string(cell.k) + "_s" +
                                  std::to_string(cell.s) + "_" + cell.variant;
    std::vector<double> finals;
    for (std::uint64_t seed : cfg.seeds) {
      const std::string dir =
          (root / cell_name / ("seed" + std::to_string(seed))).string();
      TrainResult res = train_one(cfg, seed, dir);
      const double fin = last_train_success(res.metrics);
      if (std::isnan(fin)) {
        throw ConfigError("cell " + cell_name +
                          " produced no training rows; raise meta_steps above "
                          "one batch of env steps");
      }
      finals.push_back(fin);
    }
    double mean = 0.0;
    for (double f : finals) mean += f;
    mean /= static_cast<double>(finals.size());
    os << cell.k << ',' << cell.s << ',' << cell.variant << ','
       << format_num(mean) << ',' << format_num(standard_error(finals)) << ','
       << finals.size() << "\n";
    std::cout << cell_name << ": " << mean << " +/- "
              << standard_error(finals) << "\n";
  }

  std::error_code ec;
  fs::create_directories(root, ec);
  write_file((root / "ablate.csv").string(), os.str());
  return os.str();
}

// ---------------------------------------------------------------------------
// bench-attention

namespace {

EncoderStack bench_stack(ParamRegistry& reg, const std::string& prefix,
                         std::int64_t d, std::int64_t h, std::int64_t blocks,
                         std::int64_t max_len, Rng& rng) {
  StackConfig cfg;
  cfg.input_dim = d;
  cfg.input_embed = false;
  cfg.d_model = d;
  cfg.heads = h;
  cfg.d_ff = 2 * d;
  cfg.blocks = blocks;
  cfg.positional = false;
  cfg.max_len = max_len;
  return EncoderStack(reg, prefix, cfg, rng);
}

struct InstrumentedCounts {
  std::uint64_t hierarchical = 0;
  std::uint64_t flat = 0;
};

InstrumentedCounts instrumented_counts(std::int64_t k, std::int64_t s,
                                       std::int64_t d, std::int64_t h,
                                       std::int64_t l1, std::int64_t l2,
                                       Rng& rng) {
  InstrumentedCounts out;
  {
    ParamRegistry reg;
    EncoderStack t1 = bench_stack(reg, "t1", d, h, l1, s, rng);
    EncoderStack t2 = bench_stack(reg, "t2", d, h, l2, k, rng);
    t1.attn_counter = &out.hierarchical;
    t2.attn_counter = &out.hierarchical;
    Graph g;
    Val z = t1.encode(g, g.constant(Tensor::randn({k, s, d}, rng)),
                      g.constant(Tensor::full({k, s}, 1.0)));
    t2.encode(g, g.reshape(z, {1, k, d}), g.constant(Tensor::full({1, k}, 1.0)));
  }
  {
    ParamRegistry reg;
    EncoderStack flat = bench_stack(reg, "f", d, h, l1 + l2, k * s, rng);
    flat.attn_counter = &out.flat;
    Graph g;
    flat.encode(g, g.constant(Tensor::randn({1, k * s, d}, rng)),
                g.constant(Tensor::full({1, k * s}, 1.0)));
  }
  return out;
}

}  // namespace

std::string cmd_bench_attention(const BenchArgs& args) {
  if (args.ks.empty() || args.ss.empty()) {
    throw ConfigError("bench grid needs at least one k and one s");
  }
  if (args.d_model < 1 || args.heads < 1 || args.l1 < 1 || args.l2 < 1) {
    throw ConfigError("bench dimensions must be positive");
  }
  if (args.d_model % args.heads != 0) {
    throw ConfigError("d_model must be divisible by heads");
  }

  Rng rng(0);
  std::ostringstream os;
  os << "k,s,heads,l1,l2,intra,inter,hierarchical,flat_same_depth,flat_total,"
        "ratio,instr_hierarchical,instr_flat\n";
  for (std::int64_t k : args.ks) {
    for (std::int64_t s : args.ss) {
      const AttentionCost c =
          count_attention(k, s, args.d_model, args.heads, args.l1, args.l2);
      const InstrumentedCounts ic = instrumented_counts(
          k, s, args.d_model, args.heads, args.l1, args.l2, rng);
      if (ic.hierarchical != static_cast<std::uint64_t>(c.hierarchical) ||
          ic.flat != static_cast<std::uint64_t>(c.flat_total)) {
        throw ContractError(
            "instrumented attention count disagrees with the closed form at "
            "k=" + std::to_string(k) + " s=" + std::to_string(s));
      }
      os << k << ',' << s << ',' << args.heads << ',' << args.l1 << ','
         << args.l2 << ',' << c.intra << ',' << c.inter << ','
         << c.hierarchical << ',' << c.flat_same_depth << ',' << c.flat_total
         << ',' << format_num(c.ratio) << ',' << ic.hierarchical << ','
         << ic.flat << "\n";
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// export-embeddings

std::string cmd_export_embeddings(const ExportArgs& args) {
  if (args.tasks_per_family < 1 || args.episodes < 1) {
    throw ConfigError("export needs tasks >= 1 and episodes >= 1");
  }
  LoadedRun run = load_run(args.run_dir, args.checkpoint);
  const std::vector<Family> families =
      run.cfg.dist.mln ? run.cfg.dist.train_families
                       : std::vector<Family>{run.cfg.dist.ml1_family};
  Rng rng(args.seed);

  std::vector<EmbeddingRow> rows;
  std::vector<std::int64_t> row_episode;
  std::vector<EmbeddingRow> final_rows;
  for (Family f : families) {
    TaskDistribution d = run.cfg.dist;
    d.mln = true;  // single-family pool over the whole annulus
    d.train_families = {f};
    for (std::int64_t t = 0; t < args.tasks_per_family; ++t) {
      const TaskSpec task = sample_task(d, Split::kTrain, rng);
      PointMassEnv env(task, MDPSpaces{});
      EpisodeBuffer buffer(run.cfg.train.k);
      run.policy->begin_task();
      for (std::int64_t ep = 0; ep < args.episodes; ++ep) {
        std::vector<double> state = env.reset(rng);
        while (true) {
          const ActOutput a =
              run.policy->act(state, buffer, rng, ActMode::kSample);
          const StepResult sr = env.step(a.action.action);
          buffer.push({state, a.action.action, sr.reward, sr.done});
          run.policy->observe_step(sr.state, a.action.action, sr.reward,
                                   sr.done);
          state = sr.state;
          if (sr.done) break;
        }
        EmbeddingRow row;
        row.label = family_name(f);
        row.vec = run.policy->task_embedding(state, buffer, rng);
        if (ep + 1 == args.episodes) final_rows.push_back(row);
        rows.push_back(std::move(row));
        row_episode.push_back(ep);
      }
    }
  }

  const std::size_t dim = rows.front().vec.size();
  std::ostringstream os;
  os << "label,episode";
  for (std::size_t j = 0; j < dim; ++j) os << ",e" << j;
  os << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << rows[i].label << ',' << row_episode[i];
    for (double v : rows[i].vec) os << ',' << format_num(v);
    os << "\n";
  }
  const std::string csv_path =
      (fs::path(args.run_dir) / "embeddings.csv").string();
  write_file(csv_path, os.str());
  std::cout << csv_path << ": " << rows.size() << " rows\n";

  if (families.size() >= 2) {
    const Projection proj = project_embeddings(final_rows);
    std::vector<std::string> names = family_names(families);
    std::vector<ScatterPoint> pts;
    for (std::size_t i = 0; i < final_rows.size(); ++i) {
      std::int32_t group = 0;
      for (std::size_t g = 0; g < names.size(); ++g) {
        if (names[g] == final_rows[i].label) {
          group = static_cast<std::int32_t>(g);
        }
      }
      pts.push_back({proj.coords[i][0], proj.coords[i][1], group});
    }
    std::ostringstream svg;
    svg_scatter(svg, pts, names, "task embeddings, final episode");
    write_file((fs::path(args.run_dir) / "embeddings.svg").string(),
               svg.str());
    std::cout << "silhouette " << proj.silhouette
              << (proj.degenerate ? " (degenerate spread)" : "") << "\n";
  } else {
    std::cout << "single task family; silhouette needs two or more\n";
  }
  return os.str();
}

}  // namespace hmeta
