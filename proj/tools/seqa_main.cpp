// seqa: batch front end for the dataset/proxy/enhancer pipeline.
//
// Every command takes --config <json> plus repeatable --set dotted.key=value
// overrides; unknown keys are rejected. Relative --out paths land under
// $SEQA_OUT_ROOT when that is set. Each run directory gets the fully resolved
// config written back for replay. Exit codes: 0 success, 1 any failure,
// 2 fine-tune stopped by the hack monitor.
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "seqa/datagen.hpp"
#include "seqa/enhancer.hpp"
#include "seqa/error.hpp"
#include "seqa/losses.hpp"
#include "seqa/metrics.hpp"
#include "seqa/rng.hpp"
#include "seqa/sqa.hpp"
#include "seqa/training.hpp"

using namespace seqa;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- Config plumbing -----------------------------------------------------------

/// Merges `over` onto `base`, rejecting keys absent from the defaults except
/// under open subtrees (dotted prefixes such as "weights.metric_weights.").
void merge_config(json& base, const json& over, const std::string& path,
                  const std::set<std::string>& open) {
  require(over.is_object(), "config: expected an object at '" + path + "'");
  for (const auto& [k, v] : over.items()) {
    if (!base.contains(k)) {
      require(open.count(path) > 0, "config: unknown key '" + path + k + "'");
      base[k] = v;
      continue;
    }
    if (base[k].is_object() && v.is_object())
      merge_config(base[k], v, path + k + ".", open);
    else
      base[k] = v;
  }
}

/// Applies one "dotted.key=value" override. Values parse as JSON when they
/// can (numbers, bools, arrays), otherwise they are taken as strings.
void apply_override(json& base, const std::string& spec, const std::set<std::string>& open) {
  const std::size_t eq = spec.find('=');
  require(eq != std::string::npos && eq > 0, "override must look like key=value: " + spec);
  const std::string key = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);

  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }

  std::vector<std::string> parts;
  std::istringstream in(key);
  std::string part;
  while (std::getline(in, part, '.')) parts.push_back(part);
  require(!parts.empty(), "override has an empty key: " + spec);

  json* cur = &base;
  std::string path;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    require(cur->is_object() && (cur->contains(parts[i]) || open.count(path) > 0),
            "config: unknown key '" + path + parts[i] + "'");
    cur = &(*cur)[parts[i]];
    path += parts[i] + ".";
  }
  require(cur->is_object() && (cur->contains(parts.back()) || open.count(path) > 0),
          "config: unknown key '" + path + parts.back() + "'");
  (*cur)[parts.back()] = value;
}

struct ConfigCli {
  std::string config_path;
  std::vector<std::string> sets;

  void attach(CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--set", sets, "dotted.key=value override (repeatable)");
  }

  json resolve(json defaults, const std::set<std::string>& open = {}) const {
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      require(in.good(), "cannot open config file " + config_path);
      json over;
      try {
        over = json::parse(in);
      } catch (const json::exception& e) {
        fail("config " + config_path + ": " + e.what());
      }
      merge_config(defaults, over, "", open);
    }
    for (const auto& s : sets) apply_override(defaults, s, open);
    return defaults;
  }
};

/// Relative output paths go under $SEQA_OUT_ROOT when set.
std::string resolve_out(const std::string& path) {
  require(!path.empty(), "output path is empty");
  const char* root = std::getenv("SEQA_OUT_ROOT");
  if (root != nullptr && *root != '\0' && fs::path(path).is_relative())
    return (fs::path(root) / path).string();
  return path;
}

void write_run_config(const fs::path& dir, const std::string& command, const json& resolved) {
  fs::create_directories(dir);
  json j;
  j["command"] = command;
  j["config"] = resolved;
  std::ofstream out(dir / "run_config.json", std::ios::trunc);
  require(out.good(), "cannot write run_config.json in " + dir.string());
  out << j.dump(2) << '\n';
}

// ---- CSV tables ----------------------------------------------------------------

struct ScoreTable {
  std::vector<std::string> metric_names;  // column order after the id triple
  struct Row {
    std::string utterance_id;
    std::string source_id;
    std::string split;
    std::vector<double> values;  // NaN where the cell was empty
    std::vector<bool> present;
  };
  std::vector<Row> rows;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

/// Reads a score table shaped like the generator's labels.csv:
/// utterance_id,source_id,split,<metric columns...>.
ScoreTable read_score_table(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open score table " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "empty score table " + path);
  const auto header = split_csv_line(line);
  require(header.size() >= 4 && header[0] == "utterance_id" && header[1] == "source_id" &&
              header[2] == "split",
          "score table " + path + ": header must start with utterance_id,source_id,split");

  ScoreTable t;
  t.metric_names.assign(header.begin() + 3, header.end());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    require(cells.size() == header.size(), "score table " + path + ": ragged row " + line);
    ScoreTable::Row r;
    r.utterance_id = cells[0];
    r.source_id = cells[1];
    r.split = cells[2];
    for (std::size_t k = 3; k < cells.size(); ++k) {
      const bool has = !cells[k].empty();
      r.present.push_back(has);
      r.values.push_back(has ? std::stod(cells[k]) : std::numeric_limits<double>::quiet_NaN());
    }
    t.rows.push_back(std::move(r));
  }
  require(!t.rows.empty(), "score table " + path + " has no rows");
  return t;
}

void write_score_row(std::ofstream& out, const std::string& utt, const std::string& src,
                     const std::string& split, const metrics::MetricVector& mv) {
  out << utt << ',' << src << ',' << split;
  for (std::size_t k = 0; k < mv.values.size(); ++k) {
    out << ',';
    if (mv.present[k]) out << fmt_g17(mv.values[k]);
  }
  out << '\n';
}

// ---- Manifest-derived training inputs --------------------------------------------

/// One (mixture, clean) pair per source in the given split, manifest order.
std::vector<se::NoisyCleanPair> source_pairs(const datagen::DatasetManifest& m,
                                             const std::string& split) {
  std::vector<se::NoisyCleanPair> pairs;
  std::set<std::string> seen;
  for (const auto& e : m.entries) {
    if (e.split != split || !seen.insert(e.source_id).second) continue;
    pairs.push_back(
        {e.source_id, datagen::wav_read(e.noisy_path), datagen::wav_read(e.clean_path)});
  }
  require(!pairs.empty(), "manifest has no sources in split '" + split + "'");
  return pairs;
}

// ---- Commands --------------------------------------------------------------------

int cmd_gen(const ConfigCli& cc, const std::optional<std::string>& out,
            const std::optional<int>& sources, const std::optional<int>& variants,
            const std::optional<std::uint64_t>& seed) {
  json cfg = {{"out", "dataset"},    {"sources", 10},     {"variants", 4},
              {"seed", 1},           {"rate", 16000},     {"duration", 1.5},
              {"train_frac", 0.8},   {"val_frac", 0.1},   {"sdr_filter", 32}};
  cfg = cc.resolve(cfg);
  if (out) cfg["out"] = *out;
  if (sources) cfg["sources"] = *sources;
  if (variants) cfg["variants"] = *variants;
  if (seed) cfg["seed"] = *seed;

  datagen::BuildConfig bc;
  bc.out_dir = resolve_out(cfg.at("out").get<std::string>());
  bc.n_sources = cfg.at("sources").get<int>();
  bc.variants_per_source = cfg.at("variants").get<int>();
  bc.seed = cfg.at("seed").get<std::uint64_t>();
  bc.sample_rate = cfg.at("rate").get<int>();
  bc.duration_s = cfg.at("duration").get<double>();
  bc.train_frac = cfg.at("train_frac").get<double>();
  bc.val_frac = cfg.at("val_frac").get<double>();
  bc.sdr_filter_len = cfg.at("sdr_filter").get<int>();

  const auto reg = metrics::MetricRegistry::desk_extended();
  const datagen::DatasetManifest m = datagen::build_dataset(bc, reg);
  write_run_config(bc.out_dir, "gen", cfg);
  std::printf("wrote %zu entries (%d sources x %d variants)\n", m.entries.size(), bc.n_sources,
              bc.variants_per_source);
  std::printf("manifest: %s\nlabels:   %s\n", m.manifest_path.c_str(), m.labels_path.c_str());
  return 0;
}

int cmd_evaluate(const ConfigCli& cc, const std::optional<std::string>& manifest,
                 const std::optional<std::string>& out, const std::optional<int>& workers) {
  json cfg = {{"manifest", ""}, {"out", "eval.csv"}, {"workers", 0}, {"sdr_filter", 32}};
  cfg = cc.resolve(cfg);
  if (manifest) cfg["manifest"] = *manifest;
  if (out) cfg["out"] = *out;
  if (workers) cfg["workers"] = *workers;

  const auto reg = metrics::MetricRegistry::desk_extended();
  const datagen::DatasetManifest m = datagen::load_manifest(cfg.at("manifest").get<std::string>());
  const int sdr_filter = cfg.at("sdr_filter").get<int>();

  // Per-utterance work fans out across a pool; rows are written back in
  // manifest order so the output is independent of scheduling.
  int n_workers = cfg.at("workers").get<int>();
  if (n_workers <= 0)
    n_workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  n_workers = std::min<int>(n_workers, static_cast<int>(m.entries.size()));

  std::vector<metrics::MetricVector> results(m.entries.size(),
                                             metrics::MetricVector::empty(reg.size()));
  std::atomic<std::size_t> next{0};
  std::vector<std::string> worker_errors(static_cast<std::size_t>(n_workers));
  std::vector<std::thread> pool;
  for (int wi = 0; wi < n_workers; ++wi) {
    pool.emplace_back([&, wi] {
      try {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= m.entries.size()) return;
          const auto& e = m.entries[i];
          const signal::Waveform clean = datagen::wav_read(e.clean_path);
          const signal::Waveform degraded = datagen::wav_read(e.degraded_path);
          const std::vector<int> hyp = datagen::pseudo_recognize(degraded);
          results[i] = metrics::evaluate_pair(reg, clean, degraded, &e.transcript, &hyp,
                                              sdr_filter);
        }
      } catch (const std::exception& ex) {
        worker_errors[static_cast<std::size_t>(wi)] = ex.what();
        next.store(m.entries.size());
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& err : worker_errors)
    require(err.empty(), "evaluate: " + err);

  const std::string out_path = resolve_out(cfg.at("out").get<std::string>());
  if (fs::path(out_path).has_parent_path())
    fs::create_directories(fs::path(out_path).parent_path());
  std::ofstream of(out_path, std::ios::trunc);
  require(of.good(), "cannot write " + out_path);
  of << "utterance_id,source_id,split";
  for (std::size_t k = 0; k < reg.size(); ++k) of << ',' << reg.at(k).name;
  of << '\n';
  for (std::size_t i = 0; i < m.entries.size(); ++i)
    write_score_row(of, m.entries[i].utterance_id, m.entries[i].source_id, m.entries[i].split,
                    results[i]);
  std::printf("evaluated %zu utterances with %d workers -> %s\n", m.entries.size(), n_workers,
              out_path.c_str());
  return 0;
}

int cmd_rank(const ConfigCli& cc, const std::optional<std::string>& scores,
             const std::optional<std::string>& out) {
  json cfg = {{"scores", ""}, {"out", "ranks.csv"}};
  cfg = cc.resolve(cfg);
  if (scores) cfg["scores"] = *scores;
  if (out) cfg["out"] = *out;

  const auto reg = metrics::MetricRegistry::desk_extended();
  const ScoreTable t = read_score_table(cfg.at("scores").get<std::string>());
  std::vector<std::size_t> col_idx;
  for (const auto& name : t.metric_names) {
    require(reg.has(name), "rank: unknown metric column " + name);
    col_idx.push_back(reg.index_of(name));
  }

  // Group rows by source in first-appearance order.
  std::vector<metrics::RankGroup> groups;
  std::map<std::string, std::size_t> group_of;
  for (const auto& r : t.rows) {
    if (group_of.find(r.source_id) == group_of.end()) {
      group_of[r.source_id] = groups.size();
      groups.push_back({r.source_id, {}});
    }
    metrics::RankRow row;
    row.utterance_id = r.utterance_id;
    row.metrics = metrics::MetricVector::empty(reg.size());
    for (std::size_t k = 0; k < col_idx.size(); ++k)
      if (r.present[k]) row.metrics.set(col_idx[k], r.values[k]);
    groups[group_of[r.source_id]].rows.push_back(std::move(row));
  }

  const std::string out_path = resolve_out(cfg.at("out").get<std::string>());
  if (fs::path(out_path).has_parent_path())
    fs::create_directories(fs::path(out_path).parent_path());
  std::ofstream of(out_path, std::ios::trunc);
  require(of.good(), "cannot write " + out_path);
  of << "utterance_id,source_id,rank_score\n";
  for (const auto& g : groups) {
    const std::map<std::string, double> score = metrics::rank_score(g, reg);
    for (const auto& r : g.rows)
      of << r.utterance_id << ',' << g.source_id << ',' << fmt_g17(score.at(r.utterance_id))
         << '\n';
  }
  std::printf("ranked %zu rows in %zu groups -> %s\n", t.rows.size(), groups.size(),
              out_path.c_str());
  return 0;
}

int cmd_train_sqa(const ConfigCli& cc, const std::optional<std::string>& manifest,
                  const std::optional<std::string>& out, const std::optional<int>& epochs,
                  const std::optional<std::uint64_t>& seed) {
  json cfg = {{"manifest", ""},
              {"out", "sqa_run"},
              {"epochs", 30},
              {"lr", 2e-3},
              {"weight_decay", 1e-4},
              {"warmup_steps", 100},
              {"seed", 3},
              {"init_seed", 42},
              {"model", json::parse(sqa::SqaConfig::desk_default().to_json())}};
  cfg = cc.resolve(cfg);
  if (manifest) cfg["manifest"] = *manifest;
  if (out) cfg["out"] = *out;
  if (epochs) cfg["epochs"] = *epochs;
  if (seed) cfg["seed"] = *seed;

  const auto reg = metrics::MetricRegistry::desk_extended();
  const datagen::DatasetManifest m = datagen::load_manifest(cfg.at("manifest").get<std::string>());
  const ScoreTable labels = read_score_table(m.labels_path);
  require(labels.rows.size() == m.entries.size(),
          "train-sqa: labels.csv rows do not match the manifest");

  std::vector<std::size_t> col_idx;
  for (const auto& name : labels.metric_names) {
    require(reg.has(name), "train-sqa: unknown metric column " + name);
    col_idx.push_back(reg.index_of(name));
  }

  std::vector<sqa::LabeledUtterance> data;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const auto& r = labels.rows[i];
    require(r.utterance_id == e.utterance_id, "train-sqa: labels.csv order mismatch at row " +
                                                  std::to_string(i));
    sqa::LabeledUtterance u;
    u.utterance_id = e.utterance_id;
    u.source_id = e.source_id;
    u.split = e.split;
    u.wave = datagen::wav_read(e.degraded_path);
    u.labels = metrics::MetricVector::empty(reg.size());
    for (std::size_t k = 0; k < col_idx.size(); ++k)
      if (r.present[k]) u.labels.set(col_idx[k], r.values[k]);
    data.push_back(std::move(u));
  }

  const sqa::SqaConfig model_cfg = sqa::SqaConfig::from_json_text(cfg.at("model").dump());
  sqa::SqaModel model = sqa::init_sqa(model_cfg, reg, cfg.at("init_seed").get<std::uint64_t>());
  sqa::TrainSqaConfig tc;
  tc.epochs = cfg.at("epochs").get<int>();
  tc.lr = cfg.at("lr").get<double>();
  tc.weight_decay = cfg.at("weight_decay").get<double>();
  tc.warmup_steps = cfg.at("warmup_steps").get<int>();
  tc.seed = cfg.at("seed").get<std::uint64_t>();
  const sqa::TrainSqaReport rep = sqa::train_sqa(model, data, tc);

  const fs::path dir = resolve_out(cfg.at("out").get<std::string>());
  write_run_config(dir, "train-sqa", cfg);
  sqa::save_sqa((dir / "proxy.ckpt").string(), model);

  json report;
  report["epoch_loss"] = rep.epoch_loss;
  report["validation"] = json::array();
  for (const auto& c : rep.validation)
    report["validation"].push_back({{"name", c.name}, {"lcc", c.lcc}, {"srcc", c.srcc}, {"n", c.n}});
  std::ofstream rf(dir / "report.json", std::ios::trunc);
  rf << report.dump(2) << '\n';

  // Per-utterance val predictions, one column per head, for `correlate`.
  std::ofstream pf(dir / "val_predictions.csv", std::ios::trunc);
  require(pf.good(), "cannot write val_predictions.csv");
  pf << "utterance_id,source_id,split";
  for (const auto& name : model.config.predicted) pf << ',' << name;
  pf << '\n';
  for (const auto& u : data) {
    if (u.split != "val") continue;
    const sqa::SqaOutput so = sqa::sqa_forward(model, u.wave);
    pf << u.utterance_id << ',' << u.source_id << ',' << u.split;
    for (const std::size_t idx : model.predicted_idx) pf << ',' << fmt_g17(so.scores.values[idx]);
    pf << '\n';
  }

  std::printf("trained %d epochs, loss %.4f -> %.4f\n", tc.epochs, rep.epoch_loss.front(),
              rep.epoch_loss.back());
  for (const auto& c : rep.validation)
    std::printf("  %-18s lcc %6.3f srcc %6.3f (n=%d)\n", c.name.c_str(), c.lcc, c.srcc, c.n);
  std::printf("proxy checkpoint: %s\n", (dir / "proxy.ckpt").c_str());
  return 0;
}

int cmd_pretrain_se(const ConfigCli& cc, const std::optional<std::string>& manifest,
                    const std::optional<std::string>& out, const std::optional<int>& steps,
                    const std::optional<std::uint64_t>& seed) {
  json cfg = {{"manifest", ""},
              {"out", "se_run"},
              {"steps", 1200},
              {"lr", 1e-3},
              {"halve_every", 0},
              {"seed", 1},
              {"init_seed", 7},
              {"model", json::parse(se::SeConfig::desk_default().to_json())},
              {"resolutions", json::parse(train::MultiResConfig::desk_default().to_json())
                                  .at("resolutions")}};
  cfg = cc.resolve(cfg);
  if (manifest) cfg["manifest"] = *manifest;
  if (out) cfg["out"] = *out;
  if (steps) cfg["steps"] = *steps;
  if (seed) cfg["seed"] = *seed;

  const datagen::DatasetManifest m = datagen::load_manifest(cfg.at("manifest").get<std::string>());
  const std::vector<se::NoisyCleanPair> pairs = source_pairs(m, "train");

  const se::SeConfig model_cfg = se::SeConfig::from_json_text(cfg.at("model").dump());
  se::SeModel model = se::init_se(model_cfg, cfg.at("init_seed").get<std::uint64_t>());
  se::PretrainConfig pc;
  pc.steps = cfg.at("steps").get<int>();
  pc.lr = cfg.at("lr").get<double>();
  pc.halve_every = cfg.at("halve_every").get<int>();
  pc.seed = cfg.at("seed").get<std::uint64_t>();
  pc.resolutions =
      train::MultiResConfig::from_json_text(json{{"resolutions", cfg.at("resolutions")}}.dump());
  const se::PretrainReport rep = se::pretrain_se(model, pairs, pc);

  const fs::path dir = resolve_out(cfg.at("out").get<std::string>());
  write_run_config(dir, "pretrain-se", cfg);
  se::save_se((dir / "se.ckpt").string(), model);
  json report;
  report["loss"] = rep.loss;
  std::ofstream rf(dir / "report.json", std::ios::trunc);
  rf << report.dump(2) << '\n';

  std::printf("pretrained on %zu pairs for %d steps, loss %.4f -> %.4f\n", pairs.size(), pc.steps,
              rep.loss.front(), rep.loss.back());
  std::printf("enhancer checkpoint: %s\n", (dir / "se.ckpt").c_str());
  return 0;
}

int cmd_finetune(const std::string& mode, const ConfigCli& cc,
                 const std::optional<std::string>& manifest,
                 const std::optional<std::string>& proxy_path,
                 const std::optional<std::string>& se_path, const std::optional<std::string>& out,
                 const std::optional<int>& steps, const std::optional<std::uint64_t>& seed,
                 const std::optional<double>& l_spec, const std::optional<double>& l_score,
                 const std::optional<double>& l_feat, const std::optional<double>& l_reg) {
  const bool simu = mode == "simu";
  train::LossWeights default_w;
  if (!simu) {
    default_w.lambda_spec = 0.0;
    default_w.lambda_score = 1.0;
    default_w.lambda_feat = 0.0;
    default_w.lambda_reg = 1.0;
  } else {
    default_w.lambda_reg = 0.0;
  }

  json cfg = {{"manifest", ""},
              {"proxy", ""},
              {"se", ""},
              {"out", "ft_run"},
              {"steps", 300},
              {"lr", 1e-4},
              {"halve_every", 0},
              {"monitor_every", 50},
              {"seed", 1},
              {"abort_on_flag", true},
              {"weights", json::parse(default_w.to_json())},
              {"monitor",
               {{"tau", 1.0},
                {"window", 10},
                {"sigma_floor", 0.05},
                {"reg_growth", 3.0},
                {"reg_floor", 0.5}}},
              {"monitor_metrics", json::array()},
              {"resolutions", json::parse(train::MultiResConfig::desk_default().to_json())
                                  .at("resolutions")}};
  cfg = cc.resolve(cfg, {"weights.metric_weights."});
  if (manifest) cfg["manifest"] = *manifest;
  if (proxy_path) cfg["proxy"] = *proxy_path;
  if (se_path) cfg["se"] = *se_path;
  if (out) cfg["out"] = *out;
  if (steps) cfg["steps"] = *steps;
  if (seed) cfg["seed"] = *seed;
  if (l_spec) cfg["weights"]["lambda_spec"] = *l_spec;
  if (l_score) cfg["weights"]["lambda_score"] = *l_score;
  if (l_feat) cfg["weights"]["lambda_feat"] = *l_feat;
  if (l_reg) cfg["weights"]["lambda_reg"] = *l_reg;

  const auto reg = metrics::MetricRegistry::desk_extended();
  const sqa::SqaModel proxy = sqa::load_sqa(cfg.at("proxy").get<std::string>(), reg);
  se::SeModel model = se::load_se(cfg.at("se").get<std::string>());
  const datagen::DatasetManifest m = datagen::load_manifest(cfg.at("manifest").get<std::string>());
  const std::vector<se::NoisyCleanPair> tr = source_pairs(m, "train");
  const std::vector<se::NoisyCleanPair> held = source_pairs(m, "val");

  train::FinetuneConfig fc;
  fc.steps = cfg.at("steps").get<int>();
  fc.lr = cfg.at("lr").get<double>();
  fc.halve_every = cfg.at("halve_every").get<int>();
  fc.monitor_every = cfg.at("monitor_every").get<int>();
  fc.seed = cfg.at("seed").get<std::uint64_t>();
  fc.abort_on_flag = cfg.at("abort_on_flag").get<bool>();
  fc.weights = train::LossWeights::from_json_text(cfg.at("weights").dump());
  fc.resolutions =
      train::MultiResConfig::from_json_text(json{{"resolutions", cfg.at("resolutions")}}.dump());
  fc.monitor.tau = cfg.at("monitor").at("tau").get<double>();
  fc.monitor.window = cfg.at("monitor").at("window").get<int>();
  fc.monitor.sigma_floor = cfg.at("monitor").at("sigma_floor").get<double>();
  fc.monitor.reg_growth = cfg.at("monitor").at("reg_growth").get<double>();
  fc.monitor.reg_floor = cfg.at("monitor").at("reg_floor").get<double>();
  for (const auto& name : cfg.at("monitor_metrics"))
    fc.monitor_metrics.push_back(name.get<std::string>());

  const fs::path dir = resolve_out(cfg.at("out").get<std::string>());
  fc.run_dir = dir.string();
  write_run_config(dir, simu ? "finetune simu" : "finetune real", cfg);

  train::FinetuneReport rep;
  if (simu) {
    rep = train::finetune_simulated(model, proxy, tr, held, fc);
  } else {
    std::vector<train::RealUtterance> tru;
    for (const auto& p : tr) tru.push_back({p.id, p.noisy});
    rep = train::finetune_real(model, proxy, tru, held, fc);
  }

  std::printf("ran %d/%d steps, %zu monitor events -> %s\n", rep.steps_run, fc.steps,
              rep.events.size(), dir.c_str());
  const auto& first = rep.events.front();
  const auto& last = rep.events.back();
  std::printf("proxy quality %8.4f -> %8.4f\n", first.proxy_quality, last.proxy_quality);
  if (last.has_oracle)
    std::printf("oracle sdr    %8.2f -> %8.2f dB\n", first.oracle_sdr, last.oracle_sdr);
  std::printf("held drift    %8.4f -> %8.4f\n", first.l_reg_held, last.l_reg_held);
  if (rep.aborted) {
    std::fprintf(stderr, "seqa: hack monitor stopped the run at step %d: %s\n", rep.steps_run,
                 rep.monitor.reason.c_str());
    return 2;
  }
  if (rep.monitor.flag)
    std::printf("hack monitor latched (%s) but abort_on_flag is off\n",
                rep.monitor.reason.c_str());
  return 0;
}

int cmd_gradcheck(const ConfigCli& cc, const std::optional<double>& seconds) {
  json cfg = {{"seconds", 0.2}, {"seed", 7}, {"max_coords", 2}};
  cfg = cc.resolve(cfg);
  if (seconds) cfg["seconds"] = *seconds;

  // Self-contained: a seeded scene, a small mask network and an untrained
  // proxy are enough to exercise every objective configuration.
  const double dur = cfg.at("seconds").get<double>();
  const datagen::CleanSpeech cs = datagen::synth_clean(42, std::max(dur, 0.3), 16000);
  const signal::Waveform noise =
      datagen::synth_noise(942, cs.wave.samples.size(), 16000, datagen::NoiseColor::kWhite);
  const datagen::Scene scene = datagen::mix_at_snr(cs.wave, noise, 4.0);
  signal::Waveform noisy = scene.mixture;
  signal::Waveform clean = cs.wave;
  noisy.samples.resize(static_cast<std::size_t>(dur * 16000));
  clean.samples.resize(noisy.samples.size());

  sqa::SqaConfig pc;
  pc.stft = signal::StftConfig{256, 256, 64, signal::WindowKind::kHann, true};
  pc.n_mels = 16;
  pc.encoder_widths = {24};
  pc.hidden_dim = 10;
  pc.predicted = {"SDR", "ESTOI", "CER"};
  const sqa::SqaModel proxy =
      sqa::init_sqa(pc, metrics::MetricRegistry::desk_extended(), 11);

  se::SeConfig sc;
  sc.stft = signal::StftConfig{256, 256, 64, signal::WindowKind::kHann, true};
  sc.context = 1;
  sc.hidden = {12, 10};
  se::SeModel model = se::init_se(sc, 3);

  train::MultiResConfig res;
  res.resolutions = {signal::StftConfig{256, 256, 64, signal::WindowKind::kHann, true},
                     signal::StftConfig{128, 128, 32, signal::WindowKind::kHann, true}};

  std::vector<Tensor> point;
  for (Tensor* p : se::parameters(model)) point.push_back(*p);
  ad::GradCheckOptions opts;
  opts.max_coords_per_input = cfg.at("max_coords").get<int>();
  opts.seed = cfg.at("seed").get<std::uint64_t>();

  const double lams[6][3] = {{1, 1, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}, {0, 1, 0}, {0, 0, 1}};
  bool ok = true;
  for (const auto& lam : lams) {
    train::LossWeights w;
    w.lambda_spec = lam[0];
    w.lambda_score = lam[1];
    w.lambda_feat = lam[2];
    const double err = ad::grad_check(
        [&](ad::Tape& t, const std::vector<ad::NodeId>& leaves) {
          const ad::NodeId x = t.constant(Tensor::vector(noisy.samples));
          const se::EnhancedPair ep = se::enhance_with_params(model, t, x, leaves);
          return train::loss_simu_node(t, ep.node, clean, proxy, w, res).total_node;
        },
        point, opts);
    std::printf("simulated %g/%g/%g  max rel err %.3g\n", lam[0], lam[1], lam[2], err);
    ok = ok && err < 1e-4;
  }
  {
    se::SeModel shifted = model;
    for (double& v : shifted.mlp_b.back().data) v += 0.01;
    const signal::Waveform enh0 = se::enhance(shifted, noisy).enhanced;
    train::LossWeights w;
    w.lambda_spec = 0.0;
    w.lambda_feat = 0.0;
    w.lambda_reg = 1.0;
    const double err = ad::grad_check(
        [&](ad::Tape& t, const std::vector<ad::NodeId>& leaves) {
          const ad::NodeId x = t.constant(Tensor::vector(noisy.samples));
          const se::EnhancedPair ep = se::enhance_with_params(model, t, x, leaves);
          return train::loss_real_node(t, ep.node, enh0, proxy, w, res).total_node;
        },
        point, opts);
    std::printf("real 1/1  max rel err %.3g\n", err);
    ok = ok && err < 1e-4;
  }
  if (!ok) {
    std::fprintf(stderr, "seqa: gradient check failed (>= 1e-4)\n");
    return 1;
  }
  return 0;
}

int cmd_correlate(const ConfigCli& cc, const std::optional<std::string>& pred,
                  const std::optional<std::string>& labels_path,
                  const std::optional<std::string>& out) {
  json cfg = {{"pred", ""}, {"labels", ""}, {"out", "correlations.csv"}};
  cfg = cc.resolve(cfg);
  if (pred) cfg["pred"] = *pred;
  if (labels_path) cfg["labels"] = *labels_path;
  if (out) cfg["out"] = *out;

  const ScoreTable p = read_score_table(cfg.at("pred").get<std::string>());
  const ScoreTable l = read_score_table(cfg.at("labels").get<std::string>());
  std::map<std::string, std::size_t> label_row;
  for (std::size_t i = 0; i < l.rows.size(); ++i) label_row[l.rows[i].utterance_id] = i;
  std::map<std::string, std::size_t> label_col;
  for (std::size_t k = 0; k < l.metric_names.size(); ++k) label_col[l.metric_names[k]] = k;

  const std::string out_path = resolve_out(cfg.at("out").get<std::string>());
  if (fs::path(out_path).has_parent_path())
    fs::create_directories(fs::path(out_path).parent_path());
  std::ofstream of(out_path, std::ios::trunc);
  require(of.good(), "cannot write " + out_path);
  of << "metric,lcc,srcc,n\n";

  for (std::size_t k = 0; k < p.metric_names.size(); ++k) {
    const auto lc = label_col.find(p.metric_names[k]);
    if (lc == label_col.end()) continue;
    std::vector<double> xs, ys;
    for (const auto& r : p.rows) {
      const auto it = label_row.find(r.utterance_id);
      if (it == label_row.end() || !r.present[k]) continue;
      const auto& lr = l.rows[it->second];
      if (!lr.present[lc->second]) continue;
      xs.push_back(r.values[k]);
      ys.push_back(lr.values[lc->second]);
    }
    double lcc = std::numeric_limits<double>::quiet_NaN();
    double srcc = std::numeric_limits<double>::quiet_NaN();
    if (xs.size() >= 2) {
      try {
        lcc = metrics::pearson(xs, ys);
        srcc = metrics::spearman(xs, ys);
      } catch (const Error&) {
        // constant series: correlation undefined, reported as nan
      }
    }
    of << p.metric_names[k] << ',' << fmt_g17(lcc) << ',' << fmt_g17(srcc) << ',' << xs.size()
       << '\n';
    std::printf("%-18s lcc %6.3f srcc %6.3f (n=%zu)\n", p.metric_names[k].c_str(), lcc, srcc,
                xs.size());
  }
  std::printf("-> %s\n", out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"speech quality proxy + enhancement fine-tuning toolkit"};
  app.require_subcommand(1);

  std::function<int()> run;

  // gen
  {
    auto* sub = app.add_subcommand("gen", "generate a labeled synthetic corpus");
    auto cc = std::make_shared<ConfigCli>();
    cc->attach(sub);
    auto out = std::make_shared<std::optional<std::string>>();
    auto sources = std::make_shared<std::optional<int>>();
    auto variants = std::make_shared<std::optional<int>>();
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    sub->add_option("--out", *out, "dataset directory");
    sub->add_option("--sources", *sources, "number of clean sources");
    sub->add_option("--variants", *variants, "degraded variants per source");
    sub->add_option("--seed", *seed, "generator seed");
    sub->callback([=, &run] { run = [=] { return cmd_gen(*cc, *out, *sources, *variants, *seed); }; });
  }
  // evaluate
  {
    auto* sub = app.add_subcommand("evaluate", "run every oracle over a manifest");
    auto cc = std::make_shared<ConfigCli>();
    cc->attach(sub);
    auto manifest = std::make_shared<std::optional<std::string>>();
    auto out = std::make_shared<std::optional<std::string>>();
    auto workers = std::make_shared<std::optional<int>>();
    sub->add_option("--manifest", *manifest, "manifest.jsonl path");
    sub->add_option("--out", *out, "output CSV path");
    sub->add_option("--workers", *workers, "worker threads (0 = all cores)");
    sub->callback([=, &run] { run = [=] { return cmd_evaluate(*cc, *manifest, *out, *workers); }; });
  }
  // rank
  {
    auto* sub = app.add_subcommand("rank", "per-source rank aggregation of a score table");
    auto cc = std::make_shared<ConfigCli>();
    cc->attach(sub);
    auto scores = std::make_shared<std::optional<std::string>>();
    auto out = std::make_shared<std::optional<std::string>>();
    sub->add_option("--scores", *scores, "score CSV (labels.csv shape)");
    sub->add_option("--out", *out, "output CSV path");
    sub->callback([=, &run] { run = [=] { return cmd_rank(*cc, *scores, *out); }; });
  }
  // train-sqa
  {
    auto* sub = app.add_subcommand("train-sqa", "train the quality proxy on a labeled corpus");
    auto cc = std::make_shared<ConfigCli>();
    cc->attach(sub);
    auto manifest = std::make_shared<std::optional<std::string>>();
    auto out = std::make_shared<std::optional<std::string>>();
    auto epochs = std::make_shared<std::optional<int>>();
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    sub->add_option("--manifest", *manifest, "manifest.jsonl path");
    sub->add_option("--out", *out, "run directory");
    sub->add_option("--epochs", *epochs, "training epochs");
    sub->add_option("--seed", *seed, "training seed");
    sub->callback(
        [=, &run] { run = [=] { return cmd_train_sqa(*cc, *manifest, *out, *epochs, *seed); }; });
  }
  // pretrain-se
  {
    auto* sub = app.add_subcommand("pretrain-se", "spectral-loss pretraining of the enhancer");
    auto cc = std::make_shared<ConfigCli>();
    cc->attach(sub);
    auto manifest = std::make_shared<std::optional<std::string>>();
    auto out = std::make_shared<std::optional<std::string>>();
    auto steps = std::make_shared<std::optional<int>>();
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    sub->add_option("--manifest", *manifest, "manifest.jsonl path");
    sub->add_option("--out", *out, "run directory");
    sub->add_option("--steps", *steps, "optimizer steps");
    sub->add_option("--seed", *seed, "training seed");
    sub->callback(
        [=, &run] { run = [=] { return cmd_pretrain_se(*cc, *manifest, *out, *steps, *seed); }; });
  }
  // finetune
  {
    auto* sub = app.add_subcommand("finetune", "proxy-guided fine-tuning of the enhancer");
    auto mode = std::make_shared<std::string>();
    sub->add_option("mode", *mode, "simu (paired) or real (reference-free)")
        ->required()
        ->check(CLI::IsMember({"simu", "real"}));
    auto cc = std::make_shared<ConfigCli>();
    cc->attach(sub);
    auto manifest = std::make_shared<std::optional<std::string>>();
    auto proxy = std::make_shared<std::optional<std::string>>();
    auto se_ckpt = std::make_shared<std::optional<std::string>>();
    auto out = std::make_shared<std::optional<std::string>>();
    auto steps = std::make_shared<std::optional<int>>();
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    auto lspec = std::make_shared<std::optional<double>>();
    auto lscore = std::make_shared<std::optional<double>>();
    auto lfeat = std::make_shared<std::optional<double>>();
    auto lreg = std::make_shared<std::optional<double>>();
    sub->add_option("--manifest", *manifest, "manifest.jsonl path");
    sub->add_option("--proxy", *proxy, "proxy checkpoint");
    sub->add_option("--se", *se_ckpt, "enhancer checkpoint");
    sub->add_option("--out", *out, "run directory");
    sub->add_option("--steps", *steps, "optimizer steps");
    sub->add_option("--seed", *seed, "training seed");
    sub->add_option("--lambda-spec", *lspec, "spectral loss weight");
    sub->add_option("--lambda-score", *lscore, "proxy score loss weight");
    sub->add_option("--lambda-feat", *lfeat, "proxy feature loss weight");
    sub->add_option("--lambda-reg", *lreg, "drift regularizer weight");
    sub->callback([=, &run] {
      run = [=] {
        return cmd_finetune(*mode, *cc, *manifest, *proxy, *se_ckpt, *out, *steps, *seed, *lspec,
                            *lscore, *lfeat, *lreg);
      };
    });
  }
  // gradcheck
  {
    auto* sub = app.add_subcommand("gradcheck", "finite-difference check of every objective");
    auto cc = std::make_shared<ConfigCli>();
    cc->attach(sub);
    auto seconds = std::make_shared<std::optional<double>>();
    sub->add_option("--seconds", *seconds, "clip length");
    sub->callback([=, &run] { run = [=] { return cmd_gradcheck(*cc, *seconds); }; });
  }
  // correlate
  {
    auto* sub = app.add_subcommand("correlate", "LCC/SRCC between two score tables");
    auto cc = std::make_shared<ConfigCli>();
    cc->attach(sub);
    auto pred = std::make_shared<std::optional<std::string>>();
    auto labels = std::make_shared<std::optional<std::string>>();
    auto out = std::make_shared<std::optional<std::string>>();
    sub->add_option("--pred", *pred, "prediction CSV");
    sub->add_option("--labels", *labels, "label CSV");
    sub->add_option("--out", *out, "output CSV path");
    sub->callback([=, &run] { run = [=] { return cmd_correlate(*cc, *pred, *labels, *out); }; });
  }

  CLI11_PARSE(app, argc, argv);
  try {
    return run ? run() : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "seqa: %s\n", e.what());
    return 1;
  }
}
