#include "seqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>

#include "json.hpp"
#include "seqa/metrics.hpp"
#include "seqa/optim.hpp"
#include "seqa/rng.hpp"

namespace seqa::train {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kProxyMinSeconds = 0.2;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Per-head specs for the proxy's predicted metrics with weight overrides
/// applied; positive overrides naming metrics without a head are rejected.
std::vector<metrics::MetricSpec> head_specs(const sqa::SqaModel& proxy, const LossWeights& w) {
  for (const auto& [name, wv] : w.metric_weights) {
    if (wv <= 0.0) continue;
    const bool predicted = std::find(proxy.config.predicted.begin(),
                                     proxy.config.predicted.end(),
                                     name) != proxy.config.predicted.end();
    require(predicted, "loss_score: weighted metric has no proxy head: " + name);
  }
  std::vector<metrics::MetricSpec> specs;
  for (const std::size_t idx : proxy.predicted_idx) {
    metrics::MetricSpec spec = proxy.registry.at(idx);
    spec.weight = w.weight_for(spec);
    specs.push_back(std::move(spec));
  }
  return specs;
}

double head_weight_total(const sqa::SqaModel& proxy, const LossWeights& w) {
  double s = 0.0;
  for (const std::size_t idx : proxy.predicted_idx) s += w.weight_for(proxy.registry.at(idx));
  return s;
}

/// Weighted sum of loss terms. Multiplying by the lambda constant and adding
/// keeps the objective exactly linear in each lambda.
ad::NodeId weighted_total(ad::Tape& t, const std::vector<std::pair<double, ad::NodeId>>& terms) {
  ad::NodeId acc = 0;
  bool first = true;
  for (const auto& [lambda, node] : terms) {
    const ad::NodeId scaled = t.mul(node, t.constant(Tensor::scalar(lambda)));
    acc = first ? scaled : t.add(acc, scaled);
    first = false;
  }
  if (first) acc = t.constant(Tensor::scalar(0.0));
  return acc;
}

// ---- Fine-tune loop internals ------------------------------------------------------

struct TrainItem {
  std::string id;
  const signal::Waveform* noisy = nullptr;
};

/// Metrics the monitor composites run over: explicit config, else every
/// predicted metric whose oracle works without a transcript.
std::vector<std::string> monitor_names(const sqa::SqaModel& proxy, const FinetuneConfig& cfg) {
  if (!cfg.monitor_metrics.empty()) {
    for (const auto& name : cfg.monitor_metrics) {
      const bool predicted = std::find(proxy.config.predicted.begin(),
                                       proxy.config.predicted.end(),
                                       name) != proxy.config.predicted.end();
      require(predicted, "finetune: monitor metric has no proxy head: " + name);
    }
    return cfg.monitor_metrics;
  }
  std::vector<std::string> names;
  for (const auto& name : proxy.config.predicted)
    if (name != "CER" && name != "PhonemeSimilarity") names.push_back(name);
  require(!names.empty(), "finetune: no transcript-free metrics to monitor");
  return names;
}

/// Held-set sweep: proxy composite on the current enhanced output, post-hoc
/// oracle composite where a reference exists, and drift from the initial
/// model's output. Quality direction: higher is better.
MonitorEvent monitor_pass(const se::SeModel& m, const sqa::SqaModel& proxy,
                          const std::vector<se::NoisyCleanPair>& held,
                          const std::vector<signal::Waveform>& held_enh0,
                          const std::vector<std::string>& scored, const FinetuneConfig& cfg) {
  MonitorEvent ev;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  double proxy_q = 0.0, oracle_q = 0.0, l_reg = 0.0, sdr = 0.0, estoi = 0.0;
  int with_ref = 0;
  const std::size_t sdr_idx = proxy.registry.index_of("SDR");
  const std::size_t estoi_idx = proxy.registry.index_of("ESTOI");

  for (std::size_t i = 0; i < held.size(); ++i) {
    const signal::Waveform enhanced = se::enhance(m, held[i].noisy).enhanced;
    const sqa::SqaOutput so = sqa::sqa_forward(proxy, enhanced);
    proxy_q += -composite_score(proxy.registry, so.scores, scored, true, &cfg.weights);
    l_reg += loss_spec(enhanced, held_enh0[i], cfg.resolutions);
    if (!held[i].clean.samples.empty()) {
      const metrics::MetricVector mv =
          metrics::evaluate_pair(proxy.registry, held[i].clean, enhanced);
      oracle_q += -composite_score(proxy.registry, mv, scored, true, &cfg.weights);
      sdr += mv.values[sdr_idx];
      estoi += mv.values[estoi_idx];
      ++with_ref;
    }
  }
  const double n = static_cast<double>(held.size());
  ev.proxy_quality = proxy_q / n;
  ev.l_reg_held = l_reg / n;
  if (with_ref == static_cast<int>(held.size())) {
    ev.oracle_quality = oracle_q / n;
    ev.oracle_sdr = sdr / n;
    ev.oracle_estoi = estoi / n;
    ev.has_oracle = true;
  } else {
    ev.oracle_quality = nan;
    ev.oracle_sdr = nan;
    ev.oracle_estoi = nan;
    ev.has_oracle = false;
  }
  return ev;
}

class TrajectoryWriter {
 public:
  explicit TrajectoryWriter(const std::string& run_dir) {
    if (run_dir.empty()) return;
    out_.open(fs::path(run_dir) / "trajectory.csv", std::ios::trunc);
    require(out_.good(), "finetune: cannot write trajectory.csv in " + run_dir);
    out_ << "step,lr,loss_total,loss_spec,loss_score,loss_feat,loss_reg,"
            "proxy_quality,oracle_quality,oracle_sdr,oracle_estoi,l_reg_held,hack_flag\n";
  }

  void row(int step, const double* lr, const LossBreakdown* lb, const MonitorEvent* ev,
           bool flag) {
    if (!out_.is_open()) return;
    out_ << step << ',' << (lr ? fmt(*lr) : "");
    if (lb)
      out_ << ',' << fmt(lb->total) << ',' << fmt(lb->spec) << ',' << fmt(lb->score) << ','
           << fmt(lb->feat) << ',' << fmt(lb->reg);
    else
      out_ << ",,,,,";
    if (ev)
      out_ << ',' << fmt(ev->proxy_quality) << ',' << fmt(ev->oracle_quality) << ','
           << fmt(ev->oracle_sdr) << ',' << fmt(ev->oracle_estoi) << ',' << fmt(ev->l_reg_held);
    else
      out_ << ",,,,,";
    out_ << ',' << (flag ? 1 : 0) << '\n';
  }

  void close() {
    if (out_.is_open()) out_.close();
  }

 private:
  std::ofstream out_;
};

void write_run_config(const FinetuneConfig& cfg, bool simu, std::size_t n_train,
                      std::size_t n_held, int halve_every,
                      const std::vector<std::string>& scored) {
  if (cfg.run_dir.empty()) return;
  json j;
  j["mode"] = simu ? "simulated" : "real";
  j["steps"] = cfg.steps;
  j["lr"] = cfg.lr;
  j["halve_every"] = halve_every;
  j["monitor_every"] = cfg.monitor_every;
  j["seed"] = cfg.seed;
  j["abort_on_flag"] = cfg.abort_on_flag;
  j["weights"] = json::parse(cfg.weights.to_json());
  j["resolutions"] = json::parse(cfg.resolutions.to_json())["resolutions"];
  j["monitor"] = {{"tau", cfg.monitor.tau},
                  {"window", cfg.monitor.window},
                  {"sigma_floor", cfg.monitor.sigma_floor},
                  {"reg_growth", cfg.monitor.reg_growth},
                  {"reg_floor", cfg.monitor.reg_floor}};
  j["monitor_metrics"] = scored;
  j["train_utterances"] = n_train;
  j["held_utterances"] = n_held;
  std::ofstream out(fs::path(cfg.run_dir) / "config.json", std::ios::trunc);
  require(out.good(), "finetune: cannot write config.json in " + cfg.run_dir);
  out << j.dump(2) << '\n';
}

void save_step_checkpoint(const FinetuneConfig& cfg, const se::SeModel& m, int step) {
  if (cfg.run_dir.empty()) return;
  char name[32];
  std::snprintf(name, sizeof name, "se.step%06d.ckpt", step);
  se::save_se((fs::path(cfg.run_dir) / name).string(), m);
}

void validate_common(const se::SeModel& m, const sqa::SqaModel& proxy,
                     const FinetuneConfig& cfg) {
  se::validate(m.config);
  validate(cfg.weights);
  validate(cfg.resolutions);
  validate(cfg.monitor);
  require(cfg.steps > 0, "finetune: steps must be positive");
  require(cfg.lr > 0.0, "finetune: lr must be positive");
  require(cfg.halve_every >= 0, "finetune: halve_every must be non-negative");
  require(cfg.monitor_every > 0, "finetune: monitor_every must be positive");
  require(m.config.sample_rate == proxy.config.sample_rate,
          "finetune: enhancer and proxy sample rates differ");
}

void check_train_wave(const signal::Waveform& w, const se::SeModel& m, bool needs_proxy,
                      const std::string& id) {
  signal::validate(w);
  require(w.sample_rate == m.config.sample_rate, "finetune: sample rate mismatch for " + id);
  require(w.size() >= static_cast<std::size_t>(m.config.stft.win_length),
          "finetune: utterance shorter than one frame: " + id);
  if (needs_proxy)
    require(w.duration_s() >= kProxyMinSeconds,
            "finetune: utterance too short for the proxy: " + id);
}

/// Shared descent loop. `build` records the mode's objective for one train
/// item; monitoring, logging, checkpointing and the abort path are common.
FinetuneReport run_loop(se::SeModel& m, const sqa::SqaModel& proxy,
                        const std::vector<TrainItem>& items,
                        const std::function<LossBreakdown(ad::Tape&, std::size_t, ad::NodeId)>& build,
                        const std::vector<se::NoisyCleanPair>& held, const FinetuneConfig& cfg,
                        bool simu_mode) {
  require(!items.empty(), "finetune: no training utterances");
  require(!held.empty(), "finetune: no held-out utterances");

  const std::vector<std::string> scored = monitor_names(proxy, cfg);
  const int halve_every = cfg.halve_every > 0 ? cfg.halve_every : std::max(1, cfg.steps * 2 / 5);

  // The entry model is the frozen initial model; its held-set outputs anchor
  // the drift column.
  const se::SeModel initial = m;
  std::vector<signal::Waveform> held_enh0;
  for (const auto& p : held) held_enh0.push_back(se::enhance(initial, p.noisy).enhanced);

  if (!cfg.run_dir.empty()) fs::create_directories(cfg.run_dir);
  write_run_config(cfg, simu_mode, items.size(), held.size(), halve_every, scored);
  TrajectoryWriter traj(cfg.run_dir);

  std::vector<Tensor*> params = se::parameters(m);
  opt::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.halve_every = halve_every;
  opt::Adam adam(params, ac);

  FinetuneReport report;
  report.monitor.config = cfg.monitor;

  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int step = 0; step < cfg.steps; ++step) {
    const MonitorEvent* ev_for_row = nullptr;
    MonitorEvent ev;
    if (step % cfg.monitor_every == 0) {
      ev = monitor_pass(m, proxy, held, held_enh0, scored, cfg);
      ev.step = step;
      report.monitor = hack_monitor(std::move(report.monitor), ev.proxy_quality,
                                    simu_mode && ev.has_oracle
                                        ? std::optional<double>(ev.oracle_quality)
                                        : std::nullopt,
                                    ev.l_reg_held);
      ev.flag_after = report.monitor.flag;
      report.events.push_back(ev);
      ev_for_row = &ev;
      save_step_checkpoint(cfg, m, step);
      if (report.monitor.flag && cfg.abort_on_flag) {
        traj.row(step, nullptr, nullptr, ev_for_row, true);
        report.aborted = true;
        break;
      }
    }

    const std::size_t pos = static_cast<std::size_t>(step) % items.size();
    if (pos == 0) {
      Rng shuffle_rng(
          derive_seed(cfg.seed, 4000 + static_cast<std::uint64_t>(step) / items.size()));
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[shuffle_rng.next_u64() % i]);
    }
    const std::size_t idx = order[pos];

    ad::Tape t;
    std::vector<ad::NodeId> pn;
    const ad::NodeId x = t.constant(Tensor::vector(items[idx].noisy->samples));
    const se::EnhancedPair ep = se::enhance_node(m, t, x, &pn);
    const LossBreakdown lb = build(t, idx, ep.node);
    require(std::isfinite(lb.total), "finetune: loss went non-finite at step " +
                                         std::to_string(step) + " on " + items[idx].id);

    const double lr_used = adam.next_lr();
    const ad::Gradients g = t.backward(lb.total_node);
    std::vector<const Tensor*> gp(params.size(), nullptr);
    for (std::size_t i = 0; i < params.size(); ++i)
      if (g.has(pn[i])) gp[i] = &g.at(pn[i]);
    adam.update(params, gp);
    for (const Tensor* p : params)
      for (double v : p->data)
        require(std::isfinite(v),
                "finetune: parameters diverged at step " + std::to_string(step));

    report.loss_total.push_back(lb.total);
    report.loss_spec.push_back(lb.spec);
    report.loss_score.push_back(lb.score);
    report.loss_feat.push_back(lb.feat);
    report.loss_reg.push_back(lb.reg);
    report.steps_run = step + 1;
    traj.row(step, &lr_used, &lb, ev_for_row, report.monitor.flag);
  }

  if (!report.aborted) {
    MonitorEvent ev = monitor_pass(m, proxy, held, held_enh0, scored, cfg);
    ev.step = report.steps_run;
    report.monitor = hack_monitor(std::move(report.monitor), ev.proxy_quality,
                                  simu_mode && ev.has_oracle
                                      ? std::optional<double>(ev.oracle_quality)
                                      : std::nullopt,
                                  ev.l_reg_held);
    ev.flag_after = report.monitor.flag;
    report.events.push_back(ev);
    traj.row(ev.step, nullptr, nullptr, &ev, report.monitor.flag);
    save_step_checkpoint(cfg, m, ev.step);
  }
  if (!cfg.run_dir.empty()) se::save_se((fs::path(cfg.run_dir) / "se.final.ckpt").string(), m);
  traj.close();
  return report;
}

}  // namespace

// ---- Objectives --------------------------------------------------------------------

LossBreakdown loss_simu_node(ad::Tape& t, ad::NodeId x_enh, const signal::Waveform& clean,
                             const sqa::SqaModel& proxy, const LossWeights& w,
                             const MultiResConfig& cfg, const Tensor* h_ref_cache) {
  validate(w);
  validate(cfg);
  require(w.lambda_spec > 0.0 || w.lambda_score > 0.0 || w.lambda_feat > 0.0,
          "loss_simu: all simulated-branch lambdas are zero");
  require(t.value(x_enh).numel() == clean.samples.size(),
          "loss_simu: enhanced/clean lengths differ");

  LossBreakdown out;
  std::vector<std::pair<double, ad::NodeId>> terms;
  if (w.lambda_spec > 0.0) {
    const ad::NodeId ref = t.constant(Tensor::vector(clean.samples));
    const ad::NodeId node = loss_spec_node(t, x_enh, ref, cfg);
    out.spec = t.value(node).item();
    terms.emplace_back(w.lambda_spec, node);
  }
  if (w.lambda_score > 0.0 || w.lambda_feat > 0.0) {
    const sqa::SqaOutput so = sqa::sqa_forward_node(proxy, t, x_enh);
    if (w.lambda_score > 0.0) {
      const ad::NodeId node =
          loss_score_node(t, head_specs(proxy, w), so.score_nodes, w.standardized_scores);
      out.score = t.value(node).item();
      terms.emplace_back(w.lambda_score, node);
    }
    if (w.lambda_feat > 0.0) {
      ad::NodeId h_ref = 0;
      if (h_ref_cache) {
        h_ref = t.constant(*h_ref_cache);
      } else {
        signal::Waveform ref = clean;
        ref.sample_rate = proxy.config.sample_rate;
        h_ref = sqa::sqa_forward(proxy, ref, &t).hidden_node;
      }
      const ad::NodeId node = loss_feat_node(t, so.hidden_node, h_ref);
      out.feat = t.value(node).item();
      terms.emplace_back(w.lambda_feat, node);
    }
  }
  out.total_node = weighted_total(t, terms);
  out.total = t.value(out.total_node).item();
  return out;
}

LossBreakdown loss_real_node(ad::Tape& t, ad::NodeId x_enh, const signal::Waveform& enh0,
                             const sqa::SqaModel& proxy, const LossWeights& w,
                             const MultiResConfig& cfg) {
  validate(w);
  validate(cfg);
  require(w.lambda_score > 0.0 || w.lambda_reg > 0.0,
          "loss_real: both real-branch lambdas are zero");
  require(t.value(x_enh).numel() == enh0.samples.size(),
          "loss_real: enhanced/initial-output lengths differ");

  LossBreakdown out;
  std::vector<std::pair<double, ad::NodeId>> terms;
  if (w.lambda_score > 0.0) {
    const sqa::SqaOutput so = sqa::sqa_forward_node(proxy, t, x_enh);
    const ad::NodeId node =
        loss_score_node(t, head_specs(proxy, w), so.score_nodes, w.standardized_scores);
    out.score = t.value(node).item();
    terms.emplace_back(w.lambda_score, node);
  }
  if (w.lambda_reg > 0.0) {
    const ad::NodeId ref0 = t.constant(Tensor::vector(enh0.samples));
    const ad::NodeId node = loss_spec_node(t, x_enh, ref0, cfg);
    out.reg = t.value(node).item();
    terms.emplace_back(w.lambda_reg, node);
  }
  out.total_node = weighted_total(t, terms);
  out.total = t.value(out.total_node).item();
  return out;
}

// ---- Monitor -------------------------------------------------------------------------

void validate(const HackMonitorConfig& c) {
  require(c.tau > 0.0, "hack monitor: tau must be positive");
  require(c.window >= 2, "hack monitor: window must be at least 2");
  require(c.sigma_floor > 0.0, "hack monitor: sigma floor must be positive");
  require(c.reg_growth > 1.0, "hack monitor: reg growth must exceed 1");
  require(c.reg_floor > 0.0, "hack monitor: reg floor must be positive");
}

HackMonitorState hack_monitor(HackMonitorState state, double proxy_quality,
                              std::optional<double> oracle_quality, double l_reg) {
  validate(state.config);
  require(std::isfinite(proxy_quality) && std::isfinite(l_reg),
          "hack monitor: non-finite sample");
  if (oracle_quality) require(std::isfinite(*oracle_quality), "hack monitor: non-finite oracle");

  HackSample s;
  s.proxy_quality = proxy_quality;
  s.oracle_quality = oracle_quality.value_or(std::numeric_limits<double>::quiet_NaN());
  s.has_oracle = oracle_quality.has_value();
  s.l_reg = l_reg;
  state.history.push_back(s);
  if (state.flag) return state;  // latched

  const auto& h = state.history;
  const std::size_t n = h.size();
  const std::size_t w = static_cast<std::size_t>(state.config.window);

  const bool oracle_mode = s.has_oracle && h.front().has_oracle;
  if (oracle_mode) {
    // Divergence of standardized improvements against the first sample.
    if (n < w + 1) return state;
    double mp = 0.0, mo = 0.0;
    for (const auto& x : h) {
      mp += x.proxy_quality;
      mo += x.oracle_quality;
    }
    mp /= static_cast<double>(n);
    mo /= static_cast<double>(n);
    double vp = 0.0, vo = 0.0;
    for (const auto& x : h) {
      vp += (x.proxy_quality - mp) * (x.proxy_quality - mp);
      vo += (x.oracle_quality - mo) * (x.oracle_quality - mo);
    }
    const double sp = std::max(state.config.sigma_floor, std::sqrt(vp / static_cast<double>(n)));
    const double so = std::max(state.config.sigma_floor, std::sqrt(vo / static_cast<double>(n)));
    bool all_over = true;
    for (std::size_t i = n - w; i < n; ++i) {
      const double div = (h[i].proxy_quality - h.front().proxy_quality) / sp -
                         (h[i].oracle_quality - h.front().oracle_quality) / so;
      if (div <= state.config.tau) {
        all_over = false;
        break;
      }
    }
    if (all_over) {
      state.flag = true;
      state.reason = "proxy composite outran the oracle composite by more than tau for a full window";
    }
  } else {
    // Reference-free mode: sustained growth of the drift-from-initial loss.
    if (n < w + 2) return state;
    const double ref = std::max(state.config.reg_floor, h[1].l_reg);
    bool all_over = true;
    for (std::size_t i = n - w; i < n; ++i) {
      if (h[i].l_reg <= state.config.reg_growth * ref) {
        all_over = false;
        break;
      }
    }
    if (all_over) {
      state.flag = true;
      state.reason = "regularizer loss stayed above its growth bound for a full window";
    }
  }
  return state;
}

// ---- Fine-tuning loops ---------------------------------------------------------------

FinetuneReport finetune_simulated(se::SeModel& m, const sqa::SqaModel& proxy,
                                  const std::vector<se::NoisyCleanPair>& train_pairs,
                                  const std::vector<se::NoisyCleanPair>& held_pairs,
                                  const FinetuneConfig& cfg) {
  validate_common(m, proxy, cfg);
  const LossWeights& w = cfg.weights;
  const bool score_live = w.lambda_score > 0.0 && head_weight_total(proxy, w) > 0.0;
  require(w.lambda_spec > 0.0 || w.lambda_feat > 0.0 || score_live,
          "finetune_simulated: objective has no live term");
  const bool needs_proxy = w.lambda_score > 0.0 || w.lambda_feat > 0.0;
  for (const auto& p : train_pairs) {
    check_train_wave(p.noisy, m, needs_proxy, p.id);
    signal::validate(p.clean);
    require(p.clean.size() == p.noisy.size(), "finetune: length mismatch for " + p.id);
  }
  for (const auto& p : held_pairs) {
    check_train_wave(p.noisy, m, true, p.id);
    signal::validate(p.clean);
    require(p.clean.size() == p.noisy.size(), "finetune: length mismatch for " + p.id);
  }

  // Clean-branch proxy features never change; compute them once.
  std::vector<Tensor> h_ref;
  if (w.lambda_feat > 0.0)
    for (const auto& p : train_pairs)
      h_ref.push_back(Tensor::vector(sqa::sqa_forward(proxy, p.clean).hidden));

  std::vector<TrainItem> items;
  for (const auto& p : train_pairs) items.push_back({p.id, &p.noisy});

  return run_loop(
      m, proxy, items,
      [&](ad::Tape& t, std::size_t idx, ad::NodeId x_enh) {
        return loss_simu_node(t, x_enh, train_pairs[idx].clean, proxy, w, cfg.resolutions,
                              h_ref.empty() ? nullptr : &h_ref[idx]);
      },
      held_pairs, cfg, true);
}

FinetuneReport finetune_real(se::SeModel& m, const sqa::SqaModel& proxy,
                             const std::vector<RealUtterance>& train_data,
                             const std::vector<se::NoisyCleanPair>& held_pairs,
                             const FinetuneConfig& cfg) {
  validate_common(m, proxy, cfg);
  const LossWeights& w = cfg.weights;
  const bool score_live = w.lambda_score > 0.0 && head_weight_total(proxy, w) > 0.0;
  require(score_live || w.lambda_reg > 0.0, "finetune_real: objective has no live term");
  for (const auto& u : train_data) check_train_wave(u.noisy, m, true, u.id);
  for (const auto& p : held_pairs) check_train_wave(p.noisy, m, true, p.id);

  // Outputs of the entry (initial) model, cached before the first update.
  std::vector<signal::Waveform> enh0;
  for (const auto& u : train_data) enh0.push_back(se::enhance(m, u.noisy).enhanced);

  std::vector<TrainItem> items;
  for (const auto& u : train_data) items.push_back({u.id, &u.noisy});

  return run_loop(
      m, proxy, items,
      [&](ad::Tape& t, std::size_t idx, ad::NodeId x_enh) {
        return loss_real_node(t, x_enh, enh0[idx], proxy, w, cfg.resolutions);
      },
      held_pairs, cfg, false);
}

}  // namespace seqa::train
