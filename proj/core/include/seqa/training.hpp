#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "seqa/autodiff.hpp"
#include "seqa/enhancer.hpp"
#include "seqa/losses.hpp"
#include "seqa/signal.hpp"
#include "seqa/sqa.hpp"

namespace seqa::train {

// ---- Composite objectives ----------------------------------------------------------

/// Scalar term values alongside the differentiable total. Term fields hold
/// the unweighted values; terms gated off by a zero lambda stay 0 and are
/// never built.
struct LossBreakdown {
  ad::NodeId total_node = 0;
  double total = 0.0;
  double spec = 0.0;
  double score = 0.0;
  double feat = 0.0;
  double reg = 0.0;
};

/// Paired-data objective: lambda_spec * L_spec(x_enh, clean)
/// + lambda_score * L_score(proxy(x_enh)) + lambda_feat * L_feat(h(x_enh),
/// h(clean)). One proxy forward on x_enh serves both proxy terms; h_ref_cache
/// short-circuits the clean-branch forward when the caller already has h(clean).
LossBreakdown loss_simu_node(ad::Tape& t, ad::NodeId x_enh, const signal::Waveform& clean,
                             const sqa::SqaModel& proxy, const LossWeights& w,
                             const MultiResConfig& cfg, const Tensor* h_ref_cache = nullptr);

/// Reference-free objective: lambda_score * L_score(proxy(x_enh))
/// + lambda_reg * L_reg(x_enh, enh0), where enh0 is the frozen initial
/// model's output on the same input.
LossBreakdown loss_real_node(ad::Tape& t, ad::NodeId x_enh, const signal::Waveform& enh0,
                             const sqa::SqaModel& proxy, const LossWeights& w,
                             const MultiResConfig& cfg);

// ---- Reward-hacking monitor --------------------------------------------------------

struct HackMonitorConfig {
  double tau = 1.0;          // divergence threshold, standardized units
  int window = 10;           // consecutive samples the divergence must persist
  double sigma_floor = 0.05; // composite-score std floor for standardization
  double reg_growth = 3.0;   // L_reg multiple over its early reference
  double reg_floor = 0.5;    // L_reg below this never trips the growth rule
};

void validate(const HackMonitorConfig& c);

struct HackSample {
  double proxy_quality = 0.0;   // higher is better (negated score loss)
  double oracle_quality = 0.0;
  bool has_oracle = false;
  double l_reg = 0.0;
};

/// Latching divergence detector. With oracle composites it standardizes both
/// series against the first sample and flags when the proxy's improvement
/// outruns the oracle's by more than tau for a full window. Without oracles
/// it flags when L_reg stays above reg_growth times its early reference (and
/// above reg_floor) for a full window.
struct HackMonitorState {
  HackMonitorConfig config;
  std::vector<HackSample> history;
  bool flag = false;
  std::string reason;
};

HackMonitorState hack_monitor(HackMonitorState state, double proxy_quality,
                              std::optional<double> oracle_quality, double l_reg);

// ---- Fine-tuning loops -------------------------------------------------------------

struct RealUtterance {
  std::string id;
  signal::Waveform noisy;
};

struct FinetuneConfig {
  int steps = 300;
  double lr = 1e-4;
  int halve_every = 0;    // 0 means 40% of steps
  int monitor_every = 50; // monitor/log/checkpoint cadence
  std::uint64_t seed = 1;
  LossWeights weights;
  MultiResConfig resolutions = MultiResConfig::desk_default();
  HackMonitorConfig monitor;
  bool abort_on_flag = true;
  /// Metric names for the monitored composites; empty means every predicted
  /// metric whose oracle needs no transcript.
  std::vector<std::string> monitor_metrics;
  std::string run_dir;  // empty disables config/trajectory/checkpoint files
};

struct MonitorEvent {
  int step = 0;
  double proxy_quality = 0.0;
  double oracle_quality = 0.0;  // NaN in real mode
  bool has_oracle = false;
  double oracle_sdr = 0.0;    // NaN when unavailable
  double oracle_estoi = 0.0;  // NaN when unavailable
  double l_reg_held = 0.0;    // held-set drift from the initial model
  bool flag_after = false;
};

struct FinetuneReport {
  std::vector<double> loss_total;  // one entry per executed step
  std::vector<double> loss_spec;
  std::vector<double> loss_score;
  std::vector<double> loss_feat;
  std::vector<double> loss_reg;
  std::vector<MonitorEvent> events;
  HackMonitorState monitor;
  bool aborted = false;  // stopped early because the monitor latched
  int steps_run = 0;
};

/// Gradient descent on the paired objective. The proxy stays frozen; held
/// pairs feed the monitor composites (proxy and oracle) every monitor_every
/// steps. Writes config.json, trajectory.csv and periodic checkpoints into
/// run_dir when set. Throws on non-finite losses.
FinetuneReport finetune_simulated(se::SeModel& m, const sqa::SqaModel& proxy,
                                  const std::vector<se::NoisyCleanPair>& train_pairs,
                                  const std::vector<se::NoisyCleanPair>& held_pairs,
                                  const FinetuneConfig& cfg);

/// Gradient descent on the reference-free objective. x_enh0 is cached from
/// the entry model before the first step. References never enter the loop:
/// held_pairs' clean sides are used only for post-hoc oracle columns, and
/// the monitor runs on L_reg growth alone.
FinetuneReport finetune_real(se::SeModel& m, const sqa::SqaModel& proxy,
                             const std::vector<RealUtterance>& train_data,
                             const std::vector<se::NoisyCleanPair>& held_pairs,
                             const FinetuneConfig& cfg);

}  // namespace seqa::train
