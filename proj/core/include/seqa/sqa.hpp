#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seqa/autodiff.hpp"
#include "seqa/error.hpp"
#include "seqa/metrics.hpp"
#include "seqa/signal.hpp"
#include "seqa/tensor.hpp"

namespace seqa::sqa {

/// Reference-free quality proxy configuration. `predicted` is the metric-name
/// mask: the subset of registry rows that get prediction heads. The desk
/// default predicts exactly the metrics the deterministic oracles can label.
struct SqaConfig {
  int sample_rate = 16000;
  signal::StftConfig stft{512, 512, 128, signal::WindowKind::kHann, true};
  int n_mels = 40;
  double mel_floor = 1e-7;
  std::vector<int> encoder_widths = {64, 64};  // hidden layer sizes
  int hidden_dim = 32;                         // penultimate dim D
  std::vector<std::string> predicted;

  static SqaConfig desk_default();

  std::string to_json() const;
  static SqaConfig from_json_text(const std::string& text);
};

/// Trained proxy: frame MLP encoder (tanh), mean pooling to the hidden
/// vector h, one affine head per predicted metric, range activation per the
/// registry row. Immutable during inference; train_sqa mutates in place.
struct SqaModel {
  SqaConfig config;
  metrics::MetricRegistry registry = metrics::MetricRegistry::desk_extended();
  std::vector<Tensor> enc_w;              // layer i: in x out
  std::vector<Tensor> enc_b;              // layer i: out
  std::vector<Tensor> head_w;             // per predicted metric: D
  std::vector<Tensor> head_b;             // per predicted metric: scalar
  Tensor mel_t;                           // bins x n_mels, transposed filterbank
  std::vector<std::size_t> predicted_idx;  // registry index per head
};

SqaModel init_sqa(const SqaConfig& cfg, const metrics::MetricRegistry& reg, std::uint64_t seed);

/// Forward result. `scores` is registry-aligned with heads present; `hidden`
/// is h. When the computation ran on a caller-supplied tape the node handles
/// are valid for building losses on top.
struct SqaOutput {
  metrics::MetricVector scores;
  std::vector<double> hidden;
  bool taped = false;
  std::vector<ad::NodeId> score_nodes;  // one per head, head order
  ad::NodeId hidden_node = 0;
};

/// Waveform in, scores out. Input must be at least 0.2 s at the config rate.
/// With a tape the whole pipeline (STFT, mel, encoder, heads, activations)
/// is recorded; parameters are registered as frozen leaves.
SqaOutput sqa_forward(const SqaModel& m, const signal::Waveform& w, ad::Tape* tape = nullptr);

/// Same, but consuming an existing 1-D signal node (the enhancer output) so
/// gradients flow back through the proxy into whatever produced x.
SqaOutput sqa_forward_node(const SqaModel& m, ad::Tape& tape, ad::NodeId x);

/// Back half of the pipeline: encoder + pooling + heads on a precomputed
/// T x n_mels log-mel matrix. sqa_forward equals the STFT front end plus
/// this; exposed for feature-level use and architecture tests.
SqaOutput sqa_from_logmel(const SqaModel& m, const Tensor& logmel);

/// The proxy's own front end (magnitude mel, natural log, floored), T x
/// n_mels. sqa_from_logmel(m, sqa_logmel(m, w)) == sqa_forward(m, w).
Tensor sqa_logmel(const SqaModel& m, const signal::Waveform& w);

// ---- Training ------------------------------------------------------------------

struct LabeledUtterance {
  std::string utterance_id;
  std::string source_id;
  std::string split;  // train / val / test
  signal::Waveform wave;
  metrics::MetricVector labels;  // registry-aligned
};

struct TrainSqaConfig {
  int epochs = 30;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int warmup_steps = 500;  // linear warm-up on the learning rate
  std::uint64_t seed = 1;
  bool freeze_encoder = false;  // ablation: train heads only
};

struct MetricCorr {
  std::string name;
  double lcc = 0.0;
  double srcc = 0.0;
  int n = 0;
};

struct TrainSqaReport {
  std::vector<double> epoch_loss;       // mean standardized L1 per epoch
  std::vector<MetricCorr> validation;   // per head, on split == "val"
  std::vector<double> label_mean;       // per head, training-set stats
  std::vector<double> label_std;
};

/// AdamW on the mean L1 between predicted and oracle scores, each head
/// standardized by training-set mean/std. Rows with split "train" are
/// optimized; rows with split "val" feed the held-out correlations.
TrainSqaReport train_sqa(SqaModel& m, const std::vector<LabeledUtterance>& data,
                         const TrainSqaConfig& cfg);

// ---- Checkpoints ---------------------------------------------------------------

void save_sqa(const std::string& path, const SqaModel& m);

/// Loads and validates a proxy checkpoint. The registry hash stored at save
/// time must match `reg` exactly.
SqaModel load_sqa(const std::string& path, const metrics::MetricRegistry& reg);

}  // namespace seqa::sqa
