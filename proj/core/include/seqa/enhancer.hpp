#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seqa/autodiff.hpp"
#include "seqa/error.hpp"
#include "seqa/losses.hpp"
#include "seqa/signal.hpp"
#include "seqa/tensor.hpp"

namespace seqa::se {

/// Mask-based enhancer configuration: STFT analysis plus a per-frame MLP
/// over the log-magnitude of the current frame and ±context neighbors.
struct SeConfig {
  int sample_rate = 16000;
  signal::StftConfig stft{512, 512, 128, signal::WindowKind::kHann, true};
  int context = 2;
  std::vector<int> hidden = {64, 48};
  double mask_bias = 1.5;  // final-layer bias at init; sigmoid(1.5) ~ 0.82

  static SeConfig desk_default();

  std::string to_json() const;
  static SeConfig from_json_text(const std::string& text);
};

void validate(const SeConfig& cfg);

/// STFT-domain magnitude masker. The first layer holds one weight block per
/// context offset (applied to the time-shifted log-magnitude), the rest is a
/// plain tanh MLP ending in a sigmoid mask over the F bins. The mask scales
/// real and imaginary parts alike, so phase passes through.
struct SeModel {
  SeConfig config;
  std::vector<Tensor> ctx_w;  // 2*context+1 blocks, F x hidden[0]
  Tensor ctx_b;               // hidden[0]
  std::vector<Tensor> mlp_w;  // hidden chain, last maps to F
  std::vector<Tensor> mlp_b;
};

SeModel init_se(const SeConfig& cfg, std::uint64_t seed);

std::size_t param_count(const SeModel& m);

/// Every parameter tensor in a fixed order (context blocks, context bias,
/// mlp weights, mlp biases). enhance_node registers leaves in this order.
std::vector<Tensor*> parameters(SeModel& m);
std::vector<const Tensor*> parameters(const SeModel& m);

struct EnhancedPair {
  signal::Waveform enhanced;
  Tensor mask;  // T x F, every entry in (0,1)
  bool taped = false;
  ad::NodeId node = 0;       // enhanced-signal node when taped
  ad::NodeId mask_node = 0;
};

/// Taped forward from a 1-D signal node already on the tape. When
/// param_nodes is non-null the model parameters enter as trainable leaves
/// (in parameters() order) and their handles are written there for the
/// optimizer; otherwise they enter as constants.
EnhancedPair enhance_node(const SeModel& m, ad::Tape& t, ad::NodeId x,
                          std::vector<ad::NodeId>* param_nodes = nullptr);

/// Forward from caller-registered parameter nodes (parameters() order,
/// shapes must match the model). The gradient-check path: the checker owns
/// the leaves, the model only supplies the architecture.
EnhancedPair enhance_with_params(const SeModel& m, ad::Tape& t, ad::NodeId x,
                                 const std::vector<ad::NodeId>& params);

/// Waveform in, enhanced waveform out; records onto the tape when given one
/// (parameters as constants — use enhance_node for training).
EnhancedPair enhance(const SeModel& m, const signal::Waveform& x, ad::Tape* tape = nullptr);

/// One supervised example: the degraded input and its clean reference.
struct NoisyCleanPair {
  std::string id;
  signal::Waveform noisy;
  signal::Waveform clean;
};

struct PretrainConfig {
  int steps = 1200;
  double lr = 1e-3;
  int halve_every = 0;  // 0 means 40% of steps
  std::uint64_t seed = 1;
  train::MultiResConfig resolutions = train::MultiResConfig::desk_default();
};

struct PretrainReport {
  std::vector<double> loss;  // training loss per step
};

/// Spectrogram-loss pretraining on paired data; the result serves as the
/// frozen initial model for fine-tuning. Throws if the loss goes non-finite.
PretrainReport pretrain_se(SeModel& m, const std::vector<NoisyCleanPair>& pairs,
                           const PretrainConfig& cfg);

// Checkpoints use the shared container with kind "se".
void save_se(const std::string& path, const SeModel& m);
SeModel load_se(const std::string& path);

}  // namespace seqa::se
