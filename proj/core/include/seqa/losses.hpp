#pragma once

#include <map>
#include <string>
#include <vector>

#include "seqa/autodiff.hpp"
#include "seqa/metrics.hpp"
#include "seqa/signal.hpp"
#include "seqa/tensor.hpp"

namespace seqa::train {

/// Floor added to spectrogram magnitudes before the natural log.
inline constexpr double kSpecLogEps = 1e-7;

/// STFT resolutions for the multi-resolution spectrogram loss.
struct MultiResConfig {
  std::vector<signal::StftConfig> resolutions;

  static MultiResConfig desk_default();

  std::string to_json() const;
  static MultiResConfig from_json_text(const std::string& text);
};

void validate(const MultiResConfig& cfg);

/// Objective mix. Lambdas gate the loss terms; metric_weights overrides the
/// registry weight w_k for individual metrics in the composite score term.
struct LossWeights {
  double lambda_spec = 1.0;
  double lambda_score = 1.0;
  double lambda_feat = 1.0;
  double lambda_reg = 1.0;
  bool standardized_scores = true;  // scale-normalize scores in the composite
  std::map<std::string, double> metric_weights;

  double weight_for(const metrics::MetricSpec& spec) const;

  std::string to_json() const;
  static LossWeights from_json_text(const std::string& text);
};

void validate(const LossWeights& w);

// ---- Tape-level loss builders ----------------------------------------------------
//
// Each builder takes nodes already recorded on the tape and returns a scalar
// node, so objectives compose and differentiate end to end.

/// Multi-resolution log-magnitude L1: for every resolution, the mean over
/// time-frequency bins of |ln(|A|+eps) - ln(|B|+eps)|, summed across
/// resolutions. Zero exactly when the signals coincide.
ad::NodeId loss_spec_node(ad::Tape& t, ad::NodeId a, ad::NodeId b, const MultiResConfig& cfg);

/// L1 distance between two hidden representations (shape-checked by the tape).
ad::NodeId loss_feat_node(ad::Tape& t, ad::NodeId h_enh, ad::NodeId h_ref);

/// Weighted directional composite over metric scores; specs[i] describes
/// scores[i]. Raw mode: sum_k w_k * alpha_k * s_k, so d/ds_k = w_k * alpha_k
/// exactly. Standardized mode maps each score through (s - center) / scale
/// first and normalizes by the total weight so unbounded metrics do not
/// dominate. Zero-weight entries contribute nothing; all weights zero gives
/// the zero constant.
ad::NodeId loss_score_node(ad::Tape& t, const std::vector<metrics::MetricSpec>& specs,
                           const std::vector<ad::NodeId>& scores, bool standardized);

// ---- Plain-value twins -----------------------------------------------------------

double loss_spec(const signal::Waveform& a, const signal::Waveform& b, const MultiResConfig& cfg);

double loss_feat(const std::vector<double>& h_enh, const std::vector<double>& h_ref);

double loss_score(const std::vector<metrics::MetricSpec>& specs, const std::vector<double>& scores,
                  bool standardized);

/// Composite over an evaluated metric vector restricted to the named rows.
/// A named row that carries weight but no value is an error; zero-weight
/// absent rows are skipped.
double composite_score(const metrics::MetricRegistry& reg, const metrics::MetricVector& mv,
                       const std::vector<std::string>& scored, bool standardized,
                       const LossWeights* overrides = nullptr);

}  // namespace seqa::train
