#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "seqa/signal.hpp"
#include "seqa/tensor.hpp"

namespace seqa::metrics {

enum class Direction { kHigherBetter, kLowerBetter };
enum class Activation { kIdentity, kRelu, kScaledSigmoid, kTanhUnit };
enum class OracleKind { kDeterministic, kExternalOutOfScope };
enum class ReferenceType { kSignal, kText, kNoReference, kTextAndSignal };

constexpr double kInf = std::numeric_limits<double>::infinity();

/// One metric row: identity, valid range, optimization direction, loss
/// orientation alpha (-1 when higher is better, +1 when lower is better),
/// weight, output activation, and how the value is obtained.
struct MetricSpec {
  std::string name;
  double range_lo = -kInf;
  double range_hi = kInf;
  Direction direction = Direction::kHigherBetter;
  int alpha = -1;
  double weight = 1.0;
  Activation activation = Activation::kIdentity;
  double act_lo = 0.0;  // scaled-sigmoid bounds
  double act_hi = 0.0;
  OracleKind oracle = OracleKind::kExternalOutOfScope;
  ReferenceType reference_type = ReferenceType::kSignal;
  // Centering/scale used when composite scores are standardized so unbounded
  // metrics do not dominate bounded ones. Desk-chosen constants.
  double score_center = 0.0;
  double score_scale = 1.0;

  bool in_range(double v) const { return v >= range_lo && v <= range_hi; }
};

void validate(const MetricSpec& s);

/// Ordered, immutable metric table. default_table() is the 22-row registry;
/// desk_extended() appends SI_SNR, which the desk-scale proxy also predicts.
class MetricRegistry {
 public:
  static MetricRegistry default_table();
  static MetricRegistry desk_extended();
  static MetricRegistry from_specs(std::vector<MetricSpec> specs);

  std::size_t size() const { return specs_.size(); }
  const MetricSpec& at(std::size_t i) const;
  const MetricSpec& at(const std::string& name) const;
  bool has(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;
  const std::vector<MetricSpec>& specs() const { return specs_; }

  MetricRegistry with_weight(const std::string& name, double w) const;

  std::string to_json() const;
  static MetricRegistry from_json_text(const std::string& text);
  /// FNV-1a over the canonical JSON form; stored in checkpoints so a model
  /// is never loaded against a registry it was not trained with.
  std::uint64_t hash() const;

 private:
  explicit MetricRegistry(std::vector<MetricSpec> specs);
  std::vector<MetricSpec> specs_;
};

/// Post-head activation pinning a prediction inside spec's range.
double apply_range_activation(const MetricSpec& spec, double z);

/// K metric values aligned with a registry; absent entries mean the oracle
/// was unavailable for this utterance.
struct MetricVector {
  std::vector<double> values;
  std::vector<bool> present;

  static MetricVector empty(std::size_t k) {
    return MetricVector{std::vector<double>(k, 0.0), std::vector<bool>(k, false)};
  }
  void set(std::size_t i, double v) {
    values[i] = v;
    present[i] = true;
  }
};

void validate(const MetricRegistry& reg, const MetricVector& mv);

struct RankRow {
  std::string utterance_id;
  MetricVector metrics;
};

/// All enhanced versions of one source recording.
struct RankGroup {
  std::string source_id;
  std::vector<RankRow> rows;
};

// ---- Signal-domain oracles -------------------------------------------------

/// FIR-projection SDR: fits a length-L filter b minimizing ||est - ref*b||^2
/// through the Toeplitz autocorrelation normal equations (full-convolution
/// support), then returns 10 log10(||ref*b||^2 / ||est - ref*b||^2) clamped
/// to [-100, +100] dB.
double sdr(const signal::Waveform& ref, const signal::Waveform& est, int filter_len = 512);

/// Scale-invariant SNR, zero-mean enforced, clamped to [-100, +100] dB.
double si_snr(const signal::Waveform& ref, const signal::Waveform& est);

/// Log-spectral distance in dB: mean over frames of the RMS over bins of
/// 10 log10(|S_ref|^2 + eps) - 10 log10(|S_est|^2 + eps).
double lsd(const signal::Waveform& ref, const signal::Waveform& est,
           const signal::StftConfig& c = {}, double eps = 1e-10);

/// Extended short-time objective intelligibility (Jensen & Taal 2016),
/// clamped to [0, 1]. Inputs are resampled to 10 kHz internally.
double estoi(const signal::Waveform& ref, const signal::Waveform& est);

/// Polyphase resampler (Kaiser-windowed sinc, beta = 5.0), output aligned so
/// y[0] corresponds to x[0]. Used by estoi; exposed for testing.
std::vector<double> resample_poly(const std::vector<double>& x, int up, int down);

/// Mel-cepstra per frame: orthonormal DCT-II of log10 mel energies,
/// coefficients 1..n_coeff (c0 excluded). T x n_coeff.
Tensor mel_cepstra(const signal::Waveform& w, int n_mels = 40, int n_coeff = 13,
                   const signal::StftConfig& c = {});

/// Mel-cepstral distortion (10/ln10)*sqrt(2)*mean_t ||c_t - c'_t||_2 from two
/// aligned cepstra matrices.
double mcd_from_cepstra(const Tensor& a, const Tensor& b);

double mcd(const signal::Waveform& ref, const signal::Waveform& est, int n_mels = 40,
           int n_coeff = 13);

/// Toy speaker embedding similarity: cosine between L2-normalized
/// [per-band log-mel mean, per-band log-mel std] embeddings.
double speaker_similarity_toy(const signal::Waveform& ref, const signal::Waveform& est,
                              int n_mels = 32);

// ---- Text/sequence oracles -------------------------------------------------

std::size_t edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp);
std::size_t edit_distance(const std::string& ref, const std::string& hyp);

double cer(const std::vector<int>& ref, const std::vector<int>& hyp);
double cer(const std::string& ref, const std::string& hyp);

/// max(0, 1 - edit_distance / max(len_ref, len_hyp)) in [0, 1], higher
/// better.
double phoneme_similarity(const std::vector<int>& ref, const std::vector<int>& hyp);

// ---- Ranking and correlation ------------------------------------------------

/// Utterance-level ranking score, lower better: per rankable metric, rank the
/// group's rows best-to-worst (average ranks on ties), then
/// score(u) = sum_k w_k rank_k(u) / (sum_k w_k * M). A metric is rankable
/// when it has positive weight, a deterministic or supplied value in every
/// row, and is not RankingScore itself.
std::map<std::string, double> rank_score(const RankGroup& g, const MetricRegistry& reg);

/// Average ranks (1-based, ties averaged), ranking ascending values first.
std::vector<double> average_ranks(const std::vector<double>& xs);

double pearson(const std::vector<double>& xs, const std::vector<double>& ys);
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

// ---- Batch labeling ----------------------------------------------------------

/// Runs every deterministic signal oracle (and the text oracles when symbol
/// sequences are supplied) for one (clean, degraded) pair against the given
/// registry. Metrics without a desk oracle stay absent.
MetricVector evaluate_pair(const MetricRegistry& reg, const signal::Waveform& ref,
                           const signal::Waveform& est,
                           const std::vector<int>* ref_symbols = nullptr,
                           const std::vector<int>* hyp_symbols = nullptr,
                           int sdr_filter_len = 512);

}  // namespace seqa::metrics
