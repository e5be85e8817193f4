#include "seqa/losses.hpp"

#include <cmath>

#include "json.hpp"

namespace seqa::train {

using nlohmann::json;

namespace {

// Tiny value under the square root in complex_magnitude so the gradient at
// silent bins stays finite; sqrt(1e-14) = 1e-7, the same order as the log
// floor itself.
constexpr double kMagEpsSq = 1e-14;

/// Log-magnitude spectrogram node for one resolution: ln(|S| + eps).
ad::NodeId log_spectrum(ad::Tape& t, ad::NodeId x, const signal::StftConfig& c) {
  const auto [re, im] = t.frame_window_dft(x, c);
  const ad::NodeId mag = t.complex_magnitude(re, im, kMagEpsSq);
  return t.log(t.add(mag, t.constant(Tensor::scalar(kSpecLogEps))));
}

}  // namespace

MultiResConfig MultiResConfig::desk_default() {
  MultiResConfig c;
  signal::StftConfig s;
  s.window = signal::WindowKind::kHann;
  s.center_pad = true;
  s.n_fft = 512;
  s.win_length = 512;
  s.hop = 128;
  c.resolutions.push_back(s);
  s.n_fft = 1024;
  s.win_length = 1024;
  s.hop = 256;
  c.resolutions.push_back(s);
  s.n_fft = 256;
  s.win_length = 256;
  s.hop = 64;
  c.resolutions.push_back(s);
  return c;
}

std::string MultiResConfig::to_json() const {
  json arr = json::array();
  for (const auto& s : resolutions)
    arr.push_back({{"n_fft", s.n_fft},
                   {"win_length", s.win_length},
                   {"hop", s.hop},
                   {"window", signal::window_name(s.window)},
                   {"center_pad", s.center_pad}});
  json j;
  j["resolutions"] = arr;
  return j.dump();
}

MultiResConfig MultiResConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(std::string("multires config: bad json: ") + e.what());
  }
  MultiResConfig c;
  try {
    for (const auto& s : j.at("resolutions")) {
      signal::StftConfig sc;
      sc.n_fft = s.at("n_fft").get<int>();
      sc.win_length = s.at("win_length").get<int>();
      sc.hop = s.at("hop").get<int>();
      sc.window = signal::window_from_name(s.at("window").get<std::string>());
      sc.center_pad = s.at("center_pad").get<bool>();
      c.resolutions.push_back(sc);
    }
  } catch (const json::exception& e) {
    fail(std::string("multires config: missing or mistyped field: ") + e.what());
  }
  return c;
}

void validate(const MultiResConfig& cfg) {
  require(!cfg.resolutions.empty(), "multires config: need at least one resolution");
  for (const auto& s : cfg.resolutions) {
    signal::validate(s);
    signal::check_ola(s);
  }
}

double LossWeights::weight_for(const metrics::MetricSpec& spec) const {
  const auto it = metric_weights.find(spec.name);
  return it != metric_weights.end() ? it->second : spec.weight;
}

std::string LossWeights::to_json() const {
  json j;
  j["lambda_spec"] = lambda_spec;
  j["lambda_score"] = lambda_score;
  j["lambda_feat"] = lambda_feat;
  j["lambda_reg"] = lambda_reg;
  j["standardized_scores"] = standardized_scores;
  j["metric_weights"] = json::object();
  for (const auto& [name, w] : metric_weights) j["metric_weights"][name] = w;
  return j.dump();
}

LossWeights LossWeights::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(std::string("loss weights: bad json: ") + e.what());
  }
  LossWeights w;
  try {
    w.lambda_spec = j.at("lambda_spec").get<double>();
    w.lambda_score = j.at("lambda_score").get<double>();
    w.lambda_feat = j.at("lambda_feat").get<double>();
    w.lambda_reg = j.at("lambda_reg").get<double>();
    w.standardized_scores = j.at("standardized_scores").get<bool>();
    for (const auto& [name, v] : j.at("metric_weights").items())
      w.metric_weights[name] = v.get<double>();
  } catch (const json::exception& e) {
    fail(std::string("loss weights: missing or mistyped field: ") + e.what());
  }
  return w;
}

void validate(const LossWeights& w) {
  require(w.lambda_spec >= 0.0 && w.lambda_score >= 0.0 && w.lambda_feat >= 0.0 &&
              w.lambda_reg >= 0.0,
          "loss weights: lambdas must be non-negative");
  require(w.lambda_spec > 0.0 || w.lambda_score > 0.0 || w.lambda_feat > 0.0 ||
              w.lambda_reg > 0.0,
          "loss weights: at least one lambda must be positive");
  for (const auto& [name, v] : w.metric_weights) {
    require(std::isfinite(v) && v >= 0.0, "loss weights: bad weight for " + name);
  }
}

ad::NodeId loss_spec_node(ad::Tape& t, ad::NodeId a, ad::NodeId b, const MultiResConfig& cfg) {
  validate(cfg);
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(b);
  require(va.numel() == vb.numel(), "loss_spec: signal lengths differ");
  ad::NodeId acc = t.constant(Tensor::scalar(0.0));
  for (const auto& res : cfg.resolutions) {
    const ad::NodeId la = log_spectrum(t, a, res);
    const ad::NodeId lb = log_spectrum(t, b, res);
    acc = t.add(acc, t.mean(t.abs(t.sub(la, lb))));
  }
  return acc;
}

ad::NodeId loss_feat_node(ad::Tape& t, ad::NodeId h_enh, ad::NodeId h_ref) {
  return t.l1_distance(h_enh, h_ref);
}

ad::NodeId loss_score_node(ad::Tape& t, const std::vector<metrics::MetricSpec>& specs,
                           const std::vector<ad::NodeId>& scores, bool standardized) {
  require(specs.size() == scores.size(), "loss_score: specs/scores length mismatch");
  double total_weight = 0.0;
  for (const auto& spec : specs) {
    require(std::isfinite(spec.weight) && spec.weight >= 0.0,
            "loss_score: bad weight for " + spec.name);
    total_weight += spec.weight;
  }
  ad::NodeId acc = t.constant(Tensor::scalar(0.0));
  if (total_weight == 0.0) return acc;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& spec = specs[k];
    if (spec.weight == 0.0) continue;
    const double dir = spec.weight * static_cast<double>(spec.alpha);
    if (standardized) {
      require(spec.score_scale > 0.0, "loss_score: score scale must be positive for " + spec.name);
      const ad::NodeId centered =
          t.sub(scores[k], t.constant(Tensor::scalar(spec.score_center)));
      acc = t.add(acc, t.mul(centered, t.constant(Tensor::scalar(dir / spec.score_scale))));
    } else {
      acc = t.add(acc, t.mul(scores[k], t.constant(Tensor::scalar(dir))));
    }
  }
  if (standardized) acc = t.mul(acc, t.constant(Tensor::scalar(1.0 / total_weight)));
  return acc;
}

double loss_spec(const signal::Waveform& a, const signal::Waveform& b, const MultiResConfig& cfg) {
  signal::validate(a);
  signal::validate(b);
  require(a.sample_rate == b.sample_rate, "loss_spec: sample rates differ");
  ad::Tape t;
  const ad::NodeId na = t.constant(Tensor::vector(a.samples));
  const ad::NodeId nb = t.constant(Tensor::vector(b.samples));
  return t.value(loss_spec_node(t, na, nb, cfg)).item();
}

double loss_feat(const std::vector<double>& h_enh, const std::vector<double>& h_ref) {
  require(h_enh.size() == h_ref.size(), "loss_feat: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < h_enh.size(); ++i) s += std::abs(h_enh[i] - h_ref[i]);
  return s;
}

double loss_score(const std::vector<metrics::MetricSpec>& specs, const std::vector<double>& scores,
                  bool standardized) {
  require(specs.size() == scores.size(), "loss_score: specs/scores length mismatch");
  double total_weight = 0.0;
  for (const auto& spec : specs) {
    require(std::isfinite(spec.weight) && spec.weight >= 0.0,
            "loss_score: bad weight for " + spec.name);
    total_weight += spec.weight;
  }
  if (total_weight == 0.0) return 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& spec = specs[k];
    if (spec.weight == 0.0) continue;
    require(std::isfinite(scores[k]), "loss_score: non-finite score for " + spec.name);
    const double dir = spec.weight * static_cast<double>(spec.alpha);
    if (standardized) {
      require(spec.score_scale > 0.0, "loss_score: score scale must be positive for " + spec.name);
      acc += dir * (scores[k] - spec.score_center) / spec.score_scale;
    } else {
      acc += dir * scores[k];
    }
  }
  return standardized ? acc / total_weight : acc;
}

double composite_score(const metrics::MetricRegistry& reg, const metrics::MetricVector& mv,
                       const std::vector<std::string>& scored, bool standardized,
                       const LossWeights* overrides) {
  std::vector<metrics::MetricSpec> specs;
  std::vector<double> scores;
  for (const auto& name : scored) {
    metrics::MetricSpec spec = reg.at(name);
    if (overrides) spec.weight = overrides->weight_for(spec);
    const std::size_t idx = reg.index_of(name);
    if (!mv.present[idx]) {
      require(spec.weight == 0.0, "composite_score: missing weighted score for " + name);
      continue;
    }
    specs.push_back(spec);
    scores.push_back(mv.values[idx]);
  }
  return loss_score(specs, scores, standardized);
}

}  // namespace seqa::train
