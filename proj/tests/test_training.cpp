#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "seqa/autodiff.hpp"
#include "seqa/datagen.hpp"
#include "seqa/enhancer.hpp"
#include "seqa/losses.hpp"
#include "seqa/metrics.hpp"
#include "seqa/sqa.hpp"
#include "seqa/training.hpp"

using namespace seqa;
using namespace seqa::train;
using signal::Waveform;
namespace fs = std::filesystem;

namespace {

/// Speech mixed with colored noise at a mild SNR, paired with its clean
/// source. Mirrors the enhancer tests so probe-frozen values stay stable.
se::NoisyCleanPair speech_pair(std::uint64_t seed, double seconds) {
  const datagen::CleanSpeech cs = datagen::synth_clean(seed, std::max(seconds, 0.55), 16000);
  const Waveform noise =
      datagen::synth_noise(seed + 900, cs.wave.size(), 16000,
                           seed % 2 ? datagen::NoiseColor::kPink : datagen::NoiseColor::kWhite);
  const double snr = 2.0 * static_cast<double>(seed % 5);  // 0..8 dB
  const datagen::Scene sc = datagen::mix_at_snr(cs.wave, noise, snr);
  se::NoisyCleanPair p{"u" + std::to_string(seed), sc.mixture, cs.wave};
  const auto n = static_cast<std::size_t>(seconds * 16000);
  p.noisy.samples.resize(n);
  p.clean.samples.resize(n);
  return p;
}

/// Untrained proxy with three heads; small enough that tape-heavy tests stay
/// quick but the score/feature paths are fully exercised.
sqa::SqaModel tiny_proxy(std::uint64_t seed) {
  sqa::SqaConfig cfg;
  cfg.stft = signal::StftConfig{256, 256, 64, signal::WindowKind::kHann, true};
  cfg.n_mels = 16;
  cfg.encoder_widths = {24};
  cfg.hidden_dim = 10;
  cfg.predicted = {"SDR", "ESTOI", "CER"};
  return sqa::init_sqa(cfg, metrics::MetricRegistry::desk_extended(), seed);
}

se::SeModel small_se(std::uint64_t seed) {
  se::SeConfig c;
  c.stft = signal::StftConfig{256, 256, 64, signal::WindowKind::kHann, true};
  c.context = 1;
  c.hidden = {12, 10};
  return se::init_se(c, seed);
}

MultiResConfig res_small() {
  MultiResConfig c;
  c.resolutions = {signal::StftConfig{256, 256, 64, signal::WindowKind::kHann, true},
                   signal::StftConfig{128, 128, 32, signal::WindowKind::kHann, true}};
  return c;
}

fs::path fresh_dir(const std::string& leaf) {
  const fs::path p = fs::temp_directory_path() / ("seqa_train_" + leaf);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

}  // namespace

TEST_CASE("multires config round-trips through json and validates") {
  const MultiResConfig c = MultiResConfig::desk_default();
  CHECK(c.resolutions.size() == 3);
  const MultiResConfig back = MultiResConfig::from_json_text(c.to_json());
  REQUIRE(back.resolutions.size() == c.resolutions.size());
  for (std::size_t i = 0; i < c.resolutions.size(); ++i)
    CHECK(back.resolutions[i] == c.resolutions[i]);
  CHECK_NOTHROW(validate(c));

  CHECK_THROWS_AS(MultiResConfig::from_json_text("{"), Error);
  CHECK_THROWS_AS(MultiResConfig::from_json_text("{}"), Error);
  CHECK_THROWS_AS(MultiResConfig::from_json_text(R"({"resolutions":[{"n_fft":0}]})"), Error);

  MultiResConfig bad;
  CHECK_THROWS_AS(validate(bad), Error);  // no resolutions
  bad.resolutions = {signal::StftConfig{256, 256, 0, signal::WindowKind::kHann, true}};
  CHECK_THROWS_AS(validate(bad), Error);  // zero hop
  bad.resolutions = {signal::StftConfig{256, 256, 256, signal::WindowKind::kHann, true}};
  CHECK_THROWS_AS(validate(bad), Error);  // hann at hop == win fails overlap-add
}

TEST_CASE("loss weights round-trip, override and validate") {
  LossWeights w;
  w.lambda_spec = 0.25;
  w.lambda_score = 2.0;
  w.lambda_feat = 0.0;
  w.lambda_reg = 1.5;
  w.standardized_scores = false;
  w.metric_weights["ESTOI"] = 3.0;
  w.metric_weights["CER"] = 0.0;
  const LossWeights back = LossWeights::from_json_text(w.to_json());
  CHECK(back.lambda_spec == w.lambda_spec);
  CHECK(back.lambda_score == w.lambda_score);
  CHECK(back.lambda_feat == w.lambda_feat);
  CHECK(back.lambda_reg == w.lambda_reg);
  CHECK(back.standardized_scores == w.standardized_scores);
  CHECK(back.metric_weights == w.metric_weights);

  const auto reg = metrics::MetricRegistry::desk_extended();
  CHECK(w.weight_for(reg.at("ESTOI")) == 3.0);
  CHECK(w.weight_for(reg.at("CER")) == 0.0);
  CHECK(w.weight_for(reg.at("SDR")) == reg.at("SDR").weight);

  CHECK_THROWS_AS(LossWeights::from_json_text("{}"), Error);
  LossWeights bad;
  bad.lambda_spec = -1.0;
  CHECK_THROWS_AS(validate(bad), Error);
  bad = LossWeights{};
  bad.lambda_spec = bad.lambda_score = bad.lambda_feat = bad.lambda_reg = 0.0;
  CHECK_THROWS_AS(validate(bad), Error);
  bad = LossWeights{};
  bad.metric_weights["SDR"] = -0.5;
  CHECK_THROWS_AS(validate(bad), Error);
}

TEST_CASE("spectral loss: zero on identical signals, log-scale on gain") {
  const MultiResConfig res = res_small();
  const se::NoisyCleanPair p = speech_pair(21, 0.4);
  CHECK(loss_spec(p.noisy, p.noisy, res) == 0.0);

  // A pure gain g multiplies every spectrogram bin by g, so each resolution
  // contributes ln g; white noise keeps all bins far above the log floor.
  Waveform x{datagen::synth_noise(77, 6400, 16000, datagen::NoiseColor::kWhite)};
  Waveform x2 = x;
  for (double& v : x2.samples) v *= 2.0;
  CHECK(loss_spec(x, x2, res) ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-4));
  Waveform xe = x;
  for (double& v : xe.samples) v *= std::exp(1.0);
  CHECK(loss_spec(x, xe, res) == doctest::Approx(2.0).epsilon(1e-4));

  // Independent recomputation through the DSP-side spectrogram path.
  double want = 0.0;
  for (const auto& rc : res.resolutions) {
    const signal::Spectrogram sa = signal::stft(x, rc);
    const signal::Spectrogram sb = signal::stft(x2, rc);
    REQUIRE(sa.frames == sb.frames);
    double acc = 0.0;
    for (std::size_t t = 0; t < sa.frames; ++t)
      for (std::size_t f = 0; f < sa.bins; ++f) {
        const double ma = std::sqrt(std::norm(sa.at(t, f)) + 1e-14);
        const double mb = std::sqrt(std::norm(sb.at(t, f)) + 1e-14);
        acc += std::abs(std::log(ma + 1e-7) - std::log(mb + 1e-7));
      }
    want += acc / static_cast<double>(sa.frames * sa.bins);
  }
  CHECK(loss_spec(x, x2, res) == doctest::Approx(want).epsilon(1e-12));

  Waveform shorter = x;
  shorter.samples.pop_back();
  CHECK_THROWS_AS(loss_spec(x, shorter, res), Error);
}

TEST_CASE("score loss: fixed example, sign contract and weight overrides") {
  const auto reg = metrics::MetricRegistry::desk_extended();
  metrics::MetricSpec estoi = reg.at("ESTOI");
  metrics::MetricSpec cer = reg.at("CER");
  estoi.weight = 1.0;
  cer.weight = 1.0;

  // Raw mode: higher-is-better ESTOI enters negated, lower-is-better CER
  // positively, so 0.8 / 0.3 lands at -0.5.
  CHECK(loss_score({estoi, cer}, {0.8, 0.3}, false) == doctest::Approx(-0.5).epsilon(1e-12));

  // Standardized mode by hand: [-1*(0.8-0.5)/0.25 + 1*(0.3-0.5)/0.5] / 2.
  CHECK(loss_score({estoi, cer}, {0.8, 0.3}, true) == doctest::Approx(-0.8).epsilon(1e-12));

  {
    ad::Tape t;
    const ad::NodeId s1 = t.leaf(Tensor::scalar(0.8), true);
    const ad::NodeId s2 = t.leaf(Tensor::scalar(0.3), true);
    const ad::NodeId node = loss_score_node(t, {estoi, cer}, {s1, s2}, false);
    CHECK(t.value(node).item() == doctest::Approx(-0.5).epsilon(1e-12));
    const ad::Gradients g = t.backward(node);
    CHECK(g.at(s1).item() == -1.0);  // w * alpha, exactly
    CHECK(g.at(s2).item() == +1.0);
  }
  {
    metrics::MetricSpec heavy = estoi;
    heavy.weight = 2.5;
    ad::Tape t;
    const ad::NodeId s1 = t.leaf(Tensor::scalar(0.8), true);
    const ad::NodeId node = loss_score_node(t, {heavy}, {s1}, false);
    const ad::Gradients g = t.backward(node);
    CHECK(g.at(s1).item() == -2.5);
  }
  {
    // Standardized gradients: w * alpha / (scale * total_weight).
    ad::Tape t;
    const ad::NodeId s1 = t.leaf(Tensor::scalar(0.8), true);
    const ad::NodeId s2 = t.leaf(Tensor::scalar(0.3), true);
    const ad::NodeId node = loss_score_node(t, {estoi, cer}, {s1, s2}, true);
    const ad::Gradients g = t.backward(node);
    CHECK(g.at(s1).item() == -2.0);
    CHECK(g.at(s2).item() == +1.0);
  }
  {
    // All weights zero: the loss is the constant 0 with no score gradients.
    metrics::MetricSpec z1 = estoi, z2 = cer;
    z1.weight = z2.weight = 0.0;
    ad::Tape t;
    const ad::NodeId s1 = t.leaf(Tensor::scalar(0.8), true);
    const ad::NodeId s2 = t.leaf(Tensor::scalar(0.3), true);
    const ad::NodeId node = loss_score_node(t, {z1, z2}, {s1, s2}, false);
    CHECK(t.value(node).item() == 0.0);
    const ad::Gradients g = t.backward(node);
    CHECK_FALSE(g.has(s1));
    CHECK_FALSE(g.has(s2));
    CHECK(loss_score({z1, z2}, {0.8, 0.3}, true) == 0.0);
  }
}

TEST_CASE("feature loss is a plain L1 distance") {
  const std::vector<double> h1 = {0.5, -1.25, 2.0};
  const std::vector<double> h2 = {1.0, -1.0, 1.5};
  CHECK(loss_feat(h1, h1) == 0.0);
  CHECK(loss_feat(h1, h2) == doctest::Approx(1.25).epsilon(1e-15));
  CHECK_THROWS_AS(loss_feat(h1, {1.0}), Error);

  ad::Tape t;
  const ad::NodeId a = t.leaf(Tensor::vector(h1), true);
  const ad::NodeId b = t.constant(Tensor::vector(h2));
  const ad::NodeId node = loss_feat_node(t, a, b);
  CHECK(t.value(node).item() == doctest::Approx(1.25).epsilon(1e-15));
}

TEST_CASE("composite score restricted to named rows") {
  const auto reg = metrics::MetricRegistry::desk_extended();
  metrics::MetricVector mv = metrics::MetricVector::empty(reg.size());
  mv.set(reg.index_of("SDR"), 5.0);
  mv.set(reg.index_of("ESTOI"), 0.9);

  // [-1*(5-10)/10 + -1*(0.9-0.5)/0.25] / 2 = (0.5 - 1.6) / 2.
  CHECK(composite_score(reg, mv, {"SDR", "ESTOI"}, true) ==
        doctest::Approx(-0.55).epsilon(1e-12));

  // A weighted row without a value is an error; a zero-weight one is skipped.
  CHECK_THROWS_AS(composite_score(reg, mv, {"SDR", "ESTOI", "CER"}, true), Error);
  LossWeights w;
  w.metric_weights["CER"] = 0.0;
  CHECK(composite_score(reg, mv, {"SDR", "ESTOI", "CER"}, true, &w) ==
        doctest::Approx(-0.55).epsilon(1e-12));
  w.metric_weights["SDR"] = 3.0;
  // [3*(-1)*(-0.5) + -1.6] / 4
  CHECK(composite_score(reg, mv, {"SDR", "ESTOI", "CER"}, true, &w) ==
        doctest::Approx((1.5 - 1.6) / 4.0).epsilon(1e-12));
}

TEST_CASE("simulated objective: gating, identities and lambda linearity") {
  const sqa::SqaModel proxy = tiny_proxy(11);
  se::SeModel m = small_se(3);
  const se::NoisyCleanPair pair = speech_pair(42, 0.3);
  const MultiResConfig res = res_small();

  const Waveform enh = se::enhance(m, pair.noisy).enhanced;

  {
    // Spec-only weights reduce the objective to the spectral loss exactly.
    ad::Tape t;
    const ad::NodeId x = t.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ep = se::enhance_node(m, t, x, nullptr);
    LossWeights w;
    w.lambda_score = 0.0;
    w.lambda_feat = 0.0;
    const LossBreakdown lb = loss_simu_node(t, ep.node, pair.clean, proxy, w, res);
    CHECK(lb.total == lb.spec);
    CHECK(lb.score == 0.0);
    CHECK(lb.feat == 0.0);
    CHECK(lb.reg == 0.0);
    CHECK(lb.spec == loss_spec(enh, pair.clean, res));

    // Unweighted term values: doubling lambda_spec doubles only the total.
    ad::Tape t2;
    const ad::NodeId x2 = t2.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ep2 = se::enhance_node(m, t2, x2, nullptr);
    LossWeights w2 = w;
    w2.lambda_spec = 2.0;
    const LossBreakdown lb2 = loss_simu_node(t2, ep2.node, pair.clean, proxy, w2, res);
    CHECK(lb2.spec == lb.spec);
    CHECK(lb2.total == 2.0 * lb.total);
  }
  {
    // Identical signals zero out the spectral and feature terms exactly.
    ad::Tape t;
    const ad::NodeId x = t.constant(Tensor::vector(pair.clean.samples));
    LossWeights w;
    w.lambda_score = 0.0;
    const LossBreakdown lb = loss_simu_node(t, x, pair.clean, proxy, w, res);
    CHECK(lb.spec == 0.0);
    CHECK(lb.feat == 0.0);
    CHECK(lb.total == 0.0);
  }
  {
    // The cached clean-branch features match the recomputed ones bit for bit.
    LossWeights w;
    w.lambda_spec = 0.0;
    w.lambda_score = 0.0;
    const Tensor h_ref = Tensor::vector(sqa::sqa_forward(proxy, pair.clean).hidden);
    ad::Tape ta;
    const ad::NodeId xa = ta.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ea = se::enhance_node(m, ta, xa, nullptr);
    const LossBreakdown la = loss_simu_node(ta, ea.node, pair.clean, proxy, w, res, &h_ref);
    ad::Tape tb;
    const ad::NodeId xb = tb.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair eb = se::enhance_node(m, tb, xb, nullptr);
    const LossBreakdown lb = loss_simu_node(tb, eb.node, pair.clean, proxy, w, res, nullptr);
    CHECK(la.feat == lb.feat);
    CHECK(la.total == lb.total);
  }
  {
    // Scaling every lambda by two scales the total by exactly two.
    LossWeights w;
    w.lambda_spec = 0.7;
    w.lambda_score = 0.3;
    w.lambda_feat = 0.1;
    LossWeights w2 = w;
    w2.lambda_spec = 2.0 * w.lambda_spec;
    w2.lambda_score = 2.0 * w.lambda_score;
    w2.lambda_feat = 2.0 * w.lambda_feat;
    ad::Tape ta;
    const ad::NodeId xa = ta.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ea = se::enhance_node(m, ta, xa, nullptr);
    const LossBreakdown la = loss_simu_node(ta, ea.node, pair.clean, proxy, w, res);
    ad::Tape tb;
    const ad::NodeId xb = tb.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair eb = se::enhance_node(m, tb, xb, nullptr);
    const LossBreakdown lb = loss_simu_node(tb, eb.node, pair.clean, proxy, w2, res);
    CHECK(lb.total == 2.0 * la.total);
    CHECK(lb.spec == la.spec);
    CHECK(lb.score == la.score);
    CHECK(lb.feat == la.feat);
  }
  {
    // A positive weight on a metric without a proxy head is rejected.
    ad::Tape t;
    const ad::NodeId x = t.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ep = se::enhance_node(m, t, x, nullptr);
    LossWeights w;
    w.metric_weights["MOS"] = 1.0;
    CHECK_THROWS_AS(loss_simu_node(t, ep.node, pair.clean, proxy, w, res), Error);
    LossWeights all_zero;
    all_zero.lambda_spec = 0.0;
    all_zero.lambda_score = 0.0;
    all_zero.lambda_feat = 0.0;
    all_zero.lambda_reg = 1.0;
    CHECK_THROWS_AS(loss_simu_node(t, ep.node, pair.clean, proxy, all_zero, res), Error);
  }
}

TEST_CASE("real objective: step-zero regularizer vanishes") {
  const sqa::SqaModel proxy = tiny_proxy(11);
  se::SeModel m = small_se(3);
  const se::NoisyCleanPair pair = speech_pair(42, 0.3);
  const MultiResConfig res = res_small();
  const Waveform enh0 = se::enhance(m, pair.noisy).enhanced;

  {
    // Same model, same input: the drift penalty is exactly zero.
    ad::Tape t;
    const ad::NodeId x = t.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ep = se::enhance_node(m, t, x, nullptr);
    LossWeights w;
    w.lambda_spec = 0.0;
    w.lambda_score = 0.0;
    w.lambda_feat = 0.0;
    w.lambda_reg = 1.0;
    const LossBreakdown lb = loss_real_node(t, ep.node, enh0, proxy, w, res);
    CHECK(lb.reg == 0.0);
    CHECK(lb.total == 0.0);
  }
  {
    // Score term matches the untaped forward pass on the same waveform.
    ad::Tape t;
    const ad::NodeId x = t.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ep = se::enhance_node(m, t, x, nullptr);
    LossWeights w;
    w.lambda_spec = 0.0;
    w.lambda_feat = 0.0;
    w.lambda_reg = 1.0;
    const LossBreakdown lb = loss_real_node(t, ep.node, enh0, proxy, w, res);
    const sqa::SqaOutput so = sqa::sqa_forward(proxy, enh0);
    std::vector<metrics::MetricSpec> specs;
    std::vector<double> scores;
    for (const std::size_t idx : proxy.predicted_idx) {
      specs.push_back(proxy.registry.at(idx));
      scores.push_back(so.scores.values[idx]);
    }
    CHECK(lb.score == loss_score(specs, scores, true));

    // Spec-branch lambdas have no effect on the real objective.
    LossWeights w2 = w;
    w2.lambda_spec = 5.0;
    w2.lambda_feat = 5.0;
    ad::Tape t2;
    const ad::NodeId x2 = t2.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ep2 = se::enhance_node(m, t2, x2, nullptr);
    const LossBreakdown lb2 = loss_real_node(t2, ep2.node, enh0, proxy, w2, res);
    CHECK(lb2.total == lb.total);
  }
  {
    LossWeights dead;
    dead.lambda_spec = 1.0;
    dead.lambda_score = 0.0;
    dead.lambda_feat = 0.0;
    dead.lambda_reg = 0.0;
    ad::Tape t;
    const ad::NodeId x = t.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ep = se::enhance_node(m, t, x, nullptr);
    CHECK_THROWS_AS(loss_real_node(t, ep.node, enh0, proxy, dead, res), Error);
  }
}

TEST_CASE("composite objectives: frozen regression values") {
  // Values recorded from this exact construction; they guard the whole
  // pipeline (enhancer forward, proxy forward, loss assembly) against
  // accidental semantic drift.
  const sqa::SqaModel proxy = tiny_proxy(11);
  se::SeModel m = small_se(3);
  const se::NoisyCleanPair pair = speech_pair(42, 0.3);
  const MultiResConfig res = res_small();

  {
    ad::Tape t;
    const ad::NodeId x = t.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ep = se::enhance_node(m, t, x, nullptr);
    const LossBreakdown lb = loss_simu_node(t, ep.node, pair.clean, proxy, LossWeights{}, res);
    CHECK(lb.total == doctest::Approx(14.529224942790012).epsilon(1e-12));
    CHECK(lb.spec == doctest::Approx(6.6352315889379536).epsilon(1e-12));
    CHECK(lb.score == doctest::Approx(-0.009657706715125336).epsilon(1e-9));
    CHECK(lb.feat == doctest::Approx(7.9036510605671833).epsilon(1e-12));
  }
  {
    const Waveform enh0 = se::enhance(m, pair.noisy).enhanced;
    se::SeModel m2 = m;
    for (double& v : m2.mlp_b.back().data) v += 0.01;
    ad::Tape t;
    const ad::NodeId x = t.constant(Tensor::vector(pair.noisy.samples));
    const se::EnhancedPair ep = se::enhance_node(m2, t, x, nullptr);
    LossWeights w;
    w.lambda_spec = 0.0;
    w.lambda_feat = 0.0;
    w.lambda_reg = 1.0;
    const LossBreakdown lb = loss_real_node(t, ep.node, enh0, proxy, w, res);
    CHECK(lb.total == doctest::Approx(-0.0061177604723068775).epsilon(1e-9));
    CHECK(lb.score == doctest::Approx(-0.009790932430254232).epsilon(1e-9));
    CHECK(lb.reg == doctest::Approx(0.0036731719579473545).epsilon(1e-9));
  }
}

TEST_CASE("composite objective gradients agree with finite differences") {
  const sqa::SqaModel proxy = tiny_proxy(11);
  se::SeModel m = small_se(3);
  const se::NoisyCleanPair pair = speech_pair(42, 0.25);
  const MultiResConfig res = res_small();

  std::vector<Tensor> point;
  for (Tensor* p : se::parameters(m)) point.push_back(*p);
  ad::GradCheckOptions opts;
  opts.max_coords_per_input = 2;
  opts.seed = 7;

  const double lams[3][3] = {{1.0, 1.0, 1.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}};
  for (const auto& lam : lams) {
    LossWeights w;
    w.lambda_spec = lam[0];
    w.lambda_score = lam[1];
    w.lambda_feat = lam[2];
    const double err = ad::grad_check(
        [&](ad::Tape& t, const std::vector<ad::NodeId>& leaves) {
          const ad::NodeId x = t.constant(Tensor::vector(pair.noisy.samples));
          const se::EnhancedPair ep = se::enhance_with_params(m, t, x, leaves);
          return loss_simu_node(t, ep.node, pair.clean, proxy, w, res).total_node;
        },
        point, opts);
    CHECK(err < 1e-4);
  }
  {
    // Real-branch objective: proxy push plus drift penalty. The drift
    // reference comes from a slightly shifted model so the check point sits
    // away from the absolute-value kink at zero drift.
    se::SeModel m0 = m;
    for (double& v : m0.mlp_b.back().data) v += 0.01;
    const Waveform enh0 = se::enhance(m0, pair.noisy).enhanced;
    LossWeights w;
    w.lambda_spec = 0.0;
    w.lambda_feat = 0.0;
    w.lambda_reg = 1.0;
    const double err = ad::grad_check(
        [&](ad::Tape& t, const std::vector<ad::NodeId>& leaves) {
          const ad::NodeId x = t.constant(Tensor::vector(pair.noisy.samples));
          const se::EnhancedPair ep = se::enhance_with_params(m, t, x, leaves);
          return loss_real_node(t, ep.node, enh0, proxy, w, res).total_node;
        },
        point, opts);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("hack monitor validates its thresholds") {
  HackMonitorConfig c;
  CHECK_NOTHROW(validate(c));
  c.tau = 0.0;
  CHECK_THROWS_AS(validate(c), Error);
  c = HackMonitorConfig{};
  c.window = 1;
  CHECK_THROWS_AS(validate(c), Error);
  c = HackMonitorConfig{};
  c.sigma_floor = 0.0;
  CHECK_THROWS_AS(validate(c), Error);
  c = HackMonitorConfig{};
  c.reg_growth = 1.0;
  CHECK_THROWS_AS(validate(c), Error);
  c = HackMonitorConfig{};
  c.reg_floor = 0.0;
  CHECK_THROWS_AS(validate(c), Error);

  HackMonitorState st;
  CHECK_THROWS_AS(
      hack_monitor(std::move(st), std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0), Error);
}

TEST_CASE("hack monitor: lockstep series never flags") {
  HackMonitorState st;
  st.config.window = 3;
  for (int i = 0; i < 12; ++i) {
    st = hack_monitor(std::move(st), 0.3 * i, 0.3 * i, 0.01 * i);
    CHECK_FALSE(st.flag);
  }
  // Proxy and oracle improving at different rates standardizes away too.
  HackMonitorState st2;
  st2.config.window = 3;
  for (int i = 0; i < 12; ++i) {
    st2 = hack_monitor(std::move(st2), 0.2 * i, 0.1 * i, 0.01 * i);
    CHECK_FALSE(st2.flag);
  }
}

TEST_CASE("hack monitor: proxy outrunning a stalled oracle latches") {
  HackMonitorState st;
  st.config.window = 3;
  // Proxy climbs, oracle decays: divergence grows without bound.
  int first_flag = -1;
  for (int i = 0; i < 10; ++i) {
    st = hack_monitor(std::move(st), 0.2 * i, -0.05 * i, 0.0);
    if (i < 3) CHECK_FALSE(st.flag);  // window not yet filled past the baseline
    if (st.flag && first_flag < 0) first_flag = i;
  }
  REQUIRE(st.flag);
  CHECK(first_flag == 3);
  CHECK(st.reason.find("outran") != std::string::npos);
  CHECK(st.history.back().has_oracle);

  // Latched: lockstep samples afterwards do not clear it.
  for (int i = 0; i < 4; ++i) {
    st = hack_monitor(std::move(st), 0.0, 0.0, 0.0);
    CHECK(st.flag);
  }
}

TEST_CASE("hack monitor: reference-free growth rule") {
  HackMonitorConfig c;
  c.window = 2;
  c.reg_floor = 0.5;
  c.reg_growth = 3.0;

  {
    // Mild drift below the growth bound stays quiet.
    HackMonitorState st;
    st.config = c;
    for (double r : {0.0, 0.4, 0.5, 0.6, 0.7, 0.8}) {
      st = hack_monitor(std::move(st), 0.0, std::nullopt, r);
      CHECK_FALSE(st.flag);
    }
  }
  {
    // Runaway drift: reference is history[1] = 0.4, bound is 3 * 0.5 with
    // the floor applied... here max(0.5, 0.4) * 3 = 1.5.
    HackMonitorState st;
    st.config = c;
    st = hack_monitor(std::move(st), 0.0, std::nullopt, 0.0);
    st = hack_monitor(std::move(st), 0.0, std::nullopt, 0.4);
    st = hack_monitor(std::move(st), 0.0, std::nullopt, 1.6);
    CHECK_FALSE(st.flag);  // needs window + 2 samples
    st = hack_monitor(std::move(st), 0.0, std::nullopt, 1.7);
    CHECK(st.flag);
    CHECK(st.reason.find("regularizer") != std::string::npos);
    CHECK_FALSE(st.history.back().has_oracle);
  }
  {
    // The floor keeps small absolute drift from tripping on ratios alone.
    HackMonitorState st;
    st.config = c;
    for (double r : {0.0, 0.1, 0.35, 0.45, 0.5, 0.55}) {
      st = hack_monitor(std::move(st), 0.0, std::nullopt, r);
      CHECK_FALSE(st.flag);
    }
  }
}

TEST_CASE("simulated fine-tuning: run files, cadence and determinism") {
  const sqa::SqaModel proxy = tiny_proxy(11);
  std::vector<se::NoisyCleanPair> tr;
  for (int i = 0; i < 3; ++i) tr.push_back(speech_pair(200 + i, 0.3));
  std::vector<se::NoisyCleanPair> held;
  for (int i = 0; i < 2; ++i) held.push_back(speech_pair(300 + i, 0.8));

  FinetuneConfig cfg;
  cfg.steps = 8;
  cfg.lr = 1e-3;
  cfg.monitor_every = 4;
  cfg.seed = 9;
  cfg.weights.lambda_spec = 1.0;
  cfg.weights.lambda_score = 0.2;
  cfg.weights.lambda_feat = 0.0;
  cfg.resolutions = res_small();

  const fs::path proxy_before = fresh_dir("proxy") / "proxy.ckpt";
  sqa::save_sqa(proxy_before.string(), proxy);

  const fs::path dir_a = fresh_dir("simu_a");
  cfg.run_dir = dir_a.string();
  se::SeModel ma = small_se(3);
  const FinetuneReport ra = finetune_simulated(ma, proxy, tr, held, cfg);

  CHECK(ra.steps_run == 8);
  CHECK_FALSE(ra.aborted);
  REQUIRE(ra.loss_total.size() == 8);
  for (double v : ra.loss_total) CHECK(std::isfinite(v));
  REQUIRE(ra.events.size() == 3);
  CHECK(ra.events[0].step == 0);
  CHECK(ra.events[1].step == 4);
  CHECK(ra.events[2].step == 8);
  CHECK(ra.events[0].l_reg_held == 0.0);  // no drift before the first update
  for (const auto& ev : ra.events) {
    CHECK(ev.has_oracle);
    CHECK(std::isfinite(ev.oracle_sdr));
    CHECK(std::isfinite(ev.oracle_estoi));
    CHECK(std::isfinite(ev.proxy_quality));
  }
  // Simulated mode feeds the oracle composite to the monitor.
  for (const auto& s : ra.monitor.history) CHECK(s.has_oracle);

  // The run directory carries the replay config, per-step log and
  // monitor-cadence checkpoints.
  CHECK(fs::exists(dir_a / "config.json"));
  CHECK(fs::exists(dir_a / "trajectory.csv"));
  CHECK(fs::exists(dir_a / "se.step000000.ckpt"));
  CHECK(fs::exists(dir_a / "se.step000004.ckpt"));
  CHECK(fs::exists(dir_a / "se.step000008.ckpt"));
  CHECK(fs::exists(dir_a / "se.final.ckpt"));
  CHECK(slurp(dir_a / "se.step000008.ckpt") == slurp(dir_a / "se.final.ckpt"));

  const auto cj = nlohmann::json::parse(slurp(dir_a / "config.json"));
  CHECK(cj.at("mode") == "simulated");
  CHECK(cj.at("steps") == 8);
  CHECK(cj.at("halve_every") == 3);  // 40% of 8 steps
  CHECK(cj.at("monitor_metrics") == nlohmann::json({"SDR", "ESTOI"}));

  const auto lines = split_lines(slurp(dir_a / "trajectory.csv"));
  REQUIRE(lines.size() == 10);  // header + 8 steps + trailing monitor row
  CHECK(lines[0].rfind("step,lr,loss_total", 0) == 0);
  const auto row0 = split_csv(lines[1]);
  const auto row1 = split_csv(lines[2]);
  const auto row_last = split_csv(lines[9]);
  REQUIRE(row0.size() == 13);
  CHECK(row0[7] != "");       // monitor event on step 0
  CHECK(row1[7] == "");       // none on step 1
  CHECK(row_last[2] == "");   // trailing row logs the final event only
  CHECK(row_last[7] != "");
  // StepLR halves every 3 steps here: 1e-3, then 5e-4, then 2.5e-4.
  CHECK(std::stod(row0[1]) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(std::stod(split_csv(lines[8])[1]) == doctest::Approx(2.5e-4).epsilon(1e-12));

  // Same seed, fresh model: byte-identical artifacts.
  const fs::path dir_b = fresh_dir("simu_b");
  cfg.run_dir = dir_b.string();
  se::SeModel mb = small_se(3);
  const FinetuneReport rb = finetune_simulated(mb, proxy, tr, held, cfg);
  CHECK(ra.loss_total == rb.loss_total);
  CHECK(slurp(dir_a / "trajectory.csv") == slurp(dir_b / "trajectory.csv"));
  CHECK(slurp(dir_a / "config.json") == slurp(dir_b / "config.json"));
  CHECK(slurp(dir_a / "se.final.ckpt") == slurp(dir_b / "se.final.ckpt"));

  // A different shuffle seed changes the trajectory.
  const fs::path dir_c = fresh_dir("simu_c");
  cfg.run_dir = dir_c.string();
  cfg.seed = 10;
  se::SeModel mc = small_se(3);
  const FinetuneReport rc = finetune_simulated(mc, proxy, tr, held, cfg);
  CHECK(ra.loss_total != rc.loss_total);

  // Fine-tuning never touches the proxy.
  const fs::path proxy_after = fresh_dir("proxy2") / "proxy.ckpt";
  sqa::save_sqa(proxy_after.string(), proxy);
  CHECK(slurp(proxy_before) == slurp(proxy_after));
}

TEST_CASE("real fine-tuning: blind monitor, post-hoc oracle, step-zero drift") {
  const sqa::SqaModel proxy = tiny_proxy(11);
  se::SeModel m = small_se(3);
  std::vector<RealUtterance> tr;
  for (int i = 0; i < 2; ++i) {
    const auto p = speech_pair(60 + i, 0.5);
    tr.push_back({p.id, p.noisy});
  }
  std::vector<se::NoisyCleanPair> held;
  for (int i = 0; i < 2; ++i) held.push_back(speech_pair(70 + i, 0.8));

  FinetuneConfig cfg;
  cfg.steps = 3;
  cfg.lr = 1e-3;
  cfg.monitor_every = 3;
  cfg.seed = 4;
  cfg.weights.lambda_spec = 0.0;
  cfg.weights.lambda_score = 1.0;
  cfg.weights.lambda_feat = 0.0;
  cfg.weights.lambda_reg = 1.0;
  cfg.resolutions = res_small();

  const FinetuneReport r = finetune_real(m, proxy, tr, held, cfg);
  CHECK(r.steps_run == 3);
  CHECK_FALSE(r.aborted);
  // The first update optimizes against the entry model's own output.
  CHECK(r.loss_reg.front() == 0.0);
  CHECK(r.loss_reg.back() > 0.0);

  // The monitor never sees a reference in real mode; the report still
  // carries post-hoc oracle columns because these held pairs have them.
  for (const auto& s : r.monitor.history) CHECK_FALSE(s.has_oracle);
  for (const auto& ev : r.events) {
    CHECK(ev.has_oracle);
    CHECK(std::isfinite(ev.oracle_sdr));
  }

  // Without clean sides the oracle columns are NaN and nothing throws.
  std::vector<se::NoisyCleanPair> blind = held;
  for (auto& p : blind) p.clean = Waveform{};
  se::SeModel m2 = small_se(3);
  cfg.steps = 2;
  cfg.monitor_every = 2;
  const FinetuneReport r2 = finetune_real(m2, proxy, tr, blind, cfg);
  for (const auto& ev : r2.events) {
    CHECK_FALSE(ev.has_oracle);
    CHECK(std::isnan(ev.oracle_sdr));
    CHECK(std::isfinite(ev.proxy_quality));
  }
}

TEST_CASE("real fine-tuning: pure proxy pushing trips the monitor and aborts") {
  // Score-only pushing on an untrained proxy drifts the output freely; the
  // growth rule has to catch it. Learning rate and thresholds were picked so
  // the drift series crosses the bound well inside the run.
  const sqa::SqaModel proxy = tiny_proxy(11);
  se::SeModel m = small_se(3);
  std::vector<RealUtterance> tr;
  for (int i = 0; i < 2; ++i) {
    const auto p = speech_pair(60 + i, 0.5);
    tr.push_back({p.id, p.noisy});
  }
  std::vector<se::NoisyCleanPair> held;
  for (int i = 0; i < 2; ++i) held.push_back(speech_pair(70 + i, 0.8));

  FinetuneConfig cfg;
  cfg.steps = 12;
  cfg.lr = 0.05;
  cfg.monitor_every = 1;
  cfg.seed = 5;
  cfg.weights.lambda_spec = 0.0;
  cfg.weights.lambda_score = 1.0;
  cfg.weights.lambda_feat = 0.0;
  cfg.weights.lambda_reg = 0.0;
  cfg.resolutions = res_small();
  cfg.monitor.window = 2;
  cfg.monitor.reg_floor = 1e-6;
  cfg.monitor.reg_growth = 2.0;

  const FinetuneReport r = finetune_real(m, proxy, tr, held, cfg);
  CHECK(r.aborted);
  CHECK(r.monitor.flag);
  CHECK(r.steps_run < cfg.steps);
  CHECK(r.events.back().flag_after);
  CHECK(r.events.back().step == r.steps_run);
  // Drift grows monotonically once pushing starts.
  CHECK(r.events.back().l_reg_held > r.events[1].l_reg_held);

  // Same run with the abort disabled completes, with the flag latched.
  se::SeModel m2 = small_se(3);
  cfg.abort_on_flag = false;
  const FinetuneReport r2 = finetune_real(m2, proxy, tr, held, cfg);
  CHECK_FALSE(r2.aborted);
  CHECK(r2.steps_run == cfg.steps);
  CHECK(r2.monitor.flag);
}

TEST_CASE("fine-tuning rejects bad configurations up front") {
  const sqa::SqaModel proxy = tiny_proxy(11);
  se::SeModel m = small_se(3);
  std::vector<se::NoisyCleanPair> tr = {speech_pair(200, 0.3)};
  std::vector<se::NoisyCleanPair> held = {speech_pair(300, 0.8)};
  std::vector<RealUtterance> tru = {{tr[0].id, tr[0].noisy}};

  FinetuneConfig ok;
  ok.steps = 2;
  ok.monitor_every = 1;
  ok.resolutions = res_small();

  auto expect_throw = [&](FinetuneConfig cfg) {
    se::SeModel mm = small_se(3);
    CHECK_THROWS_AS(finetune_simulated(mm, proxy, tr, held, cfg), Error);
  };

  FinetuneConfig bad = ok;
  bad.steps = 0;
  expect_throw(bad);
  bad = ok;
  bad.lr = 0.0;
  expect_throw(bad);
  bad = ok;
  bad.monitor_every = 0;
  expect_throw(bad);
  bad = ok;
  bad.monitor.window = 1;
  expect_throw(bad);
  bad = ok;
  bad.monitor_metrics = {"MOS"};  // in the registry, but not predicted
  expect_throw(bad);
  bad = ok;
  bad.weights.lambda_spec = 0.0;
  bad.weights.lambda_score = 0.0;
  bad.weights.lambda_feat = 0.0;
  bad.weights.lambda_reg = 1.0;  // dead simulated objective
  expect_throw(bad);
  bad = ok;
  bad.weights.lambda_spec = 0.0;
  bad.weights.lambda_feat = 0.0;
  bad.weights.metric_weights = {{"SDR", 0.0}, {"ESTOI", 0.0}, {"CER", 0.0}};
  expect_throw(bad);  // score-only with every head weight zeroed

  {
    se::SeModel mm = small_se(3);
    CHECK_THROWS_AS(finetune_simulated(mm, proxy, {}, held, ok), Error);
    CHECK_THROWS_AS(finetune_simulated(mm, proxy, tr, {}, ok), Error);
    std::vector<se::NoisyCleanPair> short_tr = {speech_pair(201, 0.1)};
    CHECK_THROWS_AS(finetune_simulated(mm, proxy, short_tr, held, ok), Error);
    std::vector<se::NoisyCleanPair> mismatched = tr;
    mismatched[0].clean.samples.pop_back();
    CHECK_THROWS_AS(finetune_simulated(mm, proxy, mismatched, held, ok), Error);
  }
  {
    // Real mode with only simulated-branch lambdas has nothing to optimize.
    FinetuneConfig cfg = ok;
    cfg.weights.lambda_spec = 1.0;
    cfg.weights.lambda_score = 0.0;
    cfg.weights.lambda_feat = 0.0;
    cfg.weights.lambda_reg = 0.0;
    se::SeModel mm = small_se(3);
    CHECK_THROWS_AS(finetune_real(mm, proxy, tru, held, cfg), Error);
  }
  {
    // Enhancer and proxy must share a sample rate.
    se::SeConfig c8 = m.config;
    c8.sample_rate = 8000;
    se::SeModel m8 = se::init_se(c8, 3);
    CHECK_THROWS_AS(finetune_simulated(m8, proxy, tr, held, ok), Error);
  }
}
