#include "seqa/enhancer.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "seqa/checkpoint.hpp"
#include "seqa/optim.hpp"
#include "seqa/rng.hpp"

namespace seqa::se {

using nlohmann::json;

namespace {

constexpr double kMagEpsSq = 1e-12;
constexpr double kLogFloor = 1e-7;

std::size_t bins(const SeConfig& c) { return static_cast<std::size_t>(c.stft.n_fft) / 2 + 1; }

Tensor xavier(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in,
              std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.data) v = rng.uniform(-a, a);
  return t;
}

}  // namespace

SeConfig SeConfig::desk_default() { return SeConfig{}; }

std::string SeConfig::to_json() const {
  json j;
  j["sample_rate"] = sample_rate;
  j["stft"] = {{"n_fft", stft.n_fft},
               {"win_length", stft.win_length},
               {"hop", stft.hop},
               {"window", signal::window_name(stft.window)},
               {"center_pad", stft.center_pad}};
  j["context"] = context;
  j["hidden"] = hidden;
  j["mask_bias"] = mask_bias;
  return j.dump();
}

SeConfig SeConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(std::string("se config: bad json: ") + e.what());
  }
  SeConfig c;
  try {
    c.sample_rate = j.at("sample_rate").get<int>();
    const auto& s = j.at("stft");
    c.stft.n_fft = s.at("n_fft").get<int>();
    c.stft.win_length = s.at("win_length").get<int>();
    c.stft.hop = s.at("hop").get<int>();
    c.stft.window = signal::window_from_name(s.at("window").get<std::string>());
    c.stft.center_pad = s.at("center_pad").get<bool>();
    c.context = j.at("context").get<int>();
    c.hidden = j.at("hidden").get<std::vector<int>>();
    c.mask_bias = j.at("mask_bias").get<double>();
  } catch (const json::exception& e) {
    fail(std::string("se config: missing or mistyped field: ") + e.what());
  }
  return c;
}

void validate(const SeConfig& cfg) {
  require(cfg.sample_rate > 0, "se config: sample rate must be positive");
  signal::validate(cfg.stft);
  signal::check_ola(cfg.stft);
  require(cfg.context >= 0 && cfg.context <= 8, "se config: context must be in [0, 8]");
  require(!cfg.hidden.empty(), "se config: need at least one hidden layer");
  for (int h : cfg.hidden) require(h >= 1, "se config: bad hidden width");
  require(std::isfinite(cfg.mask_bias), "se config: mask bias must be finite");
}

SeModel init_se(const SeConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  SeModel m;
  m.config = cfg;
  Rng rng(derive_seed(seed, 0x5e1f));

  const std::size_t f = bins(cfg);
  const std::size_t blocks = 2 * static_cast<std::size_t>(cfg.context) + 1;
  const std::size_t h0 = static_cast<std::size_t>(cfg.hidden[0]);
  // The context blocks jointly form one (blocks*F) x h0 layer, so the fan-in
  // for scaling is the concatenated width.
  for (std::size_t b = 0; b < blocks; ++b)
    m.ctx_w.push_back(xavier(rng, f, h0, blocks * f, h0));
  m.ctx_b = Tensor::zeros({h0});

  std::size_t in = h0;
  for (std::size_t i = 1; i < cfg.hidden.size(); ++i) {
    const std::size_t out = static_cast<std::size_t>(cfg.hidden[i]);
    m.mlp_w.push_back(xavier(rng, in, out, in, out));
    m.mlp_b.push_back(Tensor::zeros({out}));
    in = out;
  }
  m.mlp_w.push_back(xavier(rng, in, f, in, f));
  m.mlp_b.push_back(Tensor::full({f}, cfg.mask_bias));
  return m;
}

std::size_t param_count(const SeModel& m) {
  std::size_t n = 0;
  for (const Tensor* p : parameters(m)) n += p->numel();
  return n;
}

std::vector<Tensor*> parameters(SeModel& m) {
  std::vector<Tensor*> out;
  for (auto& t : m.ctx_w) out.push_back(&t);
  out.push_back(&m.ctx_b);
  for (auto& t : m.mlp_w) out.push_back(&t);
  for (auto& t : m.mlp_b) out.push_back(&t);
  return out;
}

std::vector<const Tensor*> parameters(const SeModel& m) {
  std::vector<const Tensor*> out;
  for (const auto& t : m.ctx_w) out.push_back(&t);
  out.push_back(&m.ctx_b);
  for (const auto& t : m.mlp_w) out.push_back(&t);
  for (const auto& t : m.mlp_b) out.push_back(&t);
  return out;
}

EnhancedPair enhance_node(const SeModel& m, ad::Tape& t, ad::NodeId x,
                          std::vector<ad::NodeId>* param_nodes) {
  const bool trainable = param_nodes != nullptr;
  std::vector<ad::NodeId> pn;
  for (const Tensor* p : parameters(m)) pn.push_back(t.leaf(*p, trainable));
  if (param_nodes) *param_nodes = pn;
  return enhance_with_params(m, t, x, pn);
}

EnhancedPair enhance_with_params(const SeModel& m, ad::Tape& t, ad::NodeId x,
                                 const std::vector<ad::NodeId>& pn) {
  const SeConfig& cfg = m.config;
  validate(cfg);
  // Note: value() references die on the next push, so take what we need now.
  const std::size_t n_samples = t.value(x).numel();
  require(t.value(x).rank() == 1, "enhance: input node must be a 1-D signal");
  require(n_samples >= static_cast<std::size_t>(cfg.stft.win_length),
          "enhance: input shorter than one analysis frame");

  const std::vector<const Tensor*> shapes = parameters(m);
  require(pn.size() == shapes.size(), "enhance: wrong parameter node count");
  for (std::size_t i = 0; i < pn.size(); ++i)
    require(t.value(pn[i]).same_shape(*shapes[i]), "enhance: parameter shape mismatch");

  const std::size_t blocks = m.ctx_w.size();
  std::size_t at = 0;
  const std::vector<ad::NodeId> ctx_w(pn.begin(), pn.begin() + static_cast<long>(blocks));
  at += blocks;
  const ad::NodeId ctx_b = pn[at++];
  std::vector<ad::NodeId> mlp_w, mlp_b;
  for (std::size_t i = 0; i < m.mlp_w.size(); ++i) mlp_w.push_back(pn[at++]);
  for (std::size_t i = 0; i < m.mlp_b.size(); ++i) mlp_b.push_back(pn[at++]);

  const auto [re, im] = t.frame_window_dft(x, cfg.stft);
  const ad::NodeId logmag =
      t.log(t.clamp_min(t.complex_magnitude(re, im, kMagEpsSq), kLogFloor));

  // First layer: one weight block per context offset over the shifted frames.
  ad::NodeId pre = 0;
  for (std::size_t b = 0; b < blocks; ++b) {
    const int offset = static_cast<int>(b) - cfg.context;
    const ad::NodeId frames = offset == 0 ? logmag : t.time_shift(logmag, offset);
    const ad::NodeId term = t.matmul(frames, ctx_w[b]);
    pre = b == 0 ? term : t.add(pre, term);
  }
  ad::NodeId h = t.tanh(t.add(pre, ctx_b));

  for (std::size_t i = 0; i + 1 < mlp_w.size(); ++i)
    h = t.tanh(t.add(t.matmul(h, mlp_w[i]), mlp_b[i]));
  const ad::NodeId mask = t.sigmoid(t.add(t.matmul(h, mlp_w.back()), mlp_b.back()));

  const auto [mre, mim] = t.mask_apply(mask, re, im);
  const ad::NodeId out = t.overlap_add_idft(mre, mim, cfg.stft, n_samples);

  EnhancedPair ep;
  ep.enhanced = signal::Waveform(t.value(out).data, cfg.sample_rate);
  ep.mask = t.value(mask);
  ep.taped = true;
  ep.node = out;
  ep.mask_node = mask;
  return ep;
}

EnhancedPair enhance(const SeModel& m, const signal::Waveform& x, ad::Tape* tape) {
  signal::validate(x);
  require(x.sample_rate == m.config.sample_rate, "enhance: sample rate mismatch");
  if (tape) {
    const ad::NodeId xn = tape->leaf(Tensor::vector(x.samples), false);
    return enhance_node(m, *tape, xn, nullptr);
  }
  ad::Tape scratch;
  const ad::NodeId xn = scratch.constant(Tensor::vector(x.samples));
  EnhancedPair ep = enhance_node(m, scratch, xn, nullptr);
  ep.taped = false;
  ep.node = 0;
  ep.mask_node = 0;
  return ep;
}

PretrainReport pretrain_se(SeModel& m, const std::vector<NoisyCleanPair>& pairs,
                           const PretrainConfig& cfg) {
  validate(m.config);
  train::validate(cfg.resolutions);
  require(cfg.steps > 0, "pretrain_se: steps must be positive");
  require(!pairs.empty(), "pretrain_se: no training pairs");
  for (const auto& p : pairs) {
    signal::validate(p.noisy);
    signal::validate(p.clean);
    require(p.noisy.sample_rate == m.config.sample_rate &&
                p.clean.sample_rate == m.config.sample_rate,
            "pretrain_se: sample rate mismatch for " + p.id);
    require(p.noisy.size() == p.clean.size(), "pretrain_se: length mismatch for " + p.id);
    require(p.noisy.size() >= static_cast<std::size_t>(m.config.stft.win_length),
            "pretrain_se: utterance shorter than one frame: " + p.id);
  }

  std::vector<Tensor*> params = parameters(m);
  opt::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.halve_every = cfg.halve_every > 0 ? cfg.halve_every : std::max(1, cfg.steps * 2 / 5);
  opt::Adam adam(params, ac);

  PretrainReport report;
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int step = 0; step < cfg.steps; ++step) {
    const std::size_t pos = static_cast<std::size_t>(step) % pairs.size();
    if (pos == 0) {
      Rng shuffle_rng(derive_seed(cfg.seed, 3000 + static_cast<std::uint64_t>(step) / pairs.size()));
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[shuffle_rng.next_u64() % i]);
    }
    const NoisyCleanPair& ex = pairs[order[pos]];

    ad::Tape t;
    std::vector<ad::NodeId> pn;
    const ad::NodeId x = t.constant(Tensor::vector(ex.noisy.samples));
    const EnhancedPair ep = enhance_node(m, t, x, &pn);
    const ad::NodeId ref = t.constant(Tensor::vector(ex.clean.samples));
    const ad::NodeId loss = train::loss_spec_node(t, ep.node, ref, cfg.resolutions);

    const double lv = t.value(loss).item();
    require(std::isfinite(lv),
            "pretrain_se: loss diverged at step " + std::to_string(step));
    report.loss.push_back(lv);

    const ad::Gradients g = t.backward(loss);
    std::vector<const Tensor*> gp(params.size(), nullptr);
    for (std::size_t i = 0; i < params.size(); ++i)
      if (g.has(pn[i])) gp[i] = &g.at(pn[i]);
    adam.update(params, gp);
    for (const Tensor* p : params)
      for (double v : p->data)
        require(std::isfinite(v),
                "pretrain_se: parameters diverged at step " + std::to_string(step));
  }
  return report;
}

void save_se(const std::string& path, const SeModel& m) {
  validate(m.config);
  ckpt::Checkpoint c;
  c.kind = "se";
  c.config_json = m.config.to_json();
  c.registry_hash = 0;
  for (std::size_t i = 0; i < m.ctx_w.size(); ++i)
    c.tensors.push_back({"ctx_w." + std::to_string(i), m.ctx_w[i]});
  c.tensors.push_back({"ctx_b", m.ctx_b});
  for (std::size_t i = 0; i < m.mlp_w.size(); ++i)
    c.tensors.push_back({"mlp_w." + std::to_string(i), m.mlp_w[i]});
  for (std::size_t i = 0; i < m.mlp_b.size(); ++i)
    c.tensors.push_back({"mlp_b." + std::to_string(i), m.mlp_b[i]});
  ckpt::save_checkpoint(path, c);
}

SeModel load_se(const std::string& path) {
  const ckpt::Checkpoint c = ckpt::load_checkpoint(path);
  require(c.kind == "se", "load_se: checkpoint kind is '" + c.kind + "', expected 'se'");
  const SeConfig cfg = SeConfig::from_json_text(c.config_json);
  SeModel m = init_se(cfg, 0);

  const auto take = [&](const std::string& name, Tensor& dst) {
    require(c.has(name), "load_se: checkpoint missing tensor " + name);
    const Tensor& src = c.at(name);
    require(src.same_shape(dst),
            "load_se: shape mismatch for " + name + " (" + src.shape_str() + ")");
    dst = src;
  };
  for (std::size_t i = 0; i < m.ctx_w.size(); ++i) take("ctx_w." + std::to_string(i), m.ctx_w[i]);
  take("ctx_b", m.ctx_b);
  for (std::size_t i = 0; i < m.mlp_w.size(); ++i) take("mlp_w." + std::to_string(i), m.mlp_w[i]);
  for (std::size_t i = 0; i < m.mlp_b.size(); ++i) take("mlp_b." + std::to_string(i), m.mlp_b[i]);
  return m;
}

}  // namespace seqa::se
