#include "seqa/sqa.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <set>

#include "json.hpp"
#include "seqa/checkpoint.hpp"
#include "seqa/optim.hpp"
#include "seqa/rng.hpp"

namespace seqa::sqa {

using nlohmann::json;

namespace {

constexpr double kMinSeconds = 0.2;
constexpr double kMagEps = 1e-12;

}  // namespace

SqaConfig SqaConfig::desk_default() {
  SqaConfig c;
  c.predicted = {"SDR",   "SI_SNR", "LSD", "ESTOI", "MCD", "SpeakerSimilarity",
                 "CER",   "PhonemeSimilarity"};
  return c;
}

std::string SqaConfig::to_json() const {
  json j;
  j["sample_rate"] = sample_rate;
  j["stft"] = {{"n_fft", stft.n_fft},
               {"win_length", stft.win_length},
               {"hop", stft.hop},
               {"window", signal::window_name(stft.window)},
               {"center_pad", stft.center_pad}};
  j["n_mels"] = n_mels;
  j["mel_floor"] = mel_floor;
  j["encoder_widths"] = encoder_widths;
  j["hidden_dim"] = hidden_dim;
  j["predicted"] = predicted;
  return j.dump();
}

SqaConfig SqaConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(std::string("sqa config: bad json: ") + e.what());
  }
  SqaConfig c;
  try {
    c.sample_rate = j.at("sample_rate").get<int>();
    const auto& s = j.at("stft");
    c.stft.n_fft = s.at("n_fft").get<int>();
    c.stft.win_length = s.at("win_length").get<int>();
    c.stft.hop = s.at("hop").get<int>();
    c.stft.window = signal::window_from_name(s.at("window").get<std::string>());
    c.stft.center_pad = s.at("center_pad").get<bool>();
    c.n_mels = j.at("n_mels").get<int>();
    c.mel_floor = j.at("mel_floor").get<double>();
    c.encoder_widths = j.at("encoder_widths").get<std::vector<int>>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.predicted = j.at("predicted").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(std::string("sqa config: missing or mistyped field: ") + e.what());
  }
  return c;
}

namespace {

void validate_config(const SqaConfig& c, const metrics::MetricRegistry& reg) {
  require(c.sample_rate > 0, "sqa config: sample rate must be positive");
  signal::validate(c.stft);
  require(c.n_mels >= 4, "sqa config: need at least 4 mel bands");
  require(c.mel_floor > 0.0, "sqa config: mel floor must be positive");
  require(c.hidden_dim >= 8, "sqa config: hidden_dim must be at least 8");
  for (int wdt : c.encoder_widths) require(wdt >= 1, "sqa config: bad encoder width");
  require(!c.predicted.empty(), "sqa config: predicted metric set is empty");
  std::set<std::string> seen;
  for (const auto& name : c.predicted) {
    require(reg.has(name), "sqa config: predicted metric not in registry: " + name);
    require(seen.insert(name).second, "sqa config: duplicate predicted metric " + name);
  }
}

Tensor transposed_melbank(const SqaConfig& c) {
  const signal::MelBank bank = signal::melbank(c.sample_rate, c.stft.n_fft, c.n_mels, 0.0,
                                               c.sample_rate / 2.0);
  Tensor t = Tensor::zeros({bank.bins, static_cast<std::size_t>(c.n_mels)});
  for (int m = 0; m < c.n_mels; ++m)
    for (std::size_t f = 0; f < bank.bins; ++f)
      t.at(f, static_cast<std::size_t>(m)) = bank.at(m, f);
  return t;
}

Tensor xavier(Rng& rng, std::size_t in, std::size_t out) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor t = Tensor::zeros({in, out});
  for (double& v : t.data) v = rng.uniform(-a, a);
  return t;
}

/// Tape handles for all model parameters plus the constant filterbank.
struct ParamNodes {
  std::vector<ad::NodeId> enc_w, enc_b, head_w, head_b;
  ad::NodeId mel_t = 0;
};

ParamNodes register_params(const SqaModel& m, ad::Tape& t, bool trainable) {
  ParamNodes p;
  for (const auto& w : m.enc_w) p.enc_w.push_back(t.leaf(w, trainable));
  for (const auto& b : m.enc_b) p.enc_b.push_back(t.leaf(b, trainable));
  for (const auto& w : m.head_w) p.head_w.push_back(t.leaf(w, trainable));
  for (const auto& b : m.head_b) p.head_b.push_back(t.leaf(b, trainable));
  p.mel_t = t.constant(m.mel_t);
  return p;
}

ad::NodeId activate(ad::Tape& t, const metrics::MetricSpec& spec, ad::NodeId z) {
  switch (spec.activation) {
    case metrics::Activation::kIdentity:
      return z;
    case metrics::Activation::kRelu:
      return t.relu(z);
    case metrics::Activation::kScaledSigmoid:
      return t.add(t.constant(spec.act_lo),
                   t.mul(t.constant(spec.act_hi - spec.act_lo), t.sigmoid(z)));
    case metrics::Activation::kTanhUnit:
      return t.tanh(z);
  }
  fail("sqa: unknown activation");
}

ad::NodeId front_end(const SqaModel& m, ad::Tape& t, ad::NodeId x, const ParamNodes& p) {
  auto [re, im] = t.frame_window_dft(x, m.config.stft);
  const ad::NodeId mag = t.complex_magnitude(re, im, kMagEps);
  const ad::NodeId mel = t.matmul(mag, p.mel_t);
  return t.log(t.clamp_min(mel, m.config.mel_floor));
}

struct HeadNodes {
  std::vector<ad::NodeId> scores;
  ad::NodeId hidden = 0;
};

HeadNodes back_half(const SqaModel& m, ad::Tape& t, ad::NodeId logmel, const ParamNodes& p) {
  ad::NodeId h = logmel;
  for (std::size_t i = 0; i < p.enc_w.size(); ++i)
    h = t.tanh(t.add(t.matmul(h, p.enc_w[i]), p.enc_b[i]));

  const std::size_t frames = t.value(logmel).rows();
  const ad::NodeId ones = t.constant(Tensor::full({frames}, 1.0));
  const ad::NodeId pooled =
      t.mul(t.matmul(ones, h), t.constant(1.0 / static_cast<double>(frames)));

  HeadNodes out;
  out.hidden = pooled;
  out.scores.reserve(m.head_w.size());
  for (std::size_t k = 0; k < m.head_w.size(); ++k) {
    const ad::NodeId z = t.add(t.matmul(pooled, p.head_w[k]), p.head_b[k]);
    out.scores.push_back(activate(t, m.registry.at(m.predicted_idx[k]), z));
  }
  return out;
}

SqaOutput collect(const SqaModel& m, const ad::Tape& t, const HeadNodes& nodes, bool taped) {
  SqaOutput out;
  out.scores = metrics::MetricVector::empty(m.registry.size());
  for (std::size_t k = 0; k < nodes.scores.size(); ++k)
    out.scores.set(m.predicted_idx[k], t.value(nodes.scores[k]).item());
  out.hidden = t.value(nodes.hidden).data;
  out.taped = taped;
  out.score_nodes = nodes.scores;
  out.hidden_node = nodes.hidden;
  return out;
}

SqaOutput run_on_tape(const SqaModel& m, ad::Tape& t, ad::NodeId x, bool taped) {
  const ParamNodes p = register_params(m, t, false);
  const HeadNodes nodes = back_half(m, t, front_end(m, t, x, p), p);
  return collect(m, t, nodes, taped);
}

void check_input(const SqaModel& m, std::size_t n_samples) {
  const auto min_n = static_cast<std::size_t>(kMinSeconds * m.config.sample_rate);
  require(n_samples >= min_n, "sqa_forward: input shorter than 0.2 s");
}

}  // namespace

SqaModel init_sqa(const SqaConfig& cfg, const metrics::MetricRegistry& reg, std::uint64_t seed) {
  validate_config(cfg, reg);
  SqaModel m;
  m.config = cfg;
  m.registry = reg;
  m.mel_t = transposed_melbank(cfg);
  for (const auto& name : cfg.predicted) m.predicted_idx.push_back(reg.index_of(name));

  Rng rng(derive_seed(seed, 0x5c0a));
  std::size_t in = static_cast<std::size_t>(cfg.n_mels);
  for (int wdt : cfg.encoder_widths) {
    const auto out = static_cast<std::size_t>(wdt);
    m.enc_w.push_back(xavier(rng, in, out));
    m.enc_b.push_back(Tensor::zeros({out}));
    in = out;
  }
  const auto hidden = static_cast<std::size_t>(cfg.hidden_dim);
  m.enc_w.push_back(xavier(rng, in, hidden));
  m.enc_b.push_back(Tensor::zeros({hidden}));

  const double a = std::sqrt(6.0 / static_cast<double>(hidden + 1));
  for (std::size_t k = 0; k < cfg.predicted.size(); ++k) {
    Tensor w = Tensor::zeros({hidden});
    for (double& v : w.data) v = rng.uniform(-a, a);
    m.head_w.push_back(std::move(w));
    m.head_b.push_back(Tensor::scalar(0.0));
  }
  return m;
}

SqaOutput sqa_forward(const SqaModel& m, const signal::Waveform& w, ad::Tape* tape) {
  signal::validate(w);
  require(w.sample_rate == m.config.sample_rate,
          "sqa_forward: sample rate mismatch (model expects " +
              std::to_string(m.config.sample_rate) + ")");
  check_input(m, w.samples.size());
  const Tensor x = Tensor::vector(w.samples);
  if (tape) return run_on_tape(m, *tape, tape->leaf(x, false), true);
  ad::Tape scratch;
  SqaOutput out = run_on_tape(m, scratch, scratch.leaf(x, false), false);
  out.score_nodes.clear();
  out.hidden_node = 0;
  return out;
}

SqaOutput sqa_forward_node(const SqaModel& m, ad::Tape& tape, ad::NodeId x) {
  const Tensor& v = tape.value(x);
  require(v.rank() == 1, "sqa_forward_node: signal node must be rank 1");
  check_input(m, v.numel());
  return run_on_tape(m, tape, x, true);
}

Tensor sqa_logmel(const SqaModel& m, const signal::Waveform& w) {
  signal::validate(w);
  require(w.sample_rate == m.config.sample_rate, "sqa_logmel: sample rate mismatch");
  check_input(m, w.samples.size());
  ad::Tape t;
  const ParamNodes p = register_params(m, t, false);
  const ad::NodeId lm = front_end(m, t, t.leaf(Tensor::vector(w.samples), false), p);
  return t.value(lm);
}

SqaOutput sqa_from_logmel(const SqaModel& m, const Tensor& logmel) {
  require(logmel.rank() == 2, "sqa_from_logmel: logmel must be T x n_mels");
  require(logmel.cols() == static_cast<std::size_t>(m.config.n_mels),
          "sqa_from_logmel: wrong mel band count");
  require(logmel.rows() >= 1, "sqa_from_logmel: empty feature matrix");
  ad::Tape t;
  const ParamNodes p = register_params(m, t, false);
  const HeadNodes nodes = back_half(m, t, t.leaf(logmel, false), p);
  SqaOutput out = collect(m, t, nodes, false);
  out.score_nodes.clear();
  out.hidden_node = 0;
  return out;
}

// ---- Training ------------------------------------------------------------------

namespace {

double corr_or_nan(const std::function<double()>& f) {
  try {
    return f();
  } catch (const Error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

TrainSqaReport train_sqa(SqaModel& m, const std::vector<LabeledUtterance>& data,
                         const TrainSqaConfig& cfg) {
  require(!data.empty(), "train_sqa: empty dataset");
  require(cfg.epochs >= 1, "train_sqa: need at least one epoch");
  require(cfg.lr > 0.0, "train_sqa: learning rate must be positive");

  std::vector<std::size_t> train_rows, val_rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].split == "train") train_rows.push_back(i);
    if (data[i].split == "val") val_rows.push_back(i);
    require(data[i].labels.values.size() == m.registry.size(),
            "train_sqa: label vector misaligned with registry");
  }
  require(!train_rows.empty(), "train_sqa: no rows with split == train");

  const std::size_t n_heads = m.head_w.size();
  TrainSqaReport report;
  report.label_mean.assign(n_heads, 0.0);
  report.label_std.assign(n_heads, 1.0);

  // Training-set standardization constants per head.
  for (std::size_t k = 0; k < n_heads; ++k) {
    const std::size_t ri = m.predicted_idx[k];
    double sum = 0.0, sum2 = 0.0;
    std::size_t n = 0;
    for (std::size_t row : train_rows) {
      if (!data[row].labels.present[ri]) continue;
      const double v = data[row].labels.values[ri];
      sum += v;
      sum2 += v * v;
      ++n;
    }
    if (n == 0) continue;
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, sum2 / static_cast<double>(n) - mean * mean);
    report.label_mean[k] = mean;
    report.label_std[k] = std::max(std::sqrt(var), 1e-6);
  }

  std::vector<Tensor*> params;
  std::vector<bool> updatable;
  for (auto& t : m.enc_w) {
    params.push_back(&t);
    updatable.push_back(!cfg.freeze_encoder);
  }
  for (auto& t : m.enc_b) {
    params.push_back(&t);
    updatable.push_back(!cfg.freeze_encoder);
  }
  for (auto& t : m.head_w) {
    params.push_back(&t);
    updatable.push_back(true);
  }
  for (auto& t : m.head_b) {
    params.push_back(&t);
    updatable.push_back(true);
  }
  opt::AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  adam.warmup_steps = cfg.warmup_steps;
  opt::Adam opt(params, adam);

  long global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_rows;
    Rng shuffle_rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_u64() % i]);

    double epoch_loss = 0.0;
    std::size_t epoch_terms = 0;
    for (std::size_t row : order) {
      const LabeledUtterance& u = data[row];
      std::vector<std::size_t> present_heads;
      for (std::size_t k = 0; k < n_heads; ++k)
        if (u.labels.present[m.predicted_idx[k]]) present_heads.push_back(k);
      if (present_heads.empty()) continue;

      ad::Tape tape;
      const ParamNodes p = register_params(m, tape, true);
      const ad::NodeId x = tape.leaf(Tensor::vector(u.wave.samples), false);
      const HeadNodes heads = back_half(m, tape, front_end(m, tape, x, p), p);

      ad::NodeId loss = 0;
      bool first = true;
      const double norm = 1.0 / static_cast<double>(present_heads.size());
      for (std::size_t k : present_heads) {
        const double label = u.labels.values[m.predicted_idx[k]];
        ad::NodeId term = tape.abs(tape.sub(heads.scores[k], tape.constant(label)));
        term = tape.mul(term, tape.constant(norm / report.label_std[k]));
        loss = first ? term : tape.add(loss, term);
        first = false;
      }
      const double loss_v = tape.value(loss).item();
      require(std::isfinite(loss_v),
              "train_sqa: non-finite loss at step " + std::to_string(global_step));
      epoch_loss += loss_v;
      ++epoch_terms;

      const ad::Gradients grads = tape.backward(loss);
      std::vector<const Tensor*> g(params.size(), nullptr);
      const std::vector<ad::NodeId> ids = [&] {
        std::vector<ad::NodeId> v;
        v.insert(v.end(), p.enc_w.begin(), p.enc_w.end());
        v.insert(v.end(), p.enc_b.begin(), p.enc_b.end());
        v.insert(v.end(), p.head_w.begin(), p.head_w.end());
        v.insert(v.end(), p.head_b.begin(), p.head_b.end());
        return v;
      }();
      for (std::size_t i = 0; i < params.size(); ++i)
        if (updatable[i] && grads.has(ids[i])) g[i] = &grads.at(ids[i]);
      opt.update(params, g);
      ++global_step;
    }
    report.epoch_loss.push_back(epoch_terms ? epoch_loss / static_cast<double>(epoch_terms)
                                            : 0.0);
  }

  // Held-out correlations per head.
  for (std::size_t k = 0; k < n_heads; ++k) {
    const std::size_t ri = m.predicted_idx[k];
    std::vector<double> preds, labels;
    for (std::size_t row : val_rows) {
      if (!data[row].labels.present[ri]) continue;
      const SqaOutput out = sqa_forward(m, data[row].wave);
      preds.push_back(out.scores.values[ri]);
      labels.push_back(data[row].labels.values[ri]);
    }
    MetricCorr corr;
    corr.name = m.registry.at(ri).name;
    corr.n = static_cast<int>(preds.size());
    if (preds.size() >= 2) {
      corr.lcc = corr_or_nan([&] { return metrics::pearson(preds, labels); });
      corr.srcc = corr_or_nan([&] { return metrics::spearman(preds, labels); });
    } else {
      corr.lcc = corr.srcc = std::numeric_limits<double>::quiet_NaN();
    }
    report.validation.push_back(corr);
  }
  return report;
}

// ---- Checkpoints ---------------------------------------------------------------

void save_sqa(const std::string& path, const SqaModel& m) {
  ckpt::Checkpoint c;
  c.kind = "sqa";
  c.config_json = m.config.to_json();
  c.registry_hash = m.registry.hash();
  for (std::size_t i = 0; i < m.enc_w.size(); ++i) {
    c.tensors.push_back({"enc_w." + std::to_string(i), m.enc_w[i]});
    c.tensors.push_back({"enc_b." + std::to_string(i), m.enc_b[i]});
  }
  for (std::size_t k = 0; k < m.head_w.size(); ++k) {
    c.tensors.push_back({"head_w." + m.config.predicted[k], m.head_w[k]});
    c.tensors.push_back({"head_b." + m.config.predicted[k], m.head_b[k]});
  }
  ckpt::save_checkpoint(path, c);
}

SqaModel load_sqa(const std::string& path, const metrics::MetricRegistry& reg) {
  const ckpt::Checkpoint c = ckpt::load_checkpoint(path);
  require(c.kind == "sqa", "load_sqa: checkpoint kind is '" + c.kind + "', expected 'sqa'");
  require(c.registry_hash == reg.hash(),
          "load_sqa: checkpoint was trained against a different registry");
  SqaModel m = init_sqa(SqaConfig::from_json_text(c.config_json), reg, 0);
  for (std::size_t i = 0; i < m.enc_w.size(); ++i) {
    const Tensor& w = c.at("enc_w." + std::to_string(i));
    const Tensor& b = c.at("enc_b." + std::to_string(i));
    require(w.same_shape(m.enc_w[i]) && b.same_shape(m.enc_b[i]),
            "load_sqa: encoder tensor shape mismatch at layer " + std::to_string(i));
    m.enc_w[i] = w;
    m.enc_b[i] = b;
  }
  for (std::size_t k = 0; k < m.head_w.size(); ++k) {
    const Tensor& w = c.at("head_w." + m.config.predicted[k]);
    const Tensor& b = c.at("head_b." + m.config.predicted[k]);
    require(w.same_shape(m.head_w[k]) && b.same_shape(m.head_b[k]),
            "load_sqa: head tensor shape mismatch for " + m.config.predicted[k]);
    m.head_w[k] = w;
    m.head_b[k] = b;
  }
  return m;
}

}  // namespace seqa::sqa
