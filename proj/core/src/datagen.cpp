#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "seqa/datagen.hpp"
#include "seqa/rng.hpp"

namespace seqa::datagen {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr double kPi = 3.14159265358979323846;

// Log-spaced second-formant grid; one entry per transcript symbol.
double f2_grid(int symbol) {
  return 900.0 * std::pow(2000.0 / 900.0, static_cast<double>(symbol) / (kNumSymbols - 1));
}

// Two-pole resonator y[n] = x[n] + 2 r cos(theta) y[n-1] - r^2 y[n-2].
struct Resonator {
  double c1 = 0.0, c2 = 0.0, y1 = 0.0, y2 = 0.0;

  void tune(double freq_hz, double bw_hz, int sr) {
    const double r = std::exp(-kPi * bw_hz / sr);
    c1 = 2.0 * r * std::cos(2.0 * kPi * freq_hz / sr);
    c2 = -r * r;
  }
  double step(double x) {
    const double y = x + c1 * y1 + c2 * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_tag(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace

CleanSpeech synth_clean(std::uint64_t seed, double duration_s, int sample_rate) {
  require(duration_s >= 0.3, "synth_clean: duration must be at least 0.3 s");
  require(sample_rate >= 8000, "synth_clean: sample rate too low");
  const std::size_t n = static_cast<std::size_t>(duration_s * sample_rate);
  Rng rng(seed);

  // Draw order is part of the determinism contract: voice parameters first,
  // then the syllable plan, then the per-sample breath noise.
  const double f0_base = rng.uniform(95.0, 220.0);
  const double drift_rate = rng.uniform(0.2, 0.6);
  const double drift_phase = rng.uniform(0.0, 2.0 * kPi);
  const double f1 = rng.uniform(420.0, 780.0);
  const double f3 = rng.uniform(2300.0, 3000.0);

  struct Syllable {
    std::size_t start, length;
    int symbol;
    double amp;
  };
  std::vector<Syllable> plan;
  double cursor = rng.uniform(0.03, 0.08);
  while (true) {
    const double dur = rng.uniform(0.10, 0.20);
    const double gap = rng.uniform(0.035, 0.095);
    if (cursor + dur > duration_s - 0.02) break;
    const int symbol = static_cast<int>(rng.uniform_int(kNumSymbols));
    const double amp = rng.uniform(0.6, 1.0);
    plan.push_back({static_cast<std::size_t>(cursor * sample_rate),
                    static_cast<std::size_t>(dur * sample_rate), symbol, amp});
    cursor += dur + gap;
  }
  require(!plan.empty(), "synth_clean: duration too short for any syllable");

  // Trapezoid envelope (20% attack/release) and per-syllable F2 target.
  std::vector<double> env(n, 0.0);
  std::vector<double> f2_target(n, 1400.0);
  for (const auto& s : plan) {
    for (std::size_t k = 0; k < s.length && s.start + k < n; ++k) {
      const double x = static_cast<double>(k) / static_cast<double>(s.length);
      const double trap = std::min({1.0, x / 0.2, (1.0 - x) / 0.2});
      env[s.start + k] = s.amp * std::max(0.0, trap);
      f2_target[s.start + k] = f2_grid(s.symbol);
    }
  }

  Resonator r1, r2, r3;
  r1.tune(f1, 90.0, sample_rate);
  r3.tune(f3, 170.0, sample_rate);
  double f2_cur = f2_grid(plan.front().symbol);

  // Enough harmonics to put source energy under every F2 target (~2 kHz)
  // even when the drift lowers f0.
  const int n_harm =
      std::clamp(static_cast<int>(3000.0 / (f0_base * 1.08)), 8, 30);

  std::vector<double> y(n);
  double phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate;
    double f0 = f0_base * (1.0 + 0.08 * std::sin(2.0 * kPi * drift_rate * t + drift_phase));
    f0 = std::clamp(f0, 80.0, 300.0);
    phase += 2.0 * kPi * f0 / sample_rate;
    double src = 0.0;
    for (int h = 1; h <= n_harm; ++h) src += std::sin(h * phase) / std::sqrt(h);

    // Glide toward the syllable's formant target to avoid clicks.
    f2_cur += 0.002 * (f2_target[i] - f2_cur);
    r2.tune(f2_cur, 110.0, sample_rate);

    const double shaped = r3.step(r2.step(r1.step(src)));
    y[i] = shaped * env[i];
  }

  // Formant gain varies a lot across F2 targets; level every syllable so the
  // detector sees comparable peaks, then add the breath-noise floor.
  for (const auto& s : plan) {
    double ev_peak = 0.0;
    const std::size_t end = std::min(n, s.start + s.length);
    for (std::size_t i = s.start; i < end; ++i) ev_peak = std::max(ev_peak, std::abs(y[i]));
    if (ev_peak <= 0.0) continue;
    const double g = s.amp / ev_peak;
    for (std::size_t i = s.start; i < end; ++i) y[i] *= g;
  }
  for (std::size_t i = 0; i < n; ++i) y[i] += 0.002 * (2.0 * rng.uniform() - 1.0);

  double peak = 0.0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  const double scale = 0.5 / peak;
  for (double& v : y) v *= scale;

  CleanSpeech out;
  out.wave = signal::Waveform{std::move(y), sample_rate};
  for (const auto& s : plan) out.events.push_back({s.start, s.length, s.symbol});
  return out;
}

signal::Waveform synth_noise(std::uint64_t seed, std::size_t n_samples, int sample_rate,
                             NoiseColor color) {
  require(n_samples > 0, "synth_noise: empty request");
  Rng rng(seed);
  std::vector<double> y(n_samples);
  if (color == NoiseColor::kWhite) {
    for (auto& v : y) v = 2.0 * rng.uniform() - 1.0;
  } else {
    // Paul Kellet's economy pink filter over white noise.
    double b0 = 0.0, b1 = 0.0, b2 = 0.0;
    for (auto& v : y) {
      const double w = 2.0 * rng.uniform() - 1.0;
      b0 = 0.99765 * b0 + w * 0.0990460;
      b1 = 0.96300 * b1 + w * 0.2965164;
      b2 = 0.57000 * b2 + w * 1.0526913;
      v = 0.2 * (b0 + b1 + b2 + w * 0.1848);
    }
  }
  double peak = 0.0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  const double scale = 0.5 / peak;
  for (double& v : y) v *= scale;
  return signal::Waveform{std::move(y), sample_rate};
}

std::vector<int> pseudo_recognize(const signal::Waveform& w) {
  const int sr = w.sample_rate;
  const std::size_t win = static_cast<std::size_t>(0.02 * sr);
  const std::size_t hop = static_cast<std::size_t>(0.01 * sr);
  if (w.samples.size() < win) return {};

  const std::size_t n_frames = (w.samples.size() - win) / hop + 1;
  std::vector<double> rms(n_frames);
  for (std::size_t t = 0; t < n_frames; ++t) {
    double e = 0.0;
    for (std::size_t k = 0; k < win; ++k) {
      const double v = w.samples[t * hop + k];
      e += v * v;
    }
    rms[t] = std::sqrt(e / static_cast<double>(win));
  }
  const double peak = *std::max_element(rms.begin(), rms.end());
  // The lower quartile sits in the inter-syllable gaps on clean speech and on
  // the noise floor otherwise; staying above both keeps the detector from
  // merging everything in heavy noise.
  std::vector<double> sorted = rms;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(n_frames / 4), sorted.end());
  const double q25 = sorted[n_frames / 4];
  const double threshold = std::max(0.25 * peak, 1.3 * q25);

  std::vector<int> symbols;
  std::size_t t = 0;
  while (t < n_frames) {
    if (rms[t] <= threshold) {
      ++t;
      continue;
    }
    std::size_t end = t;
    while (end < n_frames && rms[end] > threshold) ++end;
    if (end - t >= 3) {  // at least ~40 ms of activity
      const std::size_t s0 = t * hop;
      const std::size_t s1 = std::min(w.samples.size(), (end - 1) * hop + win);
      std::size_t len = s1 - s0;
      std::size_t n_fft = 1;
      while (n_fft < len) n_fft <<= 1;
      std::vector<std::complex<double>> buf(n_fft, 0.0);
      for (std::size_t k = 0; k < len; ++k) {
        const double hann = 0.5 - 0.5 * std::cos(2.0 * kPi * k / (len - 1));
        buf[k] = w.samples[s0 + k] * hann;
      }
      signal::fft_inplace(buf, false);

      // Grid-band matched energies with f^2 pre-emphasis (counteracts the
      // low-frequency source tilt); the loudest band names the symbol.
      double best_e = 0.0;
      int best = -1;
      for (int s = 0; s < kNumSymbols; ++s) {
        const double fc = f2_grid(s);
        double e = 0.0;
        for (std::size_t k = 1; k <= n_fft / 2; ++k) {
          const double f = static_cast<double>(k) * sr / static_cast<double>(n_fft);
          if (f < fc / 1.06 || f > fc * 1.06) continue;
          e += std::norm(buf[k]) * f * f;
        }
        if (e > best_e) {
          best_e = e;
          best = s;
        }
      }
      if (best >= 0) symbols.push_back(best);
    }
    t = end;
  }
  return symbols;
}

std::vector<std::string> DegradeRecipe::tags() const {
  std::vector<std::string> t;
  if (reverb_rt60_s) t.push_back("reverb_rt60=" + format_tag(*reverb_rt60_s));
  if (noise_snr_db)
    t.push_back(std::string(noise_color == NoiseColor::kPink ? "pink" : "white") + "_snr=" +
                format_tag(*noise_snr_db));
  if (bandlimit_hz) t.push_back("bandlimit=" + format_tag(*bandlimit_hz));
  if (gain) t.push_back("gain=" + format_tag(*gain));
  if (clip_level) t.push_back("clip=" + format_tag(*clip_level));
  return t;
}

Scene mix_at_snr(const signal::Waveform& clean, const signal::Waveform& noise, double snr_db) {
  require(clean.samples.size() == noise.samples.size(), "mix_at_snr: length mismatch");
  require(clean.sample_rate == noise.sample_rate, "mix_at_snr: sample-rate mismatch");
  require(std::isfinite(snr_db), "mix_at_snr: snr must be finite");
  double ec = 0.0, en = 0.0;
  for (double v : clean.samples) ec += v * v;
  for (double v : noise.samples) en += v * v;
  require(ec > 0.0, "mix_at_snr: silent clean signal");
  require(en > 0.0, "mix_at_snr: silent noise signal");

  const double g = std::sqrt(ec / (en * std::pow(10.0, snr_db / 10.0)));
  Scene s;
  s.clean = clean;
  s.snr_db = snr_db;
  std::vector<double> scaled(noise.samples.size());
  std::vector<double> mix(noise.samples.size());
  for (std::size_t i = 0; i < noise.samples.size(); ++i) {
    scaled[i] = g * noise.samples[i];
    mix[i] = clean.samples[i] + scaled[i];
  }
  s.noise = signal::Waveform{std::move(scaled), clean.sample_rate};
  s.mixture = signal::Waveform{std::move(mix), clean.sample_rate};
  s.tags = {"mix_snr=" + format_tag(snr_db)};
  return s;
}

signal::Waveform degrade(const signal::Waveform& w, const DegradeRecipe& r) {
  const int sr = w.sample_rate;
  if (r.reverb_rt60_s)
    require(*r.reverb_rt60_s > 0.0 && *r.reverb_rt60_s <= 2.0, "degrade: rt60 out of range");
  if (r.noise_snr_db) require(std::isfinite(*r.noise_snr_db), "degrade: noise snr not finite");
  if (r.bandlimit_hz)
    require(*r.bandlimit_hz > 0.0 && *r.bandlimit_hz <= sr / 2.0,
            "degrade: bandlimit cutoff out of range");
  if (r.gain) require(*r.gain > 0.0 && *r.gain <= 8.0, "degrade: gain out of range");
  if (r.clip_level) require(*r.clip_level > 0.0, "degrade: clip level must be positive");

  std::vector<double> y = w.samples;
  const std::size_t n = y.size();

  if (r.reverb_rt60_s) {
    const double rt60 = *r.reverb_rt60_s;
    const std::size_t rir_len =
        std::min({static_cast<std::size_t>(rt60 * sr), static_cast<std::size_t>(0.4 * sr), n});
    Rng rng(derive_seed(r.seed, 7));
    std::vector<double> h(rir_len);
    h[0] = 1.0;
    for (std::size_t k = 1; k < rir_len; ++k) {
      const double decay = std::pow(10.0, -3.0 * static_cast<double>(k) / (rt60 * sr));
      h[k] = 0.4 * (2.0 * rng.uniform() - 1.0) * decay;
    }
    double h_norm = 0.0;
    for (double v : h) h_norm += v * v;
    h_norm = std::sqrt(h_norm);
    std::vector<double> conv(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      const std::size_t kmax = std::min(i + 1, rir_len);
      for (std::size_t k = 0; k < kmax; ++k) acc += h[k] * y[i - k];
      conv[i] = acc / h_norm;
    }
    y = std::move(conv);
  }

  if (r.noise_snr_db) {
    const signal::Waveform v = synth_noise(derive_seed(r.seed, 17), n, sr, r.noise_color);
    double ey = 0.0, ev = 0.0;
    for (double s : y) ey += s * s;
    for (double s : v.samples) ev += s * s;
    require(ey > 0.0, "degrade: cannot set an SNR against a silent signal");
    const double g = std::sqrt(ey / (ev * std::pow(10.0, *r.noise_snr_db / 10.0)));
    for (std::size_t i = 0; i < n; ++i) y[i] += g * v.samples[i];
  }

  if (r.bandlimit_hz) {
    std::size_t n_fft = 1;
    while (n_fft < n) n_fft <<= 1;
    std::vector<std::complex<double>> buf(n_fft, 0.0);
    for (std::size_t i = 0; i < n; ++i) buf[i] = y[i];
    signal::fft_inplace(buf, false);
    for (std::size_t k = 0; k <= n_fft / 2; ++k) {
      const double f = static_cast<double>(k) * sr / static_cast<double>(n_fft);
      if (f > *r.bandlimit_hz) {
        buf[k] = 0.0;
        if (k > 0 && k < n_fft / 2) buf[n_fft - k] = 0.0;
      }
    }
    signal::fft_inplace(buf, true);
    for (std::size_t i = 0; i < n; ++i) y[i] = buf[i].real();
  }

  if (r.gain)
    for (double& s : y) s *= *r.gain;

  if (r.clip_level)
    for (double& s : y) s = std::clamp(s, -*r.clip_level, *r.clip_level);

  return signal::Waveform{std::move(y), sr};
}

namespace {

std::string split_for(int source_index, int n_sources, double train_frac, double val_frac) {
  if (n_sources < 3) return source_index == 0 ? "train" : "val";
  int n_train = static_cast<int>(std::floor(train_frac * n_sources + 0.5));
  int n_val = static_cast<int>(std::floor(val_frac * n_sources + 0.5));
  n_train = std::clamp(n_train, 1, n_sources - 2);
  n_val = std::clamp(n_val, 1, n_sources - 1 - n_train);
  if (source_index < n_train) return "train";
  if (source_index < n_train + n_val) return "val";
  return "test";
}

signal::Waveform quantized(const signal::Waveform& w) {
  std::vector<double> s(w.samples.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = quantize_f32(w.samples[i]);
  return signal::Waveform{std::move(s), w.sample_rate};
}

}  // namespace

DatasetManifest build_dataset(const BuildConfig& cfg, const metrics::MetricRegistry& reg) {
  require(cfg.n_sources >= 1, "build_dataset: need at least one source");
  require(cfg.variants_per_source >= 1, "build_dataset: need at least one variant");
  require(cfg.duration_s >= 0.8, "build_dataset: duration too short for the oracle set");
  require(cfg.train_frac > 0.0 && cfg.val_frac >= 0.0 &&
              cfg.train_frac + cfg.val_frac < 1.0 + 1e-12,
          "build_dataset: invalid split fractions");
  require(!cfg.out_dir.empty(), "build_dataset: output directory required");

  const fs::path root(cfg.out_dir);
  fs::create_directories(root / "wav");

  DatasetManifest manifest;
  manifest.manifest_path = (root / "manifest.jsonl").string();
  manifest.labels_path = (root / "labels.csv").string();

  std::ofstream mf(manifest.manifest_path, std::ios::trunc);
  require(mf.good(), "build_dataset: cannot write manifest");
  std::ofstream lf(manifest.labels_path, std::ios::trunc);
  require(lf.good(), "build_dataset: cannot write labels");

  lf << "utterance_id,source_id,split";
  for (std::size_t k = 0; k < reg.size(); ++k) lf << "," << reg.at(k).name;
  lf << "\n";

  for (int s = 0; s < cfg.n_sources; ++s) {
    const std::uint64_t sub = derive_seed(cfg.seed, static_cast<std::uint64_t>(s));
    const std::string source_id = "src" + std::to_string(s);
    const std::string split = split_for(s, cfg.n_sources, cfg.train_frac, cfg.val_frac);

    Rng source_rng(derive_seed(sub, 3));
    const double dur = cfg.duration_s * source_rng.uniform(0.95, 1.25);
    const CleanSpeech clean = synth_clean(derive_seed(sub, 0), dur, cfg.sample_rate);
    const std::size_t n = clean.wave.samples.size();

    const signal::Waveform noise =
        synth_noise(derive_seed(sub, 1), n, cfg.sample_rate,
                    s % 2 == 0 ? NoiseColor::kWhite : NoiseColor::kPink);
    const double mix_snr = Rng(derive_seed(sub, 2)).uniform(-5.0, 15.0);
    const Scene scene = mix_at_snr(clean.wave, noise, mix_snr);

    const std::string clean_rel = "wav/" + source_id + "_clean.wav";
    const std::string mix_rel = "wav/" + source_id + "_mix.wav";
    wav_write((root / clean_rel).string(), clean.wave, 32);
    wav_write((root / mix_rel).string(), scene.mixture, 32);

    const signal::Waveform q_clean = quantized(clean.wave);
    const std::vector<int> transcript = clean.transcript();

    for (int v = 0; v < cfg.variants_per_source; ++v) {
      Rng vr(derive_seed(sub, 100 + static_cast<std::uint64_t>(v)));
      DegradeRecipe recipe;
      recipe.noise_snr_db = vr.uniform(-5.0, 25.0);
      recipe.noise_color = vr.bernoulli(0.5) ? NoiseColor::kWhite : NoiseColor::kPink;
      if (vr.bernoulli(0.5)) recipe.reverb_rt60_s = vr.uniform(0.15, 0.45);
      if (vr.bernoulli(0.35))
        recipe.bandlimit_hz = std::min(vr.uniform(2000.0, 6500.0), 0.45 * cfg.sample_rate);
      if (vr.bernoulli(0.6)) recipe.gain = vr.uniform(0.4, 1.4);
      if (vr.bernoulli(0.25)) recipe.clip_level = vr.uniform(0.3, 0.9);
      recipe.seed = derive_seed(sub, 200 + static_cast<std::uint64_t>(v));

      const signal::Waveform degraded = degrade(clean.wave, recipe);
      const std::string utt_id = source_id + "_v" + std::to_string(v);
      const std::string deg_rel = "wav/" + utt_id + ".wav";
      wav_write((root / deg_rel).string(), degraded, 32);

      // Label against the float32 contents of the files so every CSV value is
      // re-computable from disk.
      const signal::Waveform q_deg = quantized(degraded);
      const std::vector<int> hyp = pseudo_recognize(q_deg);
      const metrics::MetricVector mv =
          metrics::evaluate_pair(reg, q_clean, q_deg, &transcript, &hyp, cfg.sdr_filter_len);

      lf << utt_id << "," << source_id << "," << split;
      for (std::size_t k = 0; k < reg.size(); ++k) {
        lf << ",";
        if (mv.present[k]) lf << format_g17(mv.values[k]);
      }
      lf << "\n";

      ManifestEntry e;
      e.utterance_id = utt_id;
      e.source_id = source_id;
      e.split = split;
      e.clean_path = clean_rel;
      e.noisy_path = mix_rel;
      e.degraded_path = deg_rel;
      e.transcript = transcript;
      e.tags = recipe.tags();

      json row;
      row["utterance_id"] = e.utterance_id;
      row["source_id"] = e.source_id;
      row["split"] = e.split;
      row["clean_path"] = e.clean_path;
      row["noisy_path"] = e.noisy_path;
      row["degraded_path"] = e.degraded_path;
      row["transcript"] = e.transcript;
      row["tags"] = e.tags;
      mf << row.dump() << "\n";

      // The file stores paths relative to the dataset root; the in-memory
      // manifest resolves them like load_manifest does.
      e.clean_path = (root / e.clean_path).string();
      e.noisy_path = (root / e.noisy_path).string();
      e.degraded_path = (root / e.degraded_path).string();
      manifest.entries.push_back(std::move(e));
    }
  }

  mf.close();
  lf.close();
  require(mf.good() && lf.good(), "build_dataset: flush failed");

  std::ofstream rf((root / "registry.json").string(), std::ios::trunc);
  rf << reg.to_json() << "\n";
  require(rf.good(), "build_dataset: cannot write registry copy");
  return manifest;
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "load_manifest: cannot open " + path);
  const fs::path base = fs::path(path).parent_path();

  DatasetManifest m;
  m.manifest_path = path;
  m.labels_path = (base / "labels.csv").string();
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const json row = json::parse(line);
    ManifestEntry e;
    e.utterance_id = row.at("utterance_id").get<std::string>();
    e.source_id = row.at("source_id").get<std::string>();
    e.split = row.at("split").get<std::string>();
    e.clean_path = (base / row.at("clean_path").get<std::string>()).string();
    e.noisy_path = (base / row.at("noisy_path").get<std::string>()).string();
    e.degraded_path = (base / row.at("degraded_path").get<std::string>()).string();
    e.transcript = row.at("transcript").get<std::vector<int>>();
    e.tags = row.at("tags").get<std::vector<std::string>>();
    m.entries.push_back(std::move(e));
  }
  require(!m.entries.empty(), "load_manifest: no entries in " + path);
  return m;
}

}  // namespace seqa::datagen
