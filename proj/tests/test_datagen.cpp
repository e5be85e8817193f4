#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "seqa/datagen.hpp"
#include "seqa/metrics.hpp"
#include "seqa/rng.hpp"
#include "seqa/signal.hpp"

using namespace seqa;
using namespace seqa::datagen;
using signal::Waveform;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("seqa_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<unsigned char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f),
                                    std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  REQUIRE(f.good());
}

double energy(const std::vector<double>& s) {
  double e = 0.0;
  for (double v : s) e += v * v;
  return e;
}

std::vector<std::complex<double>> padded_spectrum(const Waveform& w) {
  std::size_t n_fft = 1;
  while (n_fft < w.samples.size()) n_fft <<= 1;
  std::vector<std::complex<double>> buf(n_fft, 0.0);
  for (std::size_t i = 0; i < w.samples.size(); ++i) buf[i] = w.samples[i];
  signal::fft_inplace(buf, false);
  return buf;
}

double spectral_centroid(const Waveform& w) {
  const auto buf = padded_spectrum(w);
  const std::size_t n_fft = buf.size();
  double num = 0.0, den = 0.0;
  for (std::size_t k = 1; k <= n_fft / 2; ++k) {
    const double f = static_cast<double>(k) * w.sample_rate / static_cast<double>(n_fft);
    const double p = std::norm(buf[k]);
    num += f * p;
    den += p;
  }
  return num / den;
}

double band_energy_fraction(const Waveform& w, double lo_hz, double hi_hz) {
  const auto buf = padded_spectrum(w);
  const std::size_t n_fft = buf.size();
  double in_band = 0.0, total = 0.0;
  for (std::size_t k = 1; k <= n_fft / 2; ++k) {
    const double f = static_cast<double>(k) * w.sample_rate / static_cast<double>(n_fft);
    const double p = std::norm(buf[k]);
    total += p;
    if (f >= lo_hz && f <= hi_hz) in_band += p;
  }
  return in_band / total;
}

// Peak of the amplitude-envelope spectrum between 1 and 20 Hz: short-frame
// RMS track, mean removed, zero-padded FFT, argmax bin.
double modulation_peak_hz(const Waveform& w) {
  const std::size_t win = static_cast<std::size_t>(0.02 * w.sample_rate);
  const std::size_t hop = win / 2;
  REQUIRE(w.samples.size() > win);
  const std::size_t frames = (w.samples.size() - win) / hop + 1;
  std::vector<double> env(frames);
  double mean = 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    double e = 0.0;
    for (std::size_t k = 0; k < win; ++k) e += w.samples[t * hop + k] * w.samples[t * hop + k];
    env[t] = std::sqrt(e / static_cast<double>(win));
    mean += env[t];
  }
  mean /= static_cast<double>(frames);
  std::size_t n_fft = 4;
  while (n_fft < 4 * frames) n_fft <<= 1;
  std::vector<std::complex<double>> buf(n_fft, 0.0);
  for (std::size_t t = 0; t < frames; ++t) buf[t] = env[t] - mean;
  signal::fft_inplace(buf, false);
  const double env_rate = static_cast<double>(w.sample_rate) / static_cast<double>(hop);
  double best = -1.0, best_f = 0.0;
  for (std::size_t k = 1; k <= n_fft / 2; ++k) {
    const double f = static_cast<double>(k) * env_rate / static_cast<double>(n_fft);
    if (f < 1.0 || f > 20.0) continue;
    const double p = std::norm(buf[k]);
    if (p > best) {
      best = p;
      best_f = f;
    }
  }
  return best_f;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  cells.push_back(cur);
  return cells;
}

}  // namespace

// ---- WAV I/O ------------------------------------------------------------------

TEST_CASE("float32 wav round-trip is bit exact") {
  const fs::path dir = fresh_dir("wav_f32");
  Rng rng(5);
  std::vector<double> s(777);
  for (auto& v : s) v = static_cast<double>(static_cast<float>(2.0 * rng.uniform() - 1.0));
  const Waveform w{s, 22050};
  wav_write((dir / "x.wav").string(), w, 32);
  const Waveform back = wav_read((dir / "x.wav").string());
  CHECK(back.sample_rate == 22050);
  REQUIRE(back.samples.size() == s.size());
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(back.samples[i] == s[i]);
  fs::remove_all(dir);
}

TEST_CASE("pcm16 scaling and clamping") {
  const fs::path dir = fresh_dir("wav_pcm");
  // The top of the PCM16 grid is 32767/32768; values at or above it clamp.
  const Waveform w{{0.99999, -1.0, 0.5, -0.25, 0.0}, 16000};
  wav_write((dir / "x.wav").string(), w, 16);
  const Waveform back = wav_read((dir / "x.wav").string());
  REQUIRE(back.samples.size() == 5);
  CHECK(back.samples[0] == 32767.0 / 32768.0);
  CHECK(back.samples[1] == -1.0);
  CHECK(back.samples[2] == 0.5);
  CHECK(back.samples[3] == -0.25);
  CHECK(back.samples[4] == 0.0);

  // General round-trip error stays within one quantization step.
  Rng rng(6);
  std::vector<double> s(300);
  for (auto& v : s) v = 2.0 * rng.uniform() - 1.0;
  wav_write((dir / "y.wav").string(), Waveform{s, 16000}, 16);
  const Waveform y = wav_read((dir / "y.wav").string());
  REQUIRE(y.samples.size() == s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double clamped = std::clamp(s[i], -1.0, 1.0 - 1.0 / 32768.0);
    CHECK(std::abs(y.samples[i] - clamped) <= 0.5 / 32768.0 + 1e-12);
  }
  fs::remove_all(dir);
}

TEST_CASE("wav reader rejects malformed input with typed errors") {
  const fs::path dir = fresh_dir("wav_bad");
  Rng rng(7);
  std::vector<double> s(100);
  for (auto& v : s) v = 2.0 * rng.uniform() - 1.0;
  const fs::path good = dir / "good.wav";
  wav_write(good.string(), Waveform{s, 16000}, 16);
  const std::vector<unsigned char> bytes = slurp(good);
  REQUIRE(bytes.size() == 44 + 200);  // canonical PCM16 layout

  CHECK_THROWS_AS(wav_read((dir / "missing.wav").string()), WavError);

  SUBCASE("truncated header") {
    std::vector<unsigned char> b(bytes.begin(), bytes.begin() + 30);
    spit(dir / "bad.wav", b);
    CHECK_THROWS_AS(wav_read((dir / "bad.wav").string()), WavError);
  }
  SUBCASE("truncated data chunk") {
    std::vector<unsigned char> b(bytes.begin(), bytes.begin() + 44 + 37);
    spit(dir / "bad.wav", b);
    CHECK_THROWS_AS(wav_read((dir / "bad.wav").string()), WavError);
  }
  SUBCASE("garbage magic") {
    std::vector<unsigned char> b = bytes;
    b[0] = 'X';
    b[1] = 'Y';
    spit(dir / "bad.wav", b);
    CHECK_THROWS_AS(wav_read((dir / "bad.wav").string()), WavError);
  }
  SUBCASE("multi-channel") {
    std::vector<unsigned char> b = bytes;
    b[22] = 2;  // channel count in the fmt body
    spit(dir / "bad.wav", b);
    CHECK_THROWS_AS(wav_read((dir / "bad.wav").string()), WavError);
  }
  SUBCASE("unsupported codec") {
    std::vector<unsigned char> b = bytes;
    b[20] = 7;  // mu-law format tag
    spit(dir / "bad.wav", b);
    CHECK_THROWS_AS(wav_read((dir / "bad.wav").string()), WavError);
  }

  CHECK_THROWS_AS(wav_write((dir / "z.wav").string(), Waveform{s, 16000}, 24), WavError);
  fs::remove_all(dir);
}

// ---- Synthesis ----------------------------------------------------------------

TEST_CASE("synth_clean is deterministic and event-structured") {
  const CleanSpeech a = synth_clean(42, 1.5, 16000);
  const CleanSpeech b = synth_clean(42, 1.5, 16000);
  REQUIRE(a.wave.samples.size() == b.wave.samples.size());
  CHECK(a.wave.samples == b.wave.samples);
  REQUIRE(a.events.size() == b.events.size());
  for (std::size_t i = 0; i < a.events.size(); ++i)
    CHECK(a.events[i].symbol == b.events[i].symbol);

  const CleanSpeech c = synth_clean(43, 1.5, 16000);
  CHECK(a.wave.samples != c.wave.samples);

  CHECK(a.wave.sample_rate == 16000);
  CHECK(std::abs(static_cast<double>(a.wave.samples.size()) - 1.5 * 16000) <= 1.0);

  double peak = 0.0;
  for (double v : a.wave.samples) peak = std::max(peak, std::abs(v));
  CHECK(peak <= 0.5 + 1e-12);
  CHECK(peak >= 0.25);

  REQUIRE(a.events.size() >= 3);
  std::size_t prev_end = 0;
  for (const auto& e : a.events) {
    CHECK(e.symbol >= 0);
    CHECK(e.symbol < kNumSymbols);
    CHECK(e.length > 0);
    CHECK(e.start >= prev_end);
    CHECK(e.start + e.length <= a.wave.samples.size());
    prev_end = e.start + e.length;
  }
  CHECK(a.transcript().size() == a.events.size());
}

TEST_CASE("synthetic speech has speech-band spectrum and syllabic modulation") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const CleanSpeech sp = synth_clean(seed, 2.0, 16000);
    CAPTURE(seed);
    CHECK(spectral_centroid(sp.wave) < 4000.0);
    const double mod = modulation_peak_hz(sp.wave);
    CHECK(mod >= 3.0);
    CHECK(mod <= 8.0);
  }
}

TEST_CASE("synth_noise colors and determinism") {
  const Waveform w1 = synth_noise(9, 16384, 16000, NoiseColor::kWhite);
  const Waveform w2 = synth_noise(9, 16384, 16000, NoiseColor::kWhite);
  CHECK(w1.samples == w2.samples);
  const Waveform p1 = synth_noise(9, 16384, 16000, NoiseColor::kPink);
  CHECK(p1.samples != w1.samples);

  double peak_w = 0.0, peak_p = 0.0;
  for (double v : w1.samples) peak_w = std::max(peak_w, std::abs(v));
  for (double v : p1.samples) peak_p = std::max(peak_p, std::abs(v));
  CHECK(peak_w == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(peak_p == doctest::Approx(0.5).epsilon(1e-9));

  // Pink noise concentrates far more of its energy at the low end.
  const double low_w = band_energy_fraction(w1, 0.0, 500.0);
  const double low_p = band_energy_fraction(p1, 0.0, 500.0);
  CHECK(low_w < 0.15);
  CHECK(low_p > 2.0 * low_w);
}

TEST_CASE("pseudo_recognize tracks transcript quality monotonically") {
  double sum_clean = 0.0, sum_heavy = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const CleanSpeech sp = synth_clean(seed, 1.5, 16000);
    const std::vector<int> ref = sp.transcript();
    REQUIRE(!ref.empty());

    const double cer_clean = metrics::cer(ref, pseudo_recognize(sp.wave));
    CAPTURE(seed);
    CHECK(cer_clean <= 0.35);

    DegradeRecipe heavy;
    heavy.noise_snr_db = -3.0;
    heavy.reverb_rt60_s = 0.4;
    heavy.seed = seed;
    const double cer_heavy = metrics::cer(ref, pseudo_recognize(degrade(sp.wave, heavy)));
    CHECK(cer_heavy >= cer_clean);
    sum_clean += cer_clean;
    sum_heavy += cer_heavy;
  }
  CHECK(sum_heavy / 5.0 > sum_clean / 5.0 + 0.2);
}

// ---- Mixing -------------------------------------------------------------------

TEST_CASE("mix_at_snr hits the requested ratio exactly") {
  const CleanSpeech sp = synth_clean(3, 1.2, 16000);
  const Waveform noise = synth_noise(4, sp.wave.samples.size(), 16000);

  for (double snr : {-7.3, 0.0, 12.5}) {
    const Scene s = mix_at_snr(sp.wave, noise, snr);
    CAPTURE(snr);
    const double ec = energy(s.clean.samples);
    const double en = energy(s.noise.samples);
    const double measured = 10.0 * std::log10(ec / en);
    CHECK(measured == doctest::Approx(snr).epsilon(1e-9));
    REQUIRE(s.mixture.samples.size() == sp.wave.samples.size());
    for (std::size_t i = 0; i < s.mixture.samples.size(); ++i)
      CHECK(s.mixture.samples[i] == s.clean.samples[i] + s.noise.samples[i]);
  }

  SUBCASE("equal energies at 0 dB") {
    const Scene s = mix_at_snr(sp.wave, noise, 0.0);
    CHECK(energy(s.noise.samples) ==
          doctest::Approx(energy(sp.wave.samples)).epsilon(1e-9));
  }
  SUBCASE("very high snr leaves the clean signal") {
    const Scene s = mix_at_snr(sp.wave, noise, 100.0);
    double max_dev = 0.0;
    for (std::size_t i = 0; i < s.mixture.samples.size(); ++i)
      max_dev = std::max(max_dev, std::abs(s.mixture.samples[i] - sp.wave.samples[i]));
    CHECK(max_dev < 1e-4);
  }
  SUBCASE("errors") {
    const Waveform silent{std::vector<double>(sp.wave.samples.size(), 0.0), 16000};
    CHECK_THROWS_AS(mix_at_snr(silent, noise, 0.0), Error);
    CHECK_THROWS_AS(mix_at_snr(sp.wave, silent, 0.0), Error);
    const Waveform shorter{std::vector<double>(100, 0.1), 16000};
    CHECK_THROWS_AS(mix_at_snr(sp.wave, shorter, 0.0), Error);
    Waveform wrong_rate = noise;
    wrong_rate.sample_rate = 8000;
    CHECK_THROWS_AS(mix_at_snr(sp.wave, wrong_rate, 0.0), Error);
    CHECK_THROWS_AS(mix_at_snr(sp.wave, noise, std::nan("")), Error);
  }
}

// ---- Degradation --------------------------------------------------------------

TEST_CASE("degrade stages behave individually") {
  const CleanSpeech sp = synth_clean(11, 1.2, 16000);
  const Waveform& x = sp.wave;

  SUBCASE("empty recipe is the identity") {
    const Waveform y = degrade(x, DegradeRecipe{});
    CHECK(y.samples == x.samples);
    CHECK(y.sample_rate == x.sample_rate);
  }

  SUBCASE("gain scales exactly") {
    DegradeRecipe r;
    r.gain = 0.5;
    const Waveform y = degrade(x, r);
    REQUIRE(y.samples.size() == x.samples.size());
    for (std::size_t i = 0; i < x.samples.size(); ++i)
      CHECK(y.samples[i] == 0.5 * x.samples[i]);
  }

  SUBCASE("clip limits the waveform") {
    std::vector<double> sine(4000);
    for (std::size_t i = 0; i < sine.size(); ++i)
      sine[i] = 0.9 * std::sin(2.0 * M_PI * 220.0 * static_cast<double>(i) / 16000.0);
    DegradeRecipe r;
    r.clip_level = 0.5;
    const Waveform y = degrade(Waveform{sine, 16000}, r);
    double peak = 0.0;
    for (double v : y.samples) peak = std::max(peak, std::abs(v));
    CHECK(peak == doctest::Approx(0.5).epsilon(1e-12));
    for (std::size_t i = 0; i < sine.size(); ++i)
      CHECK(y.samples[i] == std::clamp(sine[i], -0.5, 0.5));
  }

  SUBCASE("bandlimit removes the stop band") {
    // Power-of-two length keeps the FFT brickwall exact end to end.
    const Waveform n = synth_noise(21, 16384, 16000, NoiseColor::kWhite);
    DegradeRecipe r;
    r.bandlimit_hz = 2000.0;
    const Waveform y = degrade(n, r);
    const double stop = band_energy_fraction(y, 2100.0, 7900.0);
    CHECK(stop < 1e-20);
    const double pass = band_energy_fraction(y, 0.0, 1900.0);
    CHECK(pass > 0.9);
  }

  SUBCASE("reverb lowers intelligibility against the dry reference") {
    DegradeRecipe r;
    r.reverb_rt60_s = 0.3;
    r.seed = 77;
    const Waveform y = degrade(x, r);
    REQUIRE(y.samples.size() == x.samples.size());
    const double e = metrics::estoi(x, y);
    CHECK(e < 0.95);
    CHECK(e > 0.0);
  }

  SUBCASE("additive noise hits the requested snr against the current signal") {
    DegradeRecipe r;
    r.noise_snr_db = 5.0;
    r.seed = 5;
    const Waveform y = degrade(x, r);
    std::vector<double> added(x.samples.size());
    for (std::size_t i = 0; i < added.size(); ++i) added[i] = y.samples[i] - x.samples[i];
    const double measured = 10.0 * std::log10(energy(x.samples) / energy(added));
    CHECK(measured == doctest::Approx(5.0).epsilon(1e-9));
  }

  SUBCASE("same recipe and seed reproduce bit-identically") {
    DegradeRecipe r;
    r.noise_snr_db = 2.0;
    r.reverb_rt60_s = 0.25;
    r.seed = 1234;
    const Waveform y1 = degrade(x, r);
    const Waveform y2 = degrade(x, r);
    CHECK(y1.samples == y2.samples);
    r.seed = 1235;
    const Waveform y3 = degrade(x, r);
    CHECK(y3.samples != y1.samples);
  }

  SUBCASE("recipe validation") {
    DegradeRecipe r;
    r.reverb_rt60_s = 0.0;
    CHECK_THROWS_AS(degrade(x, r), Error);
    r.reverb_rt60_s = 2.5;
    CHECK_THROWS_AS(degrade(x, r), Error);
    r = DegradeRecipe{};
    r.noise_snr_db = std::nan("");
    CHECK_THROWS_AS(degrade(x, r), Error);
    r = DegradeRecipe{};
    r.bandlimit_hz = 0.0;
    CHECK_THROWS_AS(degrade(x, r), Error);
    r.bandlimit_hz = 9000.0;  // above nyquist at 16 kHz
    CHECK_THROWS_AS(degrade(x, r), Error);
    r = DegradeRecipe{};
    r.gain = 0.0;
    CHECK_THROWS_AS(degrade(x, r), Error);
    r.gain = 9.0;
    CHECK_THROWS_AS(degrade(x, r), Error);
    r = DegradeRecipe{};
    r.clip_level = -0.1;
    CHECK_THROWS_AS(degrade(x, r), Error);
  }

  SUBCASE("tags describe the applied stages") {
    DegradeRecipe r;
    r.noise_snr_db = 10.0;
    r.noise_color = NoiseColor::kPink;
    r.gain = 0.8;
    const auto tags = r.tags();
    REQUIRE(tags.size() == 2);
    CHECK(tags[0] == "pink_snr=10");
    CHECK(tags[1] == "gain=0.8");
  }
}

// ---- Dataset builds -------------------------------------------------------------

TEST_CASE("build_dataset writes a consistent labeled corpus") {
  const fs::path dir = fresh_dir("dataset");
  const metrics::MetricRegistry reg = metrics::MetricRegistry::desk_extended();

  BuildConfig cfg;
  cfg.out_dir = (dir / "a").string();
  cfg.n_sources = 6;
  cfg.variants_per_source = 3;
  cfg.seed = 7;
  cfg.duration_s = 1.2;
  const DatasetManifest m = build_dataset(cfg, reg);

  REQUIRE(m.entries.size() == 18);
  CHECK(fs::exists(m.manifest_path));
  CHECK(fs::exists(m.labels_path));
  CHECK(fs::exists(fs::path(cfg.out_dir) / "registry.json"));

  // 6 clean + 6 mixture + 18 degraded files.
  std::size_t n_wavs = 0;
  for (const auto& p : fs::directory_iterator(fs::path(cfg.out_dir) / "wav")) {
    (void)p;
    ++n_wavs;
  }
  CHECK(n_wavs == 30);

  SUBCASE("splits are disjoint by source and all present") {
    std::map<std::string, std::set<std::string>> splits_per_source;
    std::set<std::string> splits;
    std::set<std::string> ids;
    for (const auto& e : m.entries) {
      splits_per_source[e.source_id].insert(e.split);
      splits.insert(e.split);
      CHECK(ids.insert(e.utterance_id).second);
    }
    CHECK(splits_per_source.size() == 6);
    for (const auto& [src, ss] : splits_per_source) {
      CAPTURE(src);
      CHECK(ss.size() == 1);
    }
    CHECK(splits == std::set<std::string>{"train", "val", "test"});
  }

  SUBCASE("every referenced file exists and parses") {
    for (const auto& e : m.entries) {
      CAPTURE(e.utterance_id);
      const Waveform clean = wav_read(e.clean_path);
      const Waveform noisy = wav_read(e.noisy_path);
      const Waveform deg = wav_read(e.degraded_path);
      CHECK(clean.samples.size() == noisy.samples.size());
      CHECK(clean.samples.size() == deg.samples.size());
      CHECK(clean.sample_rate == 16000);
      CHECK(!e.transcript.empty());
    }
  }

  SUBCASE("labels stay inside registry ranges") {
    std::ifstream f(m.labels_path);
    REQUIRE(f.good());
    std::string line;
    REQUIRE(std::getline(f, line));
    std::string header = "utterance_id,source_id,split";
    for (std::size_t k = 0; k < reg.size(); ++k) header += "," + reg.at(k).name;
    CHECK(line == header);

    const std::set<std::string> expected_present = {
        "SDR", "SI_SNR", "LSD", "ESTOI", "MCD", "SpeakerSimilarity", "CER",
        "PhonemeSimilarity"};
    std::size_t rows = 0;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      ++rows;
      const auto cells = split_csv_line(line);
      REQUIRE(cells.size() == 3 + reg.size());
      for (std::size_t k = 0; k < reg.size(); ++k) {
        const std::string& cell = cells[3 + k];
        const auto& spec = reg.at(k);
        CAPTURE(cells[0]);
        CAPTURE(spec.name);
        if (expected_present.count(spec.name)) {
          REQUIRE(!cell.empty());
          const double v = std::stod(cell);
          CHECK(spec.in_range(v));
        } else {
          CHECK(cell.empty());
        }
      }
    }
    CHECK(rows == 18);
  }

  SUBCASE("label rows are recomputable from the files alone") {
    std::ifstream f(m.labels_path);
    std::string line;
    std::getline(f, line);  // header
    std::map<std::string, std::vector<std::string>> rows;
    while (std::getline(f, line))
      if (!line.empty()) {
        auto cells = split_csv_line(line);
        rows[cells[0]] = cells;
      }

    for (std::size_t pick : {std::size_t{0}, std::size_t{7}, std::size_t{17}}) {
      const ManifestEntry& e = m.entries[pick];
      CAPTURE(e.utterance_id);
      const Waveform clean = wav_read(e.clean_path);
      const Waveform deg = wav_read(e.degraded_path);
      const std::vector<int> hyp = pseudo_recognize(deg);
      const metrics::MetricVector mv =
          metrics::evaluate_pair(reg, clean, deg, &e.transcript, &hyp, cfg.sdr_filter_len);
      const auto& cells = rows.at(e.utterance_id);
      for (std::size_t k = 0; k < reg.size(); ++k) {
        if (!mv.present[k]) {
          CHECK(cells[3 + k].empty());
          continue;
        }
        REQUIRE(!cells[3 + k].empty());
        const double stored = std::stod(cells[3 + k]);
        CHECK(std::abs(stored - mv.values[k]) <= 1e-12);
      }
    }
  }

  SUBCASE("manifest round-trips through load_manifest") {
    const DatasetManifest back = load_manifest(m.manifest_path);
    REQUIRE(back.entries.size() == m.entries.size());
    for (std::size_t i = 0; i < back.entries.size(); ++i) {
      CHECK(back.entries[i].utterance_id == m.entries[i].utterance_id);
      CHECK(back.entries[i].split == m.entries[i].split);
      CHECK(back.entries[i].clean_path == m.entries[i].clean_path);
      CHECK(back.entries[i].degraded_path == m.entries[i].degraded_path);
      CHECK(back.entries[i].transcript == m.entries[i].transcript);
      CHECK(back.entries[i].tags == m.entries[i].tags);
    }
  }

  SUBCASE("same seed reproduces the build byte for byte") {
    BuildConfig cfg2 = cfg;
    cfg2.out_dir = (dir / "b").string();
    build_dataset(cfg2, reg);
    CHECK(slurp(dir / "a" / "labels.csv") == slurp(dir / "b" / "labels.csv"));
    CHECK(slurp(dir / "a" / "manifest.jsonl") == slurp(dir / "b" / "manifest.jsonl"));
    CHECK(slurp(dir / "a" / "wav" / "src0_v0.wav") == slurp(dir / "b" / "wav" / "src0_v0.wav"));
  }

  fs::remove_all(dir);
}

TEST_CASE("build_dataset and load_manifest validate their inputs") {
  const fs::path dir = fresh_dir("dataset_bad");
  const metrics::MetricRegistry reg = metrics::MetricRegistry::default_table();

  BuildConfig cfg;
  cfg.out_dir = (dir / "x").string();
  cfg.n_sources = 0;
  CHECK_THROWS_AS(build_dataset(cfg, reg), Error);
  cfg.n_sources = 3;
  cfg.duration_s = 0.5;
  CHECK_THROWS_AS(build_dataset(cfg, reg), Error);
  cfg.duration_s = 1.2;
  cfg.train_frac = 0.9;
  cfg.val_frac = 0.3;
  CHECK_THROWS_AS(build_dataset(cfg, reg), Error);
  cfg.train_frac = 0.8;
  cfg.val_frac = 0.1;
  cfg.out_dir.clear();
  CHECK_THROWS_AS(build_dataset(cfg, reg), Error);

  CHECK_THROWS_AS(load_manifest((dir / "nope.jsonl").string()), Error);
  std::ofstream((dir / "empty.jsonl").string()) << "";
  CHECK_THROWS_AS(load_manifest((dir / "empty.jsonl").string()), Error);
  fs::remove_all(dir);
}
