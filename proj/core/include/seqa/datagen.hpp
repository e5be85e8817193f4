#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "seqa/error.hpp"
#include "seqa/metrics.hpp"
#include "seqa/signal.hpp"

namespace seqa::datagen {

/// WAV parsing/encoding failures (malformed header, unsupported codec,
/// multi-channel input, truncated stream).
class WavError : public Error {
 public:
  using Error::Error;
};

/// Reads a mono RIFF/WAVE file holding PCM16 or IEEE-float32 samples.
/// PCM16 decodes as sample/32768.
signal::Waveform wav_read(const std::string& path);

/// Writes mono WAV. bit_depth 16 = PCM16 (round to nearest, clamp to
/// [-1, 1 - 1/32768]); bit_depth 32 = IEEE float32.
void wav_write(const std::string& path, const signal::Waveform& w, int bit_depth = 32);

// ---- Synthesis ---------------------------------------------------------------

/// One voiced syllable: sample span plus the symbol that selected its
/// second-formant target. The symbol sequence is the utterance transcript.
struct SyllableEvent {
  std::size_t start = 0;
  std::size_t length = 0;
  int symbol = 0;
};

struct CleanSpeech {
  signal::Waveform wave;
  std::vector<SyllableEvent> events;

  std::vector<int> transcript() const {
    std::vector<int> t;
    t.reserve(events.size());
    for (const auto& e : events) t.push_back(e.symbol);
    return t;
  }
};

constexpr int kNumSymbols = 8;

/// Speech-like synthetic utterance: harmonic source with drifting f0
/// (80-300 Hz), two-pole formant resonators (F2 chosen per syllable from an
/// 8-symbol grid), raised-cosine syllabic envelope at a 3-8 Hz event rate,
/// and inter-syllable silence gaps. Deterministic per seed.
CleanSpeech synth_clean(std::uint64_t seed, double duration_s, int sample_rate);

enum class NoiseColor { kWhite, kPink };

signal::Waveform synth_noise(std::uint64_t seed, std::size_t n_samples, int sample_rate,
                             NoiseColor color = NoiseColor::kWhite);

/// Threshold syllable detector: frames the signal, marks active runs above an
/// adaptive RMS threshold, and maps each detected event's dominant frequency
/// in the F2 band back to the symbol grid. Desk stand-in for an ASR system.
std::vector<int> pseudo_recognize(const signal::Waveform& w);

// ---- Mixing and degradation ----------------------------------------------------

struct Scene {
  signal::Waveform clean;
  signal::Waveform noise;  // scaled noise actually added
  signal::Waveform mixture;
  double snr_db = 0.0;
  std::vector<std::string> tags;
};

/// Scales noise so 10 log10(E_clean / E_noise) equals snr_db exactly, then
/// mixes. Errors on silent clean or noise.
Scene mix_at_snr(const signal::Waveform& clean, const signal::Waveform& noise, double snr_db);

/// Degradation recipe; absent fields are skipped. Application order is fixed:
/// reverb -> additive noise -> bandlimit -> gain -> clip.
struct DegradeRecipe {
  std::optional<double> reverb_rt60_s;
  std::optional<double> noise_snr_db;
  NoiseColor noise_color = NoiseColor::kWhite;
  std::optional<double> bandlimit_hz;
  std::optional<double> gain;
  std::optional<double> clip_level;
  std::uint64_t seed = 0;

  std::vector<std::string> tags() const;
};

signal::Waveform degrade(const signal::Waveform& w, const DegradeRecipe& r);

// ---- Dataset builds ---------------------------------------------------------------

struct ManifestEntry {
  std::string utterance_id;
  std::string source_id;
  std::string split;  // train / val / test
  std::string clean_path;
  std::string noisy_path;     // the source's fixed mixture
  std::string degraded_path;  // this variant
  std::vector<int> transcript;
  std::vector<std::string> tags;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string manifest_path;
  std::string labels_path;
};

struct BuildConfig {
  std::string out_dir;
  int n_sources = 10;
  int variants_per_source = 4;
  std::uint64_t seed = 1;
  int sample_rate = 16000;
  double duration_s = 1.5;
  double train_frac = 0.8;
  double val_frac = 0.1;
  int sdr_filter_len = 32;  // oracle filter length for labeling
};

/// Generates the corpus: per source one clean file, one mixture, and
/// `variants_per_source` degraded versions, each labeled with every
/// deterministic oracle against the float32 file contents. Emits a JSONL
/// manifest and a CSV label table; splits are disjoint by source.
DatasetManifest build_dataset(const BuildConfig& cfg, const metrics::MetricRegistry& reg);

/// Loads a manifest written by build_dataset.
DatasetManifest load_manifest(const std::string& path);

}  // namespace seqa::datagen
