#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "seqa/error.hpp"
#include "seqa/tensor.hpp"

namespace seqa::signal {

/// Mono sampled audio. Samples are nominal full scale 1.0 and must stay
/// finite and within [-4, 4].
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 0;

  Waveform() = default;
  Waveform(std::vector<double> s, int rate) : samples(std::move(s)), sample_rate(rate) {}

  std::size_t size() const { return samples.size(); }
  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

/// Validates the Waveform invariants (non-empty, finite, rate >= 8000,
/// |sample| <= 4).
void validate(const Waveform& w);

enum class WindowKind { kHann, kRect };

// Window kind <-> config-file string.
std::string window_name(WindowKind k);
WindowKind window_from_name(const std::string& s);

struct StftConfig {
  int n_fft = 512;
  int win_length = 512;
  int hop = 256;
  WindowKind window = WindowKind::kHann;
  bool center_pad = true;

  bool operator==(const StftConfig&) const = default;
};

/// Throws unless 0 < hop <= win_length <= n_fft and n_fft is a power of two.
void validate(const StftConfig& c);

/// Complex short-time spectrum, T frames by F = n_fft/2 + 1 bins, row-major.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> data;
  StftConfig config;
  int sample_rate = 0;
  std::size_t source_samples = 0;  // analysis length, used by istft

  std::complex<double>& at(std::size_t t, std::size_t f) { return data[t * bins + f]; }
  std::complex<double> at(std::size_t t, std::size_t f) const { return data[t * bins + f]; }
};

/// Triangular mel filterbank; weights is n_mels x bins row-major,
/// peak-normalized per filter.
struct MelBank {
  int n_mels = 0;
  std::size_t bins = 0;
  std::vector<double> weights;
  double fmin = 0.0;
  double fmax = 0.0;

  double at(int m, std::size_t f) const { return weights[static_cast<std::size_t>(m) * bins + f]; }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// In-place radix-2 complex FFT. Size must be a power of two. The inverse
/// transform includes the 1/N factor.
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse);

/// Periodic analysis window (kHann: 0.5*(1 - cos(2*pi*n/N))).
std::vector<double> make_window(WindowKind kind, int length);

/// Number of analysis frames for a signal of n samples under c. Throws if the
/// signal is shorter than one frame with center_pad off.
std::size_t num_frames(std::size_t n, const StftConfig& c);

/// Reflection index into [0, n) for center padding (no edge duplication).
std::size_t reflect_index(long long i, std::size_t n);

Spectrogram stft(const Waveform& w, const StftConfig& c);

/// Weighted overlap-add synthesis with window-power normalization. Exact
/// inverse of stft for any config whose shifted squared windows cover every
/// sample (checked; violations throw).
Waveform istft(const Spectrogram& s);

/// Throws unless the shifted squared analysis windows cover the whole
/// synthesis span (the overlap-add condition istft relies on).
void check_ola(const StftConfig& c);

MelBank melbank(int sample_rate, int n_fft, int n_mels, double fmin, double fmax);

/// log10(max(bank * |frame|^2, floor)) per frame; T x n_mels.
Tensor log_mel(const Spectrogram& s, const MelBank& b, double floor);

namespace detail {

/// Source index of windowed-frame sample k of frame t, or -1 where the frame
/// reads the zero-padded region (center_pad off only). Shared with the
/// differentiable STFT so both paths frame identically.
long long frame_source_index(std::size_t n, const StftConfig& c, std::size_t t, int k);

/// Fills buf (size n_fft) with the windowed, zero-padded analysis frame t.
void fill_frame(const std::vector<double>& x, const StftConfig& c,
                const std::vector<double>& win, std::size_t t,
                std::vector<std::complex<double>>& buf);

}  // namespace detail

}  // namespace seqa::signal
