#include "seqa/signal.hpp"

#include <algorithm>
#include <cmath>

namespace seqa::signal {

namespace {
constexpr double kPi = 3.14159265358979323846;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }
}  // namespace

void validate(const Waveform& w) {
  require(!w.samples.empty(), "Waveform: empty");
  require(w.sample_rate >= 8000, "Waveform: sample_rate must be >= 8000");
  for (double s : w.samples) {
    require(std::isfinite(s), "Waveform: non-finite sample");
    require(std::abs(s) <= 4.0, "Waveform: sample outside [-4, 4]");
  }
}

void validate(const StftConfig& c) {
  require(c.hop > 0, "StftConfig: hop must be positive");
  require(c.hop <= c.win_length, "StftConfig: hop > win_length");
  require(c.win_length <= c.n_fft, "StftConfig: win_length > n_fft");
  require(is_pow2(c.n_fft), "StftConfig: n_fft must be a power of two");
}

std::string window_name(WindowKind k) { return k == WindowKind::kRect ? "rect" : "hann"; }

WindowKind window_from_name(const std::string& s) {
  if (s == "hann") return WindowKind::kHann;
  if (s == "rect") return WindowKind::kRect;
  fail("unknown window kind: " + s);
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  require(is_pow2(static_cast<int>(n)), "fft: size must be a power of two");
  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    const double inv_n = 1.0 / static_cast<double>(n);
    for (auto& x : a) x *= inv_n;
  }
}

std::vector<double> make_window(WindowKind kind, int length) {
  require(length > 0, "make_window: length must be positive");
  std::vector<double> w(static_cast<std::size_t>(length), 1.0);
  if (kind == WindowKind::kHann) {
    for (int n = 0; n < length; ++n)
      w[static_cast<std::size_t>(n)] =
          0.5 * (1.0 - std::cos(2.0 * kPi * n / static_cast<double>(length)));
  }
  return w;
}

std::size_t num_frames(std::size_t n, const StftConfig& c) {
  if (c.center_pad) {
    return n / static_cast<std::size_t>(c.hop) + 1;
  }
  require(n >= static_cast<std::size_t>(c.win_length),
          "stft: waveform shorter than one frame (center_pad off)");
  return (n - static_cast<std::size_t>(c.win_length)) / static_cast<std::size_t>(c.hop) + 1;
}

std::size_t reflect_index(long long i, std::size_t n) {
  require(n >= 2, "reflect_index: signal too short to reflect");
  const long long period = 2 * (static_cast<long long>(n) - 1);
  long long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long long>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

namespace detail {

long long frame_source_index(std::size_t n, const StftConfig& c, std::size_t t, int k) {
  const long long pad = c.center_pad ? c.n_fft / 2 : 0;
  const long long idx = static_cast<long long>(t) * c.hop - pad + k;
  if (idx >= 0 && idx < static_cast<long long>(n)) return idx;
  if (c.center_pad) return static_cast<long long>(reflect_index(idx, n));
  return -1;
}

void fill_frame(const std::vector<double>& x, const StftConfig& c,
                const std::vector<double>& win, std::size_t t,
                std::vector<std::complex<double>>& buf) {
  std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
  for (int k = 0; k < c.win_length; ++k) {
    const long long idx = frame_source_index(x.size(), c, t, k);
    const double v = idx >= 0 ? x[static_cast<std::size_t>(idx)] : 0.0;
    buf[static_cast<std::size_t>(k)] = win[static_cast<std::size_t>(k)] * v;
  }
}

}  // namespace detail

Spectrogram stft(const Waveform& w, const StftConfig& c) {
  validate(w);
  validate(c);
  const std::size_t n = w.samples.size();
  const std::size_t n_frames = num_frames(n, c);
  const std::size_t bins = static_cast<std::size_t>(c.n_fft) / 2 + 1;
  const std::vector<double> win = make_window(c.window, c.win_length);

  Spectrogram out;
  out.frames = n_frames;
  out.bins = bins;
  out.config = c;
  out.sample_rate = w.sample_rate;
  out.source_samples = n;
  out.data.resize(n_frames * bins);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(c.n_fft));
  for (std::size_t t = 0; t < n_frames; ++t) {
    detail::fill_frame(w.samples, c, win, t, buf);
    fft_inplace(buf, false);
    for (std::size_t f = 0; f < bins; ++f) out.data[t * bins + f] = buf[f];
  }
  return out;
}

void check_ola(const StftConfig& c) {
  validate(c);
  // Sum of shifted squared windows must be bounded away from zero over one
  // hop period in the steady-state region.
  const std::vector<double> win = make_window(c.window, c.win_length);
  const int span = c.win_length + c.hop;
  std::vector<double> den(static_cast<std::size_t>(span + c.win_length), 0.0);
  for (int t = 0; t * c.hop < span + c.win_length; ++t) {
    for (int k = 0; k < c.win_length; ++k) {
      const int pos = t * c.hop + k;
      if (pos < span + c.win_length)
        den[static_cast<std::size_t>(pos)] += win[static_cast<std::size_t>(k)] * win[static_cast<std::size_t>(k)];
    }
  }
  for (int pos = c.win_length; pos < span; ++pos)
    require(den[static_cast<std::size_t>(pos)] > 1e-10,
            "istft: window/hop does not satisfy the overlap-add condition");
}

Waveform istft(const Spectrogram& s) {
  validate(s.config);
  check_ola(s.config);
  const StftConfig& c = s.config;
  require(s.bins == static_cast<std::size_t>(c.n_fft) / 2 + 1, "istft: bins/config mismatch");
  const std::size_t pad = c.center_pad ? static_cast<std::size_t>(c.n_fft) / 2 : 0;
  const std::size_t out_len = s.source_samples
                                  ? s.source_samples
                                  : (s.frames > 0 ? (s.frames - 1) * c.hop + c.win_length : 0);
  require(s.frames > 0, "istft: empty spectrogram");

  const std::vector<double> win = make_window(c.window, c.win_length);
  const std::size_t padded_len = (s.frames - 1) * static_cast<std::size_t>(c.hop) +
                                 static_cast<std::size_t>(c.win_length);
  std::vector<double> acc(padded_len, 0.0);
  std::vector<double> den(padded_len, 0.0);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(c.n_fft));
  const std::size_t half = static_cast<std::size_t>(c.n_fft) / 2;
  for (std::size_t t = 0; t < s.frames; ++t) {
    for (std::size_t f = 0; f <= half; ++f) buf[f] = s.at(t, f);
    for (std::size_t f = half + 1; f < static_cast<std::size_t>(c.n_fft); ++f)
      buf[f] = std::conj(s.at(t, static_cast<std::size_t>(c.n_fft) - f));
    fft_inplace(buf, true);
    const std::size_t base = t * static_cast<std::size_t>(c.hop);
    for (int k = 0; k < c.win_length; ++k) {
      const double wk = win[static_cast<std::size_t>(k)];
      acc[base + static_cast<std::size_t>(k)] += wk * buf[static_cast<std::size_t>(k)].real();
      den[base + static_cast<std::size_t>(k)] += wk * wk;
    }
  }

  Waveform out;
  out.sample_rate = s.sample_rate;
  out.samples.assign(out_len, 0.0);
  for (std::size_t i = 0; i < out_len; ++i) {
    const std::size_t p = i + pad;
    if (p < padded_len && den[p] > 1e-10) out.samples[i] = acc[p] / den[p];
  }
  return out;
}

MelBank melbank(int sample_rate, int n_fft, int n_mels, double fmin, double fmax) {
  require(n_mels >= 1, "melbank: n_mels must be >= 1");
  require(fmin >= 0.0 && fmin < fmax, "melbank: need 0 <= fmin < fmax");
  require(fmax <= sample_rate / 2.0 + 1e-9, "melbank: fmax above Nyquist");
  require(is_pow2(n_fft), "melbank: n_fft must be a power of two");
  const std::size_t bins = static_cast<std::size_t>(n_fft) / 2 + 1;
  require(static_cast<std::size_t>(n_mels) + 2 <= bins,
          "melbank: n_mels too large for the FFT resolution");

  const double mel_lo = hz_to_mel(fmin);
  const double mel_hi = hz_to_mel(fmax);
  std::vector<double> edges(static_cast<std::size_t>(n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                      static_cast<double>(n_mels + 1));

  MelBank b;
  b.n_mels = n_mels;
  b.bins = bins;
  b.fmin = fmin;
  b.fmax = fmax;
  b.weights.assign(static_cast<std::size_t>(n_mels) * bins, 0.0);
  const double bin_hz = static_cast<double>(sample_rate) / n_fft;
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[static_cast<std::size_t>(m)];
    const double c = edges[static_cast<std::size_t>(m) + 1];
    const double hi = edges[static_cast<std::size_t>(m) + 2];
    bool any = false;
    for (std::size_t f = 0; f < bins; ++f) {
      const double hz = bin_hz * static_cast<double>(f);
      double v = 0.0;
      if (hz > lo && hz < hi) v = hz <= c ? (hz - lo) / (c - lo) : (hi - hz) / (hi - c);
      if (v > 0.0) any = true;
      b.weights[static_cast<std::size_t>(m) * bins + f] = v;
    }
    // Narrow filters can fall between FFT bins; snap those to the nearest
    // bin of the center so every row stays non-zero.
    if (!any) {
      const std::size_t f = static_cast<std::size_t>(std::lround(c / bin_hz));
      b.weights[static_cast<std::size_t>(m) * bins + std::min(f, bins - 1)] = 1.0;
    }
  }
  return b;
}

Tensor log_mel(const Spectrogram& s, const MelBank& b, double floor) {
  require(s.bins == b.bins, "log_mel: spectrogram/bank bin mismatch");
  require(floor > 0.0, "log_mel: floor must be positive");
  Tensor out = Tensor::zeros({s.frames, static_cast<std::size_t>(b.n_mels)});
  for (std::size_t t = 0; t < s.frames; ++t) {
    for (int m = 0; m < b.n_mels; ++m) {
      double acc = 0.0;
      for (std::size_t f = 0; f < s.bins; ++f) {
        const double w = b.at(m, f);
        if (w != 0.0) acc += w * std::norm(s.at(t, f));
      }
      out.at(t, static_cast<std::size_t>(m)) = std::log10(std::max(acc, floor));
    }
  }
  return out;
}

}  // namespace seqa::signal
