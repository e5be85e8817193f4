#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>

#include "seqa/error.hpp"
#include "seqa/metrics.hpp"

// Extended short-time objective intelligibility after Jensen & Taal (2016):
// 10 kHz front end, 15 one-third-octave bands from 150 Hz, 386 ms segments,
// row/column-normalized spectrogram correlation.

namespace seqa::metrics {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kFsTarget = 10000;
constexpr int kFrameLen = 256;
constexpr int kHop = 128;
constexpr int kNfft = 512;
constexpr int kNumBands = 15;
constexpr double kMinFreq = 150.0;
constexpr int kSegLen = 30;  // frames per intermediate-intelligibility segment
constexpr double kDynRange = 40.0;
constexpr double kEps = 2.220446049250313e-16;

double bessel_i0(double x) {
  // Power series; converges fast for the |x| <= beta range used here.
  double term = 1.0, sum = 1.0;
  const double q = x * x / 4.0;
  for (int k = 1; k < 200; ++k) {
    term *= q / (static_cast<double>(k) * static_cast<double>(k));
    sum += term;
    if (term < sum * 1e-18) break;
  }
  return sum;
}

double sinc(double t) {
  if (t == 0.0) return 1.0;
  return std::sin(kPi * t) / (kPi * t);
}

// Kaiser-windowed lowpass, cutoff relative to Nyquist, unity DC gain.
std::vector<double> firwin_kaiser(int numtaps, double cutoff, double beta) {
  const double alpha = (numtaps - 1) / 2.0;
  const double denom = bessel_i0(beta);
  std::vector<double> h(static_cast<std::size_t>(numtaps));
  double sum = 0.0;
  for (int k = 0; k < numtaps; ++k) {
    const double r = (static_cast<double>(k) - alpha) / alpha;
    const double win = bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / denom;
    h[static_cast<std::size_t>(k)] = cutoff * sinc(cutoff * (static_cast<double>(k) - alpha)) * win;
    sum += h[static_cast<std::size_t>(k)];
  }
  for (double& v : h) v /= sum;
  return h;
}

// Analysis window: interior of a 258-point symmetric Hann curve.
std::vector<double> estoi_window() {
  std::vector<double> w(kFrameLen);
  for (int k = 0; k < kFrameLen; ++k)
    w[static_cast<std::size_t>(k)] = 0.5 - 0.5 * std::cos(2.0 * kPi * (k + 1) / 257.0);
  return w;
}

// Frame starts cover [0, len - framelen) at hop spacing; a frame starting at
// exactly len - framelen is excluded.
std::size_t count_frames(std::size_t len) {
  if (len <= static_cast<std::size_t>(kFrameLen)) return 0;
  return (len - kFrameLen + kHop - 1) / kHop;
}

// Drops frames whose clean-signal energy is more than 40 dB below the loudest
// frame, then re-places the kept frames contiguously via overlap-add.
void remove_silent_frames(std::vector<double>& x, std::vector<double>& y) {
  const std::vector<double> w = estoi_window();
  const std::size_t n_frames = count_frames(x.size());
  require(n_frames >= 1, "estoi: input too short");

  std::vector<double> energy(n_frames);
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < n_frames; ++t) {
    double e = 0.0;
    for (int k = 0; k < kFrameLen; ++k) {
      const double v = w[static_cast<std::size_t>(k)] * x[t * kHop + static_cast<std::size_t>(k)];
      e += v * v;
    }
    energy[t] = 20.0 * std::log10(std::sqrt(e) + kEps);
    peak = std::max(peak, energy[t]);
  }

  std::vector<std::size_t> keep;
  for (std::size_t t = 0; t < n_frames; ++t)
    if (energy[t] > peak - kDynRange) keep.push_back(t);
  require(!keep.empty(), "estoi: all frames below the energy threshold");

  const std::size_t out_len = (keep.size() - 1) * kHop + kFrameLen;
  std::vector<double> xs(out_len, 0.0), ys(out_len, 0.0);
  for (std::size_t i = 0; i < keep.size(); ++i)
    for (int k = 0; k < kFrameLen; ++k) {
      const std::size_t src = keep[i] * kHop + static_cast<std::size_t>(k);
      const std::size_t dst = i * kHop + static_cast<std::size_t>(k);
      xs[dst] += w[static_cast<std::size_t>(k)] * x[src];
      ys[dst] += w[static_cast<std::size_t>(k)] * y[src];
    }
  x = std::move(xs);
  y = std::move(ys);
}

// One-third-octave band edges mapped to nearest rfft bin; band j covers
// [fl_bin[j], fh_bin[j]).
void third_octave_bins(std::vector<std::size_t>& lo, std::vector<std::size_t>& hi) {
  const std::size_t bins = kNfft / 2 + 1;
  lo.resize(kNumBands);
  hi.resize(kNumBands);
  for (int j = 0; j < kNumBands; ++j) {
    const double cf = kMinFreq * std::pow(2.0, j / 3.0);
    const double f_lo = cf / std::pow(2.0, 1.0 / 6.0);
    const double f_hi = cf * std::pow(2.0, 1.0 / 6.0);
    std::size_t best_lo = 0, best_hi = 0;
    double d_lo = std::numeric_limits<double>::infinity();
    double d_hi = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * kFsTarget / kNfft;
      if (std::abs(f - f_lo) < d_lo) {
        d_lo = std::abs(f - f_lo);
        best_lo = k;
      }
      if (std::abs(f - f_hi) < d_hi) {
        d_hi = std::abs(f - f_hi);
        best_hi = k;
      }
    }
    lo[static_cast<std::size_t>(j)] = best_lo;
    hi[static_cast<std::size_t>(j)] = best_hi;
  }
}

// Band-energy spectrogram: rows = bands, columns = frames.
std::vector<std::vector<double>> band_spectrogram(const std::vector<double>& x) {
  const std::vector<double> w = estoi_window();
  const std::size_t n_frames = count_frames(x.size());
  std::vector<std::size_t> lo, hi;
  third_octave_bins(lo, hi);

  std::vector<std::vector<double>> bands(kNumBands, std::vector<double>(n_frames, 0.0));
  std::vector<std::complex<double>> buf(kNfft);
  for (std::size_t t = 0; t < n_frames; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    for (int k = 0; k < kFrameLen; ++k)
      buf[static_cast<std::size_t>(k)] =
          w[static_cast<std::size_t>(k)] * x[t * kHop + static_cast<std::size_t>(k)];
    signal::fft_inplace(buf, false);
    for (int j = 0; j < kNumBands; ++j) {
      double e = 0.0;
      for (std::size_t k = lo[static_cast<std::size_t>(j)]; k < hi[static_cast<std::size_t>(j)];
           ++k)
        e += std::norm(buf[k]);
      bands[static_cast<std::size_t>(j)][t] = std::sqrt(e);
    }
  }
  return bands;
}

}  // namespace

std::vector<double> resample_poly(const std::vector<double>& x, int up, int down) {
  require(up > 0 && down > 0, "resample_poly: factors must be positive");
  const int g = std::gcd(up, down);
  up /= g;
  down /= g;
  if (up == 1 && down == 1) return x;

  const int max_rate = std::max(up, down);
  const int half_len = 10 * max_rate;
  std::vector<double> h = firwin_kaiser(2 * half_len + 1, 1.0 / max_rate, 5.0);
  for (double& v : h) v *= up;

  const std::size_t n_in = x.size();
  const std::size_t n_out =
      (n_in * static_cast<std::size_t>(up) + static_cast<std::size_t>(down) - 1) /
      static_cast<std::size_t>(down);
  std::vector<double> y(n_out, 0.0);
  const long long taps = 2 * half_len + 1;
  for (std::size_t i = 0; i < n_out; ++i) {
    const long long center = static_cast<long long>(i) * down;
    // h index = half_len + center - j*up must land in [0, taps)
    long long j_lo = (center + half_len - (taps - 1) + up - 1) / up;  // ceil
    long long j_hi = (center + half_len) / up;                        // floor
    j_lo = std::max(j_lo, 0LL);
    j_hi = std::min(j_hi, static_cast<long long>(n_in) - 1);
    double acc = 0.0;
    for (long long j = j_lo; j <= j_hi; ++j)
      acc += x[static_cast<std::size_t>(j)] *
             h[static_cast<std::size_t>(half_len + center - j * up)];
    y[i] = acc;
  }
  return y;
}

double estoi(const signal::Waveform& ref, const signal::Waveform& est) {
  require(ref.sample_rate == est.sample_rate, "estoi: sample-rate mismatch");
  require(ref.samples.size() == est.samples.size(), "estoi: length mismatch");

  std::vector<double> x = ref.samples;
  std::vector<double> y = est.samples;
  if (ref.sample_rate != kFsTarget) {
    x = resample_poly(x, kFsTarget, ref.sample_rate);
    y = resample_poly(y, kFsTarget, ref.sample_rate);
  }
  require(x.size() >= static_cast<std::size_t>(kSegLen * kHop), "estoi: input too short");

  remove_silent_frames(x, y);

  const std::vector<std::vector<double>> bx = band_spectrogram(x);
  const std::vector<std::vector<double>> by = band_spectrogram(y);
  const std::size_t n_frames = bx[0].size();
  require(n_frames >= static_cast<std::size_t>(kSegLen),
          "estoi: too few frames after silence removal");

  // Normalizes a J x N segment in place: rows to zero mean/unit norm, then
  // columns likewise. Degenerate rows/columns are left at zero.
  const auto normalize = [](std::vector<std::vector<double>>& seg) {
    const std::size_t rows = seg.size(), cols = seg[0].size();
    for (std::size_t j = 0; j < rows; ++j) {
      const double mean = std::accumulate(seg[j].begin(), seg[j].end(), 0.0) /
                          static_cast<double>(cols);
      double norm = 0.0;
      for (double& v : seg[j]) {
        v -= mean;
        norm += v * v;
      }
      norm = std::sqrt(norm);
      if (norm > 1e-20)
        for (double& v : seg[j]) v /= norm;
      else
        std::fill(seg[j].begin(), seg[j].end(), 0.0);
    }
    for (std::size_t n = 0; n < cols; ++n) {
      double mean = 0.0;
      for (std::size_t j = 0; j < rows; ++j) mean += seg[j][n];
      mean /= static_cast<double>(rows);
      double norm = 0.0;
      for (std::size_t j = 0; j < rows; ++j) {
        seg[j][n] -= mean;
        norm += seg[j][n] * seg[j][n];
      }
      norm = std::sqrt(norm);
      if (norm > 1e-20)
        for (std::size_t j = 0; j < rows; ++j) seg[j][n] /= norm;
      else
        for (std::size_t j = 0; j < rows; ++j) seg[j][n] = 0.0;
    }
  };

  double acc = 0.0;
  const std::size_t n_segments = n_frames - kSegLen + 1;
  std::vector<std::vector<double>> sx(kNumBands, std::vector<double>(kSegLen));
  std::vector<std::vector<double>> sy(kNumBands, std::vector<double>(kSegLen));
  for (std::size_t m = 0; m < n_segments; ++m) {
    for (int j = 0; j < kNumBands; ++j)
      for (int n = 0; n < kSegLen; ++n) {
        sx[static_cast<std::size_t>(j)][static_cast<std::size_t>(n)] =
            bx[static_cast<std::size_t>(j)][m + static_cast<std::size_t>(n)];
        sy[static_cast<std::size_t>(j)][static_cast<std::size_t>(n)] =
            by[static_cast<std::size_t>(j)][m + static_cast<std::size_t>(n)];
      }
    normalize(sx);
    normalize(sy);
    double d = 0.0;
    for (int j = 0; j < kNumBands; ++j)
      for (int n = 0; n < kSegLen; ++n)
        d += sx[static_cast<std::size_t>(j)][static_cast<std::size_t>(n)] *
             sy[static_cast<std::size_t>(j)][static_cast<std::size_t>(n)];
    acc += d / static_cast<double>(kSegLen);
  }
  return std::clamp(acc / static_cast<double>(n_segments), 0.0, 1.0);
}

}  // namespace seqa::metrics
