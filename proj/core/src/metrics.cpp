#include <algorithm>
#include <cmath>
#include <numeric>

#include "seqa/error.hpp"
#include "seqa/metrics.hpp"

namespace seqa::metrics {

namespace {

constexpr double kLn10 = 2.30258509299404568402;

double clamp_db(double v) { return std::clamp(v, -100.0, 100.0); }

// Solves A x = b for symmetric positive-definite A (row-major, n x n).
// Returns false when the Cholesky factorization breaks down.
bool cholesky_solve(std::vector<double> a, std::vector<double> b, std::size_t n,
                    std::vector<double>& x) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      if (i == j) {
        if (s <= 0.0) return false;
        a[i * n + i] = std::sqrt(s);
      } else {
        a[i * n + j] = s / a[j * n + j];
      }
    }
  }
  // Forward then back substitution.
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
    b[i] = s / a[i * n + i];
  }
  x.assign(n, 0.0);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[k * n + i] * x[k];
    x[i] = s / a[i * n + i];
  }
  return true;
}

double population_std(const std::vector<double>& xs, double mean) {
  double acc = 0.0;
  for (double v : xs) acc += (v - mean) * (v - mean);
  return std::sqrt(acc / static_cast<double>(xs.size()));
}

}  // namespace

double sdr(const signal::Waveform& ref, const signal::Waveform& est, int filter_len) {
  require(filter_len >= 1, "sdr: filter length must be >= 1");
  require(ref.samples.size() == est.samples.size(), "sdr: length mismatch");
  const std::size_t n = ref.samples.size();
  const std::size_t L = static_cast<std::size_t>(filter_len);
  require(n >= L, "sdr: signal shorter than the filter");

  const std::vector<double>& r = ref.samples;
  const std::vector<double>& e = est.samples;

  // Autocorrelation (full zero-padded support) and cross-correlation.
  std::vector<double> acorr(L, 0.0);
  for (std::size_t lag = 0; lag < L; ++lag)
    for (std::size_t m = 0; m + lag < n; ++m) acorr[lag] += r[m] * r[m + lag];
  require(acorr[0] > 0.0, "sdr: reference has zero energy");

  std::vector<double> cross(L, 0.0);
  for (std::size_t lag = 0; lag < L; ++lag)
    for (std::size_t m = 0; m + lag < n; ++m) cross[lag] += r[m] * e[m + lag];

  std::vector<double> gram(L * L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j)
      gram[i * L + j] = acorr[i > j ? i - j : j - i];

  std::vector<double> b;
  if (!cholesky_solve(gram, cross, L, b)) {
    // Nearly singular reference autocorrelation: retry with a tiny ridge.
    const double ridge = acorr[0] * 1e-10;
    for (std::size_t i = 0; i < L; ++i) gram[i * L + i] += ridge;
    require(cholesky_solve(gram, cross, L, b), "sdr: singular normal equations");
  }

  // Full convolution ref * b against est zero-padded to the same support.
  const std::size_t full = n + L - 1;
  double sig_energy = 0.0, err_energy = 0.0;
  for (std::size_t m = 0; m < full; ++m) {
    double s = 0.0;
    const std::size_t i_lo = m >= n - 1 ? m - (n - 1) : 0;
    const std::size_t i_hi = std::min(m, L - 1);
    for (std::size_t i = i_lo; i <= i_hi; ++i) s += b[i] * r[m - i];
    const double target = m < n ? e[m] : 0.0;
    sig_energy += s * s;
    const double diff = target - s;
    err_energy += diff * diff;
  }

  if (err_energy <= 0.0) return 100.0;
  if (sig_energy <= 0.0) return -100.0;
  return clamp_db(10.0 * std::log10(sig_energy / err_energy));
}

double si_snr(const signal::Waveform& ref, const signal::Waveform& est) {
  require(ref.samples.size() == est.samples.size(), "si_snr: length mismatch");
  const std::size_t n = ref.samples.size();
  require(n > 0, "si_snr: empty input");
  double mr = 0.0, me = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mr += ref.samples[i];
    me += est.samples[i];
  }
  mr /= static_cast<double>(n);
  me /= static_cast<double>(n);

  double rr = 0.0, er = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ref.samples[i] - mr;
    const double e = est.samples[i] - me;
    rr += r * r;
    er += e * r;
  }
  require(rr > 0.0, "si_snr: reference has zero energy");
  const double alpha = er / rr;
  const double target_energy = alpha * alpha * rr;
  double err_energy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = (est.samples[i] - me) - alpha * (ref.samples[i] - mr);
    err_energy += d * d;
  }
  if (err_energy <= 0.0) return 100.0;
  if (target_energy <= 0.0) return -100.0;
  return clamp_db(10.0 * std::log10(target_energy / err_energy));
}

double lsd(const signal::Waveform& ref, const signal::Waveform& est,
           const signal::StftConfig& c, double eps) {
  require(ref.samples.size() == est.samples.size(), "lsd: length mismatch");
  require(eps > 0.0, "lsd: eps must be positive");
  const signal::Spectrogram sr = signal::stft(ref, c);
  const signal::Spectrogram se = signal::stft(est, c);
  double acc = 0.0;
  for (std::size_t t = 0; t < sr.frames; ++t) {
    double frame = 0.0;
    for (std::size_t f = 0; f < sr.bins; ++f) {
      const double pr = std::norm(sr.at(t, f)) + eps;
      const double pe = std::norm(se.at(t, f)) + eps;
      const double d = 10.0 * (std::log10(pr) - std::log10(pe));
      frame += d * d;
    }
    acc += std::sqrt(frame / static_cast<double>(sr.bins));
  }
  return acc / static_cast<double>(sr.frames);
}

Tensor mel_cepstra(const signal::Waveform& w, int n_mels, int n_coeff,
                   const signal::StftConfig& c) {
  require(n_coeff >= 1 && n_coeff < n_mels, "mel_cepstra: need 1 <= n_coeff < n_mels");
  const signal::Spectrogram s = signal::stft(w, c);
  const signal::MelBank bank =
      signal::melbank(w.sample_rate, c.n_fft, n_mels, 0.0, w.sample_rate / 2.0);
  const Tensor lm = signal::log_mel(s, bank, 1e-30);

  const std::size_t M = static_cast<std::size_t>(n_mels);
  Tensor out = Tensor::zeros({s.frames, static_cast<std::size_t>(n_coeff)});
  const double kPi = 3.14159265358979323846;
  for (std::size_t t = 0; t < s.frames; ++t)
    for (int k = 1; k <= n_coeff; ++k) {
      double acc = 0.0;
      for (std::size_t m = 0; m < M; ++m)
        acc += lm.at(t, m) * std::cos(kPi * k * (static_cast<double>(m) + 0.5) /
                                      static_cast<double>(M));
      out.at(t, static_cast<std::size_t>(k - 1)) =
          acc * std::sqrt(2.0 / static_cast<double>(M));  // orthonormal DCT-II
    }
  return out;
}

double mcd_from_cepstra(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b) && a.rank() == 2, "mcd: cepstra shapes differ");
  double acc = 0.0;
  for (std::size_t t = 0; t < a.rows(); ++t) {
    double frame = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double d = a.at(t, k) - b.at(t, k);
      frame += d * d;
    }
    acc += std::sqrt(frame);
  }
  return (10.0 / kLn10) * std::sqrt(2.0) * acc / static_cast<double>(a.rows());
}

double mcd(const signal::Waveform& ref, const signal::Waveform& est, int n_mels, int n_coeff) {
  require(ref.samples.size() == est.samples.size(), "mcd: length mismatch (frames must align)");
  const signal::StftConfig c{};
  return mcd_from_cepstra(mel_cepstra(ref, n_mels, n_coeff, c),
                          mel_cepstra(est, n_mels, n_coeff, c));
}

double speaker_similarity_toy(const signal::Waveform& ref, const signal::Waveform& est,
                              int n_mels) {
  const auto embed = [n_mels](const signal::Waveform& w) {
    require(w.duration_s() >= 0.5, "speaker_similarity: input shorter than 0.5 s");
    double energy = 0.0;
    for (double v : w.samples) energy += v * v;
    require(energy > 0.0, "speaker_similarity: zero-energy signal");
    const signal::StftConfig c{};
    const signal::MelBank bank =
        signal::melbank(w.sample_rate, c.n_fft, n_mels, 0.0, w.sample_rate / 2.0);
    const Tensor lm = signal::log_mel(signal::stft(w, c), bank, 1e-10);
    std::vector<double> emb;
    emb.reserve(2 * static_cast<std::size_t>(n_mels));
    std::vector<double> band(lm.rows());
    for (int m = 0; m < n_mels; ++m) {
      for (std::size_t t = 0; t < lm.rows(); ++t) band[t] = lm.at(t, static_cast<std::size_t>(m));
      const double mean = std::accumulate(band.begin(), band.end(), 0.0) /
                          static_cast<double>(band.size());
      emb.push_back(mean);
      emb.push_back(population_std(band, mean));
    }
    double norm = 0.0;
    for (double v : emb) norm += v * v;
    norm = std::sqrt(norm);
    require(norm > 0.0, "speaker_similarity: degenerate embedding");
    for (double& v : emb) v /= norm;
    return emb;
  };
  const std::vector<double> a = embed(ref);
  const std::vector<double> b = embed(est);
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::clamp(dot, -1.0, 1.0);
}

std::size_t edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

std::size_t edit_distance(const std::string& ref, const std::string& hyp) {
  return edit_distance(std::vector<int>(ref.begin(), ref.end()),
                       std::vector<int>(hyp.begin(), hyp.end()));
}

double cer(const std::vector<int>& ref, const std::vector<int>& hyp) {
  require(!ref.empty(), "cer: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

double cer(const std::string& ref, const std::string& hyp) {
  return cer(std::vector<int>(ref.begin(), ref.end()), std::vector<int>(hyp.begin(), hyp.end()));
}

double phoneme_similarity(const std::vector<int>& ref, const std::vector<int>& hyp) {
  require(!ref.empty(), "phoneme_similarity: empty reference");
  const double ml = static_cast<double>(std::max(ref.size(), hyp.size()));
  const double sim = 1.0 - static_cast<double>(edit_distance(ref, hyp)) / ml;
  return std::max(0.0, sim);
}

std::vector<double> average_ranks(const std::vector<double>& xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&xs](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::map<std::string, double> rank_score(const RankGroup& g, const MetricRegistry& reg) {
  const std::size_t m = g.rows.size();
  require(m >= 1, "rank_score: empty group");
  for (const auto& row : g.rows) {
    require(row.metrics.values.size() == reg.size(), "rank_score: row/registry size mismatch");
    for (std::size_t i = 1; i < g.rows.size(); ++i)
      require(g.rows[i].metrics.present == g.rows[0].metrics.present,
              "rank_score: rows disagree on which metrics are present");
  }

  std::vector<std::size_t> rankable;
  for (std::size_t k = 0; k < reg.size(); ++k) {
    const MetricSpec& s = reg.at(k);
    if (s.name == "RankingScore" || s.weight <= 0.0) continue;
    if (!g.rows[0].metrics.present[k]) continue;
    rankable.push_back(k);
  }
  require(!rankable.empty(), "rank_score: no rankable metric with positive weight");

  std::vector<double> score(m, 0.0);
  double weight_sum = 0.0;
  std::vector<double> column(m);
  for (std::size_t k : rankable) {
    const MetricSpec& s = reg.at(k);
    for (std::size_t u = 0; u < m; ++u) {
      const double v = g.rows[u].metrics.values[k];
      column[u] = s.direction == Direction::kHigherBetter ? -v : v;  // best first
    }
    const std::vector<double> ranks = average_ranks(column);
    for (std::size_t u = 0; u < m; ++u) score[u] += s.weight * ranks[u];
    weight_sum += s.weight;
  }

  std::map<std::string, double> out;
  for (std::size_t u = 0; u < m; ++u) {
    const auto [it, inserted] =
        out.emplace(g.rows[u].utterance_id, score[u] / (weight_sum * static_cast<double>(m)));
    require(inserted, "rank_score: duplicate utterance id " + g.rows[u].utterance_id);
  }
  return out;
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  require(xs.size() == ys.size(), "pearson: size mismatch");
  const std::size_t n = xs.size();
  require(n >= 2, "pearson: need at least 2 samples");
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  require(sxx > 0.0 && syy > 0.0, "pearson: constant input");
  return sxy / std::sqrt(sxx * syy);
}

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  return pearson(average_ranks(xs), average_ranks(ys));
}

MetricVector evaluate_pair(const MetricRegistry& reg, const signal::Waveform& ref,
                           const signal::Waveform& est, const std::vector<int>* ref_symbols,
                           const std::vector<int>* hyp_symbols, int sdr_filter_len) {
  MetricVector mv = MetricVector::empty(reg.size());
  const auto set_if = [&](const std::string& name, double v) {
    if (reg.has(name)) mv.set(reg.index_of(name), v);
  };

  set_if("SDR", sdr(ref, est, sdr_filter_len));
  if (reg.has("SI_SNR")) set_if("SI_SNR", si_snr(ref, est));
  set_if("LSD", lsd(ref, est));
  set_if("ESTOI", estoi(ref, est));
  set_if("MCD", mcd(ref, est));
  set_if("SpeakerSimilarity", speaker_similarity_toy(ref, est));
  if (ref_symbols != nullptr && hyp_symbols != nullptr) {
    set_if("CER", cer(*ref_symbols, *hyp_symbols));
    set_if("PhonemeSimilarity", phoneme_similarity(*ref_symbols, *hyp_symbols));
  }

  validate(reg, mv);
  return mv;
}

}  // namespace seqa::metrics
