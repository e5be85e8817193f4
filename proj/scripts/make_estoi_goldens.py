#!/usr/bin/env python3
"""Freezes golden values for the ESTOI oracle and the polyphase resampler.

The reference implementation below is written against Jensen & Taal (2016)
using numpy/scipy primitives (scipy.signal.resample_poly, np.fft.rfft,
np.hanning), independent of the C++ code path. Test signals are produced by
a bit-exact Python mirror of the project RNG using only IEEE add/mul ops so
the C++ tests can regenerate byte-identical inputs without file I/O.

Outputs:
  tests/data/estoi_golden.csv     case,sample_rate,n_samples,estoi
  tests/data/resample_golden.csv  one row per output sample, both directions
"""

import os

import numpy as np
from scipy.signal import resample_poly

MASK = (1 << 64) - 1

FS = 10000
FRAME = 256
HOP = 128
NFFT = 512
NBANDS = 15
MINFREQ = 150.0
SEG = 30
DYN = 40.0
EPS = float(np.finfo(np.float64).eps)


def splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, (z ^ (z >> 31)) & MASK


def derive_seed(seed, lane):
    s = (seed ^ ((0xA0761D6478BD642F + lane * 0xE7037ED1A0B428DB) & MASK)) & MASK
    _, out = splitmix64(s)
    return out


class Rng:
    """Mirror of the C++ xoshiro256** generator."""

    def __init__(self, seed):
        sm = seed & MASK
        self.s = []
        for _ in range(4):
            sm, w = splitmix64(sm)
            self.s.append(w)

    @staticmethod
    def _rotl(x, k):
        return ((x << k) | (x >> (64 - k))) & MASK

    def next_u64(self):
        s = self.s
        result = (self._rotl((s[1] * 5) & MASK, 7) * 9) & MASK
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = self._rotl(s[3], 45)
        return result

    def uniform(self):
        return (self.next_u64() >> 11) * 2.0 ** -53


def make_case(case_index):
    """Deterministic (clean, degraded, sample_rate) triple for one case.

    The C++ test replicates this recipe verbatim; every operation is a plain
    IEEE add/mul/div so the two languages produce identical doubles.
    """
    sr = 10000 if case_index < 25 else 16000
    n = int(sr * (0.6 + 0.01 * case_index))
    rng = Rng(derive_seed(2024, case_index))

    d_clean = [2.0 * rng.uniform() - 1.0 for _ in range(n)]
    n_levels = n // 500 + 2
    levels = []
    for j in range(n_levels):
        lv = 0.05 + 0.95 * rng.uniform()
        if j % 5 == 4:
            lv = lv * 0.001
        levels.append(lv)
    d_noise = [2.0 * rng.uniform() - 1.0 for _ in range(n)]
    g_raw = rng.uniform()
    g = 0.02 + 0.6 * g_raw * g_raw

    c = [0.0] * n
    c[0] = 0.25 * d_clean[0]
    if n > 1:
        c[1] = 1.5 * c[0] + 0.25 * d_clean[1]
    for i in range(2, n):
        c[i] = 1.5 * c[i - 1] - 0.7 * c[i - 2] + 0.25 * d_clean[i]

    y = [0.0] * n
    for i in range(n):
        j = i // 500
        frac = (i - 500 * j) / 500.0
        env = levels[j] + (levels[j + 1] - levels[j]) * frac
        y[i] = c[i] * env
    peak = max(abs(v) for v in y)
    scale = 0.7 / peak
    clean = [scale * v for v in y]

    v = [0.0] * n
    if case_index % 2 == 0:
        for i in range(n):
            v[i] = 0.5 * d_noise[i]
    else:
        v[0] = 0.3 * d_noise[0]
        for i in range(1, n):
            v[i] = 0.8 * v[i - 1] + 0.3 * d_noise[i]

    if case_index % 3 == 1:
        degraded = [0.8 * clean[i] + g * v[i] for i in range(n)]
    else:
        degraded = [clean[i] + g * v[i] for i in range(n)]

    clean = np.asarray(clean, dtype=np.float64).astype(np.float32).astype(np.float64)
    degraded = (
        np.asarray(degraded, dtype=np.float64).astype(np.float32).astype(np.float64)
    )
    return clean, degraded, sr


def third_octave_bins():
    freqs = np.arange(NFFT // 2 + 1) * (FS / NFFT)
    lo = np.zeros(NBANDS, dtype=int)
    hi = np.zeros(NBANDS, dtype=int)
    for j in range(NBANDS):
        cf = MINFREQ * 2.0 ** (j / 3.0)
        lo[j] = int(np.argmin(np.abs(freqs - cf / 2.0 ** (1.0 / 6.0))))
        hi[j] = int(np.argmin(np.abs(freqs - cf * 2.0 ** (1.0 / 6.0))))
    return lo, hi


def frame_starts(length):
    return list(range(0, length - FRAME, HOP))


def estoi_window():
    return np.hanning(FRAME + 2)[1:-1]


def remove_silent_frames(x, y):
    w = estoi_window()
    starts = frame_starts(len(x))
    if not starts:
        raise ValueError("too short")
    energies = np.array(
        [20.0 * np.log10(np.linalg.norm(w * x[s : s + FRAME]) + EPS) for s in starts]
    )
    keep = [s for s, e in zip(starts, energies) if e > energies.max() - DYN]
    out_len = (len(keep) - 1) * HOP + FRAME
    xs = np.zeros(out_len)
    ys = np.zeros(out_len)
    for i, s in enumerate(keep):
        xs[i * HOP : i * HOP + FRAME] += w * x[s : s + FRAME]
        ys[i * HOP : i * HOP + FRAME] += w * y[s : s + FRAME]
    return xs, ys


def band_spectrogram(x):
    w = estoi_window()
    starts = frame_starts(len(x))
    lo, hi = third_octave_bins()
    bands = np.zeros((NBANDS, len(starts)))
    for t, s in enumerate(starts):
        spec = np.fft.rfft(w * x[s : s + FRAME], NFFT)
        power = np.abs(spec) ** 2
        for j in range(NBANDS):
            bands[j, t] = np.sqrt(power[lo[j] : hi[j]].sum())
    return bands


def normalize_rows_then_cols(seg):
    seg = seg - seg.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(seg, axis=1, keepdims=True)
    seg = np.where(norms > 1e-20, seg / np.where(norms > 1e-20, norms, 1.0), 0.0)
    seg = seg - seg.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(seg, axis=0, keepdims=True)
    seg = np.where(norms > 1e-20, seg / np.where(norms > 1e-20, norms, 1.0), 0.0)
    return seg


def estoi_ref(x, y, sr):
    if sr != FS:
        x = resample_poly(x, FS, sr)
        y = resample_poly(y, FS, sr)
    if len(x) < SEG * HOP:
        raise ValueError("too short")
    x, y = remove_silent_frames(x, y)
    bx = band_spectrogram(x)
    by = band_spectrogram(y)
    n_frames = bx.shape[1]
    if n_frames < SEG:
        raise ValueError("too few frames")
    vals = []
    for m in range(SEG, n_frames + 1):
        sx = normalize_rows_then_cols(bx[:, m - SEG : m].copy())
        sy = normalize_rows_then_cols(by[:, m - SEG : m].copy())
        vals.append(float((sx * sy).sum()) / SEG)
    return float(np.clip(np.mean(vals), 0.0, 1.0))


def main():
    out_dir = os.path.join(os.path.dirname(__file__), "..", "tests", "data")
    os.makedirs(out_dir, exist_ok=True)

    rows = []
    for case in range(50):
        clean, degraded, sr = make_case(case)
        value = estoi_ref(clean, degraded, sr)
        rows.append((case, sr, len(clean), value))
        print(f"case {case:2d} sr={sr} n={len(clean)} estoi={value:.6f}")

    with open(os.path.join(out_dir, "estoi_golden.csv"), "w") as f:
        f.write("case,sample_rate,n_samples,estoi\n")
        for case, sr, n, value in rows:
            f.write(f"{case},{sr},{n},{value:.17g}\n")

    values = np.array([r[3] for r in rows])
    print(f"\nspread: min={values.min():.4f} max={values.max():.4f} "
          f"mean={values.mean():.4f}")

    # Resampler goldens: 64 deterministic samples through both conversion
    # directions used by the 16 kHz <-> 10 kHz front end.
    rng = Rng(derive_seed(911, 0))
    x = np.array([2.0 * rng.uniform() - 1.0 for _ in range(64)])
    down = resample_poly(x, 5, 8)
    up = resample_poly(x, 8, 5)
    with open(os.path.join(out_dir, "resample_golden.csv"), "w") as f:
        f.write("direction,index,value\n")
        for i, v in enumerate(down):
            f.write(f"down,{i},{v:.17g}\n")
        for i, v in enumerate(up):
            f.write(f"up,{i},{v:.17g}\n")
    print(f"resampler goldens: {len(down)} down, {len(up)} up")


if __name__ == "__main__":
    main()
