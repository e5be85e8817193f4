#include "seqa/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>

#include "seqa/rng.hpp"

namespace seqa::ad {

namespace {

// Broadcast plan for elementwise binary ops. Supported: identical shapes,
// scalar with anything, and matrix with a length-cols vector (row broadcast).
enum class Map { kFull, kScalar, kRow };

struct BPlan {
  std::vector<std::size_t> shape;
  std::size_t n = 0;
  std::size_t cols = 1;
  Map ma = Map::kFull;
  Map mb = Map::kFull;
};

std::size_t map_index(Map m, std::size_t i, std::size_t cols) {
  if (m == Map::kFull) return i;
  if (m == Map::kScalar) return 0;
  return i % cols;
}

BPlan broadcast(const Tensor& a, const Tensor& b) {
  BPlan p;
  if (a.same_shape(b)) {
    p.shape = a.shape;
  } else if (b.is_scalar()) {
    p.shape = a.shape;
    p.mb = Map::kScalar;
  } else if (a.is_scalar()) {
    p.shape = b.shape;
    p.ma = Map::kScalar;
  } else if (a.rank() == 2 && b.rank() == 1 && b.shape[0] == a.shape[1]) {
    p.shape = a.shape;
    p.mb = Map::kRow;
  } else if (b.rank() == 2 && a.rank() == 1 && a.shape[0] == b.shape[1]) {
    p.shape = b.shape;
    p.ma = Map::kRow;
  } else {
    fail("elementwise op: incompatible shapes " + a.shape_str() + " vs " + b.shape_str());
  }
  p.n = Tensor::numel_of(p.shape);
  p.cols = p.shape.size() == 2 ? p.shape[1] : 1;
  return p;
}

Tensor& grad_slot(std::vector<Tensor>& grads, NodeId id, const std::vector<std::size_t>& shape) {
  if (grads[id].data.empty()) grads[id] = Tensor::zeros(shape);
  return grads[id];
}

// Interior one-sided bins appear twice in the full spectrum; f = 0 and
// f = n_fft/2 appear once. Used by the iSTFT adjoint.
double herm_count(std::size_t f, std::size_t n_fft) {
  return (f == 0 || f == n_fft / 2) ? 1.0 : 2.0;
}

}  // namespace

NodeId Tape::push(Tensor value, std::vector<NodeId> parents, BackFn back) {
  for (double v : value.data) require(std::isfinite(v), "tape: op produced a non-finite value");
  nodes_.push_back(Node{std::move(value), std::move(parents), std::move(back), false});
  return nodes_.size() - 1;
}

const Tape::Node& Tape::node(NodeId id) const {
  require(id < nodes_.size(), "tape: node id out of range");
  return nodes_[id];
}

NodeId Tape::leaf(Tensor v, bool trainable) {
  for (double x : v.data) require(std::isfinite(x), "tape: leaf holds a non-finite value");
  nodes_.push_back(Node{std::move(v), {}, {}, trainable});
  return nodes_.size() - 1;
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

bool Tape::trainable(NodeId id) const { return node(id).trainable; }

std::vector<NodeId> Tape::trainable_leaves() const {
  std::vector<NodeId> out;
  for (NodeId i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].trainable) out.push_back(i);
  return out;
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const BPlan p = broadcast(A, B);
  Tensor out = Tensor::zeros(p.shape);
  for (std::size_t i = 0; i < p.n; ++i)
    out.data[i] = A.data[map_index(p.ma, i, p.cols)] + B.data[map_index(p.mb, i, p.cols)];
  return push(std::move(out), {a, b},
              [this, a, b, p](const Tensor& g, std::vector<Tensor>& grads) {
                Tensor& ga = grad_slot(grads, a, value(a).shape);
                Tensor& gb = grad_slot(grads, b, value(b).shape);
                for (std::size_t i = 0; i < p.n; ++i) {
                  ga.data[map_index(p.ma, i, p.cols)] += g.data[i];
                  gb.data[map_index(p.mb, i, p.cols)] += g.data[i];
                }
              });
}

NodeId Tape::sub(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const BPlan p = broadcast(A, B);
  Tensor out = Tensor::zeros(p.shape);
  for (std::size_t i = 0; i < p.n; ++i)
    out.data[i] = A.data[map_index(p.ma, i, p.cols)] - B.data[map_index(p.mb, i, p.cols)];
  return push(std::move(out), {a, b},
              [this, a, b, p](const Tensor& g, std::vector<Tensor>& grads) {
                Tensor& ga = grad_slot(grads, a, value(a).shape);
                Tensor& gb = grad_slot(grads, b, value(b).shape);
                for (std::size_t i = 0; i < p.n; ++i) {
                  ga.data[map_index(p.ma, i, p.cols)] += g.data[i];
                  gb.data[map_index(p.mb, i, p.cols)] -= g.data[i];
                }
              });
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const BPlan p = broadcast(A, B);
  Tensor out = Tensor::zeros(p.shape);
  for (std::size_t i = 0; i < p.n; ++i)
    out.data[i] = A.data[map_index(p.ma, i, p.cols)] * B.data[map_index(p.mb, i, p.cols)];
  return push(std::move(out), {a, b},
              [this, a, b, p](const Tensor& g, std::vector<Tensor>& grads) {
                const Tensor& A = value(a);
                const Tensor& B = value(b);
                Tensor& ga = grad_slot(grads, a, A.shape);
                Tensor& gb = grad_slot(grads, b, B.shape);
                for (std::size_t i = 0; i < p.n; ++i) {
                  const std::size_t ia = map_index(p.ma, i, p.cols);
                  const std::size_t ib = map_index(p.mb, i, p.cols);
                  ga.data[ia] += g.data[i] * B.data[ib];
                  gb.data[ib] += g.data[i] * A.data[ia];
                }
              });
}

NodeId Tape::div(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  for (double v : B.data) require(v != 0.0, "div: division by zero");
  const BPlan p = broadcast(A, B);
  Tensor out = Tensor::zeros(p.shape);
  for (std::size_t i = 0; i < p.n; ++i)
    out.data[i] = A.data[map_index(p.ma, i, p.cols)] / B.data[map_index(p.mb, i, p.cols)];
  return push(std::move(out), {a, b},
              [this, a, b, p](const Tensor& g, std::vector<Tensor>& grads) {
                const Tensor& A = value(a);
                const Tensor& B = value(b);
                Tensor& ga = grad_slot(grads, a, A.shape);
                Tensor& gb = grad_slot(grads, b, B.shape);
                for (std::size_t i = 0; i < p.n; ++i) {
                  const std::size_t ia = map_index(p.ma, i, p.cols);
                  const std::size_t ib = map_index(p.mb, i, p.cols);
                  const double bi = B.data[ib];
                  ga.data[ia] += g.data[i] / bi;
                  gb.data[ib] -= g.data[i] * A.data[ia] / (bi * bi);
                }
              });
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.rank() >= 1 && A.rank() <= 2 && B.rank() >= 1 && B.rank() <= 2,
          "matmul: operands must be vectors or matrices");
  const bool a_vec = A.rank() == 1;
  const bool b_vec = B.rank() == 1;
  const std::size_t m = a_vec ? 1 : A.shape[0];
  const std::size_t k = a_vec ? A.shape[0] : A.shape[1];
  const std::size_t k2 = B.shape[0];
  const std::size_t n = b_vec ? 1 : B.shape[1];
  require(k == k2, "matmul: inner dimensions differ (" + A.shape_str() + " x " + B.shape_str() + ")");

  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double av = A.data[i * k + l];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * B.data[l * n + j];
    }

  std::vector<std::size_t> out_shape;
  if (a_vec && b_vec)
    out_shape = {};
  else if (a_vec)
    out_shape = {n};
  else if (b_vec)
    out_shape = {m};
  else
    out_shape = {m, n};
  return push(Tensor(std::move(out_shape), std::move(c)), {a, b},
              [this, a, b, m, k, n](const Tensor& g, std::vector<Tensor>& grads) {
                const Tensor& A = value(a);
                const Tensor& B = value(b);
                Tensor& ga = grad_slot(grads, a, A.shape);
                Tensor& gb = grad_slot(grads, b, B.shape);
                // dA = g * B^T, dB = A^T * g, with g read as m x n.
                for (std::size_t i = 0; i < m; ++i)
                  for (std::size_t j = 0; j < n; ++j) {
                    const double gij = g.data[i * n + j];
                    if (gij == 0.0) continue;
                    for (std::size_t l = 0; l < k; ++l) {
                      ga.data[i * k + l] += gij * B.data[l * n + j];
                      gb.data[l * n + j] += A.data[i * k + l] * gij;
                    }
                  }
              });
}

NodeId Tape::unary(NodeId x, const std::function<double(double)>& f,
                   const std::function<double(double, double)>& dfdx) {
  const Tensor& X = value(x);
  Tensor out = Tensor::zeros(X.shape);
  for (std::size_t i = 0; i < X.numel(); ++i) out.data[i] = f(X.data[i]);
  Tensor saved = out;  // partials may reuse the output (sigmoid/tanh/exp)
  return push(std::move(out), {x},
              [this, x, saved, dfdx](const Tensor& g, std::vector<Tensor>& grads) {
                const Tensor& X = value(x);
                Tensor& gx = grad_slot(grads, x, X.shape);
                for (std::size_t i = 0; i < X.numel(); ++i)
                  gx.data[i] += g.data[i] * dfdx(X.data[i], saved.data[i]);
              });
}

NodeId Tape::relu(NodeId x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

NodeId Tape::sigmoid(NodeId x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

NodeId Tape::tanh(NodeId x) {
  return unary(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

NodeId Tape::exp(NodeId x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

NodeId Tape::log(NodeId x) {
  for (double v : value(x).data) require(v > 0.0, "log: operand must be positive");
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

NodeId Tape::sqrt(NodeId x) {
  for (double v : value(x).data) require(v >= 0.0, "sqrt: operand must be non-negative");
  // Partial at exactly 0 is defined as 0 (same spirit as abs'(0) = 0).
  return unary(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

NodeId Tape::abs(NodeId x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

NodeId Tape::clamp_min(NodeId x, double lo) {
  return unary(
      x, [lo](double v) { return std::max(v, lo); },
      [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

NodeId Tape::time_shift(NodeId x, int offset) {
  const Tensor& X = value(x);
  require(X.shape.size() == 2, "time_shift: input must be rank 2");
  const std::size_t rows = X.shape[0];
  const std::size_t cols = X.shape[1];
  Tensor out = Tensor::zeros({rows, cols});
  for (std::size_t t = 0; t < rows; ++t) {
    const long long src = static_cast<long long>(t) + offset;
    if (src < 0 || src >= static_cast<long long>(rows)) continue;
    for (std::size_t f = 0; f < cols; ++f)
      out.at(t, f) = X.at(static_cast<std::size_t>(src), f);
  }
  return push(std::move(out), {x},
              [this, x, offset, rows, cols](const Tensor& g, std::vector<Tensor>& grads) {
                Tensor& gx = grad_slot(grads, x, value(x).shape);
                for (std::size_t t = 0; t < rows; ++t) {
                  const long long src = static_cast<long long>(t) + offset;
                  if (src < 0 || src >= static_cast<long long>(rows)) continue;
                  for (std::size_t f = 0; f < cols; ++f)
                    gx.at(static_cast<std::size_t>(src), f) += g.at(t, f);
                }
              });
}

NodeId Tape::sum(NodeId x) {
  const Tensor& X = value(x);
  double s = 0.0;
  for (double v : X.data) s += v;
  return push(Tensor::scalar(s), {x}, [this, x](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& X = value(x);
    Tensor& gx = grad_slot(grads, x, X.shape);
    for (std::size_t i = 0; i < X.numel(); ++i) gx.data[i] += g.data[0];
  });
}

NodeId Tape::mean(NodeId x) {
  const Tensor& X = value(x);
  require(X.numel() > 0, "mean: empty tensor");
  double s = 0.0;
  for (double v : X.data) s += v;
  const double inv_n = 1.0 / static_cast<double>(X.numel());
  return push(Tensor::scalar(s * inv_n), {x},
              [this, x, inv_n](const Tensor& g, std::vector<Tensor>& grads) {
                const Tensor& X = value(x);
                Tensor& gx = grad_slot(grads, x, X.shape);
                for (std::size_t i = 0; i < X.numel(); ++i) gx.data[i] += g.data[0] * inv_n;
              });
}

NodeId Tape::l1_distance(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.same_shape(B), "l1_distance: shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < A.numel(); ++i) s += std::abs(A.data[i] - B.data[i]);
  return push(Tensor::scalar(s), {a, b},
              [this, a, b](const Tensor& g, std::vector<Tensor>& grads) {
                const Tensor& A = value(a);
                const Tensor& B = value(b);
                Tensor& ga = grad_slot(grads, a, A.shape);
                Tensor& gb = grad_slot(grads, b, B.shape);
                for (std::size_t i = 0; i < A.numel(); ++i) {
                  const double d = A.data[i] - B.data[i];
                  const double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                  ga.data[i] += g.data[0] * sg;
                  gb.data[i] -= g.data[0] * sg;
                }
              });
}

NodeId Tape::complex_magnitude(NodeId re, NodeId im, double eps) {
  const Tensor& R = value(re);
  const Tensor& I = value(im);
  require(R.same_shape(I), "complex_magnitude: re/im shapes differ");
  require(eps >= 0.0, "complex_magnitude: eps must be >= 0");
  Tensor out = Tensor::zeros(R.shape);
  for (std::size_t i = 0; i < R.numel(); ++i)
    out.data[i] = std::sqrt(R.data[i] * R.data[i] + I.data[i] * I.data[i] + eps);
  Tensor saved = out;
  return push(std::move(out), {re, im},
              [this, re, im, saved](const Tensor& g, std::vector<Tensor>& grads) {
                const Tensor& R = value(re);
                const Tensor& I = value(im);
                Tensor& gr = grad_slot(grads, re, R.shape);
                Tensor& gi = grad_slot(grads, im, I.shape);
                for (std::size_t i = 0; i < R.numel(); ++i) {
                  const double m = saved.data[i];
                  if (m == 0.0) continue;  // eps = 0 at exact silence: subgradient 0
                  gr.data[i] += g.data[i] * R.data[i] / m;
                  gi.data[i] += g.data[i] * I.data[i] / m;
                }
              });
}

std::pair<NodeId, NodeId> Tape::frame_window_dft(NodeId x, const signal::StftConfig& c) {
  const Tensor& X = value(x);
  require(X.rank() == 1, "frame_window_dft: input must be a 1-D signal");
  signal::validate(c);
  const std::size_t n = X.numel();
  const std::size_t n_frames = signal::num_frames(n, c);
  const std::size_t n_fft = static_cast<std::size_t>(c.n_fft);
  const std::size_t bins = n_fft / 2 + 1;
  const std::vector<double> win = signal::make_window(c.window, c.win_length);

  Tensor re = Tensor::zeros({n_frames, bins});
  Tensor im = Tensor::zeros({n_frames, bins});
  std::vector<std::complex<double>> buf(n_fft);
  for (std::size_t t = 0; t < n_frames; ++t) {
    signal::detail::fill_frame(X.data, c, win, t, buf);
    signal::fft_inplace(buf, false);
    for (std::size_t f = 0; f < bins; ++f) {
      re.at(t, f) = buf[f].real();
      im.at(t, f) = buf[f].imag();
    }
  }

  // The one-sided DFT is linear in x, so each part's adjoint is an
  // unnormalized inverse DFT of the (zero-extended) output gradient, routed
  // back through the window and the frame/pad indexing.
  auto make_back = [this, x, c, win, n, n_frames, n_fft, bins](bool real_part) {
    return [this, x, c, win, n, n_frames, n_fft, bins, real_part](const Tensor& g,
                                                                  std::vector<Tensor>& grads) {
      const Tensor& X = value(x);
      Tensor& gx = grad_slot(grads, x, X.shape);
      std::vector<std::complex<double>> G(n_fft);
      for (std::size_t t = 0; t < n_frames; ++t) {
        std::fill(G.begin(), G.end(), std::complex<double>(0.0, 0.0));
        for (std::size_t f = 0; f < bins; ++f)
          G[f] = real_part ? std::complex<double>(g.data[t * bins + f], 0.0)
                           : std::complex<double>(0.0, g.data[t * bins + f]);
        signal::fft_inplace(G, true);
        for (int k = 0; k < c.win_length; ++k) {
          const long long idx = signal::detail::frame_source_index(n, c, t, k);
          if (idx < 0) continue;
          gx.data[static_cast<std::size_t>(idx)] +=
              win[static_cast<std::size_t>(k)] * G[static_cast<std::size_t>(k)].real() *
              static_cast<double>(n_fft);
        }
      }
    };
  };

  const NodeId re_id = push(std::move(re), {x}, make_back(true));
  const NodeId im_id = push(std::move(im), {x}, make_back(false));
  return {re_id, im_id};
}

NodeId Tape::overlap_add_idft(NodeId re, NodeId im, const signal::StftConfig& c,
                              std::size_t out_samples) {
  const Tensor& R = value(re);
  const Tensor& I = value(im);
  require(R.rank() == 2 && R.same_shape(I), "overlap_add_idft: need matching T x F inputs");
  signal::check_ola(c);
  const std::size_t n_fft = static_cast<std::size_t>(c.n_fft);
  const std::size_t bins = n_fft / 2 + 1;
  require(R.cols() == bins, "overlap_add_idft: bins/config mismatch");
  require(out_samples > 0, "overlap_add_idft: out_samples must be positive");
  const std::size_t frames = R.rows();
  const std::size_t pad = c.center_pad ? n_fft / 2 : 0;
  const std::vector<double> win = signal::make_window(c.window, c.win_length);
  const std::size_t padded_len =
      (frames - 1) * static_cast<std::size_t>(c.hop) + static_cast<std::size_t>(c.win_length);

  std::vector<double> den(padded_len, 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (int k = 0; k < c.win_length; ++k) {
      const double wk = win[static_cast<std::size_t>(k)];
      den[t * static_cast<std::size_t>(c.hop) + static_cast<std::size_t>(k)] += wk * wk;
    }

  std::vector<double> acc(padded_len, 0.0);
  std::vector<std::complex<double>> buf(n_fft);
  const std::size_t half = n_fft / 2;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t f = 0; f <= half; ++f) buf[f] = {R.at(t, f), I.at(t, f)};
    for (std::size_t f = half + 1; f < n_fft; ++f) {
      buf[f] = std::conj(std::complex<double>(R.at(t, n_fft - f), I.at(t, n_fft - f)));
    }
    signal::fft_inplace(buf, true);
    const std::size_t base = t * static_cast<std::size_t>(c.hop);
    for (int k = 0; k < c.win_length; ++k)
      acc[base + static_cast<std::size_t>(k)] +=
          win[static_cast<std::size_t>(k)] * buf[static_cast<std::size_t>(k)].real();
  }

  Tensor out = Tensor::zeros({out_samples});
  for (std::size_t i = 0; i < out_samples; ++i) {
    const std::size_t p = i + pad;
    if (p < padded_len && den[p] > 1e-10) out.data[i] = acc[p] / den[p];
  }

  return push(std::move(out), {re, im},
              [this, re, im, c, out_samples, frames, n_fft, bins, pad, win,
               den, padded_len](const Tensor& g, std::vector<Tensor>& grads) {
                Tensor& gr = grad_slot(grads, re, value(re).shape);
                Tensor& gi = grad_slot(grads, im, value(im).shape);
                // d/d acc, undoing the window-power normalization.
                std::vector<double> dacc(padded_len, 0.0);
                for (std::size_t i = 0; i < out_samples; ++i) {
                  const std::size_t p = i + pad;
                  if (p < padded_len && den[p] > 1e-10) dacc[p] = g.data[i] / den[p];
                }
                // Per frame, the adjoint of hermitian-rebuild + IDFT + window
                // is a forward DFT of the windowed accumulator gradient,
                // scaled by how often each one-sided bin appears.
                std::vector<std::complex<double>> q(n_fft);
                for (std::size_t t = 0; t < frames; ++t) {
                  std::fill(q.begin(), q.end(), std::complex<double>(0.0, 0.0));
                  const std::size_t base = t * static_cast<std::size_t>(c.hop);
                  for (int k = 0; k < c.win_length; ++k)
                    q[static_cast<std::size_t>(k)] =
                        win[static_cast<std::size_t>(k)] * dacc[base + static_cast<std::size_t>(k)];
                  signal::fft_inplace(q, false);
                  for (std::size_t f = 0; f < bins; ++f) {
                    const double cf = herm_count(f, n_fft) / static_cast<double>(n_fft);
                    gr.data[t * bins + f] += cf * q[f].real();
                    if (f != 0 && f != n_fft / 2) gi.data[t * bins + f] += cf * q[f].imag();
                  }
                }
              });
}

std::pair<NodeId, NodeId> Tape::mask_apply(NodeId mask, NodeId re, NodeId im) {
  require(value(mask).same_shape(value(re)) && value(mask).same_shape(value(im)),
          "mask_apply: mask and spectrum shapes differ");
  return {mul(mask, re), mul(mask, im)};
}

Gradients Tape::backward(NodeId root) const {
  require(root < nodes_.size(), "backward: root not on tape");
  require(nodes_[root].value.numel() == 1, "backward: root must be a scalar");
  Gradients out;
  out.by_node.resize(nodes_.size());
  out.by_node[root] = Tensor::full(nodes_[root].value.shape, 1.0);
  for (NodeId i = nodes_.size(); i-- > 0;) {
    const Node& nd = nodes_[i];
    if (nd.back && !out.by_node[i].data.empty()) nd.back(out.by_node[i], out.by_node);
  }
  return out;
}

double grad_check(const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& build,
                  const std::vector<Tensor>& point, const GradCheckOptions& opt) {
  require(!point.empty(), "grad_check: no inputs");
  require(opt.delta > 0.0, "grad_check: delta must be positive");

  Tape tape;
  std::vector<NodeId> ids;
  ids.reserve(point.size());
  for (const Tensor& p : point) ids.push_back(tape.leaf(p, true));
  const NodeId root = build(tape, ids);
  const Gradients grads = tape.backward(root);

  const auto eval = [&](std::size_t pi, std::size_t ci, double v) {
    std::vector<Tensor> moved = point;
    moved[pi].data[ci] = v;
    Tape t;
    std::vector<NodeId> lids;
    lids.reserve(moved.size());
    for (Tensor& p : moved) lids.push_back(t.leaf(std::move(p), true));
    return t.value(build(t, lids)).item();
  };

  Rng rng(opt.seed);
  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < point.size(); ++pi) {
    const std::size_t n = point[pi].numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    std::size_t n_check = n;
    if (opt.max_coords_per_input > 0 && n > static_cast<std::size_t>(opt.max_coords_per_input)) {
      n_check = static_cast<std::size_t>(opt.max_coords_per_input);
      for (std::size_t j = 0; j < n_check; ++j) {
        const std::size_t pick = j + rng.uniform_int(n - j);
        std::swap(coords[j], coords[pick]);
      }
    }
    for (std::size_t j = 0; j < n_check; ++j) {
      const std::size_t ci = coords[j];
      const double x0 = point[pi].data[ci];
      const double numeric =
          (eval(pi, ci, x0 + opt.delta) - eval(pi, ci, x0 - opt.delta)) / (2.0 * opt.delta);
      const double analytic = grads.has(ids[pi]) ? grads.at(ids[pi]).data[ci] : 0.0;
      const double rel = std::abs(analytic - numeric) /
                         std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace seqa::ad
