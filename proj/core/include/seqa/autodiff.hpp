#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "seqa/error.hpp"
#include "seqa/signal.hpp"
#include "seqa/tensor.hpp"

namespace seqa::ad {

using NodeId = std::size_t;

/// Per-node gradients from one backward pass. Nodes the root does not depend
/// on have no entry; that means a zero gradient.
struct Gradients {
  std::vector<Tensor> by_node;

  bool has(NodeId id) const { return id < by_node.size() && !by_node[id].data.empty(); }
  const Tensor& at(NodeId id) const {
    require(has(id), "Gradients: no gradient recorded for node");
    return by_node[id];
  }
};

/// Append-only reverse-mode tape over double tensors. Build a fresh tape per
/// forward pass; parameters live outside the tape and are registered as
/// leaves each time. Single-threaded per tape; distinct tapes are
/// independent.
///
/// Subgradient conventions: abs'(0) = 0, relu'(0) = 0, clamp_min'(at the
/// floor) = 0. complex_magnitude(re, im, eps) = sqrt(re^2 + im^2 + eps) so
/// the magnitude path stays differentiable at silence for eps > 0.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  NodeId leaf(Tensor v, bool trainable = false);
  NodeId constant(Tensor v) { return leaf(std::move(v), false); }
  NodeId constant(double v) { return leaf(Tensor::scalar(v), false); }

  const Tensor& value(NodeId id) const;
  bool trainable(NodeId id) const;
  std::vector<NodeId> trainable_leaves() const;
  std::size_t size() const { return nodes_.size(); }

  // Elementwise arithmetic. Shapes must match, or one side may be a scalar,
  // or a matrix may combine with a length-cols vector (row broadcast).
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);  // any zero in the denominator -> error

  // matmul accepts (m,k)x(k,n); a rank-1 operand is promoted to a row (lhs)
  // or column (rhs) and the result is squeezed back.
  NodeId matmul(NodeId a, NodeId b);

  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId tanh(NodeId x);
  NodeId exp(NodeId x);
  NodeId log(NodeId x);   // natural log; any entry <= 0 -> error
  NodeId sqrt(NodeId x);  // any entry < 0 -> error
  NodeId abs(NodeId x);
  NodeId clamp_min(NodeId x, double lo);

  /// Rows of a T x F matrix shifted along time: output row t equals input
  /// row t + offset where that exists, zeros elsewhere. Lets a per-frame
  /// network read neighboring frames without a concat op.
  NodeId time_shift(NodeId x, int offset);

  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  /// Sum of absolute elementwise differences (L1 distance).
  NodeId l1_distance(NodeId a, NodeId b);

  NodeId complex_magnitude(NodeId re, NodeId im, double eps);

  /// Differentiable STFT of a 1-D signal node: frames, windows and DFTs
  /// exactly like signal::stft and returns the one-sided {real, imag} parts
  /// as two T x F nodes.
  std::pair<NodeId, NodeId> frame_window_dft(NodeId x, const signal::StftConfig& c);

  /// Differentiable iSTFT (weighted overlap-add with window-power
  /// normalization), matching signal::istft. out_samples plays the role of
  /// Spectrogram::source_samples.
  NodeId overlap_add_idft(NodeId re, NodeId im, const signal::StftConfig& c,
                          std::size_t out_samples);

  /// Elementwise real mask on a one-sided complex spectrum.
  std::pair<NodeId, NodeId> mask_apply(NodeId mask, NodeId re, NodeId im);

  /// Reverse-mode gradients of a scalar root w.r.t. every node it depends
  /// on. Frozen (non-trainable) leaves still receive gradients; callers
  /// simply do not update them.
  Gradients backward(NodeId root) const;

 private:
  using BackFn = std::function<void(const Tensor& g, std::vector<Tensor>& grads)>;
  struct Node {
    Tensor value;
    std::vector<NodeId> parents;
    BackFn back;  // empty for leaves
    bool trainable = false;
  };

  NodeId push(Tensor value, std::vector<NodeId> parents, BackFn back);
  NodeId unary(NodeId x, const std::function<double(double)>& f,
               const std::function<double(double, double)>& dfdx);
  const Node& node(NodeId id) const;

  std::vector<Node> nodes_;
};

struct GradCheckOptions {
  double delta = 1e-5;
  /// Cap on coordinates checked per input tensor (<=0 checks all). When
  /// capped, coordinates are drawn without replacement from a seeded RNG so
  /// runs are reproducible.
  int max_coords_per_input = 0;
  std::uint64_t seed = 1;
};

/// Central-difference check of backward(). `build` must register each tensor
/// in `point` as a trainable leaf (in order) and return a scalar root.
/// Returns the maximum relative error |analytic - numeric| /
/// max(|analytic| + |numeric|, 1e-6) over all checked coordinates.
double grad_check(
    const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& build,
    const std::vector<Tensor>& point, const GradCheckOptions& opt = {});

}  // namespace seqa::ad
