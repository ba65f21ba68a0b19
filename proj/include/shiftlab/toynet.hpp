#pragma once

// Desk-scale MLP classifier with analytic gradients. Hidden layers use a
// rectifier; the head is either linear or a set of reciprocal points with
// squared-distance logits. Everything is double precision.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "shiftlab/error.hpp"
#include "shiftlab/matrix.hpp"
#include "shiftlab/rng.hpp"
#include "shiftlab/scores.hpp"
#include "shiftlab/shiftpack.hpp"

namespace shiftlab::toynet {

enum class HeadKind { linear, reciprocal };

/// Parameters live in one flat vector: for each layer W (out x in,
/// row-major) then b; for a reciprocal head the points P (C x D_feat) and
/// the radius R follow the hidden layers.
class Mlp {
 public:
  Mlp() = default;

  /// widths = [input, hidden..., classes].
  Mlp(std::vector<std::size_t> widths, std::uint64_t seed, HeadKind head = HeadKind::linear)
      : widths_(std::move(widths)), head_(head), seed_(seed) {
    if (widths_.size() < 2) throw InvalidArgument("Mlp: need at least input and output widths");
    for (auto w : widths_) {
      if (w == 0) throw InvalidArgument("Mlp: widths must be positive");
    }
    if (head_ == HeadKind::reciprocal && widths_.size() < 3) {
      throw InvalidArgument("Mlp: a reciprocal head needs at least one hidden layer");
    }
    layout();
    params_.assign(total_, 0.0);
    CounterRng rng(seed, "toynet/init");
    const std::size_t linear_layers = head_ == HeadKind::linear ? widths_.size() - 1 : widths_.size() - 2;
    for (std::size_t l = 0; l < linear_layers; ++l) {
      const bool is_head = l + 1 == widths_.size() - 1;
      const double scale = std::sqrt((is_head ? 1.0 : 2.0) / static_cast<double>(widths_[l]));
      for (double& w : weights(l)) w = scale * rng.normal();
    }
    if (head_ == HeadKind::reciprocal) {
      for (double& p : points()) p = 0.1 * rng.normal();
      params_[radius_offset_] = 1.0;
    }
  }

  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  HeadKind head() const noexcept { return head_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t input_dim() const noexcept { return widths_.front(); }
  std::size_t classes() const noexcept { return widths_.back(); }
  std::size_t hidden_count() const noexcept { return widths_.size() - 2; }
  /// Width of the representation feeding the head.
  std::size_t feature_dim() const noexcept { return widths_[widths_.size() - 2]; }
  /// Number of W/b blocks.
  std::size_t linear_layers() const noexcept { return w_offsets_.size(); }

  std::span<double> weights(std::size_t l) { return {params_.data() + w_offsets_[l], widths_[l] * widths_[l + 1]}; }
  std::span<const double> weights(std::size_t l) const {
    return {params_.data() + w_offsets_[l], widths_[l] * widths_[l + 1]};
  }
  std::span<double> bias(std::size_t l) { return {params_.data() + b_offsets_[l], widths_[l + 1]}; }
  std::span<const double> bias(std::size_t l) const { return {params_.data() + b_offsets_[l], widths_[l + 1]}; }

  std::span<double> points() { return {params_.data() + points_offset_, classes() * feature_dim()}; }
  std::span<const double> points() const { return {params_.data() + points_offset_, classes() * feature_dim()}; }
  double radius() const { return head_ == HeadKind::reciprocal ? params_[radius_offset_] : 0.0; }

  std::vector<double>& parameters() noexcept { return params_; }
  const std::vector<double>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }

  // Offsets into a flat gradient buffer with the same layout.
  std::size_t weight_offset(std::size_t l) const { return w_offsets_[l]; }
  std::size_t bias_offset(std::size_t l) const { return b_offsets_[l]; }
  std::size_t points_offset() const { return points_offset_; }
  std::size_t radius_offset() const { return radius_offset_; }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    return a.widths_ == b.widths_ && a.head_ == b.head_ && a.params_ == b.params_;
  }

 private:
  void layout() {
    std::size_t off = 0;
    const std::size_t linear_layers = head_ == HeadKind::linear ? widths_.size() - 1 : widths_.size() - 2;
    for (std::size_t l = 0; l < linear_layers; ++l) {
      w_offsets_.push_back(off);
      off += widths_[l] * widths_[l + 1];
      b_offsets_.push_back(off);
      off += widths_[l + 1];
    }
    if (head_ == HeadKind::reciprocal) {
      points_offset_ = off;
      off += classes() * feature_dim();
      radius_offset_ = off;
      off += 1;
    }
    total_ = off;
  }

  std::vector<std::size_t> widths_;
  HeadKind head_ = HeadKind::linear;
  std::uint64_t seed_ = 0;
  std::vector<double> params_;
  std::vector<std::size_t> w_offsets_, b_offsets_;
  std::size_t points_offset_ = 0, radius_offset_ = 0, total_ = 0;
};

/// Per-sample forward trace: post-rectifier hidden activations and logits.
struct Trace {
  std::vector<std::vector<double>> hidden;
  std::vector<double> logits;
};

inline void forward_one(const Mlp& m, std::span<const double> x, Trace& t) {
  if (x.size() != m.input_dim()) throw DataError("forward: input width mismatch");
  const auto& w = m.widths();
  const std::size_t H = m.hidden_count();
  t.hidden.resize(H);
  std::span<const double> in = x;
  for (std::size_t l = 0; l < m.linear_layers(); ++l) {
    const auto W = m.weights(l);
    const auto b = m.bias(l);
    const std::size_t n_in = w[l], n_out = w[l + 1];
    const bool hidden = l < H;
    std::vector<double>& out = hidden ? t.hidden[l] : t.logits;
    out.resize(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double* row = W.data() + o * n_in;
      double z = 0.0;
      for (std::size_t i = 0; i < n_in; ++i) z += row[i] * in[i];
      z += b[o];
      out[o] = hidden ? (z > 0.0 ? z : 0.0) : z;
    }
    in = out;
  }
  if (m.head() == HeadKind::reciprocal) {
    const auto& f = t.hidden.back();
    const std::size_t C = m.classes(), D = m.feature_dim();
    const auto P = m.points();
    t.logits.assign(C, 0.0);
    for (std::size_t k = 0; k < C; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < D; ++j) {
        const double diff = f[j] - P[k * D + j];
        d += diff * diff;
      }
      t.logits[k] = d;
    }
  }
}

struct Activations {
  std::vector<MatrixD> hidden;  // one [N, h_l] per hidden layer
  MatrixD logits;               // [N, C]
};

inline Activations forward(const Mlp& m, const MatrixD& x) {
  if (x.cols() != m.input_dim()) throw DataError("forward: input width mismatch");
  Activations a;
  for (std::size_t l = 0; l < m.hidden_count(); ++l) a.hidden.emplace_back(x.rows(), m.widths()[l + 1]);
  a.logits = MatrixD(x.rows(), m.classes());
  Trace t;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    forward_one(m, x.row(i), t);
    for (std::size_t l = 0; l < t.hidden.size(); ++l) std::copy(t.hidden[l].begin(), t.hidden[l].end(), a.hidden[l].row(i).begin());
    std::copy(t.logits.begin(), t.logits.end(), a.logits.row(i).begin());
  }
  return a;
}

/// Back-propagates dL/dlogits for one sample. Parameter gradients are
/// accumulated into `grad` (may be empty to skip); dL/dx is written to
/// `dinput` when non-null.
inline void backward_one(const Mlp& m, std::span<const double> x, const Trace& t, std::span<const double> dlogits,
                         std::span<double> grad, std::vector<double>* dinput) {
  const auto& w = m.widths();
  const std::size_t H = m.hidden_count();
  const bool want_params = !grad.empty();
  std::vector<double> delta(dlogits.begin(), dlogits.end());

  if (m.head() == HeadKind::reciprocal) {
    // logits_k = ||f - P_k||^2
    const auto& f = t.hidden.back();
    const std::size_t C = m.classes(), D = m.feature_dim();
    const auto P = m.points();
    std::vector<double> df(D, 0.0);
    for (std::size_t k = 0; k < C; ++k) {
      const double g = delta[k];
      if (g == 0.0) continue;
      for (std::size_t j = 0; j < D; ++j) {
        const double diff = f[j] - P[k * D + j];
        df[j] += 2.0 * g * diff;
        if (want_params) grad[m.points_offset() + k * D + j] -= 2.0 * g * diff;
      }
    }
    delta = std::move(df);
  }

  // Walk linear layers from the top. For the linear head the first layer
  // visited is the head itself (no rectifier).
  std::size_t l = m.linear_layers();
  while (l-- > 0) {
    const std::size_t n_in = w[l], n_out = w[l + 1];
    const bool hidden = l < H;
    std::span<const double> post = hidden ? std::span<const double>(t.hidden[l]) : std::span<const double>{};
    if (hidden) {
      for (std::size_t o = 0; o < n_out; ++o) {
        if (!(post[o] > 0.0)) delta[o] = 0.0;
      }
    }
    std::span<const double> in = l == 0 ? x : std::span<const double>(t.hidden[l - 1]);
    const auto W = m.weights(l);
    if (want_params) {
      double* gW = grad.data() + m.weight_offset(l);
      double* gb = grad.data() + m.bias_offset(l);
      for (std::size_t o = 0; o < n_out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        gb[o] += d;
        double* row = gW + o * n_in;
        for (std::size_t i = 0; i < n_in; ++i) row[i] += d * in[i];
      }
    }
    if (l == 0 && !dinput) break;
    std::vector<double> below(n_in, 0.0);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      const double* row = W.data() + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) below[i] += d * row[i];
    }
    delta = std::move(below);
  }
  if (dinput) {
    if (m.linear_layers() == 0) {
      dinput->assign(x.size(), 0.0);
    } else {
      *dinput = std::move(delta);
    }
  }
}

// ---------------------------------------------------------------------------
// Losses

enum class Loss { ce, oe, arpl };

inline std::string_view to_string(Loss l) {
  switch (l) {
    case Loss::ce: return "ce";
    case Loss::oe: return "oe";
    case Loss::arpl: return "arpl";
  }
  return "ce";
}

inline Loss parse_loss(std::string_view s) {
  if (s == "ce") return Loss::ce;
  if (s == "oe") return Loss::oe;
  if (s == "arpl") return Loss::arpl;
  throw InvalidArgument("unknown loss '" + std::string(s) + "'");
}

struct LossConfig {
  Loss loss = Loss::ce;
  double oe_lambda = 0.5;
  double open_weight = 0.1;  // ARPL open-space weight
};

/// One optimisation batch. `soft` (mixup targets, [B, C]) overrides `y`
/// when non-empty; `aux` holds OE outliers.
struct Batch {
  MatrixD x;
  std::vector<std::int64_t> y;
  MatrixD soft;
  MatrixD aux;
};

struct LossValue {
  double loss = 0.0;
  std::size_t correct = 0;
};

namespace detail {

inline double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

struct ChunkResult {
  std::vector<double> grad;
  double loss = 0.0;
  std::size_t correct = 0;
};

// Sum of per-sample losses/gradients over rows [lo, hi) of the ID batch.
inline void id_chunk(const Mlp& m, const Batch& b, const LossConfig& cfg, std::size_t lo, std::size_t hi,
                     ChunkResult& r, bool want_grad) {
  const std::size_t C = m.classes();
  Trace t;
  std::vector<double> g(C), target(C);
  for (std::size_t i = lo; i < hi; ++i) {
    forward_one(m, b.x.row(i), t);
    const auto& z = t.logits;
    const double lse = log_sum_exp(z);
    if (!b.soft.empty()) {
      const auto s = b.soft.row(i);
      std::copy(s.begin(), s.end(), target.begin());
    } else {
      std::fill(target.begin(), target.end(), 0.0);
      const auto y = b.y[i];
      if (y < 0 || static_cast<std::size_t>(y) >= C) throw DataError("training label outside [0, C)");
      target[static_cast<std::size_t>(y)] = 1.0;
    }
    double loss = lse;
    for (std::size_t k = 0; k < C; ++k) loss -= target[k] * z[k];
    for (std::size_t k = 0; k < C; ++k) g[k] = std::exp(z[k] - lse) - target[k];

    std::size_t label = 0;
    for (std::size_t k = 1; k < C; ++k) {
      if (target[k] > target[label]) label = k;
    }
    const auto pred = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    if (pred == label) ++r.correct;

    if (cfg.loss == Loss::arpl) {
      const double dev = z[label] - m.radius();
      loss += cfg.open_weight * std::abs(dev);
      const double sgn = dev > 0.0 ? 1.0 : dev < 0.0 ? -1.0 : 0.0;
      g[label] += cfg.open_weight * sgn;
      if (want_grad) r.grad[m.radius_offset()] -= cfg.open_weight * sgn;
    }
    r.loss += loss;
    if (want_grad) backward_one(m, b.x.row(i), t, g, r.grad, nullptr);
  }
}

// Sum over aux rows [lo, hi) of cross-entropy to the uniform distribution.
inline void aux_chunk(const Mlp& m, const Batch& b, std::size_t lo, std::size_t hi, ChunkResult& r, bool want_grad) {
  const std::size_t C = m.classes();
  const double u = 1.0 / static_cast<double>(C);
  Trace t;
  std::vector<double> g(C);
  for (std::size_t i = lo; i < hi; ++i) {
    forward_one(m, b.aux.row(i), t);
    const auto& z = t.logits;
    const double lse = log_sum_exp(z);
    double mean_z = 0.0;
    for (double v : z) mean_z += v;
    mean_z *= u;
    r.loss += lse - mean_z;
    if (want_grad) {
      for (std::size_t k = 0; k < C; ++k) g[k] = std::exp(z[k] - lse) - u;
      backward_one(m, b.aux.row(i), t, g, r.grad, nullptr);
    }
  }
}

template <typename F>
std::vector<ChunkResult> run_chunks(std::size_t n, std::size_t partitions, std::size_t threads, std::size_t grad_size,
                                    bool want_grad, F&& body) {
  partitions = std::max<std::size_t>(1, std::min(partitions, std::max<std::size_t>(n, 1)));
  std::vector<ChunkResult> chunks(partitions);
  for (auto& c : chunks) {
    if (want_grad) c.grad.assign(grad_size, 0.0);
  }
  auto bounds = [&](std::size_t p) {
    return std::pair<std::size_t, std::size_t>{n * p / partitions, n * (p + 1) / partitions};
  };
  if (threads <= 1 || partitions == 1) {
    for (std::size_t p = 0; p < partitions; ++p) {
      auto [lo, hi] = bounds(p);
      body(lo, hi, chunks[p]);
    }
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(partitions);
    for (std::size_t p = 0; p < partitions; ++p) {
      pool.emplace_back([&, p] {
        try {
          auto [lo, hi] = bounds(p);
          body(lo, hi, chunks[p]);
        } catch (...) {
          errors[p] = std::current_exception();
        }
      });
      if (pool.size() >= threads) {
        for (auto& th : pool) th.join();
        pool.clear();
      }
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return chunks;
}

}  // namespace detail

/// Batch loss and, when `grad` is non-null, its exact gradient with respect
/// to every parameter.
///   ce:   mean CE(x, y)
///   oe:   mean CE(x, y) + lambda * mean H(u, softmax(aux))
///   arpl: mean [CE over distance logits + w_o * |d_y - R|]
/// Work is split into `partitions` fixed contiguous chunks reduced in chunk
/// order, so results do not depend on `threads`.
inline LossValue loss_and_grad(const Mlp& m, const Batch& b, const LossConfig& cfg, std::vector<double>* grad,
                               std::size_t partitions = 1, std::size_t threads = 1) {
  if (b.x.rows() == 0) throw InvalidArgument("loss: empty batch");
  if (b.soft.empty() && b.y.size() != b.x.rows()) throw InvalidArgument("loss: labels do not match batch");
  if (cfg.loss == Loss::arpl && m.head() != HeadKind::reciprocal) throw InvalidArgument("arpl loss needs a reciprocal head");
  if (cfg.loss != Loss::arpl && m.head() != HeadKind::linear) throw InvalidArgument("ce/oe losses need a linear head");
  if (cfg.loss == Loss::oe && b.aux.rows() == 0) throw InvalidArgument("oe loss needs auxiliary data");
  const bool want = grad != nullptr;
  const std::size_t P = m.parameter_count();

  auto id = detail::run_chunks(b.x.rows(), partitions, threads, P, want,
                               [&](std::size_t lo, std::size_t hi, detail::ChunkResult& r) {
                                 detail::id_chunk(m, b, cfg, lo, hi, r, want);
                               });
  LossValue out;
  const double inv_b = 1.0 / static_cast<double>(b.x.rows());
  if (want) grad->assign(P, 0.0);
  double id_loss = 0.0;
  for (auto& c : id) {
    id_loss += c.loss;
    out.correct += c.correct;
    if (want) {
      for (std::size_t i = 0; i < P; ++i) (*grad)[i] += c.grad[i];
    }
  }
  out.loss = id_loss * inv_b;
  if (want) {
    for (double& g : *grad) g *= inv_b;
  }

  if (cfg.loss == Loss::oe) {
    auto aux = detail::run_chunks(b.aux.rows(), partitions, threads, P, want,
                                  [&](std::size_t lo, std::size_t hi, detail::ChunkResult& r) {
                                    detail::aux_chunk(m, b, lo, hi, r, want);
                                  });
    const double scale = cfg.oe_lambda / static_cast<double>(b.aux.rows());
    double aux_loss = 0.0;
    std::vector<double> aux_grad(want ? P : 0, 0.0);
    for (auto& c : aux) {
      aux_loss += c.loss;
      if (want) {
        for (std::size_t i = 0; i < P; ++i) aux_grad[i] += c.grad[i];
      }
    }
    out.loss += scale * aux_loss;
    if (want) {
      for (std::size_t i = 0; i < P; ++i) (*grad)[i] += scale * aux_grad[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct ArplParams {
  double open_weight = 0.1;
};

struct TrainSpec {
  Loss loss = Loss::ce;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  bool cosine = true;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double oe_lambda = 0.5;
  std::optional<double> mixup_alpha;
  ArplParams arpl;
  std::size_t partitions = 1;  // fixed gradient partitioning per batch
  std::size_t threads = 1;

  void check() const {
    if (epochs == 0) throw InvalidArgument("train spec: epochs must be >= 1");
    if (batch_size == 0) throw InvalidArgument("train spec: batch_size must be >= 1");
    if (!(oe_lambda >= 0.0)) throw InvalidArgument("train spec: oe_lambda must be >= 0");
    if (!(learning_rate > 0.0)) throw InvalidArgument("train spec: learning_rate must be > 0");
    if (mixup_alpha && !(*mixup_alpha > 0.0)) throw InvalidArgument("train spec: mixup_alpha must be > 0");
    if (partitions == 0) throw InvalidArgument("train spec: partitions must be >= 1");
  }

  LossConfig loss_config() const { return {loss, oe_lambda, arpl.open_weight}; }
};

struct EpochRecord {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  Mlp model;
  std::vector<EpochRecord> history;
};

inline Mlp make_model(std::size_t input_dim, std::size_t classes, const TrainSpec& spec, std::uint64_t seed) {
  std::vector<std::size_t> widths{input_dim};
  widths.insert(widths.end(), spec.hidden.begin(), spec.hidden.end());
  widths.push_back(classes);
  return Mlp(widths, seed, spec.loss == Loss::arpl ? HeadKind::reciprocal : HeadKind::linear);
}

namespace detail {

inline std::vector<std::size_t> permutation(std::size_t n, CounterRng rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

}  // namespace detail

/// SGD with momentum (optionally cosine-annealed). Shuffling, auxiliary
/// sampling and mixup draw from separate seeded streams, so switching the
/// auxiliary term or mixup on or off never changes the ID batch order.
inline TrainResult train(Mlp model, const MatrixD& x, const std::vector<std::int64_t>& y, const MatrixD* aux,
                         const TrainSpec& spec, std::uint64_t seed) {
  spec.check();
  if (x.rows() == 0) throw InvalidArgument("train: no training data");
  if (y.size() != x.rows()) throw InvalidArgument("train: labels do not match inputs");
  if (spec.loss == Loss::oe && (!aux || aux->rows() == 0)) throw InvalidArgument("train: oe loss requires auxiliary data");
  const auto cfg = spec.loss_config();
  const std::size_t N = x.rows(), B = std::min(spec.batch_size, N), C = model.classes();
  const std::size_t steps_per_epoch = (N + B - 1) / B;
  const std::size_t total_steps = steps_per_epoch * spec.epochs;
  std::vector<double> velocity(model.parameter_count(), 0.0), grad;
  TrainResult result;
  std::size_t step = 0, aux_cursor = 0;
  std::vector<std::size_t> aux_order;
  std::size_t aux_epoch = 0;
  if (aux && aux->rows() > 0) aux_order = detail::permutation(aux->rows(), CounterRng(seed, "train/aux", aux_epoch));

  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    const auto order = detail::permutation(N, CounterRng(seed, "train/shuffle", epoch));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * B, hi = std::min(N, lo + B);
      Batch batch;
      batch.x = MatrixD(hi - lo, x.cols());
      batch.y.resize(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        std::copy(x.row(order[i]).begin(), x.row(order[i]).end(), batch.x.row(i - lo).begin());
        batch.y[i - lo] = y[order[i]];
      }
      if (spec.mixup_alpha) {
        CounterRng mix(seed, "train/mixup", step);
        const double ga = mix.gamma(*spec.mixup_alpha), gb = mix.gamma(*spec.mixup_alpha);
        const double lam = ga + gb > 0.0 ? ga / (ga + gb) : (mix.uniform() < 0.5 ? 0.0 : 1.0);
        const auto partner = detail::permutation(hi - lo, mix);
        MatrixD mixed(hi - lo, x.cols());
        batch.soft = MatrixD(hi - lo, C, 0.0);
        for (std::size_t i = 0; i < hi - lo; ++i) {
          const std::size_t j = partner[i];
          for (std::size_t c = 0; c < x.cols(); ++c) {
            mixed(i, c) = lam * batch.x(i, c) + (1.0 - lam) * batch.x(j, c);
          }
          batch.soft(i, static_cast<std::size_t>(batch.y[i])) += lam;
          batch.soft(i, static_cast<std::size_t>(batch.y[j])) += 1.0 - lam;
        }
        batch.x = std::move(mixed);
      }
      if (spec.loss == Loss::oe) {
        batch.aux = MatrixD(hi - lo, aux->cols());
        for (std::size_t i = 0; i < hi - lo; ++i) {
          if (aux_cursor == aux_order.size()) {
            aux_order = detail::permutation(aux->rows(), CounterRng(seed, "train/aux", ++aux_epoch));
            aux_cursor = 0;
          }
          const auto src = aux->row(aux_order[aux_cursor++]);
          std::copy(src.begin(), src.end(), batch.aux.row(i).begin());
        }
      }

      const auto lv = loss_and_grad(model, batch, cfg, &grad, spec.partitions, spec.threads);
      loss_sum += lv.loss;
      correct += lv.correct;

      double lr = spec.learning_rate;
      if (spec.cosine) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
      }
      auto& p = model.parameters();
      for (std::size_t i = 0; i < p.size(); ++i) {
        velocity[i] = spec.momentum * velocity[i] + grad[i] + spec.weight_decay * p[i];
        p[i] -= lr * velocity[i];
      }
      ++step;
    }
    for (double v : model.parameters()) {
      if (!std::isfinite(v)) throw DataError("train: parameters diverged (non-finite)");
    }
    result.history.push_back({loss_sum / static_cast<double>(steps_per_epoch),
                              static_cast<double>(correct) / static_cast<double>(N)});
  }
  result.model = std::move(model);
  return result;
}

inline double accuracy(const Mlp& m, const MatrixD& x, const std::vector<std::int64_t>& y) {
  const auto a = forward(m, x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto z = a.logits.row(i);
    const auto pred = static_cast<std::int64_t>(std::max_element(z.begin(), z.end()) - z.begin());
    if (pred == y[i]) ++hit;
  }
  return x.rows() ? static_cast<double>(hit) / static_cast<double>(x.rows()) : 0.0;
}

// ---------------------------------------------------------------------------
// ODIN input perturbation

/// Gradient of log max-softmax(logits(x) / T) with respect to x, taken at the
/// predicted class.
inline std::vector<double> odin_input_gradient(const Mlp& m, std::span<const double> x, double T) {
  if (!(T > 0.0)) throw InvalidArgument("odin: temperature must be > 0");
  Trace t;
  forward_one(m, x, t);
  const auto& z = t.logits;
  const std::size_t C = z.size();
  const auto pred = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  std::vector<double> scaled(C);
  for (std::size_t k = 0; k < C; ++k) scaled[k] = z[k] / T;
  const double lse = detail::log_sum_exp(scaled);
  std::vector<double> g(C);
  for (std::size_t k = 0; k < C; ++k) g[k] = ((k == pred ? 1.0 : 0.0) - std::exp(scaled[k] - lse)) / T;
  std::vector<double> dx;
  backward_one(m, x, t, g, {}, &dx);
  return dx;
}

/// Logits of x - eps * sign(-grad_x log S_max(x; T)).
inline MatrixD odin_perturb(const Mlp& m, const MatrixD& x, double eps, double T) {
  if (!(eps >= 0.0)) throw InvalidArgument("odin: epsilon must be >= 0");
  if (eps == 0.0) return forward(m, x).logits;
  MatrixD out(x.rows(), m.classes());
  Trace t;
  std::vector<double> xt(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    const auto g = odin_input_gradient(m, row, T);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double neg = -g[j];
      const double sgn = neg > 0.0 ? 1.0 : neg < 0.0 ? -1.0 : 0.0;
      xt[j] = row[j] - eps * sgn;
    }
    forward_one(m, xt, t);
    std::copy(t.logits.begin(), t.logits.end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Two-dimensional projection head

struct Projection2d {
  MatrixD proj;                  // [2, D]
  std::vector<double> proj_bias; // [2]
  MatrixD readout;               // [C, 2]
  std::vector<double> readout_bias;

  MatrixD embed(const MatrixD& features) const {
    return scores::recompute_logits(features, proj, proj_bias);
  }
};

struct Projection2dSpec {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
};

/// Trains a 2-wide linear layer after the frozen backbone's penultimate
/// features, read out to the classes by a 2 -> C linear layer under CE.
inline Projection2d project2d(const Mlp& model, const MatrixD& x, const std::vector<std::int64_t>& y,
                              std::uint64_t seed, const Projection2dSpec& spec = {}) {
  if (model.hidden_count() == 0) throw InvalidArgument("project2d: model has no hidden layer");
  const auto acts = forward(model, x);
  const MatrixD& F = acts.hidden.back();
  const std::size_t N = F.rows(), D = F.cols(), C = model.classes();
  Projection2d p{MatrixD(2, D), std::vector<double>(2, 0.0), MatrixD(C, 2), std::vector<double>(C, 0.0)};
  CounterRng init(seed, "project2d/init");
  for (double& v : p.proj.flat()) v = init.normal() / std::sqrt(static_cast<double>(D));
  for (double& v : p.readout.flat()) v = init.normal() / std::sqrt(2.0);

  std::vector<double*> params;
  for (double& v : p.proj.flat()) params.push_back(&v);
  for (double& v : p.proj_bias) params.push_back(&v);
  for (double& v : p.readout.flat()) params.push_back(&v);
  for (double& v : p.readout_bias) params.push_back(&v);
  std::vector<double> vel(params.size(), 0.0), grad(params.size());

  const std::size_t B = std::min(spec.batch_size, N);
  const std::size_t steps = (N + B - 1) / B;
  std::vector<double> e(2), z(C), ge(2);
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    const auto order = detail::permutation(N, CounterRng(seed, "project2d/shuffle", epoch));
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t lo = s * B, hi = std::min(N, lo + B);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t ii = lo; ii < hi; ++ii) {
        const auto f = F.row(order[ii]);
        const auto label = static_cast<std::size_t>(y[order[ii]]);
        for (std::size_t a = 0; a < 2; ++a) {
          double v = p.proj_bias[a];
          for (std::size_t j = 0; j < D; ++j) v += p.proj(a, j) * f[j];
          e[a] = v;
        }
        for (std::size_t k = 0; k < C; ++k) z[k] = p.readout(k, 0) * e[0] + p.readout(k, 1) * e[1] + p.readout_bias[k];
        const double lse = detail::log_sum_exp(z);
        ge[0] = ge[1] = 0.0;
        std::size_t off = 2 * D + 2;
        for (std::size_t k = 0; k < C; ++k) {
          const double g = std::exp(z[k] - lse) - (k == label ? 1.0 : 0.0);
          grad[off + 2 * k] += g * e[0];
          grad[off + 2 * k + 1] += g * e[1];
          grad[off + 2 * C + k] += g;
          ge[0] += g * p.readout(k, 0);
          ge[1] += g * p.readout(k, 1);
        }
        for (std::size_t a = 0; a < 2; ++a) {
          for (std::size_t j = 0; j < D; ++j) grad[a * D + j] += ge[a] * f[j];
          grad[2 * D + a] += ge[a];
        }
      }
      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t i = 0; i < params.size(); ++i) {
        vel[i] = spec.momentum * vel[i] + grad[i] * inv;
        *params[i] -= spec.learning_rate * vel[i];
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Pack export

/// The head as a linear layer over the penultimate features. For a
/// reciprocal head ||f - P_k||^2 = ||f||^2 - 2 P_k.f + ||P_k||^2; the
/// per-row ||f||^2 term is common to all classes and is dropped, leaving
/// W = -2P, b_k = ||P_k||^2.
inline std::pair<MatrixD, std::vector<double>> linear_head(const Mlp& m) {
  const std::size_t C = m.classes(), D = m.feature_dim();
  MatrixD W(C, D);
  std::vector<double> b(C);
  if (m.head() == HeadKind::linear) {
    const std::size_t l = m.linear_layers() - 1;
    const auto w = m.weights(l);
    std::copy(w.begin(), w.end(), W.data().begin());
    const auto bb = m.bias(l);
    std::copy(bb.begin(), bb.end(), b.begin());
  } else {
    const auto P = m.points();
    for (std::size_t k = 0; k < C; ++k) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < D; ++j) {
        W(k, j) = -2.0 * P[k * D + j];
        n2 += P[k * D + j] * P[k * D + j];
      }
      b[k] = n2;
    }
  }
  return {W, b};
}

struct ExportOptions {
  std::optional<double> odin_epsilon;
  double odin_temperature = 1000.0;
};

namespace detail {

inline MatrixD round_to_float(const MatrixD& m) {
  MatrixD out = m;
  for (double& v : out.flat()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

}  // namespace detail

/// Runs the model over `x` and packages logits, every hidden layer as
/// "features/layer_<i>", labels and the head. Stored logits are the head
/// applied to the stored (float32) features and weights, so recomputing them
/// from the pack reproduces them to float32 rounding.
inline ShiftPack export_pack(const Mlp& m, const MatrixD& x, const std::vector<std::int64_t>& labels, Role role,
                             const ExportOptions& opts = {}) {
  if (labels.size() != x.rows()) throw InvalidArgument("export_pack: labels do not match inputs");
  ShiftPack pack;
  pack.role = role;
  pack.class_count = m.classes();
  const auto acts = forward(m, x);
  std::string penultimate;
  MatrixD feats32;
  if (m.hidden_count() == 0) {
    feats32 = detail::round_to_float(x);
    penultimate = "features/input";
    pack.put(make_float_tensor(penultimate, feats32));
  } else {
    for (std::size_t l = 0; l < acts.hidden.size(); ++l) {
      const auto name = "features/layer_" + std::to_string(l + 1);
      pack.put(make_float_tensor(name, acts.hidden[l]));
      if (l + 1 == acts.hidden.size()) {
        feats32 = detail::round_to_float(acts.hidden[l]);
        penultimate = name;
      }
    }
  }
  auto [W, b] = linear_head(m);
  const MatrixD W32 = detail::round_to_float(W);
  std::vector<double> b32(b.size());
  for (std::size_t k = 0; k < b.size(); ++k) b32[k] = static_cast<double>(static_cast<float>(b[k]));
  const auto logits = scores::recompute_logits(feats32, W32, b32);

  pack.tensors.insert(pack.tensors.begin(), make_float_tensor("logits", logits));
  pack.put(make_int_tensor("labels", {labels.size()}, labels));
  pack.put(make_float_tensor("fc.weight", W32));
  pack.put(make_float_tensor("fc.bias", {b32.size()}, std::vector<float>(b32.begin(), b32.end())));
  if (opts.odin_epsilon) {
    pack.put(make_float_tensor("perturbed_logits", odin_perturb(m, x, *opts.odin_epsilon, opts.odin_temperature)));
    pack.metadata["odin_epsilon"] = std::to_string(*opts.odin_epsilon);
    pack.metadata["odin_temperature"] = std::to_string(opts.odin_temperature);
  }
  pack.metadata["producer"] = "shiftlab-toynet";
  pack.metadata["penultimate"] = penultimate;
  pack.metadata["head"] = m.head() == HeadKind::linear ? "linear" : "reciprocal";
  pack.metadata["seed"] = std::to_string(m.seed());
  return pack;
}

// ---------------------------------------------------------------------------
// Checkpoints: "SHNT", u32 version, u64 header length, JSON header, then the
// flat parameter vector as little-endian float64.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const Mlp& m) {
  nlohmann::json h;
  h["widths"] = m.widths();
  h["head"] = m.head() == HeadKind::linear ? "linear" : "reciprocal";
  h["seed"] = m.seed();
  h["parameter_count"] = m.parameter_count();
  const auto header = h.dump();
  std::string buf("SHNT", 4);
  shiftlab::detail::append_le<std::uint32_t>(buf, kCheckpointVersion);
  shiftlab::detail::append_le<std::uint64_t>(buf, header.size());
  buf += header;
  for (double v : m.parameters()) shiftlab::detail::append_le(buf, v);
  return buf;
}

inline Mlp decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != "SHNT") throw DataError("not a shiftlab checkpoint");
  const auto version = shiftlab::detail::load_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = shiftlab::detail::load_le<std::uint64_t>(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw DataError("truncated checkpoint header");
  try {
    const auto h = nlohmann::json::parse(bytes.substr(16, hlen));
    Mlp m(h.at("widths").get<std::vector<std::size_t>>(), h.at("seed").get<std::uint64_t>(),
          h.at("head").get<std::string>() == "reciprocal" ? HeadKind::reciprocal : HeadKind::linear);
    const auto count = h.at("parameter_count").get<std::size_t>();
    if (count != m.parameter_count()) throw DataError("checkpoint parameter count does not match architecture");
    if (bytes.size() - 16 - hlen != count * 8) throw DataError("truncated checkpoint payload");
    const char* p = bytes.data() + 16 + hlen;
    for (std::size_t i = 0; i < count; ++i) m.parameters()[i] = shiftlab::detail::load_le<double>(p + 8 * i);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
}

inline void save_checkpoint(const Mlp& m, const std::string& path) {
  const auto bytes = encode_checkpoint(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline Mlp load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace shiftlab::toynet
