#pragma once

// Two-branch multilayer perceptron with two 5-way Q-value heads, trained by
// hand-written backpropagation and Adam.
//
//   vision (eta + 3) --W1v--> relu(256) --+
//                                         +--> [288] --W2--> relu(128) --W3--> 10
//   temps  (2)       --W1u--> relu(32)  --+
//
// Outputs 0..4 are the flow head, 5..9 the temperature head. Samples are
// stored column-wise: a batch is an (input_dim x B) matrix.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "flowrl/error.hpp"
#include "flowrl/rng.hpp"
#include "flowrl/sim_env.hpp"

namespace flowrl {

struct NetShape {
  int vision_in = 33;
  int temp_in = 2;
  int vision_hidden = 256;
  int temp_hidden = 32;
  int hidden = 128;
  int outputs = 2 * kActionsPerHead;

  int input_dim() const { return vision_in + temp_in; }
  int concat_dim() const { return vision_hidden + temp_hidden; }

  std::size_t param_count() const {
    auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
    return lin(vision_in, vision_hidden) + lin(temp_in, temp_hidden) + lin(concat_dim(), hidden) +
           lin(hidden, outputs);
  }

  // Network for a history window of eta labels.
  static NetShape for_eta(std::size_t eta) {
    NetShape s;
    s.vision_in = static_cast<int>(eta) + 3;
    return s;
  }

  friend bool operator==(const NetShape&, const NetShape&) = default;
};

enum class Layer { vision = 0, temp = 1, hidden = 2, head = 3 };

struct QValues {
  std::array<double, kActionsPerHead> flow{};
  std::array<double, kActionsPerHead> temp{};
};

// Smallest index attaining the maximum.
inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

template <typename Scalar = double>
class QNetwork {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;
  using VecMap = Eigen::Map<Vec>;
  using ConstVecMap = Eigen::Map<const Vec>;

  // Activations kept for the backward pass.
  struct Cache {
    Mat input;
    Mat h1v, h1u;  // post-relu
    Mat concat;
    Mat h2;        // post-relu
    Mat q;
  };

  explicit QNetwork(NetShape shape = {}) : shape_(shape), params_(Vec::Zero(shape.param_count())) {
    if (shape.vision_in < 1 || shape.temp_in < 1 || shape.vision_hidden < 1 || shape.temp_hidden < 1 ||
        shape.hidden < 1 || shape.outputs != 2 * kActionsPerHead)
      throw ConfigError("QNetwork: invalid shape");
  }

  // Weights and biases uniform in +-1/sqrt(fan_in), drawn layer by layer.
  static QNetwork initialized(NetShape shape, Rng& rng) {
    QNetwork net(shape);
    for (auto layer : {Layer::vision, Layer::temp, Layer::hidden, Layer::head}) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(net.weight(layer).cols()));
      auto w = net.weight(layer);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
      auto b = net.bias(layer);
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
    }
    return net;
  }

  const NetShape& shape() const noexcept { return shape_; }
  std::size_t param_count() const noexcept { return static_cast<std::size_t>(params_.size()); }
  Vec& params() noexcept { return params_; }
  const Vec& params() const noexcept { return params_; }

  MatMap weight(Layer l) {
    const auto [off, rows, cols] = weight_slot(l);
    return MatMap(params_.data() + off, rows, cols);
  }
  ConstMatMap weight(Layer l) const {
    const auto [off, rows, cols] = weight_slot(l);
    return ConstMatMap(params_.data() + off, rows, cols);
  }
  VecMap bias(Layer l) {
    const auto [off, rows, cols] = weight_slot(l);
    return VecMap(params_.data() + off + rows * cols, rows);
  }
  ConstVecMap bias(Layer l) const {
    const auto [off, rows, cols] = weight_slot(l);
    return ConstVecMap(params_.data() + off + rows * cols, rows);
  }

  // Q-values for a batch of column states; fills `cache` when given.
  Mat forward_batch(const Mat& input, Cache* cache = nullptr) const {
    if (cache) {
      forward_into(input, *cache);
      return cache->q;
    }
    Cache local;
    forward_into(input, local);
    return std::move(local.q);
  }

  // Forward pass writing every activation into `c`. Buffers are reused when
  // the batch size does not change.
  void forward_into(const Mat& input, Cache& c) const {
    if (input.rows() != shape_.input_dim())
      throw DimensionError("QNetwork::forward: expected input dimension " + std::to_string(shape_.input_dim()));
    const auto n = input.cols();
    c.input = input;
    c.h1v.noalias() = weight(Layer::vision) * input.topRows(shape_.vision_in);
    c.h1v.colwise() += bias(Layer::vision);
    c.h1v = c.h1v.cwiseMax(Scalar(0));
    c.h1u.noalias() = weight(Layer::temp) * input.bottomRows(shape_.temp_in);
    c.h1u.colwise() += bias(Layer::temp);
    c.h1u = c.h1u.cwiseMax(Scalar(0));
    c.concat.resize(shape_.concat_dim(), n);
    c.concat.topRows(shape_.vision_hidden) = c.h1v;
    c.concat.bottomRows(shape_.temp_hidden) = c.h1u;
    c.h2.noalias() = weight(Layer::hidden) * c.concat;
    c.h2.colwise() += bias(Layer::hidden);
    c.h2 = c.h2.cwiseMax(Scalar(0));
    c.q.noalias() = weight(Layer::head) * c.h2;
    c.q.colwise() += bias(Layer::head);
  }

  QValues forward(std::span<const double> state) const {
    if (static_cast<int>(state.size()) != shape_.input_dim())
      throw DimensionError("QNetwork::forward: expected input dimension " + std::to_string(shape_.input_dim()));
    Mat x(shape_.input_dim(), 1);
    for (int i = 0; i < shape_.input_dim(); ++i) x(i, 0) = static_cast<Scalar>(state[i]);
    const Mat q = forward_batch(x);
    QValues out;
    for (int i = 0; i < kActionsPerHead; ++i) {
      out.flow[i] = static_cast<double>(q(i, 0));
      out.temp[i] = static_cast<double>(q(kActionsPerHead + i, 0));
    }
    return out;
  }

  // Gradient of a loss with respect to all parameters, given dLoss/dQ
  // (outputs x B) for the batch recorded in `cache`.
  Vec backward(const Cache& c, const Mat& dq) const {
    Vec grad;
    Cache ws;
    backward_into(c, dq, ws, grad);
    return grad;
  }

  // As backward(), reusing `grad` and the delta buffers of `ws`.
  void backward_into(const Cache& c, const Mat& dq, Cache& ws, Vec& grad) const {
    if (dq.rows() != shape_.outputs || dq.cols() != c.q.cols())
      throw DimensionError("QNetwork::backward: gradient shape mismatch");
    grad.resize(params_.size());
    auto gw = [&](Layer l) {
      const auto [off, rows, cols] = weight_slot(l);
      return MatMap(grad.data() + off, rows, cols);
    };
    auto gb = [&](Layer l) {
      const auto [off, rows, cols] = weight_slot(l);
      return VecMap(grad.data() + off + rows * cols, rows);
    };
    gw(Layer::head).noalias() = dq * c.h2.transpose();
    gb(Layer::head) = dq.rowwise().sum();

    // ws.h2 holds dL/d(h2), ws.concat dL/d(concat), ws.h1v / ws.h1u the
    // branch deltas.
    ws.h2.noalias() = weight(Layer::head).transpose() * dq;
    ws.h2.array() *= relu_mask(c.h2);
    gw(Layer::hidden).noalias() = ws.h2 * c.concat.transpose();
    gb(Layer::hidden) = ws.h2.rowwise().sum();

    ws.concat.noalias() = weight(Layer::hidden).transpose() * ws.h2;
    ws.h1v = ws.concat.topRows(shape_.vision_hidden);
    ws.h1v.array() *= relu_mask(c.h1v);
    ws.h1u = ws.concat.bottomRows(shape_.temp_hidden);
    ws.h1u.array() *= relu_mask(c.h1u);
    gw(Layer::vision).noalias() = ws.h1v * c.input.topRows(shape_.vision_in).transpose();
    gb(Layer::vision) = ws.h1v.rowwise().sum();
    gw(Layer::temp).noalias() = ws.h1u * c.input.bottomRows(shape_.temp_in).transpose();
    gb(Layer::temp) = ws.h1u.rowwise().sum();
  }

  friend bool operator==(const QNetwork& a, const QNetwork& b) {
    return a.shape_ == b.shape_ && a.params_ == b.params_;
  }

 private:
  struct Slot {
    std::ptrdiff_t offset;
    Eigen::Index rows;
    Eigen::Index cols;
  };

  // Parameter layout: [W1v b1v W1u b1u W2 b2 W3 b3], weights column-major.
  Slot weight_slot(Layer l) const {
    const std::array<std::pair<Eigen::Index, Eigen::Index>, 4> dims{{
        {shape_.vision_hidden, shape_.vision_in},
        {shape_.temp_hidden, shape_.temp_in},
        {shape_.hidden, shape_.concat_dim()},
        {shape_.outputs, shape_.hidden},
    }};
    std::ptrdiff_t off = 0;
    for (int i = 0; i < static_cast<int>(l); ++i) off += dims[i].first * dims[i].second + dims[i].first;
    const auto [rows, cols] = dims[static_cast<int>(l)];
    return {off, rows, cols};
  }

  static auto relu_mask(const Mat& post_activation) {
    return (post_activation.array() > Scalar(0)).template cast<Scalar>();
  }

  NetShape shape_;
  Vec params_;
};

// ---- optimization ---------------------------------------------------------

template <typename Scalar = double>
class Adam {
 public:
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  explicit Adam(std::size_t n = 0, double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : m_(Vec::Zero(n)), v_(Vec::Zero(n)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Vec& params, const Vec& grad) {
    if (grad.size() != params.size() || grad.size() != m_.size())
      throw DimensionError("Adam::step: size mismatch");
    ++t_;
    m_ = Scalar(beta1_) * m_ + Scalar(1.0 - beta1_) * grad;
    v_ = Scalar(beta2_) * v_ + Scalar(1.0 - beta2_) * grad.cwiseProduct(grad);
    const Scalar c1 = Scalar(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const Scalar c2 = Scalar(1.0 - std::pow(beta2_, static_cast<double>(t_)));
    params.array() -= Scalar(lr_) * (m_.array() / c1) / ((v_.array() / c2).sqrt() + Scalar(eps_));
  }

  std::uint64_t steps() const noexcept { return t_; }
  double learning_rate() const noexcept { return lr_; }
  const Vec& first_moment() const noexcept { return m_; }
  const Vec& second_moment() const noexcept { return v_; }

  void restore(Vec m, Vec v, std::uint64_t t) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw DimensionError("Adam::restore: size mismatch");
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

  friend bool operator==(const Adam& a, const Adam& b) {
    return a.t_ == b.t_ && a.m_ == b.m_ && a.v_ == b.v_ && a.lr_ == b.lr_;
  }

 private:
  Vec m_, v_;
  std::uint64_t t_ = 0;
  double lr_, beta1_, beta2_, eps_;
};

// target <- tau * policy + (1 - tau) * target
template <typename Scalar>
void soft_update(QNetwork<Scalar>& target, const QNetwork<Scalar>& policy, double tau) {
  if (!(target.shape() == policy.shape())) throw DimensionError("soft_update: network shapes differ");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ContractError("soft_update: tau must lie in [0, 1]");
  if (tau == 1.0) {
    target.params() = policy.params();
    return;
  }
  target.params() = Scalar(tau) * policy.params() + Scalar(1.0 - tau) * target.params();
}

// ---- TD learning ----------------------------------------------------------

inline constexpr int kNoAction = -1;

template <typename Scalar = double>
struct Batch {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Mat states;       // input_dim x B
  Mat next_states;  // input_dim x B
  std::vector<int> flow_action;
  std::vector<int> temp_action;  // kNoAction where the temperature head did not act
  std::vector<double> reward;
  std::vector<std::uint8_t> terminal;

  std::size_t size() const { return reward.size(); }
};

// Per-head Bellman targets. temp[i] is NaN where no temperature action ran.
struct TdTargets {
  std::vector<double> flow;
  std::vector<double> temp;
};

template <typename Scalar = double>
struct LossGradient {
  double loss = 0.0;
  double flow_loss = 0.0;
  double temp_loss = 0.0;
  typename QNetwork<Scalar>::Vec grad;
};

// Buffers reused across training updates.
template <typename Scalar = double>
struct LearnWorkspace {
  Batch<Scalar> batch;
  typename QNetwork<Scalar>::Cache cache, next_cache, deltas;
  typename QNetwork<Scalar>::Mat dq;
  TdTargets y;
  LossGradient<Scalar> out;
};

template <typename Scalar>
void td_targets_into(const Batch<Scalar>& batch, const QNetwork<Scalar>& target_net, double gamma,
                     typename QNetwork<Scalar>::Cache& scratch, TdTargets& y) {
  const std::size_t n = batch.size();
  y.flow.assign(n, 0.0);
  y.temp.assign(n, std::numeric_limits<double>::quiet_NaN());
  if (n == 0) return;
  target_net.forward_into(batch.next_states, scratch);
  const auto& q = scratch.q;
  for (std::size_t i = 0; i < n; ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    const double boot = batch.terminal[i] ? 0.0 : gamma;
    const double max_flow = static_cast<double>(q.col(col).head(kActionsPerHead).maxCoeff());
    y.flow[i] = batch.reward[i] + boot * max_flow;
    if (batch.temp_action[i] != kNoAction) {
      const double max_temp = static_cast<double>(q.col(col).tail(kActionsPerHead).maxCoeff());
      y.temp[i] = batch.reward[i] + boot * max_temp;
    }
  }
}

template <typename Scalar>
TdTargets td_targets(const Batch<Scalar>& batch, const QNetwork<Scalar>& target_net, double gamma) {
  typename QNetwork<Scalar>::Cache scratch;
  TdTargets y;
  td_targets_into(batch, target_net, gamma, scratch, y);
  return y;
}

// Mean squared TD error: flow head averaged over the whole batch, temperature
// head averaged over the entries where it acted. Loss = flow + temp.
template <typename Scalar>
void loss_and_gradient_into(const QNetwork<Scalar>& net, const Batch<Scalar>& batch, const TdTargets& y,
                            LearnWorkspace<Scalar>& ws) {
  const std::size_t n = batch.size();
  if (n == 0) throw ContractError("loss_and_gradient: empty batch");
  if (y.flow.size() != n || y.temp.size() != n) throw DimensionError("loss_and_gradient: target size mismatch");
  net.forward_into(batch.states, ws.cache);
  const auto& q = ws.cache.q;
  ws.dq.setZero(q.rows(), q.cols());

  std::size_t n_temp = 0;
  for (std::size_t i = 0; i < n; ++i) n_temp += batch.temp_action[i] != kNoAction;

  auto& out = ws.out;
  out.loss = out.flow_loss = out.temp_loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    const int fa = batch.flow_action[i];
    const double ef = static_cast<double>(q(fa, col)) - y.flow[i];
    out.flow_loss += ef * ef / static_cast<double>(n);
    ws.dq(fa, col) = Scalar(2.0 * ef / static_cast<double>(n));
    if (const int ta = batch.temp_action[i]; ta != kNoAction) {
      const int row = kActionsPerHead + ta;
      const double et = static_cast<double>(q(row, col)) - y.temp[i];
      out.temp_loss += et * et / static_cast<double>(n_temp);
      ws.dq(row, col) = Scalar(2.0 * et / static_cast<double>(n_temp));
    }
  }
  out.loss = out.flow_loss + out.temp_loss;
  net.backward_into(ws.cache, ws.dq, ws.deltas, out.grad);
}

template <typename Scalar>
LossGradient<Scalar> loss_and_gradient(const QNetwork<Scalar>& net, const Batch<Scalar>& batch,
                                       const TdTargets& y) {
  LearnWorkspace<Scalar> ws;
  loss_and_gradient_into(net, batch, y, ws);
  return std::move(ws.out);
}

// ---- action selection -----------------------------------------------------

struct TrainHyper {
  double gamma = 0.99;
  double tau = 0.005;
  std::size_t batch = 512;
  double learning_rate = 1e-4;
  std::size_t episode_length = 100;
  std::size_t replay_capacity = 100000;
  std::size_t learn_start = 1000;  // stored transitions before the first update
  double eps_end = 0.05;
  double eps_span = 0.85;
  double eps_decay_steps = 2000.0;

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("TrainHyper: gamma must lie in (0, 1)");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("TrainHyper: tau must lie in (0, 1]");
    if (batch == 0 || episode_length == 0 || replay_capacity == 0)
      throw ConfigError("TrainHyper: batch, episode_length and replay_capacity must be positive");
    if (batch > replay_capacity) throw ConfigError("TrainHyper: batch exceeds replay capacity");
    if (!(learning_rate > 0.0)) throw ConfigError("TrainHyper: learning_rate must be positive");
    if (!(eps_end >= 0.0 && eps_span >= 0.0 && eps_end + eps_span <= 1.0 && eps_decay_steps > 0.0))
      throw ConfigError("TrainHyper: invalid epsilon schedule");
  }

  // eps_end + eps_span * exp(-steps / eps_decay_steps)
  double epsilon(std::uint64_t steps) const {
    return eps_end + eps_span * std::exp(-static_cast<double>(steps) / eps_decay_steps);
  }
};

// Pure greedy action; consumes no randomness.
template <typename Scalar>
Action greedy_action(const QNetwork<Scalar>& net, std::span<const double> state, std::uint64_t t,
                     std::uint64_t lambda) {
  const QValues q = net.forward(state);
  Action a;
  a.flow_index = argmax(q.flow);
  if (temp_scheduled(t, lambda)) a.temp_index = argmax(q.temp);
  return a;
}

// Per-head epsilon-greedy. The flow head acts every step; the temperature head
// only when t is a multiple of lambda.
template <typename Scalar>
Action select_action(const QNetwork<Scalar>& net, std::span<const double> state, double epsilon,
                     std::uint64_t t, std::uint64_t lambda, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ContractError("select_action: epsilon must lie in [0, 1]");
  if (lambda == 0) throw ContractError("select_action: lambda must be >= 1");
  const QValues q = net.forward(state);
  Action a;
  a.flow_index = rng.uniform() < epsilon ? static_cast<int>(rng.below(kActionsPerHead)) : argmax(q.flow);
  if (temp_scheduled(t, lambda))
    a.temp_index = rng.uniform() < epsilon ? static_cast<int>(rng.below(kActionsPerHead)) : argmax(q.temp);
  return a;
}

}  // namespace flowrl
