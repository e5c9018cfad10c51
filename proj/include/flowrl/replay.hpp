#pragma once

#include <cstdint>
#include <span>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "flowrl/dqn.hpp"
#include "flowrl/error.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

struct Transition {
  std::vector<double> state;
  int flow_action = 0;
  int temp_action = kNoAction;  // set iff the temperature head acted
  double reward = 0.0;
  std::vector<double> next_state;
  bool terminal = false;

  bool temp_active() const { return temp_action != kNoAction; }
};

// Fixed-capacity ring of transitions stored column-wise.
template <typename Scalar = double>
class ReplayBuffer {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  ReplayBuffer(std::size_t capacity, std::size_t state_dim)
      : capacity_(capacity),
        dim_(state_dim),
        states_(static_cast<Eigen::Index>(state_dim), static_cast<Eigen::Index>(capacity)),
        next_states_(static_cast<Eigen::Index>(state_dim), static_cast<Eigen::Index>(capacity)),
        flow_(capacity),
        temp_(capacity),
        reward_(capacity),
        terminal_(capacity) {
    if (capacity == 0 || state_dim == 0) throw ConfigError("ReplayBuffer: capacity and dimension must be >= 1");
    states_.setZero();
    next_states_.setZero();
  }

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return size_; }
  std::size_t state_dim() const noexcept { return dim_; }
  std::size_t next_slot() const noexcept { return head_; }

  void push(const Transition& t) {
    if (t.state.size() != dim_ || t.next_state.size() != dim_)
      throw DimensionError("ReplayBuffer::push: state dimension mismatch");
    if (t.flow_action < 0 || t.flow_action >= kActionsPerHead ||
        (t.temp_action != kNoAction && (t.temp_action < 0 || t.temp_action >= kActionsPerHead)))
      throw ContractError("ReplayBuffer::push: action index out of range");
    const auto col = static_cast<Eigen::Index>(head_);
    for (std::size_t i = 0; i < dim_; ++i) {
      states_(static_cast<Eigen::Index>(i), col) = static_cast<Scalar>(t.state[i]);
      next_states_(static_cast<Eigen::Index>(i), col) = static_cast<Scalar>(t.next_state[i]);
    }
    flow_[head_] = t.flow_action;
    temp_[head_] = t.temp_action;
    reward_[head_] = t.reward;
    terminal_[head_] = t.terminal ? 1 : 0;
    head_ = (head_ + 1) % capacity_;
    if (size_ < capacity_) ++size_;
  }

  Transition at(std::size_t slot) const {
    if (slot >= size_) throw ContractError("ReplayBuffer::at: slot not filled");
    const auto col = static_cast<Eigen::Index>(slot);
    Transition t;
    t.state.resize(dim_);
    t.next_state.resize(dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
      t.state[i] = static_cast<double>(states_(static_cast<Eigen::Index>(i), col));
      t.next_state[i] = static_cast<double>(next_states_(static_cast<Eigen::Index>(i), col));
    }
    t.flow_action = flow_[slot];
    t.temp_action = temp_[slot];
    t.reward = reward_[slot];
    t.terminal = terminal_[slot] != 0;
    return t;
  }

  // `n` distinct slots drawn uniformly (Floyd's algorithm), in draw order.
  std::vector<std::size_t> sample_slots(std::size_t n, Rng& rng) const {
    if (n == 0) throw ContractError("ReplayBuffer::sample: empty batch requested");
    if (n > size_) throw ContractError("ReplayBuffer::sample: batch larger than stored transitions");
    std::vector<std::size_t> out;
    out.reserve(n);
    std::unordered_set<std::size_t> seen;
    seen.reserve(2 * n);
    for (std::size_t j = size_ - n; j < size_; ++j) {
      const auto r = static_cast<std::size_t>(rng.below(j + 1));
      const std::size_t pick = seen.contains(r) ? j : r;
      seen.insert(pick);
      out.push_back(pick);
    }
    return out;
  }

  Batch<Scalar> sample(std::size_t n, Rng& rng) const { return gather(sample_slots(n, rng)); }

  Batch<Scalar> gather(std::span<const std::size_t> slots) const {
    Batch<Scalar> b;
    gather_into(slots, b);
    return b;
  }

  // Fills `b` in place; its storage is reused when the batch size repeats.
  void gather_into(std::span<const std::size_t> slots, Batch<Scalar>& b) const {
    const auto n = static_cast<Eigen::Index>(slots.size());
    b.states.resize(static_cast<Eigen::Index>(dim_), n);
    b.next_states.resize(static_cast<Eigen::Index>(dim_), n);
    b.flow_action.resize(slots.size());
    b.temp_action.resize(slots.size());
    b.reward.resize(slots.size());
    b.terminal.resize(slots.size());
    for (std::size_t k = 0; k < slots.size(); ++k) {
      const std::size_t s = slots[k];
      if (s >= size_) throw ContractError("ReplayBuffer::gather: slot not filled");
      const auto col = static_cast<Eigen::Index>(k);
      b.states.col(col) = states_.col(static_cast<Eigen::Index>(s));
      b.next_states.col(col) = next_states_.col(static_cast<Eigen::Index>(s));
      b.flow_action[k] = flow_[s];
      b.temp_action[k] = temp_[s];
      b.reward[k] = reward_[s];
      b.terminal[k] = terminal_[s];
    }
  }

  // Raw storage access for checkpointing.
  const Mat& states() const noexcept { return states_; }
  const Mat& next_states() const noexcept { return next_states_; }
  const std::vector<int>& flow_actions() const noexcept { return flow_; }
  const std::vector<int>& temp_actions() const noexcept { return temp_; }
  const std::vector<double>& rewards() const noexcept { return reward_; }
  const std::vector<std::uint8_t>& terminals() const noexcept { return terminal_; }

  struct Storage {
    Mat states, next_states;
    std::vector<int> flow, temp;
    std::vector<double> reward;
    std::vector<std::uint8_t> terminal;
    std::size_t size = 0, head = 0;
  };

  void restore(Storage s) {
    const auto cap = static_cast<Eigen::Index>(capacity_);
    const auto dim = static_cast<Eigen::Index>(dim_);
    if (s.states.rows() != dim || s.states.cols() != cap || s.next_states.rows() != dim ||
        s.next_states.cols() != cap || s.flow.size() != capacity_ || s.temp.size() != capacity_ ||
        s.reward.size() != capacity_ || s.terminal.size() != capacity_ || s.size > capacity_ ||
        s.head >= capacity_)
      throw FormatError("ReplayBuffer::restore: storage does not match buffer geometry");
    states_ = std::move(s.states);
    next_states_ = std::move(s.next_states);
    flow_ = std::move(s.flow);
    temp_ = std::move(s.temp);
    reward_ = std::move(s.reward);
    terminal_ = std::move(s.terminal);
    size_ = s.size;
    head_ = s.head;
  }

  friend bool operator==(const ReplayBuffer& a, const ReplayBuffer& b) {
    return a.capacity_ == b.capacity_ && a.dim_ == b.dim_ && a.size_ == b.size_ && a.head_ == b.head_ &&
           a.states_ == b.states_ && a.next_states_ == b.next_states_ && a.flow_ == b.flow_ &&
           a.temp_ == b.temp_ && a.reward_ == b.reward_ && a.terminal_ == b.terminal_;
  }

 private:
  std::size_t capacity_;
  std::size_t dim_;
  Mat states_, next_states_;
  std::vector<int> flow_, temp_;
  std::vector<double> reward_;
  std::vector<std::uint8_t> terminal_;
  std::size_t size_ = 0;
  std::size_t head_ = 0;
};

}  // namespace flowrl
