#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "motok/tensor.hpp"

namespace motok::nk {

// A learnable tensor with its gradient accumulator.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape()); }
};

// Owns parameters in insertion order; that order fixes the reduction and
// serialization order everywhere.
class ParamStore {
 public:
  Param& add(std::string name, Tensor init);
  Param& get(std::string_view name);
  const Param& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::vector<Param*> all();
  std::vector<const Param*> all() const;
  std::vector<Param*> with_prefix(std::string_view prefix);

  void zero_grad();
  std::size_t scalar_count() const;
  std::size_t size() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Param>> params_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Record/replay of everything a loss treats as non-differentiable: the
// values emitted by stop_gradient and discrete choices such as code indices.
// Replaying makes a loss a smooth function of its live inputs, which is what
// the finite-difference oracle needs to see.
struct Freezer {
  enum class Mode { Record, Replay };
  Mode mode = Mode::Record;
  std::vector<Tensor> values;
  std::vector<std::vector<std::int64_t>> decisions;
  std::size_t value_pos = 0;
  std::size_t decision_pos = 0;

  void start_replay() {
    mode = Mode::Replay;
    value_pos = 0;
    decision_pos = 0;
  }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  // Registers p once per tape; later calls return the same node.
  Var param(Param& p);

  // Records a node. `fn` is dropped when no input needs a gradient.
  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, const char* op);

  // Reverse sweep from a scalar root. Each node is visited once, in reverse
  // creation order (a valid reverse topological order for a define-by-run tape).
  void backward(Var root);

  // Gradient of the last backward root w.r.t. v (zeros when v was not reached).
  Tensor grad(Var v) const;
  // Adds the node gradients of registered params into Param::grad.
  void flush_param_grads();

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t input(std::size_t id, std::size_t k) const { return nodes_[id].inputs[k]; }
  Tensor& grad_ref(std::size_t id);
  // Gradient flowing into node `id` during backward (never empty inside fn).
  const Tensor& out_grad(std::size_t id) const { return grads_[id]; }
  std::size_t size() const { return nodes_.size(); }

  void set_freezer(Freezer* f) { freezer_ = f; }
  Freezer* freezer() const { return freezer_; }
  // Returns `computed` (recording it) or the recorded choice when replaying.
  std::vector<std::int64_t> decide(std::vector<std::int64_t> computed);

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    const char* op = "";
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<const Param*, std::size_t> param_ids_;
  std::vector<std::pair<Param*, std::size_t>> params_;
  Freezer* freezer_ = nullptr;
};

}  // namespace motok::nk
