#include "motok/tape.hpp"

#include <algorithm>

namespace motok::nk {

Param& ParamStore::add(std::string name, Tensor init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  auto p = std::make_unique<Param>();
  p->name = std::move(name);
  p->value = std::move(init);
  p->zero_grad();
  params_.push_back(std::move(p));
  return *params_.back();
}

Param& ParamStore::get(std::string_view name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw std::out_of_range("no parameter named " + std::string(name));
}

const Param& ParamStore::get(std::string_view name) const {
  for (const auto& p : params_)
    if (p->name == name) return *p;
  throw std::out_of_range("no parameter named " + std::string(name));
}

bool ParamStore::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const auto& p) { return p->name == name; });
}

std::vector<Param*> ParamStore::all() {
  std::vector<Param*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Param*> ParamStore::all() const {
  std::vector<const Param*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Param*> ParamStore::with_prefix(std::string_view prefix) {
  std::vector<Param*> out;
  for (auto& p : params_)
    if (p->name.starts_with(prefix)) out.push_back(p.get());
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) { return push(std::move(value), {}, nullptr, "const"); }

Var Tape::leaf(Tensor value) {
  Var v = push(std::move(value), {}, nullptr, "leaf");
  nodes_[v.id()].requires_grad = true;
  return v;
}

Var Tape::param(Param& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var(this, it->second);
  Var v = leaf(p.value);
  param_ids_.emplace(&p, v.id());
  params_.emplace_back(&p, v.id());
  return v;
}

Var Tape::push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, const char* op) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (auto in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  if (n.requires_grad) n.backward = std::move(fn);
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_ref(std::size_t id) {
  Tensor& g = grads_[id];
  if (g.empty() && !nodes_[id].value.empty()) g = Tensor(nodes_[id].value.shape());
  return g;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
  if (value(root.id()).size() != 1)
    throw ShapeError("backward: root must be a scalar, got " + value(root.id()).shape_str());
  grads_.assign(nodes_.size(), Tensor());
  grad_ref(root.id()).fill(1.0);
  for (std::size_t k = root.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.requires_grad || !n.backward || grads_[k].empty()) continue;
    n.backward(*this, k);
  }
}

Tensor Tape::grad(Var v) const {
  if (v.id() < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
  return Tensor(value(v.id()).shape());
}

void Tape::flush_param_grads() {
  for (auto& [p, id] : params_) {
    if (id >= grads_.size() || grads_[id].empty()) continue;
    if (p->grad.size() != p->value.size()) p->zero_grad();
    const Tensor& g = grads_[id];
    for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
  }
}

std::vector<std::int64_t> Tape::decide(std::vector<std::int64_t> computed) {
  if (!freezer_) return computed;
  if (freezer_->mode == Freezer::Mode::Record) {
    freezer_->decisions.push_back(computed);
    return computed;
  }
  if (freezer_->decision_pos >= freezer_->decisions.size())
    throw std::logic_error("freezer replay ran out of recorded decisions");
  return freezer_->decisions[freezer_->decision_pos++];
}

}  // namespace motok::nk
