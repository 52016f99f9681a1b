#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "oommix/tensor.hpp"

namespace oommix {

/// Parameter partition used to scope each objective's update.
enum class ParamGroup : std::uint8_t {
  EncoderBelowMg = 0,
  EncoderMgAndAbove = 1,
  ClassifierHead = 2,
  Generator = 3,
  Discriminator = 4,
};

inline constexpr std::size_t kNumParamGroups = 5;

inline std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::EncoderBelowMg: return "encoder-below-mg";
    case ParamGroup::EncoderMgAndAbove: return "encoder-mg-and-above";
    case ParamGroup::ClassifierHead: return "classifier-head";
    case ParamGroup::Generator: return "generator";
    case ParamGroup::Discriminator: return "discriminator";
  }
  return "?";
}

/// Bit set over ParamGroup.
class GroupMask {
 public:
  constexpr GroupMask() = default;
  constexpr GroupMask(std::initializer_list<ParamGroup> groups) {
    for (auto g : groups) bits_ |= bit(g);
  }
  static constexpr GroupMask all() {
    GroupMask m;
    m.bits_ = (1u << kNumParamGroups) - 1;
    return m;
  }
  static constexpr GroupMask from_bits(std::uint8_t b) {
    GroupMask m;
    m.bits_ = b;
    return m;
  }
  constexpr bool contains(ParamGroup g) const { return (bits_ & bit(g)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint8_t bits() const { return bits_; }
  constexpr GroupMask operator|(GroupMask o) const {
    return from_bits(bits_ | o.bits_);
  }
  constexpr bool intersects(std::uint8_t b) const { return (bits_ & b) != 0; }
  constexpr bool operator==(const GroupMask&) const = default;

  static constexpr std::uint8_t bit(ParamGroup g) {
    return static_cast<std::uint8_t>(1u << static_cast<unsigned>(g));
  }

 private:
  std::uint8_t bits_ = 0;
};

/// A trainable tensor. Its gradient lives in `value.grad`.
template <typename T>
struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor<T> value;

  void zero_grad() { value.grad.assign(value.data.size(), T(0)); }
};

/// Owns the parameters of one model. Addresses are stable.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(std::string name, ParamGroup group, Tensor<T> value) {
    if (index_.count(name)) {
      throw std::invalid_argument("parameter registered twice: " + name);
    }
    index_.emplace(name, params_.size());
    params_.push_back(std::make_unique<Parameter<T>>(
        Parameter<T>{std::move(name), group, std::move(value)}));
    params_.back()->zero_grad();
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Parameter<T>& at(const std::string& name) {
    auto* p = find(name);
    if (!p) throw std::out_of_range("no parameter named " + name);
    return *p;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (auto& p : params_) n += p->value.size();
    return n;
  }

  /// Deep copy of all parameter values, in registration order.
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p->value.data);
    return out;
  }
  void restore(const std::vector<std::vector<T>>& snap) {
    if (snap.size() != params_.size()) {
      throw std::invalid_argument("snapshot does not match parameter store");
    }
    for (std::size_t i = 0; i < snap.size(); ++i) {
      if (snap[i].size() != params_[i]->value.data.size()) {
        throw std::invalid_argument("snapshot size mismatch for " +
                                    params_[i]->name);
      }
      params_[i]->value.data = snap[i];
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
class Graph;

/// Handle to a node of a Graph.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// The computation record: nodes appended in execution order, so inputs
/// always precede their consumers. Backward replays rules in reverse.
template <typename T>
class Graph {
 public:
  using NodeId = std::size_t;
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Leaf for a parameter; reused on repeated calls within one graph.
  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    Node n;
    n.op = "param";
    n.value = Tensor<T>(p.value.shape, p.value.data);
    n.param = &p;
    n.deps = GroupMask::bit(p.group);
    nodes_.push_back(std::move(n));
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(const char* op, Tensor<T> value,
                std::vector<NodeId> inputs, BackwardFn fn) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (auto i : inputs) n.deps |= nodes_[i].deps;
    n.inputs = std::move(inputs);
    if (n.deps) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(NodeId id) const { return nodes_[id].value; }
  const char* op(NodeId id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& inputs(NodeId id) const {
    return nodes_[id].inputs;
  }

  /// Groups a node's value depends on through parameters.
  GroupMask dependencies(NodeId id) const {
    return GroupMask::from_bits(nodes_[id].deps);
  }

  /// True while backward runs and `id` leads to an active parameter.
  bool wants_grad(NodeId id) const { return active_.intersects(nodes_[id].deps); }

  /// Incoming gradient of a node during its backward rule.
  std::span<const T> grad(NodeId id) const { return nodes_[id].grad; }

  /// Gradient accumulator of an input, allocated zeroed on first use.
  std::vector<T>& grad_buffer(NodeId id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  /// Reverse sweep from a scalar `loss`, scaled by `seed`. Gradients reach
  /// only parameters whose group is in `groups`; they are added to the
  /// parameters' existing grad buffers.
  void backward(Var<T> loss, GroupMask groups, T seed = T(1)) {
    if (loss.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       to_string(loss.shape()));
    }
    for (auto& n : nodes_) n.grad.clear();
    active_ = groups;
    grad_buffer(loss.id())[0] = seed;
    for (NodeId id = loss.id() + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.grad.empty() || !groups.intersects(n.deps)) continue;
      if (n.param) {
        auto& pg = n.param->value.grad;
        if (pg.size() != n.grad.size()) pg.assign(n.grad.size(), T(0));
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      } else if (n.backward) {
        n.backward(*this, id);
      }
    }
    for (auto& n : nodes_) n.grad.clear();
    active_ = GroupMask();
  }

 private:
  struct Node {
    const char* op = "";
    Tensor<T> value;
    std::vector<T> grad;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    std::uint8_t deps = 0;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, NodeId> param_nodes_;
  GroupMask active_;
};

}  // namespace oommix
