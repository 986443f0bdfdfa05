#pragma once

// Trace semantics of finite acyclic diagrams.
//
// Vertices are evaluated in a topological order; each vertex reads its input
// tuple from the external input and earlier vertex outputs. Exact evaluation
// enumerates every joint outcome (finite kernels only). Sampling works for any
// representation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "polyk/diagram.hpp"
#include "polyk/random.hpp"

namespace polyk {

/// Refuse exact enumeration above this many joint outcomes.
inline constexpr std::size_t kEnumerationLimit = 10'000'000;

/// Where each input slot of each vertex reads from, for a fixed order.
struct EvalPlan {
  struct Source {
    bool external = false;
    std::size_t index = 0;  // external input position, or producer position in `order`
    std::size_t slot = 0;   // producer output slot
  };

  std::vector<VertexId> order;
  std::vector<const Kernel*> kernels;
  std::vector<std::vector<Source>> sources;
  std::vector<std::pair<std::size_t, std::size_t>> outputs;  // (position, slot) per external output
};

inline EvalPlan make_plan(const Diagram& d, const std::vector<VertexId>& order) {
  if (!is_topological(d, order)) throw Error(Errc::invalid_argument, "order is not topological for this diagram");
  EvalPlan plan;
  plan.order = order;
  std::map<VertexId, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) {
    pos[order[i]] = i;
    plan.kernels.push_back(&d.kernel(order[i]));
  }
  std::map<Port, EvalPlan::Source> src;
  for (std::size_t e = 0; e < d.inputs.size(); ++e) src[d.inputs[e]] = {true, e, 0};
  for (const auto& w : d.wires) src[w.to] = {false, pos.at(w.from.vertex), w.from.slot};
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::vector<EvalPlan::Source> s;
    for (std::size_t q = 0; q < plan.kernels[i]->source().size(); ++q) {
      auto it = src.find({order[i], q});
      if (it == src.end()) throw Error(Errc::invalid_argument, "input slot " + port_to_string({order[i], q}) + " has no source");
      s.push_back(it->second);
    }
    plan.sources.push_back(std::move(s));
  }
  for (const auto& p : d.outputs) plan.outputs.emplace_back(pos.at(p.vertex), p.slot);
  return plan;
}

inline Value assemble(const EvalPlan& plan, std::size_t pos, const Value& x, const std::vector<Value>& prior) {
  std::vector<Value> items;
  items.reserve(plan.sources[pos].size());
  for (const auto& s : plan.sources[pos]) {
    if (s.external) {
      items.push_back(x[s.index]);
    } else {
      if (s.index >= pos || s.index >= prior.size())
        throw Error(Errc::invalid_argument, "input assembly reads an output that is not yet available");
      items.push_back(prior[s.index][s.slot]);
    }
  }
  return Value::tuple(std::move(items));
}

inline Value select_outputs(const EvalPlan& plan, const std::vector<Value>& ys) {
  std::vector<Value> items;
  items.reserve(plan.outputs.size());
  for (const auto& [pos, slot] : plan.outputs) items.push_back(ys[pos][slot]);
  return Value::tuple(std::move(items));
}

/// The input tuple of the vertex at position `pos` of `order`, given the outputs
/// of the vertices at earlier positions.
inline Value input_assembly(const Diagram& d, const std::vector<VertexId>& order, std::size_t pos, const Value& x,
                            const std::vector<Value>& prior_outputs) {
  const EvalPlan plan = make_plan(d, order);
  if (pos >= order.size()) throw Error(Errc::out_of_range, "position " + std::to_string(pos));
  return assemble(plan, pos, x, prior_outputs);
}

// ---------------------------------------------------------------------------
// Exact enumeration

/// Joint law of all vertex outputs, stored by vertex id (not by order position)
/// so laws computed under different orders compare directly.
struct FiniteJointDist {
  std::vector<VertexId> vertices;  // sorted
  std::vector<Space> spaces;       // target space per vertex
  std::vector<double> probs;       // mixed radix, first vertex most significant

  std::size_t index_of(const std::map<VertexId, Value>& outputs) const {
    std::size_t idx = 0;
    for (std::size_t v = 0; v < vertices.size(); ++v)
      idx = idx * spaces[v].cardinality() + point_index(spaces[v], outputs.at(vertices[v]));
    return idx;
  }
};

struct ExactTrace {
  FiniteJointDist joint;
  FiniteDist marginal;
  Space output_space = Space::unit();
};

/// Visits every joint outcome with positive probability:
/// (probability, per-position inputs, per-position outputs, external output).
using TraceVisitor =
    std::function<void(double, const std::vector<Value>&, const std::vector<Value>&, const Value&)>;

inline void enumerate_trace(const Diagram& d, const Value& x, const std::vector<VertexId>& order,
                            const TraceVisitor& visit) {
  if (!value_in_space(x, profile_space(d.input_profile())))
    throw Error(Errc::not_in_space, "external input not in " + profile_space(d.input_profile()).to_string());
  const EvalPlan plan = make_plan(d, order);
  std::vector<FiniteTable> tables;
  std::vector<std::vector<Value>> points;
  double joint_size = 1.0;
  for (const auto* k : plan.kernels) {
    if (!finite_convertible(*k)) throw Error(Errc::not_finite, "diagram contains a kernel without an exact table form");
    tables.push_back(to_finite_table(*k));
    points.push_back(enumerate(k->target_space()));
    joint_size *= static_cast<double>(points.back().size());
  }
  if (joint_size > static_cast<double>(kEnumerationLimit))
    throw Error(Errc::enumeration_limit, "joint outcome space has " + std::to_string(joint_size) + " points");

  const std::size_t n = plan.order.size();
  std::vector<Value> ins(n), ys(n);
  std::function<void(std::size_t, double)> rec = [&](std::size_t pos, double p) {
    if (pos == n) {
      visit(p, ins, ys, select_outputs(plan, ys));
      return;
    }
    ins[pos] = assemble(plan, pos, x, ys);
    const auto& row = tables[pos].rows[point_index(plan.kernels[pos]->source_space(), ins[pos])];
    for (std::size_t b = 0; b < row.size(); ++b) {
      if (row[b] == 0.0) continue;
      ys[pos] = points[pos][b];
      rec(pos + 1, p * row[b]);
    }
  };
  rec(0, 1.0);
}

inline ExactTrace trace_exact(const Diagram& d, const Value& x, const std::vector<VertexId>& order) {
  ExactTrace t;
  t.output_space = profile_space(d.output_profile());
  t.marginal.assign(t.output_space.cardinality(), 0.0);
  std::size_t total = 1;
  for (const auto& [id, k] : d.vertices) {
    t.joint.vertices.push_back(id);
    t.joint.spaces.push_back(k.target_space());
    if (!k.target_space().enumerable()) throw Error(Errc::not_finite, "vertex '" + id + "' has a continuous output");
    total *= k.target_space().cardinality();
    if (total > kEnumerationLimit) throw Error(Errc::enumeration_limit, "joint outcome space too large");
  }
  t.joint.probs.assign(total, 0.0);
  std::map<VertexId, std::size_t> slot_of;
  for (std::size_t v = 0; v < t.joint.vertices.size(); ++v) slot_of[t.joint.vertices[v]] = v;
  std::vector<std::size_t> by_pos;
  for (const auto& id : order) by_pos.push_back(slot_of.at(id));

  enumerate_trace(d, x, order, [&](double p, const std::vector<Value>&, const std::vector<Value>& ys, const Value& out) {
    std::vector<std::size_t> idx(ys.size());
    for (std::size_t pos = 0; pos < ys.size(); ++pos) idx[by_pos[pos]] = point_index(t.joint.spaces[by_pos[pos]], ys[pos]);
    std::size_t flat = 0;
    for (std::size_t v = 0; v < idx.size(); ++v) flat = flat * t.joint.spaces[v].cardinality() + idx[v];
    t.joint.probs[flat] += p;
    t.marginal[point_index(t.output_space, out)] += p;
  });
  return t;
}

inline ExactTrace trace_exact(const Diagram& d, const Value& x) { return trace_exact(d, x, topo_sort(d)); }

/// The trace kernel I_D -> O_D as a finite table.
inline Kernel trace_kernel_exact(const Diagram& d, const std::vector<VertexId>& order) {
  const Profile in = d.input_profile(), out = d.output_profile();
  const Space is = profile_space(in);
  if (!is.enumerable()) throw Error(Errc::not_finite, "external inputs are not enumerable");
  FiniteTable t;
  for (std::size_t a = 0; a < is.cardinality(); ++a) t.rows.push_back(trace_exact(d, point_at(is, a), order).marginal);
  return Kernel(in, out, std::move(t));
}

inline Kernel trace_kernel_exact(const Diagram& d) { return trace_kernel_exact(d, topo_sort(d)); }

/// Max absolute deviation between the joint laws computed under each order.
inline double order_invariance_check(const Diagram& d, const Value& x, const std::vector<std::vector<VertexId>>& orders) {
  if (orders.empty()) return 0.0;
  const ExactTrace ref = trace_exact(d, x, orders.front());
  double dev = 0.0;
  for (std::size_t o = 1; o < orders.size(); ++o) {
    const ExactTrace t = trace_exact(d, x, orders[o]);
    for (std::size_t i = 0; i < ref.joint.probs.size(); ++i)
      dev = std::max(dev, std::abs(ref.joint.probs[i] - t.joint.probs[i]));
    for (std::size_t i = 0; i < ref.marginal.size(); ++i) dev = std::max(dev, std::abs(ref.marginal[i] - t.marginal[i]));
  }
  return dev;
}

// ---------------------------------------------------------------------------
// Sampling

struct TraceSample {
  Value external_input;
  std::map<VertexId, Value> vertex_inputs;
  std::map<VertexId, Value> vertex_outputs;
  Value external_output;
};

inline TraceSample trace_sample(const EvalPlan& plan, const Value& x, Rng& rng) {
  TraceSample s;
  s.external_input = x;
  std::vector<Value> ys;
  ys.reserve(plan.order.size());
  for (std::size_t pos = 0; pos < plan.order.size(); ++pos) {
    Value in = assemble(plan, pos, x, ys);
    ys.push_back(sample(*plan.kernels[pos], in, rng));
    s.vertex_inputs.emplace(plan.order[pos], std::move(in));
    s.vertex_outputs.emplace(plan.order[pos], ys.back());
  }
  s.external_output = select_outputs(plan, ys);
  return s;
}

inline TraceSample trace_sample(const Diagram& d, const Value& x, Rng& rng) {
  if (!value_in_space(x, profile_space(d.input_profile())))
    throw Error(Errc::not_in_space, "external input not in " + profile_space(d.input_profile()).to_string());
  return trace_sample(make_plan(d, topo_sort(d)), x, rng);
}

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};

/// Mean and standard error (unbiased sample variance) of the values, summed in index order.
inline McEstimate summarize(const std::vector<double>& values) {
  McEstimate e;
  e.n = values.size();
  if (values.empty()) return e;
  double s = 0.0;
  for (double v : values) s += v;
  e.mean = s / static_cast<double>(values.size());
  if (values.size() < 2) return e;
  double ss = 0.0;
  for (double v : values) ss += (v - e.mean) * (v - e.mean);
  e.std_error = std::sqrt(ss / static_cast<double>(values.size() - 1) / static_cast<double>(values.size()));
  return e;
}

/// Runs fn(s) for s in [0, n) on up to `threads` workers. Each index is handled
/// exactly once; callers write into per-index slots.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t s = 0; s < n; ++s) fn(s);
    return;
  }
  threads = std::min(threads, n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t s = t; s < n; s += threads) fn(s);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Monte Carlo estimate of E[f(Y_D)] under the trace kernel at x. Sample s draws
/// from substream(seed, "trace", s), so the result does not depend on `threads`.
inline McEstimate trace_expectation_mc(const Diagram& d, const Value& x, const std::function<double(const Value&)>& f,
                                       std::size_t n, std::uint64_t seed, std::size_t threads = 1) {
  if (n < 2) throw Error(Errc::invalid_argument, "need at least two samples");
  if (!value_in_space(x, profile_space(d.input_profile())))
    throw Error(Errc::not_in_space, "external input not in " + profile_space(d.input_profile()).to_string());
  const EvalPlan plan = make_plan(d, topo_sort(d));
  std::vector<double> values(n);
  parallel_for(n, threads, [&](std::size_t s) {
    Rng rng = substream(seed, "trace", s);
    values[s] = f(trace_sample(plan, x, rng).external_output);
  });
  return summarize(values);
}

// ---------------------------------------------------------------------------
// Reductions by binary composition

/// Reorders the slots of a finite kernel: new input slot s is old input slot
/// in_perm[s], new output slot s is old output slot out_perm[s].
inline Kernel permute_slots(const Kernel& k, const std::vector<std::size_t>& in_perm,
                            const std::vector<std::size_t>& out_perm) {
  if (in_perm.size() != k.source().size() || out_perm.size() != k.target().size())
    throw Error(Errc::dimension_mismatch, "permutation size");
  Profile src, tgt;
  for (auto s : in_perm) src.push_back(k.source().at(s));
  for (auto s : out_perm) tgt.push_back(k.target().at(s));
  const FiniteTable t = to_finite_table(k);
  const Space ss = profile_space(src), ts = profile_space(tgt);
  FiniteTable out;
  for (std::size_t a = 0; a < ss.cardinality(); ++a) {
    const Value pa = point_at(ss, a);
    std::vector<Value> old_in(in_perm.size());
    for (std::size_t s = 0; s < in_perm.size(); ++s) old_in[in_perm[s]] = pa[s];
    const auto& row = t.rows[point_index(k.source_space(), Value::tuple(old_in))];
    FiniteDist r(ts.cardinality(), 0.0);
    for (std::size_t b = 0; b < row.size(); ++b) {
      if (row[b] == 0.0) continue;
      const Value pb = point_at(k.target_space(), b);
      std::vector<Value> items(out_perm.size());
      for (std::size_t s = 0; s < out_perm.size(); ++s) items[s] = pb[out_perm[s]];
      r[point_index(ts, Value::tuple(items))] += row[b];
    }
    out.rows.push_back(std::move(r));
  }
  return Kernel(std::move(src), std::move(tgt), std::move(out));
}

/// Reduces a connected, tree-shaped diagram by applying a binary merge along
/// the wires in the given order. Each blob carries a payload T (a kernel, a
/// color term, ...) whose slot order follows the insertion convention; the
/// final payload is permuted to the declared external profiles.
template <class T>
T reduce_wires(const Diagram& d, const std::vector<std::size_t>& wire_order,
               const std::function<T(const VertexId&)>& init,
               const std::function<T(const T& src, const T& dst, std::size_t i, std::size_t j, const Wire& w)>& merge,
               const std::function<T(const T&, const std::vector<std::size_t>&, const std::vector<std::size_t>&)>& permute) {
  struct Blob {
    T payload;
    std::vector<Port> ins, outs;
  };
  std::vector<std::optional<Blob>> blobs;
  std::map<VertexId, std::size_t> owner;
  for (const auto& [id, k] : d.vertices) {
    Blob b{init(id), {}, {}};
    for (std::size_t q = 0; q < k.source().size(); ++q) b.ins.push_back({id, q});
    for (std::size_t p = 0; p < k.target().size(); ++p) b.outs.push_back({id, p});
    owner[id] = blobs.size();
    blobs.emplace_back(std::move(b));
  }
  std::vector<bool> seen(d.wires.size(), false);
  if (wire_order.size() != d.wires.size()) throw Error(Errc::invalid_argument, "wire order must list every wire once");
  for (std::size_t w : wire_order) {
    if (w >= d.wires.size() || seen[w]) throw Error(Errc::invalid_argument, "wire order must list every wire once");
    seen[w] = true;
    const Wire& wire = d.wires[w];
    const std::size_t bs = owner.at(wire.from.vertex), bt = owner.at(wire.to.vertex);
    if (bs == bt) throw Error(Errc::invalid_argument, "wire joins a blob to itself; diagram is not tree-shaped");
    Blob& s = *blobs[bs];
    Blob& t = *blobs[bt];
    const auto i = static_cast<std::size_t>(std::find(s.outs.begin(), s.outs.end(), wire.from) - s.outs.begin());
    const auto j = static_cast<std::size_t>(std::find(t.ins.begin(), t.ins.end(), wire.to) - t.ins.begin());
    Blob merged{merge(s.payload, t.payload, i, j, wire), splice(t.ins, j, s.ins), splice(s.outs, i, t.outs)};
    for (auto& [v, o] : owner)
      if (o == bt) o = bs;
    blobs[bs] = std::move(merged);
    blobs[bt].reset();
  }
  std::optional<Blob> last;
  for (auto& b : blobs)
    if (b) {
      if (last) throw Error(Errc::invalid_argument, "diagram is not connected");
      last = std::move(b);
    }
  std::vector<std::size_t> in_perm, out_perm;
  for (const auto& p : d.inputs)
    in_perm.push_back(static_cast<std::size_t>(std::find(last->ins.begin(), last->ins.end(), p) - last->ins.begin()));
  for (const auto& p : d.outputs)
    out_perm.push_back(static_cast<std::size_t>(std::find(last->outs.begin(), last->outs.end(), p) - last->outs.begin()));
  bool trivial = true;
  for (std::size_t s = 0; s < in_perm.size(); ++s) trivial = trivial && in_perm[s] == s;
  for (std::size_t s = 0; s < out_perm.size(); ++s) trivial = trivial && out_perm[s] == s;
  if (trivial) return last->payload;
  return permute(last->payload, in_perm, out_perm);
}

using WireMerge = std::function<Kernel(const Kernel& src, const Kernel& dst, std::size_t i, std::size_t j, const Wire& w)>;

/// Kernel reduction: `merge` combines the kernel holding the wire's source port
/// (output slot i) with the kernel holding its target port (input slot j).
inline Kernel reduce_in_order(const Diagram& d, const std::vector<std::size_t>& wire_order, const WireMerge& merge) {
  return reduce_wires<Kernel>(
      d, wire_order, [&](const VertexId& v) { return d.kernel(v); }, merge,
      [](const Kernel& k, const std::vector<std::size_t>& in, const std::vector<std::size_t>& out) {
        return permute_slots(k, in, out);
      });
}

/// Uncolored merge: exact binary composition.
inline Kernel ksc_merge(const Kernel& src, const Kernel& dst, std::size_t i, std::size_t j, const Wire&) {
  return ksc_kernel(src, dst, i, j);
}

}  // namespace polyk
