#pragma once

// Finite acyclic diagrams of kernels: structure, validation, topological
// orderings, binary slotwise composition, and connection of diagrams.
//
// Slot indices are 0-based. External inputs and outputs are ordered lists of
// vertex ports; the ordering is part of the diagram.

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <variant>
#include <vector>

#include "polyk/kernels.hpp"

namespace polyk {

using VertexId = std::string;

struct Port {
  VertexId vertex;
  std::size_t slot = 0;

  friend auto operator<=>(const Port&, const Port&) = default;
};

inline std::string port_to_string(const Port& p) { return p.vertex + "." + std::to_string(p.slot); }

/// An internal wire from an output port to an input port. `witness` names the
/// interface witness in colored diagrams and is empty otherwise.
struct Wire {
  Port from;
  Port to;
  std::string witness;

  friend bool operator==(const Wire&, const Wire&) = default;
};

struct Diagram {
  std::map<VertexId, Kernel> vertices;
  std::vector<Wire> wires;
  std::vector<Port> inputs;
  std::vector<Port> outputs;

  const Kernel& kernel(const VertexId& v) const {
    auto it = vertices.find(v);
    if (it == vertices.end()) throw Error(Errc::unknown_name, "vertex '" + v + "'");
    return it->second;
  }

  void add_vertex(const VertexId& id, Kernel k) {
    if (!vertices.emplace(id, std::move(k)).second) throw Error(Errc::invalid_argument, "duplicate vertex '" + id + "'");
  }

  const Object& input_object(const Port& p) const { return kernel(p.vertex).source().at(p.slot); }
  const Object& output_object(const Port& p) const { return kernel(p.vertex).target().at(p.slot); }

  Profile input_profile() const {
    Profile out;
    for (const auto& p : inputs) out.push_back(input_object(p));
    return out;
  }

  Profile output_profile() const {
    Profile out;
    for (const auto& p : outputs) out.push_back(output_object(p));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  enum class Clause { unknown_vertex, slot_range, linearity, acyclicity, type_mismatch, external_profile, witness };
  Clause clause;
  std::string message;
};

inline const char* clause_name(Violation::Clause c) {
  switch (c) {
    case Violation::Clause::unknown_vertex: return "unknown-vertex";
    case Violation::Clause::slot_range: return "slot-range";
    case Violation::Clause::linearity: return "linearity";
    case Violation::Clause::acyclicity: return "acyclicity";
    case Violation::Clause::type_mismatch: return "type-mismatch";
    case Violation::Clause::external_profile: return "external-profile";
    case Violation::Clause::witness: return "witness";
  }
  return "unknown";
}

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  bool has(Violation::Clause c) const {
    return std::any_of(violations.begin(), violations.end(), [c](const Violation& v) { return v.clause == c; });
  }
  void add(Violation::Clause c, std::string msg) { violations.push_back({c, std::move(msg)}); }

  std::string to_string() const {
    std::string s;
    for (const auto& v : violations) s += std::string(clause_name(v.clause)) + ": " + v.message + "\n";
    return s;
  }
};

namespace detail {

/// Vertex adjacency induced by the wires (ignores wires to unknown vertices).
inline std::map<VertexId, std::set<VertexId>> successors(const Diagram& d) {
  std::map<VertexId, std::set<VertexId>> succ;
  for (const auto& [id, k] : d.vertices) succ[id];
  for (const auto& w : d.wires)
    if (d.vertices.count(w.from.vertex) && d.vertices.count(w.to.vertex)) succ[w.from.vertex].insert(w.to.vertex);
  return succ;
}

inline bool has_cycle(const Diagram& d) {
  auto succ = successors(d);
  std::map<VertexId, int> state;  // 0 new, 1 on stack, 2 done
  std::function<bool(const VertexId&)> visit = [&](const VertexId& v) {
    state[v] = 1;
    for (const auto& w : succ[v]) {
      if (state[w] == 1) return true;
      if (state[w] == 0 && visit(w)) return true;
    }
    state[v] = 2;
    return false;
  };
  for (const auto& [v, s] : succ)
    if (state[v] == 0 && visit(v)) return true;
  return false;
}

}  // namespace detail

/// Every clause except wire typing: vertex references, slot ranges, linearity,
/// external-profile completeness and acyclicity.
inline ValidationReport validate_structure(const Diagram& d) {
  using C = Violation::Clause;
  ValidationReport r;
  auto known = [&](const Port& p, bool input, const std::string& what) {
    auto it = d.vertices.find(p.vertex);
    if (it == d.vertices.end()) {
      r.add(C::unknown_vertex, what + " references unknown vertex '" + p.vertex + "'");
      return false;
    }
    const std::size_t n = input ? it->second.source().size() : it->second.target().size();
    if (p.slot >= n) {
      r.add(C::slot_range, what + " uses " + (input ? "input" : "output") + " slot " + port_to_string(p) +
                               " but the vertex has " + std::to_string(n));
      return false;
    }
    return true;
  };

  std::map<Port, int> in_uses, out_uses;
  for (const auto& w : d.wires) {
    const std::string what = "wire " + port_to_string(w.from) + " -> " + port_to_string(w.to);
    if (known(w.from, false, what)) ++out_uses[w.from];
    if (known(w.to, true, what)) ++in_uses[w.to];
  }
  for (const auto& [p, n] : in_uses)
    if (n > 1) r.add(C::linearity, "input slot " + port_to_string(p) + " is the target of " + std::to_string(n) + " wires");
  for (const auto& [p, n] : out_uses)
    if (n > 1) r.add(C::linearity, "output slot " + port_to_string(p) + " is the source of " + std::to_string(n) + " wires");

  std::map<Port, int> ext_in, ext_out;
  for (const auto& p : d.inputs)
    if (known(p, true, "external input")) ++ext_in[p];
  for (const auto& p : d.outputs)
    if (known(p, false, "external output")) ++ext_out[p];

  for (const auto& [id, k] : d.vertices) {
    for (std::size_t q = 0; q < k.source().size(); ++q) {
      const Port p{id, q};
      const int wired = in_uses.count(p) ? in_uses[p] : 0;
      const int listed = ext_in.count(p) ? ext_in[p] : 0;
      if (wired > 0 && listed > 0)
        r.add(C::linearity, "input slot " + port_to_string(p) + " is both wired and external");
      else if (wired == 0 && listed != 1)
        r.add(C::external_profile, "unwired input slot " + port_to_string(p) + " listed " + std::to_string(listed) +
                                       " times among external inputs");
    }
    for (std::size_t s = 0; s < k.target().size(); ++s) {
      const Port p{id, s};
      const int wired = out_uses.count(p) ? out_uses[p] : 0;
      const int listed = ext_out.count(p) ? ext_out[p] : 0;
      if (wired > 0 && listed > 0)
        r.add(C::linearity, "output slot " + port_to_string(p) + " is both wired and external");
      else if (wired == 0 && listed != 1)
        r.add(C::external_profile, "unwired output slot " + port_to_string(p) + " listed " + std::to_string(listed) +
                                       " times among external outputs");
    }
  }
  if (detail::has_cycle(d)) r.add(C::acyclicity, "the vertex graph has a directed cycle");
  return r;
}

/// Full validation for uncolored diagrams: wires must join equal spaces.
inline ValidationReport validate(const Diagram& d) {
  ValidationReport r = validate_structure(d);
  for (const auto& w : d.wires) {
    if (!d.vertices.count(w.from.vertex) || !d.vertices.count(w.to.vertex)) continue;
    const auto& src = d.kernel(w.from.vertex).target();
    const auto& dst = d.kernel(w.to.vertex).source();
    if (w.from.slot >= src.size() || w.to.slot >= dst.size()) continue;
    if (!(src[w.from.slot].space == dst[w.to.slot].space))
      r.add(Violation::Clause::type_mismatch, "wire " + port_to_string(w.from) + " -> " + port_to_string(w.to) +
                                                  " joins " + src[w.from.slot].space.to_string() + " to " +
                                                  dst[w.to.slot].space.to_string());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Topological orders

/// Kahn's algorithm; ties go to the lexicographically smallest vertex id.
inline std::vector<VertexId> topo_sort(const Diagram& d) {
  auto succ = detail::successors(d);
  std::map<VertexId, int> indeg;
  for (const auto& [v, s] : succ) indeg[v];
  for (const auto& [v, s] : succ)
    for (const auto& w : s) ++indeg[w];
  std::set<VertexId> ready;
  for (const auto& [v, n] : indeg)
    if (n == 0) ready.insert(v);
  std::vector<VertexId> order;
  while (!ready.empty()) {
    VertexId v = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(v);
    for (const auto& w : succ[v])
      if (--indeg[w] == 0) ready.insert(w);
  }
  if (order.size() != d.vertices.size()) throw Error(Errc::cyclic, "diagram has a directed cycle");
  return order;
}

/// Every topological order, up to `limit` of them.
inline std::vector<std::vector<VertexId>> all_topo_orders(const Diagram& d, std::size_t limit = 100000) {
  if (detail::has_cycle(d)) throw Error(Errc::cyclic, "diagram has a directed cycle");
  auto succ = detail::successors(d);
  std::map<VertexId, int> indeg;
  for (const auto& [v, s] : succ) indeg[v];
  for (const auto& [v, s] : succ)
    for (const auto& w : s) ++indeg[w];
  std::vector<std::vector<VertexId>> out;
  std::vector<VertexId> cur;
  std::function<void()> rec = [&]() {
    if (out.size() >= limit) return;
    if (cur.size() == indeg.size()) {
      out.push_back(cur);
      return;
    }
    for (auto& [v, n] : indeg) {
      if (n != 0) continue;
      n = -1;
      for (const auto& w : succ[v]) --indeg[w];
      cur.push_back(v);
      rec();
      cur.pop_back();
      for (const auto& w : succ[v]) ++indeg[w];
      n = 0;
    }
  };
  rec();
  return out;
}

inline bool is_topological(const Diagram& d, const std::vector<VertexId>& order) {
  if (order.size() != d.vertices.size()) return false;
  std::map<VertexId, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (!d.vertices.count(order[i]) || !pos.emplace(order[i], i).second) return false;
  }
  for (const auto& w : d.wires)
    if (pos.at(w.from.vertex) >= pos.at(w.to.vertex)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Binary slotwise composition

/// Input profile of l o_(i,j) k: l's inputs with slot j replaced by k's inputs.
inline Profile ksc_input_profile(const Kernel& k, const Kernel& l, std::size_t j) {
  return splice(l.source(), j, k.source());
}

/// Output profile of l o_(i,j) k: k's outputs with slot i replaced by l's outputs.
inline Profile ksc_output_profile(const Kernel& k, const Kernel& l, std::size_t i) {
  return splice(k.target(), i, l.target());
}

/// The two-vertex diagram wiring output i of k into input j of l.
inline Diagram ksc_diagram(const Kernel& k, const Kernel& l, std::size_t i, std::size_t j, std::string witness = {}) {
  Diagram d;
  d.add_vertex("k", k);
  d.add_vertex("l", l);
  d.wires.push_back({{"k", i}, {"l", j}, std::move(witness)});
  for (std::size_t q = 0; q < j; ++q) d.inputs.push_back({"l", q});
  for (std::size_t q = 0; q < k.source().size(); ++q) d.inputs.push_back({"k", q});
  for (std::size_t q = j + 1; q < l.source().size(); ++q) d.inputs.push_back({"l", q});
  for (std::size_t p = 0; p < i; ++p) d.outputs.push_back({"k", p});
  for (std::size_t p = 0; p < l.target().size(); ++p) d.outputs.push_back({"l", p});
  for (std::size_t p = i + 1; p < k.target().size(); ++p) d.outputs.push_back({"k", p});
  return d;
}

inline void check_ksc_slots(const Kernel& k, const Kernel& l, std::size_t i, std::size_t j) {
  if (i >= k.target().size()) throw Error(Errc::out_of_range, "output slot " + std::to_string(i));
  if (j >= l.source().size()) throw Error(Errc::out_of_range, "input slot " + std::to_string(j));
  if (!(k.target()[i].space == l.source()[j].space))
    throw Error(Errc::type_mismatch, "slot " + std::to_string(i) + " carries " + k.target()[i].space.to_string() +
                                         " but slot " + std::to_string(j) + " expects " +
                                         l.source()[j].space.to_string());
}

/// Exact finite composite by the double sum over intermediate outcomes.
inline Kernel finite_ksc(const Kernel& k, const Kernel& l, std::size_t i, std::size_t j) {
  const FiniteTable tk = to_finite_table(k), tl = to_finite_table(l);
  const Profile gamma = ksc_input_profile(k, l, j), delta = ksc_output_profile(k, l, i);
  const Space gs = profile_space(gamma), ds = profile_space(delta);
  const Space& bs = k.target_space();
  const Space& cs = l.source_space();
  const Space& dspace = l.target_space();
  const std::size_t na = k.source().size();
  const std::size_t nd = dspace.cardinality();

  std::vector<Value> d_points = enumerate(dspace);
  std::vector<Value> b_points = enumerate(bs);
  FiniteTable out;
  out.rows.reserve(gs.cardinality());
  for (std::size_t g = 0; g < gs.cardinality(); ++g) {
    const Value gamma_pt = point_at(gs, g);
    auto [a, c_rest] = extract_items_at(gamma_pt, j, na);
    const auto& krow = tk.rows[point_index(k.source_space(), a)];
    FiniteDist row(ds.cardinality(), 0.0);
    for (std::size_t b = 0; b < krow.size(); ++b) {
      if (krow[b] == 0.0) continue;
      auto [bi, b_rest] = project_at(b_points[b], i);
      const Value c = insert_at(c_rest, j, bi);
      const auto& lrow = tl.rows[point_index(cs, c)];
      for (std::size_t dd = 0; dd < nd; ++dd) {
        if (lrow[dd] == 0.0) continue;
        row[point_index(ds, insert_items_at(b_rest, i, d_points[dd]))] += krow[b] * lrow[dd];
      }
    }
    out.rows.push_back(std::move(row));
  }
  return Kernel(std::move(gamma), std::move(delta), std::move(out));
}

/// l o_(i,j) k. Exact when both kernels are finite or both Gaussian-linear with a
/// diagonal result; otherwise the two-vertex diagram whose trace is the composite.
inline std::variant<Kernel, Diagram> binary_ksc(const Kernel& k, const Kernel& l, std::size_t i, std::size_t j) {
  check_ksc_slots(k, l, i, j);
  if (finite_convertible(k) && finite_convertible(l)) return finite_ksc(k, l, i, j);
  if (k.as<GaussianLinear>() && l.as<GaussianLinear>()) {
    if (auto g = gaussian_slotwise(k, l, i, j))
      return Kernel(ksc_input_profile(k, l, j), ksc_output_profile(k, l, i), std::move(*g));
  }
  if (k.target().size() == 1 && l.source().size() == 1) {
    try {
      return compose_unary(k, l);
    } catch (const Error& e) {
      if (e.code() != Errc::not_closed) throw;
    }
  }
  return ksc_diagram(k, l, i, j);
}

/// binary_ksc that insists on an exact kernel.
inline Kernel ksc_kernel(const Kernel& k, const Kernel& l, std::size_t i, std::size_t j) {
  auto r = binary_ksc(k, l, i, j);
  if (auto* kk = std::get_if<Kernel>(&r)) return std::move(*kk);
  throw Error(Errc::not_closed, "slotwise composite has no exact representation");
}

// ---------------------------------------------------------------------------
// Building diagrams

inline Diagram single_vertex(const VertexId& id, const Kernel& k) {
  Diagram d;
  d.add_vertex(id, k);
  for (std::size_t q = 0; q < k.source().size(); ++q) d.inputs.push_back({id, q});
  for (std::size_t p = 0; p < k.target().size(); ++p) d.outputs.push_back({id, p});
  return d;
}

namespace detail {

inline Diagram prefixed(const Diagram& d, const std::string& prefix) {
  Diagram out;
  for (const auto& [id, k] : d.vertices) out.add_vertex(prefix + id, k);
  auto pp = [&](Port p) {
    p.vertex = prefix + p.vertex;
    return p;
  };
  for (const auto& w : d.wires) out.wires.push_back({pp(w.from), pp(w.to), w.witness});
  for (const auto& p : d.inputs) out.inputs.push_back(pp(p));
  for (const auto& p : d.outputs) out.outputs.push_back(pp(p));
  return out;
}

}  // namespace detail

/// Wire external output i of d1 into external input j of d2. Vertex ids are
/// namespaced as "left/..." and "right/..." when the two diagrams share an id.
/// A non-empty witness skips the space check; colored callers check admissibility.
inline Diagram connect(const Diagram& d1, std::size_t i, const Diagram& d2, std::size_t j, std::string witness = {}) {
  if (i >= d1.outputs.size()) throw Error(Errc::out_of_range, "external output " + std::to_string(i));
  if (j >= d2.inputs.size()) throw Error(Errc::out_of_range, "external input " + std::to_string(j));
  if (witness.empty() && !(d1.output_object(d1.outputs[i]).space == d2.input_object(d2.inputs[j]).space))
    throw Error(Errc::type_mismatch, "connect joins " + d1.output_object(d1.outputs[i]).space.to_string() + " to " +
                                         d2.input_object(d2.inputs[j]).space.to_string());
  bool clash = false;
  for (const auto& [id, k] : d1.vertices) clash = clash || d2.vertices.count(id);
  const Diagram a = clash ? detail::prefixed(d1, "left/") : d1;
  const Diagram b = clash ? detail::prefixed(d2, "right/") : d2;

  Diagram out;
  for (const auto& [id, k] : a.vertices) out.add_vertex(id, k);
  for (const auto& [id, k] : b.vertices) out.add_vertex(id, k);
  out.wires = a.wires;
  out.wires.insert(out.wires.end(), b.wires.begin(), b.wires.end());
  out.wires.push_back({a.outputs[i], b.inputs[j], std::move(witness)});
  out.inputs = splice(b.inputs, j, a.inputs);
  out.outputs = splice(a.outputs, i, b.outputs);
  return out;
}

}  // namespace polyk
