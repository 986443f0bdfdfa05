#pragma once

// Co-indexed colored Markov polycategories: a finite indexing category whose
// objects carry state CMPs (registries of named objects, kernels and interface
// kernels over one shared color system) and parameter dimensions, with state
// pushforwards (CMP-functors) and differentiable parameter pushforwards.

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "polyk/category.hpp"
#include "polyk/colors.hpp"
#include "polyk/random.hpp"

namespace polyk {

using IndexCat = FiniteCategory;

struct StateCMP {
  std::shared_ptr<InterfaceSystem> interfaces;
  std::map<std::string, ColoredKernel> kernels;
  std::size_t param_dim = 0;

  const ColoredKernel& kernel(const std::string& name) const {
    auto it = kernels.find(name);
    if (it == kernels.end()) throw Error(Errc::unknown_name, "kernel '" + name + "'");
    return it->second;
  }

  void add_kernel(const std::string& name, const Kernel& k, ColorTerm color) {
    for (const auto* p : {&k.source(), &k.target()})
      for (const auto& o : *p) {
        if (!interfaces->has_object(o.name)) throw Error(Errc::unknown_name, "kernel '" + name + "' uses unknown object '" + o.name + "'");
        if (!(interfaces->object(o.name) == o))
          throw Error(Errc::type_mismatch, "kernel '" + name + "' disagrees with object '" + o.name + "'");
      }
    if (color.inputs() != profile_colors(k.source()) || color.outputs() != profile_colors(k.target()))
      throw Error(Errc::type_mismatch, "color term of kernel '" + name + "' does not match its profile colors");
    kernels.insert_or_assign(name, ColoredKernel{k.named(name), std::move(color)});
  }
};

/// A CMP-functor given on registered names.
struct CMPFunctor {
  std::map<std::string, std::string> object_map;
  std::map<std::string, std::string> kernel_map;

  static CMPFunctor identity(const StateCMP& s) {
    CMPFunctor g;
    for (const auto& [name, o] : s.interfaces->objects()) g.object_map[name] = name;
    for (const auto& [name, k] : s.kernels) g.kernel_map[name] = name;
    return g;
  }

  const std::string& object(const std::string& name) const {
    auto it = object_map.find(name);
    if (it == object_map.end()) throw Error(Errc::unknown_name, "object '" + name + "' is not in the functor's domain");
    return it->second;
  }

  const std::string& kernel(const std::string& name) const {
    auto it = kernel_map.find(name);
    if (it == kernel_map.end()) throw Error(Errc::unknown_name, "kernel '" + name + "' is not in the functor's domain");
    return it->second;
  }

  /// next o this
  CMPFunctor then(const CMPFunctor& next) const {
    CMPFunctor g;
    for (const auto& [a, b] : object_map) g.object_map[a] = next.object(b);
    for (const auto& [a, b] : kernel_map) g.kernel_map[a] = next.kernel(b);
    return g;
  }

  friend bool operator==(const CMPFunctor& a, const CMPFunctor& b) {
    return a.object_map == b.object_map && a.kernel_map == b.kernel_map;
  }
};

/// A registered composite in the source state: composite = l o^witness_(i,j) k.
/// An empty witness means the plain slotwise composite.
struct KscFixture {
  std::string k, l;
  std::size_t i = 0, j = 0;
  std::string witness;
  std::string composite;
};

/// The two-vertex colored diagram whose trace is the composite named by fx.
/// Vertices "k" and "l"; external profiles in slotwise-composite order.
inline ColoredDiagram fixture_diagram(const StateCMP& s, const KscFixture& fx) {
  const ColoredKernel& k = s.kernel(fx.k);
  const ColoredKernel& l = s.kernel(fx.l);
  ColoredDiagram d;
  d.shape.add_vertex("k", k.kernel);
  d.shape.add_vertex("l", l.kernel);
  d.colors.emplace("k", k.color);
  d.colors.emplace("l", l.color);
  const std::string w = fx.witness.empty() ? FiniteCategory::identity_id(k.kernel.target().at(fx.i).color) : fx.witness;
  d.shape.wires = {{{"k", fx.i}, {"l", fx.j}, w}};
  for (std::size_t q = 0; q < fx.j; ++q) d.shape.inputs.push_back({"l", q});
  for (std::size_t q = 0; q < k.kernel.source().size(); ++q) d.shape.inputs.push_back({"k", q});
  for (std::size_t q = fx.j + 1; q < l.kernel.source().size(); ++q) d.shape.inputs.push_back({"l", q});
  for (std::size_t q = 0; q < fx.i; ++q) d.shape.outputs.push_back({"k", q});
  for (std::size_t q = 0; q < l.kernel.target().size(); ++q) d.shape.outputs.push_back({"l", q});
  for (std::size_t q = fx.i + 1; q < k.kernel.target().size(); ++q) d.shape.outputs.push_back({"k", q});
  return d;
}

inline bool kernels_equal(const Kernel& a, const Kernel& b, double tol = kExactTol) {
  const auto d = exact_kernel_distance(a, b);
  if (d) return *d <= tol;
  return !a.signature().empty() && a.signature() == b.signature() && same_spaces(a.source(), b.source()) &&
         same_spaces(a.target(), b.target());
}

/// Checks that g is a CMP-functor from src to dst on everything registered in
/// src plus the given composites. Returns violations.
inline std::vector<std::string> check_cmp_functor(const CMPFunctor& g, const StateCMP& src, const StateCMP& dst,
                                                  const std::vector<KscFixture>& fixtures = {}) {
  std::vector<std::string> out;
  const auto& dis = *dst.interfaces;
  auto map_profile = [&](const Profile& p) {
    std::vector<std::string> names;
    for (const auto& o : p) names.push_back(g.object(o.name));
    return names;
  };
  auto names_of = [](const Profile& p) {
    std::vector<std::string> names;
    for (const auto& o : p) names.push_back(o.name);
    return names;
  };

  for (const auto& [name, o] : src.interfaces->objects()) {
    auto it = g.object_map.find(name);
    if (it == g.object_map.end()) {
      out.push_back("object " + name + " is not mapped");
      continue;
    }
    if (!dis.has_object(it->second)) {
      out.push_back("object " + name + " maps to unregistered " + it->second);
      continue;
    }
    const Object& img = dis.object(it->second);
    if (img.color != o.color) out.push_back("object " + name + " changes color " + o.color + " -> " + img.color);
    if (!(img.space == o.space)) out.push_back("object " + name + " changes space");
  }
  if (!out.empty()) return out;

  for (const auto& [name, ck] : src.kernels) {
    auto it = g.kernel_map.find(name);
    if (it == g.kernel_map.end()) {
      out.push_back("kernel " + name + " is not mapped");
      continue;
    }
    auto jt = dst.kernels.find(it->second);
    if (jt == dst.kernels.end()) {
      out.push_back("kernel " + name + " maps to unregistered " + it->second);
      continue;
    }
    const ColoredKernel& img = jt->second;
    if (names_of(img.kernel.source()) != map_profile(ck.kernel.source()) ||
        names_of(img.kernel.target()) != map_profile(ck.kernel.target()))
      out.push_back("kernel " + name + ": image profile is not the image of its profile");
    if (!(img.color == ck.color)) out.push_back("kernel " + name + ": morphism color changes");
    if (ck.kernel.is_identity() && !img.kernel.is_identity() &&
        !kernels_equal(img.kernel, identity_kernel(img.kernel.source())))
      out.push_back("identity kernel " + name + " is not sent to an identity");
  }

  for (const auto& [key, kappa] : src.interfaces->interfaces()) {
    const auto& [f, b, c] = key;
    const std::string gb = g.object(b), gc = g.object(c);
    if (!dis.admissible(f, gb, gc)) {
      out.push_back("witness " + f + " from " + b + " to " + c + " is not admissible between the images");
      continue;
    }
    const Kernel& img = dis.kernel(f, gb, gc);
    const auto d = exact_kernel_distance(img, kappa.with_profiles(img.source(), img.target()));
    if (d && *d > kExactTol) out.push_back("interface kernel of " + f + " from " + b + " to " + c + " is not preserved");
  }

  for (const auto& fx : fixtures) {
    try {
      const ColoredKernel& gk = dst.kernel(g.kernel(fx.k));
      const ColoredKernel& gl = dst.kernel(g.kernel(fx.l));
      const ColoredKernel& gc = dst.kernel(g.kernel(fx.composite));
      Kernel expected = fx.witness.empty() ? ksc_kernel(gk.kernel, gl.kernel, fx.i, fx.j)
                                           : cksc_kernel(gk.kernel, gl.kernel, fx.i, fx.j, fx.witness, dis);
      if (!kernels_equal(gc.kernel, expected))
        out.push_back("composite " + fx.composite + " is not preserved");
      const ColorTerm expected_color =
          fx.witness.empty() ? ColorTerm::compose(gl.color, gk.color, fx.i, fx.j)
                             : cksc_color(gk.color, gl.color, fx.i, fx.j, dis.colors().iota(fx.witness));
      if (!(gc.color == expected_color)) out.push_back("color of composite " + fx.composite + " is not preserved");
    } catch (const Error& e) {
      out.push_back("composite " + fx.composite + ": " + e.what());
    }
  }
  return out;
}

/// Applies g to every vertex kernel (looked up by its registered name). Vertex
/// ids, wires, witnesses and the external port order are kept.
inline ColoredDiagram pushforward_diagram(const CMPFunctor& g, const StateCMP& src, const StateCMP& dst,
                                          const ColoredDiagram& cd) {
  ColoredDiagram out;
  for (const auto& [id, k] : cd.shape.vertices) {
    if (!src.kernels.count(k.name()))
      throw Error(Errc::unknown_name, "vertex '" + id + "' carries unregistered kernel '" + k.name() + "'");
    const ColoredKernel& img = dst.kernel(g.kernel(k.name()));
    out.shape.add_vertex(id, img.kernel);
    out.colors.emplace(id, img.color);
  }
  out.shape.wires = cd.shape.wires;
  out.shape.inputs = cd.shape.inputs;
  out.shape.outputs = cd.shape.outputs;
  return out;
}

/// Structural equality of colored diagrams (same ids, kernels by name, wiring).
inline bool same_structure(const ColoredDiagram& a, const ColoredDiagram& b) {
  if (a.shape.vertices.size() != b.shape.vertices.size()) return false;
  for (const auto& [id, k] : a.shape.vertices) {
    auto it = b.shape.vertices.find(id);
    if (it == b.shape.vertices.end() || it->second.name() != k.name()) return false;
    if (!(a.vertex_color(id) == b.vertex_color(id))) return false;
  }
  auto key = [](const Wire& w) { return std::tie(w.from, w.to, w.witness); };
  if (a.shape.wires.size() != b.shape.wires.size()) return false;
  for (std::size_t n = 0; n < a.shape.wires.size(); ++n)
    if (key(a.shape.wires[n]) != key(b.shape.wires[n])) return false;
  return a.shape.inputs == b.shape.inputs && a.shape.outputs == b.shape.outputs;
}

// ---------------------------------------------------------------------------
// Parameter pushforwards

struct ParamPushforward {
  std::size_t in_dim = 0, out_dim = 0;
  std::function<Vector(const Vector&)> map;
  std::function<Matrix(const Vector&)> jacobian;  // out_dim x in_dim

  static ParamPushforward identity(std::size_t n) {
    return {n, n, [](const Vector& t) { return t; },
            [n](const Vector&) -> Matrix { return Matrix::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)); }};
  }

  static ParamPushforward linear(const Matrix& a) {
    return {static_cast<std::size_t>(a.cols()), static_cast<std::size_t>(a.rows()), [a](const Vector& t) -> Vector { return a * t; },
            [a](const Vector&) { return a; }};
  }

  Vector operator()(const Vector& t) const {
    if (static_cast<std::size_t>(t.size()) != in_dim)
      throw Error(Errc::dimension_mismatch, "parameter of dimension " + std::to_string(t.size()) + ", expected " + std::to_string(in_dim));
    return map(t);
  }

  /// next o this, with the chain-rule Jacobian.
  ParamPushforward then(const ParamPushforward& next) const {
    if (next.in_dim != out_dim) throw Error(Errc::dimension_mismatch, "parameter pushforwards do not compose");
    const ParamPushforward a = *this;
    return {in_dim, next.out_dim, [a, next](const Vector& t) { return next.map(a.map(t)); },
            [a, next](const Vector& t) -> Matrix { return next.jacobian(a.map(t)) * a.jacobian(t); }};
  }
};

/// Largest relative deviation of the declared Jacobian from central differences
/// (step h) over `trials` standard-normal parameter draws.
inline double jacobian_fd_error(const ParamPushforward& p, std::uint64_t seed, std::size_t trials = 5, double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = substream(seed, "jacobian-check", t);
    Vector theta(static_cast<Eigen::Index>(p.in_dim));
    for (auto& v : theta) v = standard_normal(rng);
    const Matrix j = p.jacobian(theta);
    Matrix fd(static_cast<Eigen::Index>(p.out_dim), static_cast<Eigen::Index>(p.in_dim));
    for (Eigen::Index c = 0; c < theta.size(); ++c) {
      Vector a = theta, b = theta;
      a(c) += h;
      b(c) -= h;
      fd.col(c) = (p.map(a) - p.map(b)) / (2.0 * h);
    }
    const double scale = std::max(fd.norm(), 1e-12);
    worst = std::max(worst, (j - fd).norm() / scale);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Co-indexed systems

struct CCMP {
  IndexCat index;
  std::shared_ptr<const ColorSystem> colors;
  std::map<std::string, StateCMP> states;
  std::map<std::string, CMPFunctor> state_push;
  std::map<std::string, ParamPushforward> param_push;

  const StateCMP& state(const std::string& t) const {
    auto it = states.find(t);
    if (it == states.end()) throw Error(Errc::unknown_name, "state '" + t + "'");
    return it->second;
  }

  /// State pushforward of an index morphism; identities default to the identity functor.
  CMPFunctor state_functor(const std::string& m) const {
    auto it = state_push.find(m);
    if (it != state_push.end()) return it->second;
    const Morphism& mm = index.morphism(m);
    if (index.is_identity(m)) return CMPFunctor::identity(state(mm.src));
    throw Error(Errc::unknown_name, "no state pushforward for transition '" + m + "'");
  }

  ParamPushforward param_map(const std::string& m) const {
    auto it = param_push.find(m);
    if (it != param_push.end()) return it->second;
    const Morphism& mm = index.morphism(m);
    if (index.is_identity(m)) return ParamPushforward::identity(state(mm.src).param_dim);
    throw Error(Errc::unknown_name, "no parameter pushforward for transition '" + m + "'");
  }

  ColoredDiagram push_diagram(const std::string& m, const ColoredDiagram& cd) const {
    const Morphism& mm = index.morphism(m);
    return pushforward_diagram(state_functor(m), state(mm.src), state(mm.dst), cd);
  }
};

/// Category axioms of the index, typing and CMP-functor checks of every
/// pushforward, and strict functoriality of both assignments. Parameter
/// composites are compared on `trials` random points within 1e-9.
inline std::vector<std::string> check_strict_functoriality(const CCMP& c, std::uint64_t seed = 0, std::size_t trials = 5) {
  std::vector<std::string> out = c.index.check();
  for (const auto& o : c.index.objects())
    if (!c.states.count(o)) out.push_back("index object " + o + " has no state");
  if (!out.empty()) return out;

  auto close = [](const Vector& a, const Vector& b) {
    return a.size() == b.size() && (a.size() == 0 || (a - b).cwiseAbs().maxCoeff() <= 1e-9);
  };
  auto random_theta = [&](std::size_t dim, const std::string& label, std::size_t t) {
    Rng rng = substream(seed, label, t);
    Vector v(static_cast<Eigen::Index>(dim));
    for (auto& x : v) x = standard_normal(rng);
    return v;
  };

  for (const auto& [id, m] : c.index.morphisms()) {
    CMPFunctor g;
    ParamPushforward p;
    try {
      g = c.state_functor(id);
      p = c.param_map(id);
    } catch (const Error& e) {
      out.push_back(e.what());
      continue;
    }
    const StateCMP& s = c.state(m.src);
    const StateCMP& d = c.state(m.dst);
    if (p.in_dim != s.param_dim || p.out_dim != d.param_dim)
      out.push_back("parameter pushforward " + id + " has dimensions " + std::to_string(p.in_dim) + " -> " +
                    std::to_string(p.out_dim) + ", expected " + std::to_string(s.param_dim) + " -> " + std::to_string(d.param_dim));
    for (const auto& v : check_cmp_functor(g, s, d)) out.push_back(id + ": " + v);
    if (c.index.is_identity(id)) {
      if (!(g == CMPFunctor::identity(s))) out.push_back("state pushforward of " + id + " is not the identity");
      for (std::size_t t = 0; t < trials && p.in_dim == s.param_dim; ++t) {
        const Vector th = random_theta(p.in_dim, "identity:" + id, t);
        if (!close(p(th), th)) {
          out.push_back("parameter pushforward of " + id + " is not the identity");
          break;
        }
      }
    }
  }
  for (const auto& [aid, a] : c.index.morphisms())
    for (const auto& [bid, b] : c.index.morphisms()) {
      if (b.src != a.dst) continue;
      const auto ba = c.index.compose(bid, aid);
      if (!ba) continue;
      try {
        if (!(c.state_functor(*ba) == c.state_functor(aid).then(c.state_functor(bid))))
          out.push_back("state pushforward of " + *ba + " differs from " + bid + " after " + aid);
        const ParamPushforward pa = c.param_map(aid), pb = c.param_map(bid), pba = c.param_map(*ba);
        for (std::size_t t = 0; t < trials; ++t) {
          const Vector th = random_theta(pa.in_dim, "compose:" + bid + "." + aid, t);
          if (!close(pba(th), pb(pa(th)))) {
            out.push_back("parameter pushforward of " + *ba + " differs from " + bid + " after " + aid);
            break;
          }
        }
      } catch (const Error& e) {
        out.push_back(std::string(e.what()));
      }
    }
  return out;
}

/// Transports a gradient at the target state back along the parameter pushforward: J^T g.
inline Vector pullback_gradient(const ParamPushforward& p, const Vector& theta, const Vector& grad_at_target) {
  if (static_cast<std::size_t>(theta.size()) != p.in_dim)
    throw Error(Errc::dimension_mismatch, "parameter has dimension " + std::to_string(theta.size()) + ", expected " + std::to_string(p.in_dim));
  if (static_cast<std::size_t>(grad_at_target.size()) != p.out_dim)
    throw Error(Errc::dimension_mismatch,
                "gradient has dimension " + std::to_string(grad_at_target.size()) + ", expected " + std::to_string(p.out_dim));
  return p.jacobian(theta).transpose() * grad_at_target;
}

inline Vector pullback_gradient(const CCMP& c, const std::string& m, const Vector& theta, const Vector& grad_at_target) {
  return pullback_gradient(c.param_map(m), theta, grad_at_target);
}

}  // namespace polyk
