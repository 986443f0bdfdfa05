#pragma once

// Color systems, interface systems, colored diagrams and colored slotwise
// composition.
//
// Object colors form a finite category K. Morphism colors are free composite
// terms over atomic labels; two terms are equal when they describe the same
// wiring of atoms (so unit and associativity/interchange laws hold by
// construction). A typed connection from B to C names a witness f : color(B) ->
// color(C) in K and is realized by the interface kernel kappa_{f;B,C}.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <variant>
#include <vector>

#include "polyk/category.hpp"
#include "polyk/diagram.hpp"
#include "polyk/trace.hpp"

namespace polyk {

// ---------------------------------------------------------------------------
// Morphism-color terms

class ColorTerm {
 public:
  /// Where a box input or an external output reads from.
  struct Src {
    bool external = true;
    std::size_t a = 0;  // external input index, or box index
    std::size_t b = 0;  // box output port
  };

  struct Box {
    std::string name;
    std::vector<std::string> in, out;
    std::vector<Src> sources;
  };

  ColorTerm() = default;

  static ColorTerm atom(const std::string& name, std::vector<std::string> in, std::vector<std::string> out) {
    ColorTerm t;
    t.in_ = in;
    t.out_ = out;
    Box b{name, std::move(in), std::move(out), {}};
    for (std::size_t q = 0; q < b.in.size(); ++q) b.sources.push_back({true, q, 0});
    for (std::size_t p = 0; p < b.out.size(); ++p) t.ext_out_.push_back({false, 0, p});
    t.boxes_.push_back(std::move(b));
    t.expr_ = name;
    return t;
  }

  static ColorTerm unit(const std::string& color) {
    ColorTerm t;
    t.in_ = {color};
    t.out_ = {color};
    t.ext_out_ = {{true, 0, 0}};
    t.expr_ = "1_" + color;
    return t;
  }

  const std::vector<std::string>& inputs() const { return in_; }
  const std::vector<std::string>& outputs() const { return out_; }
  const std::vector<Box>& boxes() const { return boxes_; }
  const std::string& to_string() const { return expr_; }

  /// l o_(i,j) k: output i of k feeds input j of l.
  static ColorTerm compose(const ColorTerm& l, const ColorTerm& k, std::size_t i, std::size_t j) {
    if (i >= k.out_.size() || j >= l.in_.size()) throw Error(Errc::out_of_range, "color composition slot");
    if (k.out_[i] != l.in_[j])
      throw Error(Errc::type_mismatch, "color composition joins " + k.out_[i] + " to " + l.in_[j]);
    ColorTerm t;
    t.in_ = splice(l.in_, j, k.in_);
    t.out_ = splice(k.out_, i, l.out_);
    const std::size_t nk = k.boxes_.size(), nka = k.in_.size();
    auto from_k = [&](Src s) {
      if (s.external) s.a += j;
      return s;
    };
    auto from_l = [&](Src s) -> Src {
      if (!s.external) return {false, s.a + nk, s.b};
      if (s.a < j) return s;
      if (s.a > j) return {true, s.a - 1 + nka, 0};
      return from_k(k.ext_out_[i]);
    };
    for (const auto& b : k.boxes_) {
      Box nb = b;
      for (auto& s : nb.sources) s = from_k(s);
      t.boxes_.push_back(std::move(nb));
    }
    for (const auto& b : l.boxes_) {
      Box nb = b;
      for (auto& s : nb.sources) s = from_l(s);
      t.boxes_.push_back(std::move(nb));
    }
    for (std::size_t o = 0; o < i; ++o) t.ext_out_.push_back(from_k(k.ext_out_[o]));
    for (const auto& s : l.ext_out_) t.ext_out_.push_back(from_l(s));
    for (std::size_t o = i + 1; o < k.ext_out_.size(); ++o) t.ext_out_.push_back(from_k(k.ext_out_[o]));
    t.expr_ = "(" + l.expr_ + " o" + std::to_string(i) + "," + std::to_string(j) + " " + k.expr_ + ")";
    return t;
  }

  /// Reorders external ports: new input s is old input in_perm[s], likewise outputs.
  ColorTerm permuted(const std::vector<std::size_t>& in_perm, const std::vector<std::size_t>& out_perm) const {
    ColorTerm t;
    std::vector<std::size_t> inv(in_perm.size());
    for (std::size_t s = 0; s < in_perm.size(); ++s) {
      t.in_.push_back(in_.at(in_perm[s]));
      inv[in_perm[s]] = s;
    }
    auto remap = [&](Src s) {
      if (s.external) s.a = inv[s.a];
      return s;
    };
    for (const auto& b : boxes_) {
      Box nb = b;
      for (auto& s : nb.sources) s = remap(s);
      t.boxes_.push_back(std::move(nb));
    }
    for (auto s : out_perm) {
      t.out_.push_back(out_.at(s));
      t.ext_out_.push_back(remap(ext_out_.at(s)));
    }
    t.expr_ = expr_;
    return t;
  }

  /// Canonical encoding of the wiring; boxes are numbered by a breadth-first
  /// walk from the external ports in slot order.
  std::string canonical() const {
    const std::size_t n = boxes_.size();
    // consumer of each box output: (box, port) or external output (n, o)
    std::map<std::pair<std::size_t, std::size_t>, std::pair<std::size_t, std::size_t>> consumer_of_out;
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> consumer_of_in;
    auto note = [&](const Src& s, std::pair<std::size_t, std::size_t> c) {
      if (s.external)
        consumer_of_in[s.a] = c;
      else
        consumer_of_out[{s.a, s.b}] = c;
    };
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t q = 0; q < boxes_[b].sources.size(); ++q) note(boxes_[b].sources[q], {b, q});
    for (std::size_t o = 0; o < ext_out_.size(); ++o) note(ext_out_[o], {n, o});

    auto run = [&](std::vector<long> num, std::vector<std::size_t> order) {
      auto visit = [&](std::size_t b) {
        if (b < n && num[b] < 0) {
          num[b] = static_cast<long>(order.size());
          order.push_back(b);
        }
      };
      for (std::size_t idx = 0; idx < order.size(); ++idx) {
        const std::size_t b = order[idx];
        for (const auto& s : boxes_[b].sources)
          if (!s.external) visit(s.a);
        for (std::size_t p = 0; p < boxes_[b].out.size(); ++p) {
          auto it = consumer_of_out.find({b, p});
          if (it != consumer_of_out.end()) visit(it->second.first);
        }
      }
      return std::make_pair(num, order);
    };
    auto encode = [&](const std::vector<long>& num, const std::vector<std::size_t>& order) {
      auto src = [&](const Src& s) {
        return s.external ? "e" + std::to_string(s.a) : "b" + std::to_string(num[s.a]) + "." + std::to_string(s.b);
      };
      auto colors = [](const std::vector<std::string>& cs) {
        std::string r;
        for (const auto& c : cs) r += std::to_string(c.size()) + ":" + c + ",";
        return r;
      };
      std::string s = "in[" + colors(in_) + "]out[" + colors(out_) + "]";
      for (std::size_t b : order) {
        const Box& box = boxes_[b];
        s += "{" + std::to_string(box.name.size()) + ":" + box.name + "|" + colors(box.in) + "|" + colors(box.out) + "|";
        for (const auto& x : box.sources) s += src(x) + ",";
        s += "}";
      }
      s += "->";
      for (const auto& x : ext_out_) s += src(x) + ",";
      return s;
    };

    std::vector<long> num(n, -1);
    std::vector<std::size_t> order;
    auto seed = [&](std::size_t b) {
      if (b < n && num[b] < 0) {
        num[b] = static_cast<long>(order.size());
        order.push_back(b);
      }
    };
    for (std::size_t k = 0; k < in_.size(); ++k) {
      auto it = consumer_of_in.find(k);
      if (it != consumer_of_in.end()) seed(it->second.first);
    }
    for (const auto& s : ext_out_)
      if (!s.external) seed(s.a);
    std::tie(num, order) = run(num, order);
    // Components without external ports: take the smallest encoding over roots.
    while (order.size() < n) {
      std::optional<std::pair<std::vector<long>, std::vector<std::size_t>>> best;
      std::string best_code;
      for (std::size_t r = 0; r < n; ++r) {
        if (num[r] >= 0) continue;
        auto nn = num;
        auto oo = order;
        nn[r] = static_cast<long>(oo.size());
        oo.push_back(r);
        auto res = run(nn, oo);
        const std::string code = encode(res.first, res.second);
        if (!best || code < best_code) {
          best = res;
          best_code = code;
        }
      }
      std::tie(num, order) = *best;
    }
    return encode(num, order);
  }

  friend bool operator==(const ColorTerm& a, const ColorTerm& b) {
    return a.in_ == b.in_ && a.out_ == b.out_ && a.canonical() == b.canonical();
  }

 private:
  std::vector<std::string> in_, out_;
  std::vector<Box> boxes_;
  std::vector<Src> ext_out_;
  std::string expr_;
};

inline std::vector<std::string> profile_colors(const Profile& p) {
  std::vector<std::string> out;
  for (const auto& o : p) out.push_back(o.color);
  return out;
}

/// Atomic morphism color of a kernel, typed by its profile colors.
inline ColorTerm kernel_atom(const std::string& name, const Kernel& k) {
  return ColorTerm::atom(name, profile_colors(k.source()), profile_colors(k.target()));
}

// ---------------------------------------------------------------------------
// Color systems

class ColorSystem {
 public:
  FiniteCategory& category() { return k_; }
  const FiniteCategory& category() const { return k_; }

  void add_color(const std::string& c) { k_.add_object(c); }
  void add_morphism(const std::string& id, const std::string& src, const std::string& dst) {
    k_.add_morphism(id, src, dst);
  }
  void set_composite(const std::string& g, const std::string& f, const std::string& gf) { k_.set_composite(g, f, gf); }
  bool has_color(const std::string& c) const { return k_.has_object(c); }

  /// Overrides the default unary color of a K-morphism.
  void set_iota(const std::string& m, ColorTerm t) {
    k_.morphism(m);
    iota_[m] = std::move(t);
  }

  /// Unary morphism color of a K-morphism. Defaults: identities map to units,
  /// declared composites of non-identities map to the composite of the factors'
  /// colors, and anything else to an atom of the same name.
  ColorTerm iota(const std::string& m) const {
    std::set<std::string> active;
    return iota_rec(m, active);
  }

 private:
  ColorTerm iota_rec(const std::string& m, std::set<std::string>& active) const {
    auto it = iota_.find(m);
    if (it != iota_.end()) return it->second;
    const Morphism& mm = k_.morphism(m);
    if (k_.is_identity(m)) return ColorTerm::unit(mm.src);
    if (active.insert(m).second) {
      for (const auto& [gf, comp] : k_.table()) {
        if (comp != m || gf.first == m || gf.second == m) continue;
        if (k_.is_identity(gf.first) || k_.is_identity(gf.second)) continue;
        if (active.count(gf.first) || active.count(gf.second)) continue;
        ColorTerm t = ColorTerm::compose(iota_rec(gf.first, active), iota_rec(gf.second, active), 0, 0);
        active.erase(m);
        return t;
      }
      active.erase(m);
    }
    return ColorTerm::atom(m, {mm.src}, {mm.dst});
  }

  FiniteCategory k_;
  std::map<std::string, ColorTerm> iota_;
};

/// Category axioms on the K table plus functoriality of iota.
inline std::vector<std::string> check_color_system(const ColorSystem& cs) {
  const auto& k = cs.category();
  std::vector<std::string> out = k.check();
  for (const auto& c : k.objects())
    if (!(cs.iota(FiniteCategory::identity_id(c)) == ColorTerm::unit(c)))
      out.push_back("iota(id." + c + ") is not the unit color");
  for (const auto& [id, m] : k.morphisms()) {
    const ColorTerm t = cs.iota(id);
    if (t.inputs() != std::vector<std::string>{m.src} || t.outputs() != std::vector<std::string>{m.dst})
      out.push_back("iota(" + id + ") has the wrong profile");
  }
  for (const auto& [fid, f] : k.morphisms())
    for (const auto& [gid, g] : k.morphisms()) {
      if (g.src != f.dst) continue;
      const auto gf = k.compose(gid, fid);
      if (!gf) continue;  // reported by the category check
      if (!(cs.iota(*gf) == ColorTerm::compose(cs.iota(gid), cs.iota(fid), 0, 0)))
        out.push_back("iota(" + gid + " o " + fid + ") differs from iota(" + gid + ") o iota(" + fid + ")");
    }
  return out;
}

// ---------------------------------------------------------------------------
// Interface systems

class InterfaceSystem {
 public:
  using Key = std::tuple<std::string, std::string, std::string>;  // (witness, B, C)

  explicit InterfaceSystem(std::shared_ptr<const ColorSystem> cs) : cs_(std::move(cs)) {}

  const ColorSystem& colors() const { return *cs_; }
  std::shared_ptr<const ColorSystem> color_system() const { return cs_; }

  /// Registers an object together with its identity interface.
  void add_object(const Object& o) {
    if (!cs_->has_color(o.color)) throw Error(Errc::unknown_name, "object '" + o.name + "' has undeclared color '" + o.color + "'");
    auto [it, fresh] = objects_.emplace(o.name, o);
    if (!fresh) {
      if (!(it->second == o)) throw Error(Errc::invalid_argument, "object '" + o.name + "' redeclared differently");
      return;
    }
    kernels_.emplace(Key{FiniteCategory::identity_id(o.color), o.name, o.name}, identity_kernel(o).named("id." + o.name));
  }

  void add_interface(const std::string& f, const std::string& b, const std::string& c, const Kernel& kappa) {
    const Object& ob = object(b);
    const Object& oc = object(c);
    const Morphism& m = cs_->category().morphism(f);
    if (m.src != ob.color || m.dst != oc.color)
      throw Error(Errc::type_mismatch, "witness '" + f + "' is " + m.src + " -> " + m.dst + " but the objects are colored " +
                                           ob.color + " -> " + oc.color);
    if (!same_spaces(kappa.source(), {ob}) || !same_spaces(kappa.target(), {oc}))
      throw Error(Errc::type_mismatch, "interface kernel for '" + f + "' must be (" + b + ") -> (" + c + ")");
    kernels_.insert_or_assign(Key{f, b, c}, kappa.with_profiles({ob}, {oc}));
  }

  bool has_object(const std::string& name) const { return objects_.count(name) > 0; }

  const Object& object(const std::string& name) const {
    auto it = objects_.find(name);
    if (it == objects_.end()) throw Error(Errc::unknown_name, "object '" + name + "'");
    return it->second;
  }

  const std::map<std::string, Object>& objects() const { return objects_; }
  const std::map<Key, Kernel>& interfaces() const { return kernels_; }

  bool admissible(const std::string& f, const std::string& b, const std::string& c) const {
    return kernels_.count(Key{f, b, c}) > 0;
  }

  /// All witnesses from b to c. Distinct witnesses are kept even when their
  /// kernels coincide.
  std::vector<std::string> witnesses(const std::string& b, const std::string& c) const {
    std::vector<std::string> out;
    for (const auto& [key, k] : kernels_)
      if (std::get<1>(key) == b && std::get<2>(key) == c) out.push_back(std::get<0>(key));
    return out;
  }

  const Kernel& kernel(const std::string& f, const std::string& b, const std::string& c) const {
    auto it = kernels_.find(Key{f, b, c});
    if (it == kernels_.end())
      throw Error(Errc::inadmissible, "witness '" + f + "' is not admissible from " + b + " to " + c);
    return it->second;
  }

 private:
  std::shared_ptr<const ColorSystem> cs_;
  std::map<std::string, Object> objects_;
  std::map<Key, Kernel> kernels_;
};

/// Exact distance between two kernels when both have a comparable closed form.
inline std::optional<double> exact_kernel_distance(const Kernel& a, const Kernel& b) {
  if (!same_spaces(a.source(), b.source()) || !same_spaces(a.target(), b.target()))
    return std::numeric_limits<double>::infinity();
  if (finite_convertible(a) && finite_convertible(b)) return max_abs_diff(to_finite_table(a), to_finite_table(b));
  const auto* ga = a.as<GaussianLinear>();
  const auto* gb = b.as<GaussianLinear>();
  if (ga && gb)
    return std::max({(ga->weight - gb->weight).cwiseAbs().maxCoeff(), (ga->bias - gb->bias).cwiseAbs().maxCoeff(),
                     (ga->cov_diag - gb->cov_diag).cwiseAbs().maxCoeff()});
  if (a.is_identity() && b.is_identity()) return 0.0;
  return std::nullopt;
}

/// A few fixed points of a space for statistical kernel comparisons.
inline std::vector<Value> probe_points(const Space& s, std::size_t cap = 16) {
  std::vector<Value> out;
  if (s.enumerable()) {
    for (std::size_t i = 0; i < std::min(cap, s.cardinality()); ++i) out.push_back(point_at(s, i));
    return out;
  }
  std::function<Value(const Space&, double)> build = [&](const Space& sp, double t) -> Value {
    switch (sp.kind()) {
      case Space::Kind::finite: return Value::index(0);
      case Space::Kind::realvec: return Value::real(std::vector<double>(sp.dim(), t));
      case Space::Kind::product: {
        std::vector<Value> items;
        for (const auto& f : sp.factors()) items.push_back(build(f, t));
        return Value::tuple(std::move(items));
      }
    }
    return {};
  };
  for (double t : {-2.0, -1.0, 0.0, 1.0, 2.0}) out.push_back(build(s, t));
  return out;
}

/// Total-variation estimate between k(.|x) and the law of running `chain` in
/// sequence from x, each from n samples. Finite targets compare outcome
/// frequencies (exact probabilities for k when it has a density); real targets
/// compare ten quantile bins of the first coordinate.
inline double tv_estimate(const Kernel& k, const std::vector<Kernel>& chain, const Value& x, std::size_t n, std::uint64_t seed) {
  Rng rk = substream(seed, "tv-direct", 0), rc = substream(seed, "tv-chain", 0);
  auto run_chain = [&](Rng& rng) {
    Value v = x;
    for (const auto& c : chain) v = sample(c, v, rng);
    return v;
  };
  const Space& ts = k.target_space();
  if (ts.enumerable()) {
    const std::size_t m = ts.cardinality();
    std::vector<double> p(m, 0.0), q(m, 0.0);
    bool exact = finite_convertible(k);
    if (!exact) {
      try {
        for (std::size_t y = 0; y < m; ++y) p[y] = std::exp(log_density(k, point_at(ts, y), x));
        exact = true;
      } catch (const Error&) {
        std::fill(p.begin(), p.end(), 0.0);
      }
    } else {
      p = apply_exact(k, x);
    }
    if (!exact)
      for (std::size_t s = 0; s < n; ++s) p[point_index(ts, sample(k, x, rk))] += 1.0 / static_cast<double>(n);
    for (std::size_t s = 0; s < n; ++s) q[point_index(ts, run_chain(rc))] += 1.0 / static_cast<double>(n);
    double tv = 0.0;
    for (std::size_t y = 0; y < m; ++y) tv += std::abs(p[y] - q[y]);
    return 0.5 * tv;
  }
  std::vector<double> a, b;
  for (std::size_t s = 0; s < n; ++s) {
    a.push_back(flatten_real(sample(k, x, rk)).at(0));
    b.push_back(flatten_real(run_chain(rc)).at(0));
  }
  std::vector<double> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> edges;
  for (int q = 1; q < 10; ++q) edges.push_back(sorted[static_cast<std::size_t>(q * static_cast<double>(n) / 10.0)]);
  auto bin = [&](double v) { return static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin()); };
  std::vector<double> pa(10, 0.0), pb(10, 0.0);
  for (double v : a) pa[bin(v)] += 1.0 / static_cast<double>(n);
  for (double v : b) pb[bin(v)] += 1.0 / static_cast<double>(n);
  double tv = 0.0;
  for (int i = 0; i < 10; ++i) tv += std::abs(pa[i] - pb[i]);
  return 0.5 * tv;
}

struct CoherenceEntry {
  std::string path;
  bool exact = true;
  double deviation = 0.0;  // max abs table deviation, or TV estimate when !exact
  bool pass = true;
};

struct CoherenceReport {
  std::vector<CoherenceEntry> entries;
  std::vector<std::string> violations;

  bool ok() const {
    if (!violations.empty()) return false;
    return std::all_of(entries.begin(), entries.end(), [](const CoherenceEntry& e) { return e.pass; });
  }
  double max_exact_deviation() const {
    double m = 0.0;
    for (const auto& e : entries)
      if (e.exact) m = std::max(m, e.deviation);
    return m;
  }
  double max_tv() const {
    double m = 0.0;
    for (const auto& e : entries)
      if (!e.exact) m = std::max(m, e.deviation);
    return m;
  }
};

struct CoherenceOptions {
  std::size_t max_length = 3;
  std::size_t samples = 100000;
  std::uint64_t seed = 0;
  double tv_tolerance = 0.01;
};

/// Checks the identity clause, closure under composition, and that kappa of a
/// composed witness equals every bracketing of the composed kernels along each
/// witness path of length 2..max_length.
inline CoherenceReport check_interface_coherence(const InterfaceSystem& is, const CoherenceOptions& opt = {}) {
  CoherenceReport rep;
  const auto& K = is.colors().category();
  for (const auto& [name, obj] : is.objects()) {
    const std::string id = FiniteCategory::identity_id(obj.color);
    if (!is.admissible(id, name, name)) {
      rep.violations.push_back("identity witness missing on " + name);
      continue;
    }
    const Kernel& k = is.kernel(id, name, name);
    const auto dist = exact_kernel_distance(k, identity_kernel(obj));
    CoherenceEntry e{id + " on " + name, true, dist.value_or(0.0), true};
    if (!dist && !k.is_identity()) {
      e.exact = false;
      e.deviation = 0.0;
      for (const auto& x : probe_points(profile_space(k.source()), 5))
        e.deviation = std::max(e.deviation, tv_estimate(k, {identity_kernel(obj)}, x, opt.samples, opt.seed));
      e.pass = e.deviation <= opt.tv_tolerance;
    } else {
      e.pass = e.deviation <= kExactTol;
    }
    rep.entries.push_back(e);
  }

  struct Step {
    std::string f, b, c;
  };
  std::vector<Step> steps;
  for (const auto& [key, k] : is.interfaces())
    if (!K.is_identity(std::get<0>(key))) steps.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key)});

  std::vector<Step> path;
  std::uint64_t path_index = 0;
  std::function<void()> extend = [&]() {
    if (path.size() >= 2) {
      std::string desc;
      for (const auto& s : path) desc += (desc.empty() ? "" : " ; ") + s.f + ":" + s.b + "->" + s.c;
      std::optional<std::string> w = path.front().f;
      for (std::size_t s = 1; s < path.size() && w; ++s) w = K.compose(path[s].f, *w);
      if (!w) {
        rep.violations.push_back("witness path " + desc + " has no declared composite");
      } else if (!is.admissible(*w, path.front().b, path.back().c)) {
        rep.violations.push_back("composite witness " + *w + " of " + desc + " is not admissible from " +
                                 path.front().b + " to " + path.back().c);
      } else {
        const Kernel& target = is.kernel(*w, path.front().b, path.back().c);
        std::vector<Kernel> chain;
        for (const auto& s : path) chain.push_back(is.kernel(s.f, s.b, s.c));
        // All bracketings of the kernel composite.
        std::function<std::vector<std::optional<Kernel>>(std::size_t, std::size_t)> br =
            [&](std::size_t lo, std::size_t hi) -> std::vector<std::optional<Kernel>> {
          if (hi - lo == 1) return {chain[lo]};
          std::vector<std::optional<Kernel>> out;
          for (std::size_t m = lo + 1; m < hi; ++m)
            for (const auto& a : br(lo, m))
              for (const auto& b : br(m, hi)) {
                if (!a || !b) {
                  out.push_back(std::nullopt);
                  continue;
                }
                try {
                  out.push_back(compose_unary(*a, *b));
                } catch (const Error& e) {
                  if (e.code() != Errc::not_closed) throw;
                  out.push_back(std::nullopt);
                }
              }
          return out;
        };
        CoherenceEntry e{desc + "  =>  " + *w, true, 0.0, true};
        for (const auto& cand : br(0, chain.size())) {
          std::optional<double> d;
          if (cand) d = exact_kernel_distance(target, *cand);
          if (!d) {
            e.exact = false;
            break;
          }
          e.deviation = std::max(e.deviation, *d);
        }
        if (e.exact) {
          e.pass = e.deviation <= kExactTol;
        } else {
          e.deviation = 0.0;
          std::uint64_t probe = 0;
          for (const auto& x : probe_points(profile_space(target.source()), 5))
            e.deviation = std::max(e.deviation, tv_estimate(target, chain, x, opt.samples,
                                                            splitmix64_mix(opt.seed + 1000003 * path_index + probe++)));
          e.pass = e.deviation <= opt.tv_tolerance;
        }
        ++path_index;
        rep.entries.push_back(std::move(e));
      }
    }
    if (path.size() >= opt.max_length) return;
    for (const auto& s : steps) {
      if (!path.empty() && s.b != path.back().c) continue;
      path.push_back(s);
      extend();
      path.pop_back();
    }
  };
  extend();
  return rep;
}

// ---------------------------------------------------------------------------
// Colored diagrams and colored composition

struct ColoredDiagram {
  Diagram shape;
  std::map<VertexId, ColorTerm> colors;  // vertices without an entry get an atom named after the kernel

  ColorTerm vertex_color(const VertexId& v) const {
    auto it = colors.find(v);
    if (it != colors.end()) return it->second;
    const Kernel& k = shape.kernel(v);
    return kernel_atom(k.name().empty() ? v : k.name(), k);
  }
};

inline ValidationReport validate_colored(const ColoredDiagram& cd, const InterfaceSystem& is) {
  using C = Violation::Clause;
  ValidationReport r = validate_structure(cd.shape);
  for (const auto& [id, k] : cd.shape.vertices) {
    for (const auto* prof : {&k.source(), &k.target()})
      for (const auto& o : *prof) {
        if (!is.has_object(o.name))
          r.add(C::type_mismatch, "vertex '" + id + "' uses unregistered object '" + o.name + "'");
        else if (!(is.object(o.name) == o))
          r.add(C::type_mismatch, "vertex '" + id + "' uses object '" + o.name + "' with a different space or color");
      }
    const ColorTerm t = cd.vertex_color(id);
    if (t.inputs() != profile_colors(k.source()) || t.outputs() != profile_colors(k.target()))
      r.add(C::type_mismatch, "morphism color of vertex '" + id + "' does not match its profile colors");
  }
  for (const auto& w : cd.shape.wires) {
    if (!cd.shape.vertices.count(w.from.vertex) || !cd.shape.vertices.count(w.to.vertex)) continue;
    const auto& src = cd.shape.kernel(w.from.vertex).target();
    const auto& dst = cd.shape.kernel(w.to.vertex).source();
    if (w.from.slot >= src.size() || w.to.slot >= dst.size()) continue;
    const std::string what = "wire " + port_to_string(w.from) + " -> " + port_to_string(w.to);
    if (w.witness.empty()) {
      r.add(C::witness, what + " has no interface witness");
      continue;
    }
    const std::string& b = src[w.from.slot].name;
    const std::string& c = dst[w.to.slot].name;
    if (!is.admissible(w.witness, b, c))
      r.add(C::witness, what + ": witness '" + w.witness + "' is not admissible from " + b + " to " + c);
  }
  return r;
}

inline std::string interface_vertex_id(const Wire& w) {
  return "iface:" + port_to_string(w.from) + ">" + port_to_string(w.to);
}

/// Replaces every internal wire u.p -> v.q by u.p -> kappa -> v.q, where kappa is
/// the interface kernel of the wire's witness.
inline Diagram interface_expand(const ColoredDiagram& cd, const InterfaceSystem& is) {
  const ValidationReport r = validate_colored(cd, is);
  if (!r.ok()) throw Error(Errc::inadmissible, "colored diagram is invalid:\n" + r.to_string());
  Diagram d;
  for (const auto& [id, k] : cd.shape.vertices) d.add_vertex(id, k);
  for (const auto& w : cd.shape.wires) {
    const auto& b = cd.shape.output_object(w.from).name;
    const auto& c = cd.shape.input_object(w.to).name;
    const VertexId id = interface_vertex_id(w);
    d.add_vertex(id, is.kernel(w.witness, b, c));
    d.wires.push_back({w.from, {id, 0}, ""});
    d.wires.push_back({{id, 0}, w.to, ""});
  }
  d.inputs = cd.shape.inputs;
  d.outputs = cd.shape.outputs;
  return d;
}

struct ColoredKernel {
  Kernel kernel;
  ColorTerm color;
};

struct CkscResult {
  std::variant<Kernel, Diagram> value;
  ColorTerm color;
};

/// Color of l o^f_(i,j) k: psi(l) o_(i,j) (iota(f) o_(i,0) psi(k)).
inline ColorTerm cksc_color(const ColorTerm& k, const ColorTerm& l, std::size_t i, std::size_t j, const ColorTerm& iota_f) {
  return ColorTerm::compose(l, ColorTerm::compose(iota_f, k, i, 0), i, j);
}

/// l o^f_(i,j) k = l o_(i,j) (kappa_{f;B_i,C_j} o_(i,0) k). Exact when the pieces
/// compose exactly; otherwise the expanded three-vertex diagram.
inline CkscResult cksc(const ColoredKernel& k, const ColoredKernel& l, std::size_t i, std::size_t j, const std::string& f,
                       const InterfaceSystem& is) {
  if (i >= k.kernel.target().size()) throw Error(Errc::out_of_range, "output slot " + std::to_string(i));
  if (j >= l.kernel.source().size()) throw Error(Errc::out_of_range, "input slot " + std::to_string(j));
  const std::string& b = k.kernel.target()[i].name;
  const std::string& c = l.kernel.source()[j].name;
  if (!is.admissible(f, b, c)) throw Error(Errc::inadmissible, "witness '" + f + "' is not admissible from " + b + " to " + c);
  const Kernel& kappa = is.kernel(f, b, c);
  CkscResult res{Diagram{}, cksc_color(k.color, l.color, i, j, is.colors().iota(f))};

  auto inner = binary_ksc(k.kernel, kappa, i, 0);
  if (auto* ik = std::get_if<Kernel>(&inner)) {
    auto outer = binary_ksc(*ik, l.kernel, i, j);
    if (auto* ok = std::get_if<Kernel>(&outer)) {
      res.value = std::move(*ok);
      return res;
    }
  }
  Diagram d;
  d.add_vertex("k", k.kernel);
  d.add_vertex("iface", kappa);
  d.add_vertex("l", l.kernel);
  d.wires = {{{"k", i}, {"iface", 0}, ""}, {{"iface", 0}, {"l", j}, ""}};
  for (std::size_t q = 0; q < j; ++q) d.inputs.push_back({"l", q});
  for (std::size_t q = 0; q < k.kernel.source().size(); ++q) d.inputs.push_back({"k", q});
  for (std::size_t q = j + 1; q < l.kernel.source().size(); ++q) d.inputs.push_back({"l", q});
  for (std::size_t p = 0; p < i; ++p) d.outputs.push_back({"k", p});
  for (std::size_t p = 0; p < l.kernel.target().size(); ++p) d.outputs.push_back({"l", p});
  for (std::size_t p = i + 1; p < k.kernel.target().size(); ++p) d.outputs.push_back({"k", p});
  res.value = std::move(d);
  return res;
}

inline Kernel cksc_kernel(const Kernel& k, const Kernel& l, std::size_t i, std::size_t j, const std::string& f,
                          const InterfaceSystem& is) {
  const Kernel& kappa = is.kernel(f, k.target().at(i).name, l.source().at(j).name);
  return ksc_kernel(ksc_kernel(k, kappa, i, 0), l, i, j);
}

/// Reduces a tree-shaped colored diagram by colored composition along the wires
/// in the given order.
inline ColoredKernel reduce_colored_in_order(const ColoredDiagram& cd, const InterfaceSystem& is,
                                            const std::vector<std::size_t>& wire_order) {
  const Kernel k = reduce_in_order(cd.shape, wire_order, [&](const Kernel& s, const Kernel& t, std::size_t i, std::size_t j, const Wire& w) {
    return cksc_kernel(s, t, i, j, w.witness, is);
  });
  const ColorTerm c = reduce_wires<ColorTerm>(
      cd.shape, wire_order, [&](const VertexId& v) { return cd.vertex_color(v); },
      [&](const ColorTerm& s, const ColorTerm& t, std::size_t i, std::size_t j, const Wire& w) {
        return cksc_color(s, t, i, j, is.colors().iota(w.witness));
      },
      [](const ColorTerm& t, const std::vector<std::size_t>& in, const std::vector<std::size_t>& out) {
        return t.permuted(in, out);
      });
  return {k, c};
}

inline ExactTrace colored_trace_exact(const ColoredDiagram& cd, const InterfaceSystem& is, const Value& x) {
  return trace_exact(interface_expand(cd, is), x);
}

inline Kernel colored_trace_kernel(const ColoredDiagram& cd, const InterfaceSystem& is) {
  return trace_kernel_exact(interface_expand(cd, is));
}

inline TraceSample colored_trace_sample(const ColoredDiagram& cd, const InterfaceSystem& is, const Value& x, Rng& rng) {
  return trace_sample(interface_expand(cd, is), x, rng);
}

inline ColoredDiagram single_colored(const VertexId& id, const ColoredKernel& k) {
  ColoredDiagram cd{single_vertex(id, k.kernel), {}};
  cd.colors.emplace(id, k.color);
  return cd;
}

/// Colored connection of external output i of d1 to external input j of d2 through witness f.
inline ColoredDiagram connect_colored(const ColoredDiagram& d1, std::size_t i, const ColoredDiagram& d2, std::size_t j,
                                      const std::string& f, const InterfaceSystem& is) {
  if (i >= d1.shape.outputs.size() || j >= d2.shape.inputs.size()) throw Error(Errc::out_of_range, "connect slot");
  const std::string& b = d1.shape.output_object(d1.shape.outputs[i]).name;
  const std::string& c = d2.shape.input_object(d2.shape.inputs[j]).name;
  if (!is.admissible(f, b, c)) throw Error(Errc::inadmissible, "witness '" + f + "' is not admissible from " + b + " to " + c);
  bool clash = false;
  for (const auto& [id, k] : d1.shape.vertices) clash = clash || d2.shape.vertices.count(id);
  ColoredDiagram out{connect(d1.shape, i, d2.shape, j, f), {}};
  for (const auto& [id, k] : d1.shape.vertices) out.colors.emplace((clash ? "left/" : "") + id, d1.vertex_color(id));
  for (const auto& [id, k] : d2.shape.vertices) out.colors.emplace((clash ? "right/" : "") + id, d2.vertex_color(id));
  return out;
}

}  // namespace polyk
