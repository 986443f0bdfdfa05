#pragma once

// Parameterized diagrams, expected objectives and their gradients.
//
// Score-function vertices contribute (J - baseline) * grad_theta log p(b|a);
// pathwise vertices contribute (dJ/db) * db/dtheta at fixed noise, with dJ/db
// accumulated backwards through input Jacobians of everything downstream.
// Finite problems also get exact oracles by full enumeration.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <variant>
#include <vector>

#include "polyk/colors.hpp"
#include "polyk/trace.hpp"

namespace polyk {

// ---------------------------------------------------------------------------
// Parameterized kernels

struct ScoreFamily {
  std::function<Value(Rng&, const Vector& theta, const Value& a)> sample;
  std::function<double(const Vector& theta, const Value& b, const Value& a)> log_density;
  std::function<Vector(const Vector& theta, const Value& b, const Value& a)> grad_log_density;
  Reference reference = Reference::lebesgue;
};

/// b = forward(theta, a, eps) with eps ~ N(0, I_noise_dim).
struct PathwiseFamily {
  std::size_t noise_dim = 0;
  std::function<Value(const Vector& theta, const Value& a, const Vector& eps)> forward;
  std::function<Matrix(const Vector& theta, const Value& a, const Vector& eps)> jac_theta;  // real(b) x theta
  std::function<Matrix(const Vector& theta, const Value& a, const Vector& eps)> jac_input;  // real(b) x real(a)
};

/// Row-major logits, one row per source point; rows pass through a softmax.
struct FiniteLogitTable {};

inline FiniteDist softmax(const double* z, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n; ++c) m = std::max(m, z[c]);
  FiniteDist p(n);
  double s = 0.0;
  for (std::size_t c = 0; c < n; ++c) s += (p[c] = std::exp(z[c] - m));
  for (auto& v : p) v /= s;
  return p;
}

class ParamKernel {
 public:
  using Family = std::variant<ScoreFamily, PathwiseFamily, FiniteLogitTable>;

  ParamKernel(Profile source, Profile target, std::size_t theta_dim, Family family, std::string name = {})
      : source_(std::move(source)), target_(std::move(target)), dim_(theta_dim), family_(std::move(family)), name_(std::move(name)) {
    if (std::holds_alternative<FiniteLogitTable>(family_)) {
      const Space s = profile_space(source_), t = profile_space(target_);
      if (!s.enumerable() || !t.enumerable()) throw Error(Errc::invalid_argument, "logit tables need finite profiles");
      if (dim_ != s.cardinality() * t.cardinality())
        throw Error(Errc::dimension_mismatch, "logit table needs " + std::to_string(s.cardinality() * t.cardinality()) + " parameters");
    }
  }

  const Profile& source() const { return source_; }
  const Profile& target() const { return target_; }
  std::size_t theta_dim() const { return dim_; }
  const Family& family() const { return family_; }
  const std::string& name() const { return name_; }

  template <class T>
  const T* as() const {
    return std::get_if<T>(&family_);
  }

  bool is_pathwise() const { return as<PathwiseFamily>() != nullptr; }

  void check_theta(const Vector& theta) const {
    if (static_cast<std::size_t>(theta.size()) != dim_)
      throw Error(Errc::dimension_mismatch, "parameter block of size " + std::to_string(theta.size()) + ", expected " + std::to_string(dim_));
  }

  FiniteDist logit_row(const Vector& theta, const Value& a) const {
    const std::size_t n = profile_space(target_).cardinality();
    const std::size_t r = point_index(profile_space(source_), a);
    return softmax(theta.data() + r * n, n);
  }

  Vector draw_noise(Rng& rng) const {
    const auto& f = std::get<PathwiseFamily>(family_);
    Vector eps(static_cast<Eigen::Index>(f.noise_dim));
    for (auto& e : eps) e = standard_normal(rng);
    return eps;
  }

  /// The kernel k_theta.
  Kernel instantiate(const Vector& theta) const {
    check_theta(theta);
    Kernel k = std::visit(
        [&](const auto& f) -> Kernel {
          using F = std::decay_t<decltype(f)>;
          if constexpr (std::is_same_v<F, FiniteLogitTable>) {
            const Space s = profile_space(source_);
            FiniteTable t;
            for (std::size_t a = 0; a < s.cardinality(); ++a) t.rows.push_back(logit_row(theta, point_at(s, a)));
            return Kernel(source_, target_, std::move(t));
          } else if constexpr (std::is_same_v<F, ScoreFamily>) {
            SamplerDensity sd;
            sd.reference = f.reference;
            sd.sample = [f, theta](Rng& rng, const Value& a) { return f.sample(rng, theta, a); };
            sd.log_density = [f, theta](const Value& b, const Value& a) { return f.log_density(theta, b, a); };
            return Kernel(source_, target_, std::move(sd));
          } else {
            SamplerDensity sd;
            sd.sample = [self = *this, theta](Rng& rng, const Value& a) {
              const Vector eps = self.draw_noise(rng);
              return std::get<PathwiseFamily>(self.family_).forward(theta, a, eps);
            };
            return Kernel(source_, target_, std::move(sd));
          }
        },
        family_);
    return k.named(name_);
  }

  /// grad_theta log p_theta(b | a) for score and logit families.
  Vector grad_log_density(const Vector& theta, const Value& b, const Value& a) const {
    if (const auto* s = as<ScoreFamily>()) return s->grad_log_density(theta, b, a);
    if (as<FiniteLogitTable>()) {
      const Space ss = profile_space(source_), ts = profile_space(target_);
      const std::size_t n = ts.cardinality(), r = point_index(ss, a), c = point_index(ts, b);
      const FiniteDist p = logit_row(theta, a);
      Vector g = Vector::Zero(static_cast<Eigen::Index>(dim_));
      for (std::size_t j = 0; j < n; ++j) g(static_cast<Eigen::Index>(r * n + j)) = (j == c ? 1.0 : 0.0) - p[j];
      return g;
    }
    throw Error(Errc::no_density, "pathwise family '" + name_ + "' has no score");
  }

  /// grad_theta p_theta(b | a) for logit tables, without dividing by p.
  Vector grad_probability(const Vector& theta, const Value& b, const Value& a) const {
    if (!as<FiniteLogitTable>()) {
      const double p = std::exp(instantiate(theta).as<SamplerDensity>()->log_density(b, a));
      return p * grad_log_density(theta, b, a);
    }
    const Space ss = profile_space(source_), ts = profile_space(target_);
    const std::size_t n = ts.cardinality(), r = point_index(ss, a), c = point_index(ts, b);
    const FiniteDist p = logit_row(theta, a);
    Vector g = Vector::Zero(static_cast<Eigen::Index>(dim_));
    for (std::size_t j = 0; j < n; ++j) g(static_cast<Eigen::Index>(r * n + j)) = p[c] * ((j == c ? 1.0 : 0.0) - p[j]);
    return g;
  }

 private:
  Profile source_, target_;
  std::size_t dim_;
  Family family_;
  std::string name_;
};

/// b ~ N(W a + c, diag(sigma^2)) as a reparameterized map, theta = (W row-major, c).
inline ParamKernel gaussian_affine_pathwise(const Profile& src, const Profile& tgt, const Vector& sigma, std::string name = {}) {
  const auto n_in = static_cast<Eigen::Index>(profile_space(src).real_dim());
  const auto n_out = static_cast<Eigen::Index>(profile_space(tgt).real_dim());
  if (sigma.size() != n_out) throw Error(Errc::dimension_mismatch, "noise scale size");
  const Space ts = profile_space(tgt);
  PathwiseFamily f;
  f.noise_dim = static_cast<std::size_t>(n_out);
  f.forward = [=](const Vector& th, const Value& a, const Vector& eps) {
    const Matrix w = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(th.data(), n_out, n_in);
    const Vector y = w * to_eigen(flatten_real(a)) + th.tail(n_out) + sigma.cwiseProduct(eps);
    return unflatten_real(ts, to_std(y));
  };
  f.jac_theta = [=](const Vector&, const Value& a, const Vector&) {
    const Vector x = to_eigen(flatten_real(a));
    Matrix j = Matrix::Zero(n_out, n_out * n_in + n_out);
    for (Eigen::Index r = 0; r < n_out; ++r) {
      j.block(r, r * n_in, 1, n_in) = x.transpose();
      j(r, n_out * n_in + r) = 1.0;
    }
    return j;
  };
  f.jac_input = [=](const Vector& th, const Value&, const Vector&) {
    return Matrix(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(th.data(), n_out, n_in));
  };
  return ParamKernel(src, tgt, static_cast<std::size_t>(n_out * n_in + n_out), f, std::move(name));
}

/// b ~ N(W a + c, diag(sigma^2)) with the score-function gradient, theta = (W row-major, c).
inline ParamKernel gaussian_affine_score(const Profile& src, const Profile& tgt, const Vector& sigma, std::string name = {}) {
  const auto n_in = static_cast<Eigen::Index>(profile_space(src).real_dim());
  const auto n_out = static_cast<Eigen::Index>(profile_space(tgt).real_dim());
  if (sigma.size() != n_out) throw Error(Errc::dimension_mismatch, "noise scale size");
  const Space ts = profile_space(tgt);
  auto mean = [=](const Vector& th, const Value& a) -> Vector {
    const Matrix w = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(th.data(), n_out, n_in);
    return w * to_eigen(flatten_real(a)) + th.tail(n_out);
  };
  ScoreFamily f;
  f.sample = [=](Rng& rng, const Vector& th, const Value& a) {
    Vector y = mean(th, a);
    for (Eigen::Index r = 0; r < n_out; ++r) y(r) += sigma(r) * standard_normal(rng);
    return unflatten_real(ts, to_std(y));
  };
  f.log_density = [=](const Vector& th, const Value& b, const Value& a) {
    const Vector z = (to_eigen(flatten_real(b)) - mean(th, a)).cwiseQuotient(sigma);
    return -0.5 * z.squaredNorm() - sigma.array().log().sum() - 0.5 * static_cast<double>(n_out) * std::log(2.0 * M_PI);
  };
  f.grad_log_density = [=](const Vector& th, const Value& b, const Value& a) {
    const Vector x = to_eigen(flatten_real(a));
    const Vector d = (to_eigen(flatten_real(b)) - mean(th, a)).cwiseQuotient(sigma.cwiseProduct(sigma));
    Vector g(n_out * n_in + n_out);
    for (Eigen::Index r = 0; r < n_out; ++r) g.segment(r * n_in, n_in) = d(r) * x;
    g.tail(n_out) = d;
    return g;
  };
  return ParamKernel(src, tgt, static_cast<std::size_t>(n_out * n_in + n_out), f, std::move(name));
}

inline ParamKernel logit_table(const Profile& src, const Profile& tgt, std::string name = {}) {
  return ParamKernel(src, tgt, profile_space(src).cardinality() * profile_space(tgt).cardinality(), FiniteLogitTable{},
                     std::move(name));
}

/// A point of s: uniform index for finite factors, standard normal coordinates.
inline Value random_point(const Space& s, Rng& rng) {
  switch (s.kind()) {
    case Space::Kind::finite: return Value::index(rng() % s.size());
    case Space::Kind::realvec: {
      std::vector<double> c(s.dim());
      for (auto& v : c) v = standard_normal(rng);
      return Value::real(std::move(c));
    }
    case Space::Kind::product: {
      std::vector<Value> items;
      for (const auto& f : s.factors()) items.push_back(random_point(f, rng));
      return Value::tuple(std::move(items));
    }
  }
  return {};
}

inline double relative_error(const Vector& got, const Vector& ref) {
  const double d = (got - ref).norm();
  const double n = ref.norm();
  return n > 0.0 ? d / n : d;
}

/// Largest relative error of the declared derivatives (score or pathwise
/// Jacobians) against central differences with step h on random (theta, a, b).
inline double family_fd_error(const ParamKernel& pk, std::uint64_t seed, std::size_t trials = 5, double h = 1e-5) {
  double worst = 0.0;
  const Space ss = profile_space(pk.source());
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = substream(seed, "family-check", t);
    Vector th(static_cast<Eigen::Index>(pk.theta_dim()));
    for (auto& v : th) v = standard_normal(rng);
    const Value a = random_point(ss, rng);
    if (const auto* f = pk.as<PathwiseFamily>()) {
      const Vector eps = pk.draw_noise(rng);
      auto fwd = [&](const Vector& tt, const Value& aa) { return to_eigen(flatten_real(f->forward(tt, aa, eps))); };
      const Matrix jt = f->jac_theta(th, a, eps);
      Matrix fd(jt.rows(), jt.cols());
      for (Eigen::Index c = 0; c < th.size(); ++c) {
        Vector p = th, m = th;
        p(c) += h;
        m(c) -= h;
        fd.col(c) = (fwd(p, a) - fwd(m, a)) / (2.0 * h);
      }
      worst = std::max(worst, (jt - fd).norm() / std::max(fd.norm(), 1e-12));
      const std::vector<double> ac = flatten_real(a);
      if (!ac.empty()) {
        const Matrix ji = f->jac_input(th, a, eps);
        Matrix fi(ji.rows(), ji.cols());
        for (std::size_t c = 0; c < ac.size(); ++c) {
          std::vector<double> p = ac, m = ac;
          p[c] += h;
          m[c] -= h;
          fi.col(static_cast<Eigen::Index>(c)) = (fwd(th, unflatten_real(ss, p)) - fwd(th, unflatten_real(ss, m))) / (2.0 * h);
        }
        worst = std::max(worst, (ji - fi).norm() / std::max(fi.norm(), 1e-12));
      }
    } else {
      const Kernel k = pk.instantiate(th);
      const Value b = sample(k, a, rng);
      const Vector g = pk.grad_log_density(th, b, a);
      Vector fd(th.size());
      for (Eigen::Index c = 0; c < th.size(); ++c) {
        Vector p = th, m = th;
        p(c) += h;
        m(c) -= h;
        fd(c) = (log_density(pk.instantiate(p), b, a) - log_density(pk.instantiate(m), b, a)) / (2.0 * h);
      }
      worst = std::max(worst, relative_error(g, fd));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Parameterized diagrams

struct ParamDiagram {
  ColoredDiagram shape;                            // vertex kernels of parameterized vertices are placeholders
  std::map<VertexId, ParamKernel> params;          // parameter layout: this map's order
  std::shared_ptr<const InterfaceSystem> interfaces;  // null: uncolored wires, no expansion

  struct Block {
    VertexId vertex;
    std::size_t offset, dim;
  };

  std::vector<Block> layout() const {
    std::vector<Block> out;
    std::size_t off = 0;
    for (const auto& [id, pk] : params) {
      out.push_back({id, off, pk.theta_dim()});
      off += pk.theta_dim();
    }
    return out;
  }

  std::size_t theta_dim() const {
    std::size_t n = 0;
    for (const auto& [id, pk] : params) n += pk.theta_dim();
    return n;
  }

  Vector block(const Vector& theta, const VertexId& v) const {
    for (const auto& b : layout())
      if (b.vertex == v) return theta.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.dim));
    throw Error(Errc::unknown_name, "vertex '" + v + "' is not parameterized");
  }

  void check_theta(const Vector& theta) const {
    if (static_cast<std::size_t>(theta.size()) != theta_dim())
      throw Error(Errc::dimension_mismatch,
                  "parameter vector has " + std::to_string(theta.size()) + " entries, expected " + std::to_string(theta_dim()));
  }

  /// Registers a parameterized vertex, with a placeholder kernel in the shape.
  void add_param_vertex(const VertexId& id, const ParamKernel& pk, std::optional<ColorTerm> color = std::nullopt) {
    shape.shape.add_vertex(id, pk.instantiate(Vector::Zero(static_cast<Eigen::Index>(pk.theta_dim()))));
    if (color) shape.colors.insert_or_assign(id, *color);
    params.insert_or_assign(id, pk);
  }

  ColoredDiagram instantiate(const Vector& theta) const {
    check_theta(theta);
    ColoredDiagram cd = shape;
    for (const auto& b : layout()) {
      const ParamKernel& pk = params.at(b.vertex);
      cd.shape.vertices.insert_or_assign(
          b.vertex, pk.instantiate(theta.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.dim))));
      if (!cd.colors.count(b.vertex))
        cd.colors.emplace(b.vertex, ColorTerm::atom(pk.name().empty() ? b.vertex : pk.name(), profile_colors(pk.source()),
                                                    profile_colors(pk.target())));
    }
    return cd;
  }

  /// The uncolored diagram actually evaluated: interface kernels become vertices.
  Diagram expanded(const Vector& theta) const {
    const ColoredDiagram cd = instantiate(theta);
    if (interfaces) return interface_expand(cd, *interfaces);
    const ValidationReport r = validate(cd.shape);
    if (!r.ok()) throw Error(Errc::invalid_argument, "parameterized diagram is invalid:\n" + r.to_string());
    return cd.shape;
  }
};

// ---------------------------------------------------------------------------
// Objectives

struct RhoAtom {
  Value x, r;
  double weight = 0.0;
};

struct Objective {
  Profile reference;                                                // may be empty
  std::function<std::pair<Value, Value>(Rng&)> sample_rho;          // (external input, reference)
  std::optional<std::vector<RhoAtom>> rho_exact;                    // finite data law
  std::function<double(const Value& y, const Value& r)> f;
  std::function<Vector(const Value& y, const Value& r)> grad_output;  // d f / d real(y); optional

  static std::function<std::pair<Value, Value>(Rng&)> sampler_from_atoms(std::vector<RhoAtom> atoms) {
    return [atoms](Rng& rng) {
      const double u = uniform01(rng);
      double acc = 0.0;
      for (const auto& at : atoms) {
        acc += at.weight;
        if (u < acc) return std::make_pair(at.x, at.r);
      }
      return std::make_pair(atoms.back().x, atoms.back().r);
    };
  }
};

/// Relative error of grad_output against central differences at (y, r).
inline double objective_gradient_fd_error(const Objective& obj, const Value& y, const Value& r, const Space& ys, double h = 1e-5) {
  if (!obj.grad_output) throw Error(Errc::invalid_argument, "objective has no output gradient");
  const std::vector<double> c = flatten_real(y);
  Vector fd(static_cast<Eigen::Index>(c.size()));
  for (std::size_t k = 0; k < c.size(); ++k) {
    std::vector<double> p = c, m = c;
    p[k] += h;
    m[k] -= h;
    fd(static_cast<Eigen::Index>(k)) = (obj.f(unflatten_real(ys, p), r) - obj.f(unflatten_real(ys, m), r)) / (2.0 * h);
  }
  return relative_error(obj.grad_output(y, r), fd);
}

inline McEstimate expected_objective_mc(const ParamDiagram& pd, const Vector& theta, const Objective& obj, std::size_t n,
                                        std::uint64_t seed, std::size_t threads = 1) {
  if (n < 2) throw Error(Errc::invalid_argument, "need at least two samples");
  const Diagram d = pd.expanded(theta);
  const EvalPlan plan = make_plan(d, topo_sort(d));
  std::vector<double> values(n);
  parallel_for(n, threads, [&](std::size_t s) {
    Rng rng = substream(seed, "objective", s);
    const auto [x, r] = obj.sample_rho(rng);
    values[s] = obj.f(trace_sample(plan, x, rng).external_output, r);
  });
  return summarize(values);
}

namespace detail {

inline const std::vector<RhoAtom>& exact_rho(const Objective& obj) {
  if (!obj.rho_exact) throw Error(Errc::not_finite, "objective has no finite data law");
  return *obj.rho_exact;
}

}  // namespace detail

inline double expected_objective_exact(const ParamDiagram& pd, const Vector& theta, const Objective& obj) {
  const Diagram d = pd.expanded(theta);
  double total = 0.0;
  for (const auto& at : detail::exact_rho(obj)) {
    if (at.weight == 0.0) continue;
    const ExactTrace t = trace_exact(d, at.x);
    for (std::size_t y = 0; y < t.marginal.size(); ++y)
      if (t.marginal[y] != 0.0) total += at.weight * t.marginal[y] * obj.f(point_at(t.output_space, y), at.r);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Gradients

struct GradEstimate {
  std::map<VertexId, Vector> per_vertex;
  Vector flat;
  Vector std_errors;
  std::size_t n = 0;
};

inline GradEstimate assemble_gradient(const ParamDiagram& pd, const Vector& flat, const Vector& se, std::size_t n) {
  GradEstimate g;
  g.flat = flat;
  g.std_errors = se;
  g.n = n;
  for (const auto& b : pd.layout())
    g.per_vertex.emplace(b.vertex, flat.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.dim)));
  return g;
}

struct AdmissibilityReport {
  std::vector<std::string> blockers;
  bool ok() const { return blockers.empty(); }
  std::string to_string() const {
    std::string s;
    for (const auto& b : blockers) s += b + "\n";
    return s;
  }
};

namespace detail {

inline std::set<VertexId> descendants(const Diagram& d, const VertexId& u) {
  const auto succ = successors(d);
  std::set<VertexId> seen;
  std::vector<VertexId> stack{u};
  while (!stack.empty()) {
    const VertexId v = stack.back();
    stack.pop_back();
    auto it = succ.find(v);
    if (it == succ.end()) continue;
    for (const auto& w : it->second)
      if (seen.insert(w).second) stack.push_back(w);
  }
  return seen;
}

inline bool differentiable_through(const ParamDiagram& pd, const Diagram& d, const VertexId& v) {
  auto it = pd.params.find(v);
  if (it != pd.params.end()) return it->second.is_pathwise();
  return has_input_jacobian(d.kernel(v));
}

}  // namespace detail

/// Every kernel downstream of a pathwise vertex must expose an input Jacobian,
/// and the objective must have an output gradient.
inline AdmissibilityReport validate_pathwise_admissibility(const ParamDiagram& pd, const Objective& obj) {
  AdmissibilityReport rep;
  bool any = false;
  const Vector th = Vector::Zero(static_cast<Eigen::Index>(pd.theta_dim()));
  const Diagram d = pd.expanded(th);
  for (const auto& [u, pk] : pd.params) {
    if (!pk.is_pathwise()) continue;
    any = true;
    for (const auto& v : detail::descendants(d, u))
      if (!detail::differentiable_through(pd, d, v))
        rep.blockers.push_back("vertex '" + v + "' blocks the pathwise gradient of '" + u + "': no input Jacobian");
  }
  if (any && !obj.grad_output) rep.blockers.push_back("objective has no output gradient");
  return rep;
}

namespace detail {

/// One forward pass with recorded noise, then the per-sample gradient.
struct SampleGrad {
  double j = 0.0;
  Vector grad;
};

struct GradContext {
  const ParamDiagram& pd;
  const Vector& theta;
  const Objective& obj;
  Diagram d;
  EvalPlan plan;
  std::vector<const ParamKernel*> pk;      // per position
  std::vector<Vector> theta_block;         // per position
  std::vector<std::size_t> offset;         // per position, into the flat layout
  std::vector<std::size_t> in_off_total;   // real dims
  std::vector<std::vector<std::size_t>> in_off, out_off;
  std::vector<bool> on_path;               // position is a pathwise vertex or downstream of one
  bool any_pathwise = false;

  GradContext(const ParamDiagram& p, const Vector& th, const Objective& o) : pd(p), theta(th), obj(o), d(p.expanded(th)) {
    plan = make_plan(d, topo_sort(d));
    std::map<VertexId, std::size_t> off;
    for (const auto& b : pd.layout()) off[b.vertex] = b.offset;
    std::set<VertexId> path;
    for (const auto& [u, k] : pd.params)
      if (k.is_pathwise()) {
        any_pathwise = true;
        path.insert(u);
        for (const auto& v : descendants(d, u)) path.insert(v);
      }
    for (std::size_t pos = 0; pos < plan.order.size(); ++pos) {
      const VertexId& v = plan.order[pos];
      auto it = pd.params.find(v);
      pk.push_back(it == pd.params.end() ? nullptr : &it->second);
      theta_block.push_back(it == pd.params.end() ? Vector() : pd.block(th, v));
      offset.push_back(it == pd.params.end() ? 0 : off.at(v));
      in_off.push_back(slot_offsets(plan.kernels[pos]->source()));
      out_off.push_back(slot_offsets(plan.kernels[pos]->target()));
      on_path.push_back(path.count(v) > 0);
    }
    if (any_pathwise) {
      const AdmissibilityReport r = validate_pathwise_admissibility(pd, obj);
      if (!r.ok()) throw Error(Errc::pathwise_inadmissible, r.to_string());
    }
  }

  SampleGrad run(Rng& rng, double baseline) const {
    const auto [x, r] = obj.sample_rho(rng);
    const std::size_t n = plan.order.size();
    std::vector<Value> ins(n), ys;
    std::vector<Vector> eps(n);
    ys.reserve(n);
    for (std::size_t pos = 0; pos < n; ++pos) {
      ins[pos] = assemble(plan, pos, x, ys);
      if (pk[pos] && pk[pos]->is_pathwise()) {
        eps[pos] = pk[pos]->draw_noise(rng);
        ys.push_back(pk[pos]->as<PathwiseFamily>()->forward(theta_block[pos], ins[pos], eps[pos]));
      } else {
        ys.push_back(sample(*plan.kernels[pos], ins[pos], rng));
      }
    }
    const Value y = select_outputs(plan, ys);
    SampleGrad out;
    out.j = obj.f(y, r);
    out.grad = Vector::Zero(static_cast<Eigen::Index>(pd.theta_dim()));
    for (std::size_t pos = 0; pos < n; ++pos) {
      if (!pk[pos] || pk[pos]->is_pathwise()) continue;
      const Vector g = pk[pos]->grad_log_density(theta_block[pos], ys[pos], ins[pos]);
      if (!g.allFinite()) throw Error(Errc::zero_density, "score of vertex '" + plan.order[pos] + "' is not finite at the sampled outcome");
      out.grad.segment(static_cast<Eigen::Index>(offset[pos]), g.size()) += (out.j - baseline) * g;
    }
    if (!any_pathwise) return out;

    // Reverse accumulation of dJ/d(real outputs) through input Jacobians.
    std::vector<Vector> adj(n);
    for (std::size_t pos = 0; pos < n; ++pos)
      adj[pos] = Vector::Zero(static_cast<Eigen::Index>(out_off[pos].back()));
    const Vector gy = obj.grad_output(y, r);
    std::size_t cursor = 0;
    for (const auto& [pos, slot] : plan.outputs) {
      const std::size_t w = out_off[pos][slot + 1] - out_off[pos][slot];
      if (on_path[pos])
        adj[pos].segment(static_cast<Eigen::Index>(out_off[pos][slot]), static_cast<Eigen::Index>(w)) +=
            gy.segment(static_cast<Eigen::Index>(cursor), static_cast<Eigen::Index>(w));
      cursor += w;
    }
    for (std::size_t pos = n; pos-- > 0;) {
      if (!on_path[pos] || adj[pos].size() == 0) continue;
      Matrix jin;
      if (pk[pos]) {
        const auto* f = pk[pos]->as<PathwiseFamily>();
        const Vector g = f->jac_theta(theta_block[pos], ins[pos], eps[pos]).transpose() * adj[pos];
        out.grad.segment(static_cast<Eigen::Index>(offset[pos]), g.size()) += g;
        jin = f->jac_input(theta_block[pos], ins[pos], eps[pos]);
      } else {
        jin = *input_jacobian(*plan.kernels[pos], ins[pos]);
      }
      if (jin.rows() == 0 || jin.cols() == 0) continue;
      const Vector ain = jin.transpose() * adj[pos];
      for (std::size_t q = 0; q < plan.sources[pos].size(); ++q) {
        const auto& s = plan.sources[pos][q];
        if (s.external || !on_path[s.index]) continue;
        const std::size_t w = in_off[pos][q + 1] - in_off[pos][q];
        adj[s.index].segment(static_cast<Eigen::Index>(out_off[s.index][s.slot]), static_cast<Eigen::Index>(w)) +=
            ain.segment(static_cast<Eigen::Index>(in_off[pos][q]), static_cast<Eigen::Index>(w));
      }
    }
    return out;
  }
};

}  // namespace detail

struct GradOptions {
  double baseline = 0.0;
  std::size_t threads = 1;
};

/// Reverse-mode Monte Carlo gradient. Sample s uses substream(seed, "grad", s).
inline GradEstimate grad_reverse_mode_mc(const ParamDiagram& pd, const Vector& theta, const Objective& obj, std::size_t n,
                                         std::uint64_t seed, const GradOptions& opt = {}) {
  pd.check_theta(theta);
  if (n < 2) throw Error(Errc::invalid_argument, "need at least two samples");
  const auto dim = static_cast<Eigen::Index>(pd.theta_dim());
  if (dim == 0) return assemble_gradient(pd, Vector(), Vector(), n);
  const detail::GradContext ctx(pd, theta, obj);
  std::vector<Vector> per(n);
  parallel_for(n, opt.threads, [&](std::size_t s) {
    Rng rng = substream(seed, "grad", s);
    per[s] = ctx.run(rng, opt.baseline).grad;
  });
  Vector mean = Vector::Zero(dim), se = Vector::Zero(dim);
  std::vector<double> col(n);
  for (Eigen::Index c = 0; c < dim; ++c) {
    for (std::size_t s = 0; s < n; ++s) col[s] = per[s](c);
    const McEstimate e = summarize(col);
    mean(c) = e.mean;
    se(c) = e.std_error;
  }
  return assemble_gradient(pd, mean, se, n);
}

/// The per-sample gradient at a given stream; with a pathwise diagram the
/// stream fixes the noise, so this is differentiable in theta.
inline std::pair<double, Vector> sample_gradient(const ParamDiagram& pd, const Vector& theta, const Objective& obj, Rng rng,
                                                 double baseline = 0.0) {
  pd.check_theta(theta);
  const detail::GradContext ctx(pd, theta, obj);
  auto r = ctx.run(rng, baseline);
  return {r.j, r.grad};
}

namespace detail {

/// Visits every (data atom, joint outcome) with weight w * prob for an all-finite diagram.
struct EnumVisit {
  const RhoAtom* atom;
  double prob;  // w * joint probability
  const std::vector<Value>* ins;
  const std::vector<Value>* ys;
  const Value* y;
};

inline void enumerate_problem(const ParamDiagram& pd, const Vector& theta, const Objective& obj,
                              const std::function<void(const Diagram&, const std::vector<VertexId>&, const EnumVisit&)>& fn) {
  const Diagram d = pd.expanded(theta);
  const auto order = topo_sort(d);
  for (const auto& at : exact_rho(obj)) {
    if (at.weight == 0.0) continue;
    enumerate_trace(d, at.x, order, [&](double p, const std::vector<Value>& ins, const std::vector<Value>& ys, const Value& y) {
      fn(d, order, EnumVisit{&at, at.weight * p, &ins, &ys, &y});
    });
  }
}

}  // namespace detail

/// Exact gradient of the expected objective on an all-finite problem, by the
/// product rule on the vertex probabilities.
inline Vector grad_exact_enumeration(const ParamDiagram& pd, const Vector& theta, const Objective& obj) {
  pd.check_theta(theta);
  Vector g = Vector::Zero(static_cast<Eigen::Index>(pd.theta_dim()));
  if (g.size() == 0) return g;
  std::map<VertexId, std::size_t> off;
  for (const auto& b : pd.layout()) off[b.vertex] = b.offset;
  const Diagram d = pd.expanded(theta);
  const auto order = topo_sort(d);
  std::vector<FiniteTable> tables;
  for (const auto& v : order) tables.push_back(to_finite_table(d.kernel(v)));
  for (const auto& at : detail::exact_rho(obj)) {
    if (at.weight == 0.0) continue;
    enumerate_trace(d, at.x, order, [&](double, const std::vector<Value>& ins, const std::vector<Value>& ys, const Value& y) {
      const double fy = obj.f(y, at.r);
      if (fy == 0.0) return;
      std::vector<double> probs(order.size());
      for (std::size_t pos = 0; pos < order.size(); ++pos) {
        const Kernel& k = d.kernel(order[pos]);
        probs[pos] = tables[pos].rows[point_index(k.source_space(), ins[pos])][point_index(k.target_space(), ys[pos])];
      }
      for (std::size_t pos = 0; pos < order.size(); ++pos) {
        auto it = pd.params.find(order[pos]);
        if (it == pd.params.end()) continue;
        double others = at.weight * fy;
        for (std::size_t q = 0; q < order.size(); ++q)
          if (q != pos) others *= probs[q];
        if (others == 0.0) continue;
        const Vector dp = it->second.grad_probability(pd.block(theta, order[pos]), ys[pos], ins[pos]);
        g.segment(static_cast<Eigen::Index>(off.at(order[pos])), dp.size()) += others * dp;
      }
    });
  }
  return g;
}

/// Exact expectation of the per-sample score estimator (J - baseline) * sum_u grad log p_u.
inline Vector expected_estimator_exact(const ParamDiagram& pd, const Vector& theta, const Objective& obj, double baseline = 0.0) {
  pd.check_theta(theta);
  Vector g = Vector::Zero(static_cast<Eigen::Index>(pd.theta_dim()));
  if (g.size() == 0) return g;
  std::map<VertexId, std::size_t> off;
  for (const auto& b : pd.layout()) off[b.vertex] = b.offset;
  detail::enumerate_problem(pd, theta, obj, [&](const Diagram&, const std::vector<VertexId>& order, const detail::EnumVisit& e) {
    const double j = obj.f(*e.y, e.atom->r) - baseline;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      auto it = pd.params.find(order[pos]);
      if (it == pd.params.end()) continue;
      const Vector s = it->second.grad_log_density(pd.block(theta, order[pos]), (*e.ys)[pos], (*e.ins)[pos]);
      g.segment(static_cast<Eigen::Index>(off.at(order[pos])), s.size()) += e.prob * j * s;
    }
  });
  return g;
}

/// Exact expectation of Q_u * grad log p_u, where Q_u is the conditional
/// expected objective given the data atom and all non-descendant vertex outputs
/// of u (which include u's inputs and u's own output).
inline Vector exact_q_expectation(const ParamDiagram& pd, const Vector& theta, const Objective& obj) {
  pd.check_theta(theta);
  Vector g = Vector::Zero(static_cast<Eigen::Index>(pd.theta_dim()));
  if (g.size() == 0) return g;
  const Diagram d = pd.expanded(theta);
  const auto order = topo_sort(d);
  const Space xs = profile_space(d.input_profile()), rs = profile_space(obj.reference);
  for (const auto& b : pd.layout()) {
    const auto desc = detail::descendants(d, b.vertex);
    std::vector<std::size_t> keep;
    std::size_t upos = 0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      if (!desc.count(order[pos])) keep.push_back(pos);
      if (order[pos] == b.vertex) upos = pos;
    }
    struct Group {
      double mass = 0.0, mass_j = 0.0;
      Vector score;  // grad log p_u, a function of the key
    };
    std::map<std::vector<std::size_t>, Group> groups;
    const ParamKernel& pk = pd.params.at(b.vertex);
    const Vector tb = pd.block(theta, b.vertex);
    detail::enumerate_problem(pd, theta, obj, [&](const Diagram& dd, const std::vector<VertexId>&, const detail::EnumVisit& e) {
      std::vector<std::size_t> key{point_index(xs, e.atom->x), point_index(rs, e.atom->r)};
      for (auto pos : keep) key.push_back(point_index(dd.kernel(order[pos]).target_space(), (*e.ys)[pos]));
      Group& gr = groups[key];
      if (gr.score.size() == 0) gr.score = pk.grad_log_density(tb, (*e.ys)[upos], (*e.ins)[upos]);
      gr.mass += e.prob;
      gr.mass_j += e.prob * obj.f(*e.y, e.atom->r);
    });
    Vector acc = Vector::Zero(static_cast<Eigen::Index>(b.dim));
    for (const auto& [key, gr] : groups) {
      if (gr.mass == 0.0) continue;
      const double q = gr.mass_j / gr.mass;
      acc += gr.mass * q * gr.score;
    }
    g.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.dim)) = acc;
  }
  return g;
}

/// Central differences of a scalar function of theta.
inline Vector central_differences(const std::function<double(const Vector&)>& fn, const Vector& theta, double h = 1e-5) {
  Vector g(theta.size());
  for (Eigen::Index c = 0; c < theta.size(); ++c) {
    Vector p = theta, m = theta;
    p(c) += h;
    m(c) -= h;
    g(c) = (fn(p) - fn(m)) / (2.0 * h);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t steps = 50;
  double step_size = 0.1;
  std::size_t samples = 2000;  // per step, Monte Carlo mode
  std::uint64_t seed = 0;
  bool exact = false;          // exact gradients by enumeration
  double baseline = 0.0;
  std::size_t threads = 1;
};

struct TrainResult {
  std::vector<Vector> thetas;       // steps + 1 entries
  std::vector<double> objectives;   // expected objective at each theta
};

/// theta_{k+1} = theta_k - step_size * gradient. Objectives are exact when the
/// problem is finite, otherwise Monte Carlo estimates.
inline TrainResult train_sgd(const ParamDiagram& pd, const Vector& theta0, const Objective& obj, const TrainOptions& opt) {
  pd.check_theta(theta0);
  TrainResult res;
  auto objective = [&](const Vector& th, std::size_t k) {
    if (obj.rho_exact) {
      try {
        return expected_objective_exact(pd, th, obj);
      } catch (const Error& e) {
        if (e.code() != Errc::not_finite) throw;
      }
    }
    return expected_objective_mc(pd, th, obj, std::max<std::size_t>(opt.samples, 2), substream(opt.seed, "train-objective", k)(),
                                 opt.threads)
        .mean;
  };
  Vector th = theta0;
  res.thetas.push_back(th);
  res.objectives.push_back(objective(th, 0));
  for (std::size_t k = 0; k < opt.steps; ++k) {
    const Vector g = opt.exact ? grad_exact_enumeration(pd, th, obj)
                               : grad_reverse_mode_mc(pd, th, obj, opt.samples, substream(opt.seed, "train", k)(),
                                                      {opt.baseline, opt.threads})
                                     .flat;
    th = th - opt.step_size * g;
    res.thetas.push_back(th);
    res.objectives.push_back(objective(th, k + 1));
  }
  return res;
}

}  // namespace polyk
