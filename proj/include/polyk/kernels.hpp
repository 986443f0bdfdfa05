#pragma once

// Markov kernels between profiles of objects.
//
// Inputs and outputs are always tuples with one item per profile slot. A kernel
// carries one of four representations, each supporting a different set of
// capabilities:
//
//   FiniteTable       exact enumeration (rows indexed by enumerated source points)
//   DeterministicMap  Dirac kernels; optional Jacobian for pathwise gradients
//   SamplerDensity    sampling plus an optional log-density against a declared reference
//   GaussianLinear    W x + b + diag(cov)^(1/2) eps, zero covariance entries are Dirac
//
// Exact composition is only offered where the result stays in a closed class.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "polyk/error.hpp"
#include "polyk/random.hpp"
#include "polyk/spaces.hpp"

namespace polyk {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Vector to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

/// Probabilities indexed by the enumerated points of a finite space.
using FiniteDist = std::vector<double>;

enum class Reference { counting, lebesgue };

inline const char* reference_name(Reference r) {
  return r == Reference::counting ? "counting" : "lebesgue";
}

struct FiniteTable {
  std::vector<FiniteDist> rows;
};

struct DeterministicMap {
  std::function<Value(const Value&)> fn;
  /// d(real output coords)/d(real input coords); empty when not differentiable.
  std::function<Matrix(const Value&)> jacobian;
  bool identity = false;
};

struct SamplerDensity {
  std::function<Value(Rng&, const Value&)> sample;
  /// log p(output | input) w.r.t. `reference`; empty when no density is available.
  std::function<double(const Value&, const Value&)> log_density;
  Reference reference = Reference::lebesgue;
};

struct GaussianLinear {
  Matrix weight;  // target_dim x source_dim
  Vector bias;
  Vector cov_diag;
};

class Kernel {
 public:
  using Rep = std::variant<FiniteTable, DeterministicMap, SamplerDensity, GaussianLinear>;

  Kernel(Profile source, Profile target, Rep rep, std::string signature = {})
      : source_(std::move(source)),
        target_(std::move(target)),
        rep_(std::move(rep)),
        signature_(std::move(signature)),
        source_space_(profile_space(source_)),
        target_space_(profile_space(target_)) {
    check();
  }

  const Profile& source() const { return source_; }
  const Profile& target() const { return target_; }
  const Space& source_space() const { return source_space_; }
  const Space& target_space() const { return target_space_; }
  const Rep& rep() const { return rep_; }

  template <class T>
  const T* as() const {
    return std::get_if<T>(&rep_);
  }

  /// Builtin name plus arguments for kernels that cannot be compared by table.
  const std::string& signature() const { return signature_; }
  /// Registry name, empty for anonymous kernels.
  const std::string& name() const { return name_; }

  Kernel named(std::string name) const {
    Kernel k = *this;
    k.name_ = std::move(name);
    return k;
  }

  /// Same representation with relabelled (space-equal) profiles.
  Kernel with_profiles(Profile source, Profile target) const {
    if (!same_spaces(source, source_) || !same_spaces(target, target_))
      throw Error(Errc::type_mismatch, "relabelled profiles must keep the underlying spaces");
    Kernel k = *this;
    k.source_ = std::move(source);
    k.target_ = std::move(target);
    return k;
  }

  bool is_identity() const {
    const auto* d = as<DeterministicMap>();
    return d && d->identity;
  }

 private:
  void check() const {
    if (const auto* t = as<FiniteTable>()) {
      if (!source_space_.enumerable() || !target_space_.enumerable())
        throw Error(Errc::not_finite, "finite table over non-enumerable profile");
      const std::size_t nrows = source_space_.cardinality(), ncols = target_space_.cardinality();
      if (t->rows.size() != nrows)
        throw Error(Errc::dimension_mismatch, "finite table has " + std::to_string(t->rows.size()) +
                                                  " rows, source has " + std::to_string(nrows) + " points");
      for (const auto& row : t->rows) {
        if (row.size() != ncols) throw Error(Errc::dimension_mismatch, "finite table row width");
        double s = 0.0;
        for (double p : row) {
          if (!(p >= 0.0)) throw Error(Errc::invalid_argument, "negative or NaN probability");
          s += p;
        }
        if (std::abs(s - 1.0) > kExactTol)
          throw Error(Errc::invalid_argument, "finite table row sums to " + std::to_string(s));
      }
    } else if (const auto* g = as<GaussianLinear>()) {
      if (!source_space_.purely_real() || !target_space_.purely_real())
        throw Error(Errc::type_mismatch, "Gaussian-linear kernels need real profiles");
      const auto n_in = static_cast<Eigen::Index>(source_space_.real_dim());
      const auto n_out = static_cast<Eigen::Index>(target_space_.real_dim());
      if (g->weight.rows() != n_out || g->weight.cols() != n_in || g->bias.size() != n_out ||
          g->cov_diag.size() != n_out)
        throw Error(Errc::dimension_mismatch, "Gaussian-linear parameter shapes");
      for (Eigen::Index r = 0; r < n_out; ++r)
        if (!(g->cov_diag[r] >= 0.0)) throw Error(Errc::invalid_argument, "negative variance");
    } else if (const auto* d = as<DeterministicMap>()) {
      if (!d->fn) throw Error(Errc::invalid_argument, "deterministic kernel without a map");
    } else if (const auto* s = as<SamplerDensity>()) {
      if (!s->sample) throw Error(Errc::invalid_argument, "sampler kernel without a sampler");
    }
  }

  Profile source_;
  Profile target_;
  Rep rep_;
  std::string signature_;
  std::string name_;
  Space source_space_;
  Space target_space_;
};

// ---------------------------------------------------------------------------
// Constructors

inline Kernel identity_kernel(const Profile& p) {
  const std::size_t n = profile_space(p).real_dim();
  DeterministicMap d;
  d.fn = [](const Value& v) { return v; };
  d.jacobian = [n](const Value&) -> Matrix { return Matrix::Identity(n, n); };
  d.identity = true;
  return Kernel(p, p, std::move(d), "identity");
}

inline Kernel identity_kernel(const Object& obj) { return identity_kernel(Profile{obj}); }

inline Kernel dirac_of_map(std::function<Value(const Value&)> fn, Profile source, Profile target,
                           std::function<Matrix(const Value&)> jacobian = {}, std::string signature = {}) {
  DeterministicMap d;
  d.fn = std::move(fn);
  d.jacobian = std::move(jacobian);
  return Kernel(std::move(source), std::move(target), std::move(d), std::move(signature));
}

inline Kernel finite_kernel(Profile source, Profile target, std::vector<FiniteDist> rows) {
  return Kernel(std::move(source), std::move(target), FiniteTable{std::move(rows)});
}

inline Kernel gaussian_kernel(Profile source, Profile target, Matrix weight, Vector bias, Vector cov_diag) {
  return Kernel(std::move(source), std::move(target),
                GaussianLinear{std::move(weight), std::move(bias), std::move(cov_diag)});
}

// ---------------------------------------------------------------------------
// Finite conversion and exact application

/// Whether the kernel has an exact table form.
inline bool finite_convertible(const Kernel& k) {
  if (!k.source_space().enumerable() || !k.target_space().enumerable()) return false;
  if (k.as<FiniteTable>() || k.as<DeterministicMap>()) return true;
  if (const auto* s = k.as<SamplerDensity>()) return static_cast<bool>(s->log_density);
  return false;
}

inline FiniteDist apply_exact(const Kernel& k, const Value& input) {
  if (!value_in_space(input, k.source_space()))
    throw Error(Errc::not_in_space, "input not in " + k.source_space().to_string());
  if (!finite_convertible(k)) throw Error(Errc::not_finite, "kernel has no exact table form");
  if (const auto* t = k.as<FiniteTable>()) return t->rows[point_index(k.source_space(), input)];
  const Space& ts = k.target_space();
  if (const auto* d = k.as<DeterministicMap>()) {
    FiniteDist row(ts.cardinality(), 0.0);
    row[point_index(ts, d->fn(input))] = 1.0;
    return row;
  }
  const auto& s = std::get<SamplerDensity>(k.rep());
  FiniteDist row;
  row.reserve(ts.cardinality());
  for (std::size_t b = 0; b < ts.cardinality(); ++b) row.push_back(std::exp(s.log_density(point_at(ts, b), input)));
  return row;
}

inline FiniteTable to_finite_table(const Kernel& k) {
  if (const auto* t = k.as<FiniteTable>()) return *t;
  if (!finite_convertible(k)) throw Error(Errc::not_finite, "kernel has no exact table form");
  FiniteTable t;
  const std::size_t n = k.source_space().cardinality();
  t.rows.reserve(n);
  for (std::size_t a = 0; a < n; ++a) t.rows.push_back(apply_exact(k, point_at(k.source_space(), a)));
  return t;
}

inline Kernel to_finite_kernel(const Kernel& k) {
  return Kernel(k.source(), k.target(), to_finite_table(k)).named(k.name());
}

inline double max_abs_diff(const FiniteTable& a, const FiniteTable& b) {
  if (a.rows.size() != b.rows.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t r = 0; r < a.rows.size(); ++r) {
    if (a.rows[r].size() != b.rows[r].size()) return std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < a.rows[r].size(); ++c) m = std::max(m, std::abs(a.rows[r][c] - b.rows[r][c]));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Sampling and densities

inline Value sample_gaussian(const Kernel& k, const GaussianLinear& g, const Value& input, Rng& rng) {
  const Vector x = to_eigen(flatten_real(input));
  Vector y = g.weight * x + g.bias;
  for (Eigen::Index r = 0; r < y.size(); ++r)
    if (g.cov_diag[r] > 0.0) y[r] += std::sqrt(g.cov_diag[r]) * standard_normal(rng);
  const auto ys = to_std(y);
  return unflatten_real(k.target_space(), ys);
}

inline Value sample(const Kernel& k, const Value& input, Rng& rng) {
  if (!value_in_space(input, k.source_space()))
    throw Error(Errc::not_in_space, "input not in " + k.source_space().to_string());
  if (const auto* d = k.as<DeterministicMap>()) return d->fn(input);
  if (const auto* s = k.as<SamplerDensity>()) return s->sample(rng, input);
  if (const auto* g = k.as<GaussianLinear>()) return sample_gaussian(k, *g, input, rng);
  const auto& row = std::get<FiniteTable>(k.rep()).rows[point_index(k.source_space(), input)];
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t b = 0; b < row.size(); ++b) {
    if (row[b] <= 0.0) continue;
    acc += row[b];
    last = b;
    if (u < acc) return point_at(k.target_space(), b);
  }
  return point_at(k.target_space(), last);
}

inline double gaussian_log_density(const GaussianLinear& g, const Value& output, const Value& input) {
  const Vector x = to_eigen(flatten_real(input));
  const Vector y = to_eigen(flatten_real(output));
  const Vector mu = g.weight * x + g.bias;
  double lp = 0.0;
  for (Eigen::Index r = 0; r < y.size(); ++r) {
    const double c = g.cov_diag[r];
    if (c <= 0.0) throw Error(Errc::no_density, "Gaussian component with zero variance has no Lebesgue density");
    const double z = y[r] - mu[r];
    lp += -0.5 * std::log(2.0 * M_PI * c) - 0.5 * z * z / c;
  }
  return lp;
}

/// log p(output | input) against the representation's reference measure
/// (counting for tables, Lebesgue for Gaussians). Zero table entries give -inf.
inline double log_density(const Kernel& k, const Value& output, const Value& input) {
  if (!value_in_space(input, k.source_space()))
    throw Error(Errc::not_in_space, "input not in " + k.source_space().to_string());
  if (!value_in_space(output, k.target_space()))
    throw Error(Errc::not_in_space, "output not in " + k.target_space().to_string());
  if (const auto* t = k.as<FiniteTable>()) {
    const double p = t->rows[point_index(k.source_space(), input)][point_index(k.target_space(), output)];
    return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
  }
  if (const auto* g = k.as<GaussianLinear>()) return gaussian_log_density(*g, output, input);
  if (const auto* s = k.as<SamplerDensity>()) {
    if (!s->log_density) throw Error(Errc::no_density, "sampler kernel declares no density");
    return s->log_density(output, input);
  }
  throw Error(Errc::no_density, "deterministic kernels have no density");
}

inline Reference reference_measure(const Kernel& k) {
  if (k.as<FiniteTable>()) return Reference::counting;
  if (const auto* s = k.as<SamplerDensity>()) return s->reference;
  return Reference::lebesgue;
}

/// d(real output coords)/d(real input coords) at fixed noise, when the kernel is a
/// differentiable deterministic or reparameterized map.
inline std::optional<Matrix> input_jacobian(const Kernel& k, const Value& input) {
  if (const auto* d = k.as<DeterministicMap>()) {
    if (!d->jacobian) return std::nullopt;
    return d->jacobian(input);
  }
  if (const auto* g = k.as<GaussianLinear>()) return g->weight;
  return std::nullopt;
}

inline bool has_input_jacobian(const Kernel& k) {
  if (const auto* d = k.as<DeterministicMap>()) return static_cast<bool>(d->jacobian);
  return k.as<GaussianLinear>() != nullptr;
}

// ---------------------------------------------------------------------------
// Exact composition

/// Gaussian with mean M g + m and noise loading L; closed only if L L^T is diagonal.
inline std::optional<GaussianLinear> gaussian_from_loading(Matrix mean_map, Vector offset, const Matrix& loading) {
  const Matrix cov = loading * loading.transpose();
  for (Eigen::Index r = 0; r < cov.rows(); ++r)
    for (Eigen::Index c = 0; c < cov.cols(); ++c)
      if (r != c && std::abs(cov(r, c)) > kExactTol) return std::nullopt;
  return GaussianLinear{std::move(mean_map), std::move(offset), cov.diagonal()};
}

inline Matrix noise_scale(const Vector& cov_diag) { return cov_diag.array().sqrt().matrix().asDiagonal(); }

inline std::vector<std::size_t> slot_offsets(const Profile& p) {
  std::vector<std::size_t> off;
  std::size_t acc = 0;
  for (const auto& o : p) {
    off.push_back(acc);
    acc += o.space.real_dim();
  }
  off.push_back(acc);
  return off;
}

/// Exact slotwise composite of two Gaussian-linear kernels along (i, j), when its
/// output covariance stays diagonal.
inline std::optional<GaussianLinear> gaussian_slotwise(const Kernel& k, const Kernel& l, std::size_t i, std::size_t j) {
  const auto& g1 = std::get<GaussianLinear>(k.rep());
  const auto& g2 = std::get<GaussianLinear>(l.rep());
  const auto offB = slot_offsets(k.target());
  const auto offC = slot_offsets(l.source());
  const Eigen::Index nA = static_cast<Eigen::Index>(k.source_space().real_dim());
  const Eigen::Index nB = static_cast<Eigen::Index>(offB.back());
  const Eigen::Index nC = static_cast<Eigen::Index>(offC.back());
  const Eigen::Index nD = static_cast<Eigen::Index>(l.target_space().real_dim());
  const Eigen::Index bi = static_cast<Eigen::Index>(offB[i]);
  const Eigen::Index di = static_cast<Eigen::Index>(offB[i + 1] - offB[i]);
  const Eigen::Index cj = static_cast<Eigen::Index>(offC[j]);
  const Eigen::Index dj = static_cast<Eigen::Index>(offC[j + 1] - offC[j]);
  const Eigen::Index nG = nC - dj + nA;
  const Eigen::Index nE = nB + nD;

  // B = W1 a + b1 + S1 e1, as an affine map of (g, e).
  Matrix Bg = Matrix::Zero(nB, nG);
  Bg.middleCols(cj, nA) = g1.weight;
  Matrix Be = Matrix::Zero(nB, nE);
  Be.leftCols(nB) = noise_scale(g1.cov_diag);
  const Vector B0 = g1.bias;

  // C = (c_before, B_i, c_after).
  Matrix Cg = Matrix::Zero(nC, nG);
  Matrix Ce = Matrix::Zero(nC, nE);
  Vector C0 = Vector::Zero(nC);
  for (Eigen::Index r = 0; r < cj; ++r) Cg(r, r) = 1.0;
  Cg.middleRows(cj, dj) = Bg.middleRows(bi, di);
  Ce.middleRows(cj, dj) = Be.middleRows(bi, di);
  C0.segment(cj, dj) = B0.segment(bi, di);
  for (Eigen::Index r = cj + dj; r < nC; ++r) Cg(r, r - dj + nA) = 1.0;

  // D = W2 C + b2 + S2 e2.
  const Matrix Dg = g2.weight * Cg;
  Matrix De = g2.weight * Ce;
  De.rightCols(nD) += noise_scale(g2.cov_diag);
  const Vector D0 = g2.weight * C0 + g2.bias;

  // Out = (B_before, D, B_after).
  const Eigen::Index nOut = nB - di + nD;
  Matrix M(nOut, nG), L(nOut, nE);
  Vector m(nOut);
  M << Bg.topRows(bi), Dg, Bg.bottomRows(nB - bi - di);
  L << Be.topRows(bi), De, Be.bottomRows(nB - bi - di);
  m << B0.head(bi), D0, B0.tail(nB - bi - di);
  return gaussian_from_loading(std::move(M), std::move(m), L);
}

/// Chapman-Kolmogorov composite l o k of kernels A -> B and B -> C, in the same
/// closed representation class. Throws not_closed when no exact form exists.
inline Kernel compose_unary(const Kernel& k, const Kernel& l) {
  if (!same_spaces(k.target(), l.source()))
    throw Error(Errc::type_mismatch, "compose_unary: " + profile_to_string(k.target()) + " vs " +
                                         profile_to_string(l.source()));
  if (k.is_identity()) return Kernel(k.source(), l.target(), l.rep(), l.signature());
  if (l.is_identity()) return Kernel(k.source(), l.target(), k.rep(), k.signature());

  if (finite_convertible(k) && finite_convertible(l)) {
    const FiniteTable tk = to_finite_table(k), tl = to_finite_table(l);
    FiniteTable out;
    const std::size_t nc = l.target_space().cardinality();
    for (const auto& row : tk.rows) {
      FiniteDist r(nc, 0.0);
      for (std::size_t b = 0; b < row.size(); ++b) {
        if (row[b] == 0.0) continue;
        for (std::size_t c = 0; c < nc; ++c) r[c] += row[b] * tl.rows[b][c];
      }
      out.rows.push_back(std::move(r));
    }
    return Kernel(k.source(), l.target(), std::move(out));
  }

  const auto* g1 = k.as<GaussianLinear>();
  const auto* g2 = l.as<GaussianLinear>();
  if (g1 && g2) {
    Matrix loading(g2->weight.rows(), g1->weight.rows() + g2->weight.rows());
    loading << g2->weight * noise_scale(g1->cov_diag), noise_scale(g2->cov_diag);
    auto g = gaussian_from_loading(g2->weight * g1->weight, g2->weight * g1->bias + g2->bias, loading);
    if (!g) throw Error(Errc::not_closed, "Gaussian composite has correlated output coordinates");
    return Kernel(k.source(), l.target(), std::move(*g));
  }

  const auto* d1 = k.as<DeterministicMap>();
  if (d1 && l.as<DeterministicMap>()) {
    const auto& d2 = std::get<DeterministicMap>(l.rep());
    DeterministicMap d;
    d.fn = [f = d1->fn, g = d2.fn](const Value& x) { return g(f(x)); };
    if (d1->jacobian && d2.jacobian)
      d.jacobian = [f = d1->fn, jf = d1->jacobian, jg = d2.jacobian](const Value& x) -> Matrix {
        return jg(f(x)) * jf(x);
      };
    return Kernel(k.source(), l.target(), std::move(d));
  }
  if (d1) {
    // Pre-composition with a Dirac map keeps the density of l.
    SamplerDensity s;
    s.reference = reference_measure(l);
    s.sample = [f = d1->fn, l](Rng& rng, const Value& x) { return sample(l, f(x), rng); };
    bool has_density = l.as<SamplerDensity>() ? static_cast<bool>(std::get<SamplerDensity>(l.rep()).log_density)
                                              : !l.as<DeterministicMap>();
    if (const auto* g = l.as<GaussianLinear>())
      for (Eigen::Index r = 0; r < g->cov_diag.size(); ++r) has_density = has_density && g->cov_diag[r] > 0.0;
    if (has_density)
      s.log_density = [f = d1->fn, l](const Value& y, const Value& x) { return log_density(l, y, f(x)); };
    return Kernel(k.source(), l.target(), std::move(s));
  }
  throw Error(Errc::not_closed, "representation pair has no exact composite; use a diagram");
}

}  // namespace polyk
