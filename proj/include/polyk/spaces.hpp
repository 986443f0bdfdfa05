#pragma once

// Measurable-space descriptors, typed points, and the tuple surgery used by
// slotwise composition.
//
// Spaces are finite sets, real coordinate spaces, or finite products of these.
// The empty product is the one-point space. Finite points are indexed
// 0..n-1; labels are carried for display and serialization only.

#include <algorithm>
#include <cstddef>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "polyk/error.hpp"

namespace polyk {

/// Tolerance for exact comparisons of finite-space probability arithmetic.
inline constexpr double kExactTol = 1e-12;

class Space {
 public:
  enum class Kind { finite, realvec, product };

  static Space finite(std::vector<std::string> labels) {
    if (labels.empty()) throw Error(Errc::invalid_argument, "finite space needs at least one point");
    std::set<std::string> seen(labels.begin(), labels.end());
    if (seen.size() != labels.size())
      throw Error(Errc::invalid_argument, "finite space labels must be distinct");
    Space s(Kind::finite);
    s.labels_ = std::move(labels);
    return s;
  }

  static Space finite(std::size_t n) {
    std::vector<std::string> labels;
    labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) labels.push_back(std::to_string(i));
    return finite(std::move(labels));
  }

  static Space realvec(std::size_t dim) {
    Space s(Kind::realvec);
    s.dim_ = dim;
    return s;
  }

  static Space product(std::vector<Space> factors) {
    Space s(Kind::product);
    s.factors_ = std::move(factors);
    return s;
  }

  static Space unit() { return product({}); }

  Kind kind() const { return kind_; }
  bool is_finite() const { return kind_ == Kind::finite; }
  bool is_realvec() const { return kind_ == Kind::realvec; }
  bool is_product() const { return kind_ == Kind::product; }

  std::size_t size() const { return labels_.size(); }
  const std::vector<std::string>& labels() const { return labels_; }
  std::size_t dim() const { return dim_; }
  const std::vector<Space>& factors() const { return factors_; }

  /// True when every point can be listed: finite spaces and products of them.
  bool enumerable() const {
    switch (kind_) {
      case Kind::finite: return true;
      case Kind::realvec: return dim_ == 0;
      case Kind::product:
        for (const auto& f : factors_)
          if (!f.enumerable()) return false;
        return true;
    }
    return false;
  }

  std::size_t cardinality() const {
    switch (kind_) {
      case Kind::finite: return labels_.size();
      case Kind::realvec:
        if (dim_ == 0) return 1;
        throw Error(Errc::not_finite, "real space " + to_string() + " is not enumerable");
      case Kind::product: {
        std::size_t n = 1;
        for (const auto& f : factors_) n *= f.cardinality();
        return n;
      }
    }
    return 0;
  }

  /// Number of real coordinates once all realvec components are flattened.
  std::size_t real_dim() const {
    switch (kind_) {
      case Kind::finite: return 0;
      case Kind::realvec: return dim_;
      case Kind::product: {
        std::size_t n = 0;
        for (const auto& f : factors_) n += f.real_dim();
        return n;
      }
    }
    return 0;
  }

  /// True when the space carries only real coordinates (no finite component).
  bool purely_real() const {
    switch (kind_) {
      case Kind::finite: return false;
      case Kind::realvec: return true;
      case Kind::product:
        for (const auto& f : factors_)
          if (!f.purely_real()) return false;
        return true;
    }
    return false;
  }

  std::string to_string() const {
    std::ostringstream os;
    switch (kind_) {
      case Kind::finite:
        os << "Finite{";
        for (std::size_t i = 0; i < labels_.size(); ++i) os << (i ? "," : "") << labels_[i];
        os << "}";
        break;
      case Kind::realvec: os << "R^" << dim_; break;
      case Kind::product:
        os << "(";
        for (std::size_t i = 0; i < factors_.size(); ++i)
          os << (i ? " x " : "") << factors_[i].to_string();
        os << ")";
        break;
    }
    return os.str();
  }

  friend bool operator==(const Space&, const Space&) = default;

 private:
  explicit Space(Kind k) : kind_(k) {}

  Kind kind_;
  std::vector<std::string> labels_;
  std::size_t dim_ = 0;
  std::vector<Space> factors_;
};

/// A point of a Space: a finite index, a real coordinate tuple, or a tuple of points.
class Value {
 public:
  enum class Kind { index, real, tuple };

  Value() : kind_(Kind::tuple) {}

  static Value index(std::size_t i) {
    Value v(Kind::index);
    v.index_ = i;
    return v;
  }
  static Value real(std::vector<double> coords) {
    Value v(Kind::real);
    v.coords_ = std::move(coords);
    return v;
  }
  static Value tuple(std::vector<Value> items) {
    Value v(Kind::tuple);
    v.items_ = std::move(items);
    return v;
  }
  static Value empty() { return tuple({}); }

  Kind kind() const { return kind_; }
  std::size_t index() const { return index_; }
  const std::vector<double>& coords() const { return coords_; }
  const std::vector<Value>& items() const { return items_; }
  std::size_t arity() const { return items_.size(); }
  const Value& operator[](std::size_t i) const { return items_.at(i); }

  friend bool operator==(const Value& a, const Value& b) {
    if (a.kind_ != b.kind_) return false;
    switch (a.kind_) {
      case Kind::index: return a.index_ == b.index_;
      case Kind::real: return a.coords_ == b.coords_;
      case Kind::tuple: return a.items_ == b.items_;
    }
    return false;
  }

  friend bool operator<(const Value& a, const Value& b) {
    if (a.kind_ != b.kind_) return a.kind_ < b.kind_;
    switch (a.kind_) {
      case Kind::index: return a.index_ < b.index_;
      case Kind::real: return a.coords_ < b.coords_;
      case Kind::tuple:
        return std::lexicographical_compare(a.items_.begin(), a.items_.end(), b.items_.begin(),
                                            b.items_.end());
    }
    return false;
  }

 private:
  explicit Value(Kind k) : kind_(k) {}

  Kind kind_;
  std::size_t index_ = 0;
  std::vector<double> coords_;
  std::vector<Value> items_;
};

inline Space product_space(std::vector<Space> factors) { return Space::product(std::move(factors)); }

inline bool value_in_space(const Value& v, const Space& s) {
  switch (s.kind()) {
    case Space::Kind::finite:
      return v.kind() == Value::Kind::index && v.index() < s.size();
    case Space::Kind::realvec:
      return v.kind() == Value::Kind::real && v.coords().size() == s.dim();
    case Space::Kind::product:
      if (v.kind() != Value::Kind::tuple || v.arity() != s.factors().size()) return false;
      for (std::size_t i = 0; i < v.arity(); ++i)
        if (!value_in_space(v[i], s.factors()[i])) return false;
      return true;
  }
  return false;
}

/// T_j: insert `v` so that it becomes item `j` (0-based) of the result.
inline Value insert_at(const Value& ctx, std::size_t j, Value v) {
  if (ctx.kind() != Value::Kind::tuple) throw Error(Errc::invalid_argument, "insert_at needs a tuple");
  if (j > ctx.arity()) throw Error(Errc::out_of_range, "insert position " + std::to_string(j));
  std::vector<Value> items = ctx.items();
  items.insert(items.begin() + static_cast<std::ptrdiff_t>(j), std::move(v));
  return Value::tuple(std::move(items));
}

/// (pi_i(t), pi_{-i}(t)) with `i` 0-based.
inline std::pair<Value, Value> project_at(const Value& t, std::size_t i) {
  if (t.kind() != Value::Kind::tuple) throw Error(Errc::invalid_argument, "project_at needs a tuple");
  if (i >= t.arity()) throw Error(Errc::out_of_range, "project position " + std::to_string(i));
  std::vector<Value> rest;
  rest.reserve(t.arity() - 1);
  for (std::size_t k = 0; k < t.arity(); ++k)
    if (k != i) rest.push_back(t[k]);
  return {t[i], Value::tuple(std::move(rest))};
}

/// Replace element `pos` of `base` by the sequence `ins`. This is the shared shape of
/// V_j (inputs) and U_i (outputs) in slotwise composition.
template <class T>
std::vector<T> splice(const std::vector<T>& base, std::size_t pos, const std::vector<T>& ins) {
  if (pos >= base.size()) throw Error(Errc::out_of_range, "splice position " + std::to_string(pos));
  std::vector<T> out;
  out.reserve(base.size() - 1 + ins.size());
  out.insert(out.end(), base.begin(), base.begin() + static_cast<std::ptrdiff_t>(pos));
  out.insert(out.end(), ins.begin(), ins.end());
  out.insert(out.end(), base.begin() + static_cast<std::ptrdiff_t>(pos) + 1, base.end());
  return out;
}

/// Insert the items of `ins` at position `pos` of the tuple `rest` (U_i(b_{-i}, d)).
inline Value insert_items_at(const Value& rest, std::size_t pos, const Value& ins) {
  if (pos > rest.arity()) throw Error(Errc::out_of_range, "insert position " + std::to_string(pos));
  std::vector<Value> items;
  items.reserve(rest.arity() + ins.arity());
  items.insert(items.end(), rest.items().begin(), rest.items().begin() + static_cast<std::ptrdiff_t>(pos));
  items.insert(items.end(), ins.items().begin(), ins.items().end());
  items.insert(items.end(), rest.items().begin() + static_cast<std::ptrdiff_t>(pos), rest.items().end());
  return Value::tuple(std::move(items));
}

/// Inverse of insert_items_at: take `count` items starting at `pos`.
inline std::pair<Value, Value> extract_items_at(const Value& t, std::size_t pos, std::size_t count) {
  if (pos + count > t.arity()) throw Error(Errc::out_of_range, "extract range");
  std::vector<Value> inner, rest;
  for (std::size_t k = 0; k < t.arity(); ++k) {
    if (k >= pos && k < pos + count)
      inner.push_back(t[k]);
    else
      rest.push_back(t[k]);
  }
  return {Value::tuple(std::move(inner)), Value::tuple(std::move(rest))};
}

/// Mixed-radix position of `v` among the enumerated points of `s`
/// (first component most significant).
inline std::size_t point_index(const Space& s, const Value& v) {
  switch (s.kind()) {
    case Space::Kind::finite:
      if (v.kind() != Value::Kind::index || v.index() >= s.size())
        throw Error(Errc::not_in_space, "point not in " + s.to_string());
      return v.index();
    case Space::Kind::realvec:
      if (s.dim() != 0) throw Error(Errc::not_finite, s.to_string());
      return 0;
    case Space::Kind::product: {
      if (v.kind() != Value::Kind::tuple || v.arity() != s.factors().size())
        throw Error(Errc::not_in_space, "point not in " + s.to_string());
      std::size_t idx = 0;
      for (std::size_t i = 0; i < v.arity(); ++i)
        idx = idx * s.factors()[i].cardinality() + point_index(s.factors()[i], v[i]);
      return idx;
    }
  }
  return 0;
}

inline Value point_at(const Space& s, std::size_t idx) {
  switch (s.kind()) {
    case Space::Kind::finite:
      if (idx >= s.size()) throw Error(Errc::out_of_range, "point index");
      return Value::index(idx);
    case Space::Kind::realvec:
      if (s.dim() != 0) throw Error(Errc::not_finite, s.to_string());
      return Value::real({});
    case Space::Kind::product: {
      std::vector<Value> items(s.factors().size());
      for (std::size_t i = s.factors().size(); i-- > 0;) {
        const std::size_t n = s.factors()[i].cardinality();
        items[i] = point_at(s.factors()[i], idx % n);
        idx /= n;
      }
      if (idx != 0) throw Error(Errc::out_of_range, "point index");
      return Value::tuple(std::move(items));
    }
  }
  return {};
}

inline std::vector<Value> enumerate(const Space& s) {
  const std::size_t n = s.cardinality();
  std::vector<Value> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(point_at(s, i));
  return out;
}

/// Concatenate all real coordinates of `v` in component order.
inline void flatten_real_into(const Value& v, std::vector<double>& out) {
  switch (v.kind()) {
    case Value::Kind::index: break;
    case Value::Kind::real: out.insert(out.end(), v.coords().begin(), v.coords().end()); break;
    case Value::Kind::tuple:
      for (const auto& item : v.items()) flatten_real_into(item, out);
      break;
  }
}

inline std::vector<double> flatten_real(const Value& v) {
  std::vector<double> out;
  flatten_real_into(v, out);
  return out;
}

/// Rebuild a purely real point of `s` from flattened coordinates.
inline Value unflatten_real(const Space& s, std::span<const double> coords, std::size_t* used = nullptr) {
  std::size_t pos = 0;
  auto build = [&](auto&& self, const Space& sp) -> Value {
    switch (sp.kind()) {
      case Space::Kind::finite:
        throw Error(Errc::type_mismatch, "unflatten_real over finite component");
      case Space::Kind::realvec: {
        if (pos + sp.dim() > coords.size()) throw Error(Errc::dimension_mismatch, "too few coordinates");
        std::vector<double> c(coords.begin() + static_cast<std::ptrdiff_t>(pos),
                              coords.begin() + static_cast<std::ptrdiff_t>(pos + sp.dim()));
        pos += sp.dim();
        return Value::real(std::move(c));
      }
      case Space::Kind::product: {
        std::vector<Value> items;
        for (const auto& f : sp.factors()) items.push_back(self(self, f));
        return Value::tuple(std::move(items));
      }
    }
    return {};
  };
  Value v = build(build, s);
  if (used)
    *used = pos;
  else if (pos != coords.size())
    throw Error(Errc::dimension_mismatch, "coordinate count does not match " + s.to_string());
  return v;
}

inline std::string format_value(const Value& v, const Space& s) {
  std::ostringstream os;
  auto num = [&](double x) {
    std::ostringstream t;
    t.precision(17);
    t << x;
    return t.str();
  };
  switch (s.kind()) {
    case Space::Kind::finite:
      if (v.kind() == Value::Kind::index && v.index() < s.size()) return s.labels()[v.index()];
      return "?";
    case Space::Kind::realvec:
      os << "[";
      for (std::size_t i = 0; i < v.coords().size(); ++i) os << (i ? ", " : "") << num(v.coords()[i]);
      os << "]";
      return os.str();
    case Space::Kind::product:
      os << "(";
      for (std::size_t i = 0; i < v.arity() && i < s.factors().size(); ++i)
        os << (i ? ", " : "") << format_value(v[i], s.factors()[i]);
      os << ")";
      return os.str();
  }
  return os.str();
}

/// A named object of a Markov polycategory: its underlying space and object color.
struct Object {
  std::string name;
  Space space = Space::unit();
  std::string color;

  friend bool operator==(const Object&, const Object&) = default;
};

/// Ordered tuple of objects; equality is ordered-tuple equality.
using Profile = std::vector<Object>;

inline Space profile_space(const Profile& p) {
  std::vector<Space> spaces;
  spaces.reserve(p.size());
  for (const auto& o : p) spaces.push_back(o.space);
  return Space::product(std::move(spaces));
}

/// Profiles agree slot by slot on underlying spaces.
inline bool same_spaces(const Profile& a, const Profile& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].space == b[i].space)) return false;
  return true;
}

inline std::string profile_to_string(const Profile& p) {
  std::string s = "(";
  for (std::size_t i = 0; i < p.size(); ++i) s += (i ? ", " : "") + p[i].name;
  return s + ")";
}

}  // namespace polyk
