#pragma once

// Finite categories given by explicit tables. Used for the object-color
// category of a color system and for indexing categories of co-indexed systems.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "polyk/error.hpp"

namespace polyk {

struct Morphism {
  std::string id;
  std::string src;
  std::string dst;
};

class FiniteCategory {
 public:
  static std::string identity_id(const std::string& obj) { return "id." + obj; }

  /// Adds an object and its identity morphism.
  void add_object(const std::string& obj) {
    if (!objects_.insert(obj).second) return;
    morphisms_[identity_id(obj)] = {identity_id(obj), obj, obj};
  }

  void add_morphism(const std::string& id, const std::string& src, const std::string& dst) {
    if (!objects_.count(src) || !objects_.count(dst))
      throw Error(Errc::unknown_name, "morphism '" + id + "' between undeclared objects");
    auto it = morphisms_.find(id);
    if (it != morphisms_.end()) {
      if (it->second.src != src || it->second.dst != dst)
        throw Error(Errc::invalid_argument, "morphism '" + id + "' redeclared with a different type");
      return;
    }
    morphisms_[id] = {id, src, dst};
  }

  /// Declares g o f = gf.
  void set_composite(const std::string& g, const std::string& f, const std::string& gf) {
    morphism(g);
    morphism(f);
    morphism(gf);
    table_[{g, f}] = gf;
  }

  bool has_object(const std::string& o) const { return objects_.count(o) > 0; }
  bool has_morphism(const std::string& m) const { return morphisms_.count(m) > 0; }
  const std::set<std::string>& objects() const { return objects_; }
  const std::map<std::string, Morphism>& morphisms() const { return morphisms_; }
  const std::map<std::pair<std::string, std::string>, std::string>& table() const { return table_; }

  const Morphism& morphism(const std::string& id) const {
    auto it = morphisms_.find(id);
    if (it == morphisms_.end()) throw Error(Errc::unknown_name, "morphism '" + id + "'");
    return it->second;
  }

  bool is_identity(const std::string& id) const {
    const auto& m = morphism(id);
    return id == identity_id(m.src);
  }

  /// g o f from the table; composites with identities are implied unless declared.
  std::optional<std::string> compose(const std::string& g, const std::string& f) const {
    const auto& mg = morphism(g);
    const auto& mf = morphism(f);
    if (mf.dst != mg.src) return std::nullopt;
    auto it = table_.find({g, f});
    if (it != table_.end()) return it->second;
    if (is_identity(g)) return f;
    if (is_identity(f)) return g;
    return std::nullopt;
  }

  /// Exhaustive check of composite typing, unit laws and associativity.
  std::vector<std::string> check() const {
    std::vector<std::string> out;
    for (const auto& [key, gf] : table_) {
      const auto& g = morphism(key.first);
      const auto& f = morphism(key.second);
      const auto& c = morphism(gf);
      if (f.dst != g.src)
        out.push_back("composite declared for non-composable pair (" + g.id + ", " + f.id + ")");
      else if (c.src != f.src || c.dst != g.dst)
        out.push_back("composite " + g.id + " o " + f.id + " = " + gf + " has the wrong type");
    }
    for (const auto& [id, m] : morphisms_) {
      const auto l = compose(identity_id(m.dst), id);
      const auto r = compose(id, identity_id(m.src));
      if (!l || *l != id) out.push_back("left unit law fails for " + id);
      if (!r || *r != id) out.push_back("right unit law fails for " + id);
    }
    for (const auto& [fid, f] : morphisms_) {
      for (const auto& [gid, g] : morphisms_) {
        if (g.src != f.dst) continue;
        const auto gf = compose(gid, fid);
        if (!gf) {
          out.push_back("missing composite " + gid + " o " + fid);
          continue;
        }
        for (const auto& [hid, h] : morphisms_) {
          if (h.src != g.dst) continue;
          const auto hg = compose(hid, gid);
          if (!hg) continue;  // reported above
          const auto a = compose(hid, *gf);
          const auto b = compose(*hg, fid);
          if (!a || !b || *a != *b)
            out.push_back("associativity fails for " + hid + " o " + gid + " o " + fid);
        }
      }
    }
    return out;
  }

 private:
  std::set<std::string> objects_;
  std::map<std::string, Morphism> morphisms_;
  std::map<std::pair<std::string, std::string>, std::string> table_;
};

}  // namespace polyk
