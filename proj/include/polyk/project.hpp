#pragma once

// Project files: a single JSON document with named cross-references, loaded
// into a typed spec (which round-trips through a canonical text form) and then
// built into runtime objects.

#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "polyk/ccmp.hpp"
#include "polyk/learn.hpp"

namespace polyk {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Spec types

struct ObjectSpec {
  std::string kind;                 // "finite" or "real"
  std::vector<std::string> labels;  // finite spaces given by labels
  std::size_t size = 0;             // point count or real dimension
  std::string color = "plain";
  friend bool operator==(const ObjectSpec&, const ObjectSpec&) = default;
};

/// A named builtin with free-form arguments.
struct BuiltinSpec {
  std::string name;
  json args = json::object();
  friend bool operator==(const BuiltinSpec&, const BuiltinSpec&) = default;
};

struct KernelSpec {
  BuiltinSpec builtin;
  std::vector<std::string> from, to;
  std::string color;  // morphism color atom; empty means the kernel name
  friend bool operator==(const KernelSpec&, const KernelSpec&) = default;
};

struct MorphSpec {
  std::string src, dst;
  std::vector<std::vector<std::string>> composite_of;  // pairs {g, f}: this morphism is g o f
  friend bool operator==(const MorphSpec&, const MorphSpec&) = default;
};

struct InterfaceSpec {
  std::string witness, from, to, kernel;
  friend bool operator==(const InterfaceSpec&, const InterfaceSpec&) = default;
};

struct WireSpec {
  std::string from, to, witness;
  friend bool operator==(const WireSpec&, const WireSpec&) = default;
};

struct DiagramSpec {
  std::map<std::string, std::string> vertices;  // vertex id -> kernel name
  std::vector<WireSpec> wires;
  std::vector<std::string> inputs, outputs;
  bool colored = false;
  std::string state;
  friend bool operator==(const DiagramSpec&, const DiagramSpec&) = default;
};

struct ParamDiagramSpec {
  DiagramSpec shape;
  std::map<std::string, KernelSpec> params;  // builtin holds the family
  std::vector<double> theta;
  friend bool operator==(const ParamDiagramSpec&, const ParamDiagramSpec&) = default;
};

struct ObjectiveSpec {
  std::string param_diagram;
  std::vector<std::string> reference;
  BuiltinSpec rho, f;
  friend bool operator==(const ObjectiveSpec&, const ObjectiveSpec&) = default;
};

struct IndexCategorySpec {
  std::vector<std::string> objects;
  std::map<std::string, MorphSpec> morphisms;
  friend bool operator==(const IndexCategorySpec&, const IndexCategorySpec&) = default;
};

struct StateSpec {
  std::vector<std::string> objects, kernels;
  std::size_t param_dim = 0;
  friend bool operator==(const StateSpec&, const StateSpec&) = default;
};

struct StatePushSpec {
  bool inclusion = false;
  std::map<std::string, std::string> objects, kernels;
  friend bool operator==(const StatePushSpec&, const StatePushSpec&) = default;
};

struct ProjectSpec {
  std::map<std::string, ObjectSpec> spaces;
  std::vector<std::string> colors;
  std::map<std::string, MorphSpec> k_morphisms;
  std::vector<InterfaceSpec> interfaces;
  std::map<std::string, KernelSpec> kernels;
  std::map<std::string, DiagramSpec> diagrams;
  std::map<std::string, ParamDiagramSpec> param_diagrams;
  std::map<std::string, ObjectiveSpec> objectives;
  std::optional<IndexCategorySpec> index_category;
  std::map<std::string, StateSpec> states;
  std::map<std::string, StatePushSpec> state_pushforwards;
  std::map<std::string, BuiltinSpec> param_pushforwards;
  friend bool operator==(const ProjectSpec&, const ProjectSpec&) = default;
};

// ---------------------------------------------------------------------------
// JSON <-> spec

namespace detail {

inline Error bad(const std::string& where, const std::string& what) { return Error(Errc::parse, where + ": " + what); }

inline const json& require(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw bad(where, std::string("missing '") + key + "'");
  return j.at(key);
}

inline void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw bad(where, "expected an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw bad(where, "unknown key '" + k + "'");
  }
}

inline std::string get_string(const json& j, const std::string& where) {
  if (!j.is_string()) throw bad(where, "expected a string");
  return j.get<std::string>();
}

inline std::vector<std::string> get_strings(const json& j, const std::string& where) {
  if (!j.is_array()) throw bad(where, "expected an array of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(get_string(j[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

inline std::size_t get_size(const json& j, const std::string& where) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) throw bad(where, "expected a nonnegative integer");
  return j.get<std::size_t>();
}

inline std::vector<double> get_doubles(const json& j, const std::string& where) {
  if (!j.is_array()) throw bad(where, "expected an array of numbers");
  std::vector<double> out;
  for (const auto& v : j) {
    if (!v.is_number()) throw bad(where, "expected an array of numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

inline std::map<std::string, std::string> get_string_map(const json& j, const std::string& where) {
  if (!j.is_object()) throw bad(where, "expected an object of strings");
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : j.items()) out[k] = get_string(v, where + "." + k);
  return out;
}

inline BuiltinSpec builtin_from(const json& j, const char* key, const std::string& where,
                                std::initializer_list<const char*> reserved = {}) {
  if (!j.is_object()) throw bad(where, "expected an object");
  BuiltinSpec b;
  b.name = get_string(require(j, key, where), where + "." + key);
  for (const auto& [k, v] : j.items()) {
    bool skip = k == key;
    for (const char* r : reserved) skip = skip || k == r;
    if (!skip) b.args[k] = v;
  }
  return b;
}

inline json builtin_to(const BuiltinSpec& b, const char* key) {
  json j = b.args;
  j[key] = b.name;
  return j;
}

inline ObjectSpec object_from(const json& j, const std::string& where) {
  only_keys(j, {"finite", "real", "color"}, where);
  ObjectSpec o;
  if (j.contains("finite") == j.contains("real")) throw bad(where, "give exactly one of 'finite' or 'real'");
  if (j.contains("finite")) {
    o.kind = "finite";
    const json& f = j.at("finite");
    if (f.is_array()) {
      o.labels = get_strings(f, where + ".finite");
      o.size = o.labels.size();
    } else {
      o.size = get_size(f, where + ".finite");
    }
    if (o.size == 0) throw bad(where, "finite space needs at least one point");
  } else {
    o.kind = "real";
    o.size = get_size(j.at("real"), where + ".real");
  }
  if (j.contains("color")) o.color = get_string(j.at("color"), where + ".color");
  return o;
}

inline json object_to(const ObjectSpec& o) {
  json j;
  if (o.kind == "finite") {
    if (o.labels.empty())
      j["finite"] = o.size;
    else
      j["finite"] = o.labels;
  } else {
    j["real"] = o.size;
  }
  j["color"] = o.color;
  return j;
}

inline KernelSpec kernel_from(const json& j, const char* key, const std::string& where) {
  KernelSpec k;
  k.builtin = builtin_from(j, key, where, {"from", "to", "color"});
  k.from = get_strings(require(j, "from", where), where + ".from");
  k.to = get_strings(require(j, "to", where), where + ".to");
  if (j.contains("color")) k.color = get_string(j.at("color"), where + ".color");
  return k;
}

inline json kernel_to(const KernelSpec& k, const char* key) {
  json j = builtin_to(k.builtin, key);
  j["from"] = k.from;
  j["to"] = k.to;
  if (!k.color.empty()) j["color"] = k.color;
  return j;
}

inline MorphSpec morph_from(const json& j, const std::string& where) {
  only_keys(j, {"src", "dst", "composite_of"}, where);
  MorphSpec m;
  m.src = get_string(require(j, "src", where), where + ".src");
  m.dst = get_string(require(j, "dst", where), where + ".dst");
  if (j.contains("composite_of")) {
    // One pair [g, f], or a list of pairs when several factorizations exist.
    const json& c = j.at("composite_of");
    const std::string w = where + ".composite_of";
    if (c.is_array() && !c.empty() && c.front().is_string())
      m.composite_of.push_back(get_strings(c, w));
    else if (c.is_array())
      for (std::size_t i = 0; i < c.size(); ++i) m.composite_of.push_back(get_strings(c[i], w + "[" + std::to_string(i) + "]"));
    else
      throw bad(w, "expected [g, f] or a list of such pairs");
    for (const auto& pr : m.composite_of)
      if (pr.size() != 2) throw bad(w, "composite_of takes [g, f] for g o f");
    if (m.composite_of.empty()) throw bad(w, "empty list");
  }
  return m;
}

inline json morph_to(const MorphSpec& m) {
  json j{{"src", m.src}, {"dst", m.dst}};
  if (!m.composite_of.empty()) j["composite_of"] = m.composite_of;
  return j;
}

inline void diagram_fields_from(const json& j, DiagramSpec& d, const std::string& where) {
  if (j.contains("vertices")) d.vertices = get_string_map(j.at("vertices"), where + ".vertices");
  if (j.contains("wires")) {
    const json& ws = j.at("wires");
    if (!ws.is_array()) throw bad(where + ".wires", "expected an array");
    for (std::size_t i = 0; i < ws.size(); ++i) {
      const std::string w = where + ".wires[" + std::to_string(i) + "]";
      only_keys(ws[i], {"from", "to", "witness"}, w);
      WireSpec s;
      s.from = get_string(require(ws[i], "from", w), w + ".from");
      s.to = get_string(require(ws[i], "to", w), w + ".to");
      if (ws[i].contains("witness")) s.witness = get_string(ws[i].at("witness"), w + ".witness");
      d.wires.push_back(s);
    }
  }
  d.inputs = get_strings(require(j, "inputs", where), where + ".inputs");
  d.outputs = get_strings(require(j, "outputs", where), where + ".outputs");
  if (j.contains("colored")) {
    if (!j.at("colored").is_boolean()) throw bad(where + ".colored", "expected a boolean");
    d.colored = j.at("colored").get<bool>();
  }
  if (j.contains("state")) d.state = get_string(j.at("state"), where + ".state");
}

inline void diagram_fields_to(const DiagramSpec& d, json& j) {
  j["vertices"] = d.vertices;
  json ws = json::array();
  for (const auto& w : d.wires) {
    json e{{"from", w.from}, {"to", w.to}};
    if (!w.witness.empty()) e["witness"] = w.witness;
    ws.push_back(e);
  }
  j["wires"] = ws;
  j["inputs"] = d.inputs;
  j["outputs"] = d.outputs;
  j["colored"] = d.colored;
  if (!d.state.empty()) j["state"] = d.state;
}

template <class T, class F>
std::map<std::string, T> section_map(const json& root, const char* key, F&& parse) {
  std::map<std::string, T> out;
  if (!root.contains(key)) return out;
  const json& s = root.at(key);
  if (!s.is_object()) throw bad(key, "expected an object keyed by name");
  for (const auto& [name, v] : s.items()) out.emplace(name, parse(v, std::string(key) + "." + name));
  return out;
}

}  // namespace detail

inline ProjectSpec spec_from_json(const json& root) {
  using namespace detail;
  only_keys(root,
            {"spaces", "colors", "k_morphisms", "interfaces", "kernels", "diagrams", "param_diagrams", "objectives",
             "index_category", "states", "state_pushforwards", "param_pushforwards"},
            "project");
  ProjectSpec p;
  p.spaces = section_map<ObjectSpec>(root, "spaces", object_from);
  if (root.contains("colors")) p.colors = get_strings(root.at("colors"), "colors");
  p.k_morphisms = section_map<MorphSpec>(root, "k_morphisms", morph_from);
  if (root.contains("interfaces")) {
    const json& is = root.at("interfaces");
    if (!is.is_array()) throw bad("interfaces", "expected an array");
    for (std::size_t i = 0; i < is.size(); ++i) {
      const std::string w = "interfaces[" + std::to_string(i) + "]";
      only_keys(is[i], {"witness", "from", "to", "kernel"}, w);
      p.interfaces.push_back({get_string(require(is[i], "witness", w), w + ".witness"), get_string(require(is[i], "from", w), w + ".from"),
                              get_string(require(is[i], "to", w), w + ".to"), get_string(require(is[i], "kernel", w), w + ".kernel")});
      const InterfaceSpec& cur = p.interfaces.back();
      for (std::size_t e = 0; e + 1 < p.interfaces.size(); ++e)
        if (p.interfaces[e].witness == cur.witness && p.interfaces[e].from == cur.from && p.interfaces[e].to == cur.to)
          throw bad(w, "duplicate interface for witness '" + cur.witness + "' (" + cur.from + " -> " + cur.to + ")");
    }
  }
  p.kernels = section_map<KernelSpec>(root, "kernels", [](const json& j, const std::string& w) { return kernel_from(j, "builtin", w); });
  p.diagrams = section_map<DiagramSpec>(root, "diagrams", [](const json& j, const std::string& w) {
    only_keys(j, {"vertices", "wires", "inputs", "outputs", "colored", "state"}, w);
    DiagramSpec d;
    diagram_fields_from(j, d, w);
    return d;
  });
  p.param_diagrams = section_map<ParamDiagramSpec>(root, "param_diagrams", [](const json& j, const std::string& w) {
    only_keys(j, {"vertices", "wires", "inputs", "outputs", "colored", "state", "params", "theta"}, w);
    ParamDiagramSpec d;
    diagram_fields_from(j, d.shape, w);
    d.params = section_map<KernelSpec>(j, "params", [&](const json& v, const std::string& ww) { return kernel_from(v, "family", w + "." + ww); });
    if (j.contains("theta")) d.theta = get_doubles(j.at("theta"), w + ".theta");
    return d;
  });
  p.objectives = section_map<ObjectiveSpec>(root, "objectives", [](const json& j, const std::string& w) {
    only_keys(j, {"param_diagram", "reference", "rho", "f"}, w);
    ObjectiveSpec o;
    o.param_diagram = get_string(require(j, "param_diagram", w), w + ".param_diagram");
    if (j.contains("reference")) o.reference = get_strings(j.at("reference"), w + ".reference");
    o.rho = builtin_from(require(j, "rho", w), "builtin", w + ".rho");
    o.f = builtin_from(require(j, "f", w), "builtin", w + ".f");
    return o;
  });
  if (root.contains("index_category")) {
    const json& ic = root.at("index_category");
    only_keys(ic, {"objects", "morphisms"}, "index_category");
    IndexCategorySpec s;
    s.objects = get_strings(require(ic, "objects", "index_category"), "index_category.objects");
    s.morphisms = section_map<MorphSpec>(ic, "morphisms", morph_from);
    p.index_category = s;
  }
  p.states = section_map<StateSpec>(root, "states", [](const json& j, const std::string& w) {
    only_keys(j, {"objects", "kernels", "param_dim"}, w);
    StateSpec s;
    if (j.contains("objects")) s.objects = get_strings(j.at("objects"), w + ".objects");
    if (j.contains("kernels")) s.kernels = get_strings(j.at("kernels"), w + ".kernels");
    if (j.contains("param_dim")) s.param_dim = get_size(j.at("param_dim"), w + ".param_dim");
    return s;
  });
  p.state_pushforwards = section_map<StatePushSpec>(root, "state_pushforwards", [](const json& j, const std::string& w) {
    only_keys(j, {"inclusion", "objects", "kernels"}, w);
    StatePushSpec s;
    if (j.contains("inclusion")) {
      if (!j.at("inclusion").is_boolean()) throw bad(w + ".inclusion", "expected a boolean");
      s.inclusion = j.at("inclusion").get<bool>();
    }
    if (j.contains("objects")) s.objects = get_string_map(j.at("objects"), w + ".objects");
    if (j.contains("kernels")) s.kernels = get_string_map(j.at("kernels"), w + ".kernels");
    return s;
  });
  p.param_pushforwards = section_map<BuiltinSpec>(root, "param_pushforwards",
                                                  [](const json& j, const std::string& w) { return builtin_from(j, "builtin", w); });
  return p;
}

inline json spec_to_json(const ProjectSpec& p) {
  using namespace detail;
  json root = json::object();
  if (!p.spaces.empty())
    for (const auto& [n, o] : p.spaces) root["spaces"][n] = object_to(o);
  if (!p.colors.empty()) root["colors"] = p.colors;
  for (const auto& [n, m] : p.k_morphisms) root["k_morphisms"][n] = morph_to(m);
  if (!p.interfaces.empty()) {
    root["interfaces"] = json::array();
    for (const auto& i : p.interfaces)
      root["interfaces"].push_back({{"witness", i.witness}, {"from", i.from}, {"to", i.to}, {"kernel", i.kernel}});
  }
  for (const auto& [n, k] : p.kernels) root["kernels"][n] = kernel_to(k, "builtin");
  for (const auto& [n, d] : p.diagrams) diagram_fields_to(d, root["diagrams"][n]);
  for (const auto& [n, d] : p.param_diagrams) {
    json& j = root["param_diagrams"][n];
    diagram_fields_to(d.shape, j);
    j["params"] = json::object();
    for (const auto& [v, k] : d.params) j["params"][v] = kernel_to(k, "family");
    if (!d.theta.empty()) j["theta"] = d.theta;
  }
  for (const auto& [n, o] : p.objectives) {
    json& j = root["objectives"][n];
    j["param_diagram"] = o.param_diagram;
    j["reference"] = o.reference;
    j["rho"] = builtin_to(o.rho, "builtin");
    j["f"] = builtin_to(o.f, "builtin");
  }
  if (p.index_category) {
    json& j = root["index_category"];
    j["objects"] = p.index_category->objects;
    j["morphisms"] = json::object();
    for (const auto& [n, m] : p.index_category->morphisms) j["morphisms"][n] = morph_to(m);
  }
  for (const auto& [n, s] : p.states)
    root["states"][n] = {{"objects", s.objects}, {"kernels", s.kernels}, {"param_dim", s.param_dim}};
  for (const auto& [n, s] : p.state_pushforwards)
    root["state_pushforwards"][n] = {{"inclusion", s.inclusion}, {"objects", s.objects}, {"kernels", s.kernels}};
  for (const auto& [n, b] : p.param_pushforwards) root["param_pushforwards"][n] = builtin_to(b, "builtin");
  return root;
}

/// Canonical text: sorted keys, two-space indent, trailing newline.
inline std::string canonical_text(const ProjectSpec& p) { return spec_to_json(p).dump(2) + "\n"; }

/// Parses project text; syntax errors carry the line and column.
inline ProjectSpec parse_project_text(const std::string& text, const std::string& origin = "<input>") {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw Error(Errc::parse, origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
  }
  try {
    return spec_from_json(root);
  } catch (const Error& e) {
    throw Error(Errc::parse, origin + ": " + std::string(e.what()));
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::invalid_argument, "cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------------------
// Values: JSON form and command-line literals

inline Value slot_value_from_json(const json& j, const Object& o, const std::string& where) {
  const Space& s = o.space;
  if (s.is_finite()) {
    if (j.is_string()) {
      const auto& ls = s.labels();
      auto it = std::find(ls.begin(), ls.end(), j.get<std::string>());
      if (it == ls.end()) throw detail::bad(where, "'" + j.get<std::string>() + "' is not a label of " + o.name);
      return Value::index(static_cast<std::size_t>(it - ls.begin()));
    }
    if (j.is_number_unsigned() || (j.is_number_integer() && j.get<long long>() >= 0)) {
      const auto i = j.get<std::size_t>();
      if (i >= s.size()) throw detail::bad(where, "index out of range for " + o.name);
      return Value::index(i);
    }
    throw detail::bad(where, "expected a label of " + o.name);
  }
  if (s.is_realvec()) {
    if (j.is_number() && s.dim() == 1) return Value::real({j.get<double>()});
    const auto v = detail::get_doubles(j, where);
    if (v.size() != s.dim()) throw detail::bad(where, o.name + " has dimension " + std::to_string(s.dim()));
    return Value::real(v);
  }
  throw detail::bad(where, "product-valued objects are not supported in literals");
}

inline Value value_from_json(const json& j, const Profile& p, const std::string& where) {
  if (!j.is_array() || j.size() != p.size())
    throw detail::bad(where, "expected an array of " + std::to_string(p.size()) + " slot values");
  std::vector<Value> items;
  for (std::size_t i = 0; i < p.size(); ++i) items.push_back(slot_value_from_json(j[i], p[i], where + "[" + std::to_string(i) + "]"));
  return Value::tuple(std::move(items));
}

inline json value_to_json(const Value& v, const Profile& p) {
  json j = json::array();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Space& s = p[i].space;
    if (s.is_finite())
      j.push_back(s.labels()[v[i].index()]);
    else
      j.push_back(v[i].coords());
  }
  return j;
}

/// Compact literal: slots separated by commas, finite slots by label (or
/// index), real slots as bracketed numbers (a bare number for dimension 1).
/// Optional surrounding parentheses. "()" is the empty tuple.
inline Value parse_literal(const std::string& text, const Profile& p) {
  std::string t = text;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
  };
  t = trim(t);
  if (t.size() >= 2 && t.front() == '(' && t.back() == ')') t = trim(t.substr(1, t.size() - 2));
  std::vector<std::string> items;
  if (!t.empty()) {
    int depth = 0;
    std::string cur;
    for (char ch : t) {
      if (ch == '[') ++depth;
      if (ch == ']') --depth;
      if (ch == ',' && depth == 0) {
        items.push_back(trim(cur));
        cur.clear();
      } else {
        cur += ch;
      }
    }
    items.push_back(trim(cur));
  }
  if (items.size() != p.size())
    throw Error(Errc::invalid_argument, "literal '" + text + "' has " + std::to_string(items.size()) + " slots, expected " +
                                            std::to_string(p.size()) + " " + profile_to_string(p));
  json j = json::array();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string& s = items[i];
    if (p[i].space.is_finite()) {
      const auto& ls = p[i].space.labels();
      if (std::find(ls.begin(), ls.end(), s) != ls.end() || s.empty() || !std::isdigit(static_cast<unsigned char>(s[0])))
        j.push_back(s);
      else
        j.push_back(std::stoull(s));
    } else {
      try {
        j.push_back(json::parse(s));
      } catch (const json::parse_error&) {
        throw Error(Errc::invalid_argument, "cannot read '" + s + "' as a real value");
      }
    }
  }
  try {
    return value_from_json(j, p, "literal");
  } catch (const Error& e) {
    throw Error(Errc::invalid_argument, e.what());
  }
}

// ---------------------------------------------------------------------------
// Builtins

namespace detail {

inline double arg_double(const BuiltinSpec& b, const char* key, const std::string& where, std::optional<double> fallback = {}) {
  if (!b.args.contains(key)) {
    if (fallback) return *fallback;
    throw bad(where, b.name + " needs '" + key + "'");
  }
  if (!b.args.at(key).is_number()) throw bad(where + "." + key, "expected a number");
  return b.args.at(key).get<double>();
}

inline Vector arg_vector(const BuiltinSpec& b, const char* key, const std::string& where, std::optional<Vector> fallback = {}) {
  if (!b.args.contains(key)) {
    if (fallback) return *fallback;
    throw bad(where, b.name + " needs '" + key + "'");
  }
  return to_eigen(get_doubles(b.args.at(key), where + "." + key));
}

inline Matrix arg_matrix(const BuiltinSpec& b, const char* key, const std::string& where) {
  const json& j = require(b.args, key, where);
  if (!j.is_array()) throw bad(where + "." + key, "expected an array of rows");
  std::vector<std::vector<double>> rows;
  for (const auto& r : j) rows.push_back(get_doubles(r, where + "." + key));
  const std::size_t cols = rows.empty() ? 0 : rows.front().size();
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) throw bad(where + "." + key, "ragged matrix");
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return m;
}

inline std::vector<std::vector<double>> arg_rows(const BuiltinSpec& b, const char* key, const std::string& where) {
  const json& j = require(b.args, key, where);
  if (!j.is_array()) throw bad(where + "." + key, "expected an array of rows");
  std::vector<std::vector<double>> rows;
  for (const auto& r : j) rows.push_back(get_doubles(r, where + "." + key));
  return rows;
}

inline void allow_args(const BuiltinSpec& b, std::initializer_list<const char*> keys, const std::string& where) {
  only_keys(b.args, keys, where + " (" + b.name + ")");
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline void require_real(const Profile& p, const std::string& where) {
  if (!profile_space(p).purely_real()) throw bad(where, "needs real objects only");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Runtime project

struct Project {
  ProjectSpec spec;
  std::map<std::string, Object> objects;
  std::shared_ptr<ColorSystem> colors;
  std::shared_ptr<InterfaceSystem> interfaces;
  std::map<std::string, ColoredKernel> kernels;
  std::map<std::string, ColoredDiagram> diagrams;
  std::map<std::string, ParamDiagram> param_diagrams;
  std::map<std::string, Objective> objectives;
  std::optional<CCMP> ccmp;
  std::map<std::string, std::vector<KscFixture>> state_composites;

  const Object& object(const std::string& name) const {
    auto it = objects.find(name);
    if (it == objects.end()) throw Error(Errc::unknown_name, "object '" + name + "'");
    return it->second;
  }

  Profile profile(const std::vector<std::string>& names) const {
    Profile p;
    for (const auto& n : names) p.push_back(object(n));
    return p;
  }

  const DiagramSpec& diagram_spec(const std::string& name) const {
    auto it = spec.diagrams.find(name);
    if (it == spec.diagrams.end()) throw Error(Errc::unknown_name, "diagram '" + name + "'");
    return it->second;
  }

  const ColoredDiagram& diagram(const std::string& name) const {
    diagram_spec(name);
    return diagrams.at(name);
  }

  const ParamDiagram& param_diagram(const std::string& name) const {
    auto it = param_diagrams.find(name);
    if (it == param_diagrams.end()) throw Error(Errc::unknown_name, "parameterized diagram '" + name + "'");
    return it->second;
  }

  const Objective& objective(const std::string& name) const {
    auto it = objectives.find(name);
    if (it == objectives.end()) throw Error(Errc::unknown_name, "objective '" + name + "'");
    return it->second;
  }

  /// Interfaces governing a diagram in `state` (the global registry when empty).
  const InterfaceSystem& interfaces_for(const std::string& state) const {
    if (state.empty()) return *interfaces;
    if (!ccmp) throw Error(Errc::unknown_name, "state '" + state + "' without an index category");
    return *ccmp->state(state).interfaces;
  }

  ValidationReport validate_diagram(const std::string& name) const {
    const DiagramSpec& s = diagram_spec(name);
    const ColoredDiagram& cd = diagrams.at(name);
    return s.colored ? validate_colored(cd, interfaces_for(s.state)) : validate(cd.shape);
  }

  /// The uncolored diagram that is evaluated: interface kernels inserted for colored diagrams.
  Diagram evaluable(const std::string& name) const {
    const DiagramSpec& s = diagram_spec(name);
    const ColoredDiagram& cd = diagrams.at(name);
    if (s.colored) return interface_expand(cd, interfaces_for(s.state));
    const ValidationReport r = validate(cd.shape);
    if (!r.ok()) throw Error(Errc::invalid_argument, "diagram '" + name + "' is invalid:\n" + r.to_string());
    return cd.shape;
  }
};

namespace detail {

inline Port parse_port(const std::string& s, const std::string& where) {
  const auto dot = s.rfind('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == s.size()) throw bad(where, "port '" + s + "' is not vertex.slot");
  const std::string slot = s.substr(dot + 1);
  if (!std::all_of(slot.begin(), slot.end(), [](unsigned char c) { return std::isdigit(c); }))
    throw bad(where, "port '" + s + "' is not vertex.slot");
  return {s.substr(0, dot), std::stoul(slot)};
}

class Builder {
 public:
  explicit Builder(Project& p) : p_(p) {}

  void run() {
    build_objects();
    build_colors();
    build_interfaces();  // composite kernels with a witness need the interface kernels
    for (const auto& [name, ks] : p_.spec.kernels) kernel(name);
    for (const auto& [name, ds] : p_.spec.diagrams) p_.diagrams.emplace(name, diagram(ds, "diagrams." + name));
    if (p_.spec.index_category) build_ccmp();
    else if (!p_.spec.states.empty() || !p_.spec.state_pushforwards.empty() || !p_.spec.param_pushforwards.empty())
      throw bad("states", "states and pushforwards need an index_category");
    for (const auto& [name, ds] : p_.spec.diagrams)
      if (!ds.state.empty() && !p_.ccmp) throw bad("diagrams." + name, "state '" + ds.state + "' without an index category");
    for (const auto& [name, ps] : p_.spec.param_diagrams) p_.param_diagrams.emplace(name, param_diagram(ps, "param_diagrams." + name));
    for (const auto& [name, os] : p_.spec.objectives) p_.objectives.emplace(name, objective(os, "objectives." + name));
  }

 private:
  Project& p_;
  std::set<std::string> building_;

  Profile profile(const std::vector<std::string>& names, const std::string& where) {
    Profile out;
    for (std::size_t i = 0; i < names.size(); ++i) {
      auto it = p_.objects.find(names[i]);
      if (it == p_.objects.end()) throw Error(Errc::unknown_name, where + "[" + std::to_string(i) + "]: unknown object '" + names[i] + "'");
      out.push_back(it->second);
    }
    return out;
  }

  void build_objects() {
    for (const auto& [name, o] : p_.spec.spaces) {
      Space s = o.kind == "real" ? Space::realvec(o.size) : o.labels.empty() ? Space::finite(o.size) : Space::finite(o.labels);
      p_.objects.emplace(name, Object{name, s, o.color});
    }
  }

  void build_colors() {
    p_.colors = std::make_shared<ColorSystem>();
    for (const auto& c : p_.spec.colors) p_.colors->add_color(c);
    for (const auto& [name, o] : p_.objects)
      if (!p_.colors->has_color(o.color)) {
        if (o.color != "plain") throw Error(Errc::unknown_name, "spaces." + name + ": undeclared color '" + o.color + "'");
        p_.colors->add_color("plain");
      }
    for (const auto& [id, m] : p_.spec.k_morphisms) {
      if (!p_.colors->has_color(m.src) || !p_.colors->has_color(m.dst))
        throw Error(Errc::unknown_name, "k_morphisms." + id + ": undeclared color");
      p_.colors->add_morphism(id, m.src, m.dst);
    }
    for (const auto& [id, m] : p_.spec.k_morphisms)
      for (const auto& pr : m.composite_of) p_.colors->set_composite(pr[0], pr[1], id);
    p_.interfaces = std::make_shared<InterfaceSystem>(p_.colors);
    for (const auto& [name, o] : p_.objects) p_.interfaces->add_object(o);
  }

  void build_interfaces() {
    for (std::size_t i = 0; i < p_.spec.interfaces.size(); ++i) {
      const auto& s = p_.spec.interfaces[i];
      const std::string where = "interfaces[" + std::to_string(i) + "]";
      if (!p_.spec.k_morphisms.count(s.witness)) throw Error(Errc::unknown_name, where + ": unknown witness '" + s.witness + "'");
      try {
        p_.interfaces->add_interface(s.witness, s.from, s.to, kernel(s.kernel).kernel);
      } catch (const Error& e) {
        throw Error(e.code(), where + ": " + e.what());
      }
    }
  }

  const ColoredKernel& kernel(const std::string& name) {
    auto it = p_.kernels.find(name);
    if (it != p_.kernels.end()) return it->second;
    auto st = p_.spec.kernels.find(name);
    if (st == p_.spec.kernels.end()) throw Error(Errc::unknown_name, "unknown kernel '" + name + "'");
    if (!building_.insert(name).second) throw bad("kernels." + name, "refers to itself");
    ColoredKernel ck = build_kernel(name, st->second, "kernels." + name);
    building_.erase(name);
    return p_.kernels.emplace(name, std::move(ck)).first->second;
  }

  ColoredKernel build_kernel(const std::string& name, const KernelSpec& ks, const std::string& where) {
    const Profile src = profile(ks.from, where + ".from");
    const Profile tgt = profile(ks.to, where + ".to");
    const BuiltinSpec& b = ks.builtin;
    const std::string sig = b.name + b.args.dump();
    auto atom = [&](const Kernel& k) {
      return ColorTerm::atom(ks.color.empty() ? name : ks.color, profile_colors(k.source()), profile_colors(k.target()));
    };
    auto finish = [&](Kernel k) {
      k = k.named(name);
      ColorTerm c = atom(k);
      return ColoredKernel{std::move(k), std::move(c)};
    };
    const Space ss = profile_space(src), ts = profile_space(tgt);
    if (b.name == "table") {
      allow_args(b, {"rows"}, where);
      return finish(finite_kernel(src, tgt, arg_rows(b, "rows", where)));
    }
    if (b.name == "softmax-table") {
      allow_args(b, {"logits"}, where);
      std::vector<FiniteDist> rows;
      for (const auto& r : arg_rows(b, "logits", where)) rows.push_back(softmax(r.data(), r.size()));
      return finish(finite_kernel(src, tgt, rows));
    }
    if (b.name == "identity") {
      allow_args(b, {}, where);
      return finish(identity_kernel(src).with_profiles(src, tgt));
    }
    if (b.name == "affine") {
      allow_args(b, {"weight", "bias"}, where);
      require_real(src, where);
      require_real(tgt, where);
      const Matrix w = arg_matrix(b, "weight", where);
      const Vector c = arg_vector(b, "bias", where, Vector::Zero(static_cast<Eigen::Index>(ts.real_dim())));
      if (w.rows() != static_cast<Eigen::Index>(ts.real_dim()) || w.cols() != static_cast<Eigen::Index>(ss.real_dim()) || c.size() != w.rows())
        throw bad(where, "affine weight/bias shapes do not match the profiles");
      return finish(dirac_of_map([w, c, ts](const Value& x) { return unflatten_real(ts, to_std(w * to_eigen(flatten_real(x)) + c)); }, src, tgt,
                                 [w](const Value&) { return w; }, sig));
    }
    if (b.name == "gaussian") {
      allow_args(b, {"weight", "bias", "variance"}, where);
      return finish(gaussian_kernel(src, tgt, arg_matrix(b, "weight", where),
                                    arg_vector(b, "bias", where, Vector::Zero(static_cast<Eigen::Index>(ts.real_dim()))),
                                    arg_vector(b, "variance", where)));
    }
    if (b.name == "gaussian-noise") {
      allow_args(b, {"mean", "variance"}, where);
      require_real(tgt, where);
      const auto n = static_cast<Eigen::Index>(ts.real_dim());
      const Vector mean = arg_vector(b, "mean", where, Vector::Zero(n));
      const Vector var = arg_vector(b, "variance", where, Vector::Ones(n));
      if (mean.size() != n || var.size() != n || (var.array() <= 0.0).any()) throw bad(where, "gaussian-noise mean/variance");
      SamplerDensity s;
      s.sample = [mean, var, ts](Rng& rng, const Value&) {
        Vector y = mean;
        for (Eigen::Index r = 0; r < y.size(); ++r) y(r) += std::sqrt(var(r)) * standard_normal(rng);
        return unflatten_real(ts, to_std(y));
      };
      s.log_density = [mean, var](const Value& y, const Value&) {
        const Vector d = to_eigen(flatten_real(y)) - mean;
        return -0.5 * (d.array().square() / var.array()).sum() - 0.5 * (var.array() * 2.0 * M_PI).log().sum();
      };
      return finish(Kernel(src, tgt, s, sig));
    }
    if (b.name == "logistic-interface") {
      allow_args(b, {"slope", "offset"}, where);
      if (ss.real_dim() != 1 || !ss.purely_real() || tgt.size() != 1 || !ts.is_product() || !tgt[0].space.is_finite() ||
          tgt[0].space.size() != 2)
        throw bad(where, "logistic-interface maps one real coordinate to a two-point space");
      const double a = arg_double(b, "slope", where, 1.0), c = arg_double(b, "offset", where, 0.0);
      SamplerDensity s;
      s.reference = Reference::counting;
      s.sample = [a, c](Rng& rng, const Value& x) {
        return Value::tuple({Value::index(uniform01(rng) < sigmoid(a * flatten_real(x)[0] + c) ? 0 : 1)});
      };
      s.log_density = [a, c](const Value& y, const Value& x) {
        const double p = sigmoid(a * flatten_real(x)[0] + c);
        return std::log(y[0].index() == 0 ? p : 1.0 - p);
      };
      return finish(Kernel(src, tgt, s, sig));
    }
    if (b.name == "label-map") {
      allow_args(b, {"map"}, where);
      if (src.size() != 1 || tgt.size() != 1 || !src[0].space.is_finite() || !tgt[0].space.is_finite())
        throw bad(where, "label-map needs one finite input and one finite output");
      const auto m = get_string_map(require(b.args, "map", where), where + ".map");
      std::vector<std::size_t> image;
      for (const auto& l : src[0].space.labels()) {
        auto it = m.find(l);
        if (it == m.end()) throw bad(where, "label-map has no image for '" + l + "'");
        const auto& tl = tgt[0].space.labels();
        auto jt = std::find(tl.begin(), tl.end(), it->second);
        if (jt == tl.end()) throw bad(where, "'" + it->second + "' is not a label of " + tgt[0].name);
        image.push_back(static_cast<std::size_t>(jt - tl.begin()));
      }
      std::vector<FiniteDist> rows;
      for (std::size_t i : image) {
        FiniteDist r(tgt[0].space.size(), 0.0);
        r[i] = 1.0;
        rows.push_back(r);
      }
      return finish(finite_kernel(src, tgt, rows));
    }
    if (b.name == "ksc") {
      allow_args(b, {"k", "l", "i", "j", "witness"}, where);
      const ColoredKernel& k = kernel(get_string(require(b.args, "k", where), where + ".k"));
      const ColoredKernel& l = kernel(get_string(require(b.args, "l", where), where + ".l"));
      const std::size_t i = get_size(require(b.args, "i", where), where + ".i");
      const std::size_t j = get_size(require(b.args, "j", where), where + ".j");
      const std::string f = b.args.contains("witness") ? get_string(b.args.at("witness"), where + ".witness") : "";
      Kernel h = f.empty() ? ksc_kernel(k.kernel, l.kernel, i, j) : cksc_kernel(k.kernel, l.kernel, i, j, f, *p_.interfaces);
      ColorTerm c = f.empty() ? ColorTerm::compose(l.color, k.color, i, j) : cksc_color(k.color, l.color, i, j, p_.colors->iota(f));
      if (!same_spaces(h.source(), src) || !same_spaces(h.target(), tgt))
        throw bad(where, "declared profiles differ from the composite's " + profile_to_string(h.source()) + " -> " +
                             profile_to_string(h.target()));
      if (!ks.color.empty()) throw bad(where, "composite kernels take their color from the factors");
      return {h.with_profiles(src, tgt).named(name), std::move(c)};
    }
    throw bad(where, "unknown kernel builtin '" + b.name + "'");
  }

  ColoredDiagram diagram(const DiagramSpec& ds, const std::string& where) {
    ColoredDiagram cd;
    for (const auto& [v, kname] : ds.vertices) {
      const ColoredKernel& ck = kernel(kname);
      cd.shape.add_vertex(v, ck.kernel);
      cd.colors.emplace(v, ck.color);
    }
    wiring(ds, cd.shape, where);
    return cd;
  }

  static void wiring(const DiagramSpec& ds, Diagram& d, const std::string& where) {
    for (std::size_t i = 0; i < ds.wires.size(); ++i) {
      const std::string w = where + ".wires[" + std::to_string(i) + "]";
      d.wires.push_back({parse_port(ds.wires[i].from, w + ".from"), parse_port(ds.wires[i].to, w + ".to"), ds.wires[i].witness});
    }
    for (const auto& s : ds.inputs) d.inputs.push_back(parse_port(s, where + ".inputs"));
    for (const auto& s : ds.outputs) d.outputs.push_back(parse_port(s, where + ".outputs"));
  }

  ParamKernel family(const std::string& vertex, const KernelSpec& ks, const std::string& where) {
    const Profile src = profile(ks.from, where + ".from");
    const Profile tgt = profile(ks.to, where + ".to");
    const BuiltinSpec& b = ks.builtin;
    const std::string name = ks.color.empty() ? vertex : ks.color;
    if (b.name == "logit-table") {
      allow_args(b, {}, where);
      return logit_table(src, tgt, name);
    }
    if (b.name == "gaussian-affine" || b.name == "gaussian-score") {
      allow_args(b, {"sigma"}, where);
      require_real(src, where);
      require_real(tgt, where);
      const Vector sigma = arg_vector(b, "sigma", where);
      if ((sigma.array() <= 0.0).any()) throw bad(where, "sigma must be positive");
      return b.name == "gaussian-affine" ? gaussian_affine_pathwise(src, tgt, sigma, name) : gaussian_affine_score(src, tgt, sigma, name);
    }
    throw bad(where, "unknown family '" + b.name + "'");
  }

  ParamDiagram param_diagram(const ParamDiagramSpec& ps, const std::string& where) {
    ParamDiagram pd;
    for (const auto& [v, kname] : ps.shape.vertices) {
      const ColoredKernel& ck = kernel(kname);
      pd.shape.shape.add_vertex(v, ck.kernel);
      pd.shape.colors.emplace(v, ck.color);
    }
    for (const auto& [v, ks] : ps.params) {
      if (ps.shape.vertices.count(v)) throw bad(where, "vertex '" + v + "' is both fixed and parameterized");
      pd.add_param_vertex(v, family(v, ks, where + ".params." + v));
    }
    wiring(ps.shape, pd.shape.shape, where);
    if (ps.shape.colored) {
      if (!ps.shape.state.empty() && !p_.ccmp) throw bad(where, "state without an index category");
      pd.interfaces = ps.shape.state.empty() ? p_.interfaces : p_.ccmp->state(ps.shape.state).interfaces;
    }
    if (!ps.theta.empty() && ps.theta.size() != pd.theta_dim())
      throw bad(where + ".theta", "has " + std::to_string(ps.theta.size()) + " entries, the layout needs " + std::to_string(pd.theta_dim()));
    return pd;
  }

  Objective objective(const ObjectiveSpec& os, const std::string& where) {
    auto pit = p_.param_diagrams.find(os.param_diagram);
    if (pit == p_.param_diagrams.end()) throw Error(Errc::unknown_name, where + ": unknown parameterized diagram '" + os.param_diagram + "'");
    const ParamDiagram& pd = pit->second;
    const Profile in = pd.shape.shape.input_profile();
    const Profile out = pd.shape.shape.output_profile();
    Objective o;
    o.reference = profile(os.reference, where + ".reference");
    const Profile ref = o.reference;
    const Space ys = profile_space(out), rs = profile_space(ref);

    const BuiltinSpec& rho = os.rho;
    const std::string rw = where + ".rho";
    if (rho.name == "atoms") {
      allow_args(rho, {"atoms"}, rw);
      const json& as = require(rho.args, "atoms", rw);
      if (!as.is_array() || as.empty()) throw bad(rw, "atoms must be a nonempty array");
      std::vector<RhoAtom> atoms;
      double total = 0.0;
      for (std::size_t i = 0; i < as.size(); ++i) {
        const std::string aw = rw + ".atoms[" + std::to_string(i) + "]";
        only_keys(as[i], {"x", "r", "weight"}, aw);
        RhoAtom a;
        a.x = value_from_json(require(as[i], "x", aw), in, aw + ".x");
        a.r = as[i].contains("r") ? value_from_json(as[i].at("r"), ref, aw + ".r") : value_from_json(json::array(), ref, aw + ".r");
        const json& w = require(as[i], "weight", aw);
        if (!w.is_number() || w.get<double>() < 0.0) throw bad(aw + ".weight", "expected a nonnegative number");
        a.weight = w.get<double>();
        total += a.weight;
        atoms.push_back(a);
      }
      if (std::abs(total - 1.0) > kExactTol) throw bad(rw, "atom weights sum to " + std::to_string(total));
      o.rho_exact = atoms;
      o.sample_rho = Objective::sampler_from_atoms(atoms);
    } else if (rho.name == "linear-gaussian") {
      allow_args(rho, {"mean", "variance", "weight", "bias", "noise_variance"}, rw);
      const Space xs = profile_space(in);
      if (!xs.purely_real() || !rs.purely_real()) throw bad(rw, "linear-gaussian needs real input and reference profiles");
      const auto nx = static_cast<Eigen::Index>(xs.real_dim()), nr = static_cast<Eigen::Index>(rs.real_dim());
      const Vector mean = arg_vector(rho, "mean", rw, Vector::Zero(nx));
      const Vector var = arg_vector(rho, "variance", rw, Vector::Ones(nx));
      const Matrix w = rho.args.contains("weight") ? arg_matrix(rho, "weight", rw) : Matrix::Zero(nr, nx);
      const Vector c = arg_vector(rho, "bias", rw, Vector::Zero(nr));
      const Vector nv = arg_vector(rho, "noise_variance", rw, Vector::Zero(nr));
      if (mean.size() != nx || var.size() != nx || w.rows() != nr || w.cols() != nx || c.size() != nr || nv.size() != nr ||
          (var.array() < 0.0).any() || (nv.array() < 0.0).any())
        throw bad(rw, "linear-gaussian shapes do not match the profiles");
      o.sample_rho = [=](Rng& rng) {
        Vector x = mean;
        for (Eigen::Index i = 0; i < nx; ++i) x(i) += std::sqrt(var(i)) * standard_normal(rng);
        Vector r = w * x + c;
        for (Eigen::Index i = 0; i < nr; ++i) r(i) += std::sqrt(nv(i)) * standard_normal(rng);
        return std::make_pair(unflatten_real(xs, to_std(x)), unflatten_real(rs, to_std(r)));
      };
    } else {
      throw bad(rw, "unknown rho builtin '" + rho.name + "'");
    }

    const BuiltinSpec& f = os.f;
    const std::string fw = where + ".f";
    if (f.name == "squared-error") {
      allow_args(f, {}, fw);
      if (!ys.purely_real() || !rs.purely_real() || ys.real_dim() != rs.real_dim())
        throw bad(fw, "squared-error needs real outputs and a reference of the same dimension");
      o.f = [](const Value& y, const Value& r) { return (to_eigen(flatten_real(y)) - to_eigen(flatten_real(r))).squaredNorm(); };
      o.grad_output = [](const Value& y, const Value& r) { return Vector(2.0 * (to_eigen(flatten_real(y)) - to_eigen(flatten_real(r)))); };
    } else if (f.name == "table") {
      allow_args(f, {"values"}, fw);
      if (!ys.enumerable() || !rs.enumerable()) throw bad(fw, "table objectives need finite outputs and reference");
      const auto values = get_doubles(require(f.args, "values", fw), fw + ".values");
      const std::size_t nr = rs.cardinality();
      if (values.size() != ys.cardinality() * nr)
        throw bad(fw, "needs " + std::to_string(ys.cardinality() * nr) + " values (outputs x reference)");
      o.f = [values, ys, rs, nr](const Value& y, const Value& r) { return values[point_index(ys, y) * nr + point_index(rs, r)]; };
    } else if (f.name == "match") {
      allow_args(f, {}, fw);
      if (!ys.enumerable() || !(ys == rs)) throw bad(fw, "match compares finite outputs with a reference of the same space");
      o.f = [](const Value& y, const Value& r) { return y == r ? 0.0 : 1.0; };
    } else {
      throw bad(fw, "unknown objective builtin '" + f.name + "'");
    }
    return o;
  }

  ParamPushforward param_push(const BuiltinSpec& b, const std::string& where) {
    if (b.name == "matrix") {
      allow_args(b, {"matrix"}, where);
      return ParamPushforward::linear(arg_matrix(b, "matrix", where));
    }
    if (b.name == "identity") {
      allow_args(b, {"dim"}, where);
      return ParamPushforward::identity(get_size(require(b.args, "dim", where), where + ".dim"));
    }
    if (b.name == "append-features") {
      // Appends features one at a time; each may read coordinates appended before it.
      allow_args(b, {"in_dim", "features"}, where);
      const std::size_t n = get_size(require(b.args, "in_dim", where), where + ".in_dim");
      struct Feature {
        bool tanh;
        std::size_t i, j;
      };
      std::vector<Feature> fs;
      const json& js = require(b.args, "features", where);
      if (!js.is_array()) throw bad(where + ".features", "expected an array");
      for (std::size_t k = 0; k < js.size(); ++k) {
        const std::string w = where + ".features[" + std::to_string(k) + "]";
        only_keys(js[k], {"op", "i", "j"}, w);
        const std::string op = get_string(require(js[k], "op", w), w + ".op");
        if (op != "product" && op != "tanh-product") throw bad(w, "op is 'product' or 'tanh-product'");
        Feature ft{op == "tanh-product", get_size(require(js[k], "i", w), w + ".i"), get_size(require(js[k], "j", w), w + ".j")};
        if (ft.i >= n + k || ft.j >= n + k) throw bad(w, "feature reads a coordinate that does not exist yet");
        fs.push_back(ft);
      }
      const std::size_t m = n + fs.size();
      auto map = [n, m, fs](const Vector& t) {
        Vector y(static_cast<Eigen::Index>(m));
        y.head(static_cast<Eigen::Index>(n)) = t;
        for (std::size_t k = 0; k < fs.size(); ++k) {
          const double p = y(static_cast<Eigen::Index>(fs[k].i)) * y(static_cast<Eigen::Index>(fs[k].j));
          y(static_cast<Eigen::Index>(n + k)) = fs[k].tanh ? std::tanh(p) : p;
        }
        return y;
      };
      auto jac = [n, m, fs, map](const Vector& t) {
        const Vector y = map(t);
        Matrix d = Matrix::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));  // dy/dt, row by row
        d.topRows(static_cast<Eigen::Index>(n)).setIdentity();
        for (std::size_t k = 0; k < fs.size(); ++k) {
          const auto i = static_cast<Eigen::Index>(fs[k].i), j = static_cast<Eigen::Index>(fs[k].j);
          Vector row = y(j) * d.row(i).transpose() + y(i) * d.row(j).transpose();
          if (fs[k].tanh) {
            const double th = std::tanh(y(i) * y(j));
            row *= 1.0 - th * th;
          }
          d.row(static_cast<Eigen::Index>(n + k)) = row.transpose();
        }
        return d;
      };
      return {n, m, map, jac};
    }
    throw bad(where, "unknown parameter pushforward builtin '" + b.name + "'");
  }

  void build_ccmp() {
    const IndexCategorySpec& ic = *p_.spec.index_category;
    CCMP c;
    c.colors = p_.colors;
    for (const auto& o : ic.objects) c.index.add_object(o);
    for (const auto& [id, m] : ic.morphisms) {
      if (!c.index.has_object(m.src) || !c.index.has_object(m.dst))
        throw Error(Errc::unknown_name, "index_category.morphisms." + id + ": unknown index object");
      c.index.add_morphism(id, m.src, m.dst);
    }
    for (const auto& [id, m] : ic.morphisms)
      for (const auto& pr : m.composite_of) c.index.set_composite(pr[0], pr[1], id);
    for (const auto& [t, ss] : p_.spec.states) {
      const std::string where = "states." + t;
      if (!c.index.has_object(t)) throw Error(Errc::unknown_name, where + ": not an index object");
      StateCMP s;
      s.interfaces = std::make_shared<InterfaceSystem>(p_.colors);
      for (const auto& o : profile(ss.objects, where + ".objects")) s.interfaces->add_object(o);
      for (const auto& [key, kappa] : p_.interfaces->interfaces()) {
        const auto& [f, b, cc] = key;
        if (p_.colors->category().is_identity(f)) continue;
        if (s.interfaces->has_object(b) && s.interfaces->has_object(cc)) s.interfaces->add_interface(f, b, cc, kappa);
      }
      for (const auto& kn : ss.kernels) {
        const ColoredKernel& ck = kernel(kn);
        try {
          s.add_kernel(kn, ck.kernel, ck.color);
        } catch (const Error& e) {
          throw Error(e.code(), where + ": " + e.what());
        }
        const KernelSpec& ks = p_.spec.kernels.at(kn);
        if (ks.builtin.name == "ksc") {
          const json& a = ks.builtin.args;
          p_.state_composites[t].push_back({a.at("k").get<std::string>(), a.at("l").get<std::string>(), a.at("i").get<std::size_t>(),
                                            a.at("j").get<std::size_t>(), a.value("witness", std::string()), kn});
        }
      }
      s.param_dim = ss.param_dim;
      c.states.emplace(t, std::move(s));
    }
    for (const auto& [m, ps] : p_.spec.state_pushforwards) {
      const std::string where = "state_pushforwards." + m;
      if (!c.index.has_morphism(m)) throw Error(Errc::unknown_name, where + ": unknown transition");
      CMPFunctor g;
      if (ps.inclusion) g = CMPFunctor::identity(c.state(c.index.morphism(m).src));
      for (const auto& [a, b2] : ps.objects) g.object_map[a] = b2;
      for (const auto& [a, b2] : ps.kernels) g.kernel_map[a] = b2;
      c.state_push.emplace(m, std::move(g));
    }
    for (const auto& [m, b] : p_.spec.param_pushforwards) {
      const std::string where = "param_pushforwards." + m;
      if (!c.index.has_morphism(m)) throw Error(Errc::unknown_name, where + ": unknown transition");
      c.param_push.emplace(m, param_push(b, where));
    }
    for (const auto& [name, ds] : p_.spec.diagrams)
      if (!ds.state.empty()) {
        const StateCMP& s = c.state(ds.state);
        for (const auto& [v, kn] : ds.vertices)
          if (!s.kernels.count(kn))
            throw Error(Errc::unknown_name, "diagrams." + name + ": kernel '" + kn + "' is not registered in state " + ds.state);
      }
    p_.ccmp = std::move(c);
  }
};

}  // namespace detail

inline Project build_project(ProjectSpec spec) {
  Project p;
  p.spec = std::move(spec);
  detail::Builder(p).run();
  return p;
}

inline Project load_project(const std::string& path) { return build_project(parse_project_text(read_file(path), path)); }

}  // namespace polyk
