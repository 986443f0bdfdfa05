#pragma once

// Command implementations for the polyk tool. Each command writes its report to
// `out`, diagnostics to `err`, and returns the process exit code.

#include <chrono>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "polyk/project.hpp"

namespace polyk::cli {

enum Exit : int { pass = 0, failure = 1, usage = 2 };

/// Bad command-line input (unknown names, malformed literals, wrong dimensions).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::uint64_t seed = 0;
  std::size_t samples = 10000;
  std::size_t threads = 1;  // parallel Monte Carlo is opt-in
  std::string output = "table";
};

// ---------------------------------------------------------------------------
// Reports

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

/// Rows of named cells, printed as an aligned table or as JSON lines.
class Report {
 public:
  explicit Report(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  void add(std::vector<json> row) {
    if (row.size() != columns_.size()) throw std::logic_error("report row width");
    rows_.push_back(std::move(row));
  }

  void print(std::ostream& out, const std::string& mode) const {
    if (mode == "records") {
      for (const auto& r : rows_) {
        json j = json::object();
        for (std::size_t c = 0; c < columns_.size(); ++c) j[columns_[c]] = r[c];
        out << j.dump() << "\n";
      }
      return;
    }
    std::vector<std::vector<std::string>> cells;
    std::vector<std::size_t> width(columns_.size());
    for (std::size_t c = 0; c < columns_.size(); ++c) width[c] = columns_[c].size();
    for (const auto& r : rows_) {
      std::vector<std::string> line;
      for (std::size_t c = 0; c < r.size(); ++c) {
        line.push_back(cell(r[c]));
        width[c] = std::max(width[c], line.back().size());
      }
      cells.push_back(std::move(line));
    }
    auto emit = [&](const std::vector<std::string>& line) {
      std::string s;
      for (std::size_t c = 0; c < line.size(); ++c) {
        s += line[c];
        if (c + 1 < line.size()) s += std::string(width[c] - line[c].size() + 2, ' ');
      }
      out << s << "\n";
    };
    emit(columns_);
    for (const auto& l : cells) emit(l);
  }

 private:
  static std::string cell(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_float()) return fmt(v.get<double>());
    if (v.is_boolean()) return v.get<bool>() ? "yes" : "no";
    return v.dump();
  }

  std::vector<std::string> columns_;
  std::vector<std::vector<json>> rows_;
};

inline std::string value_text(const Value& v, const Profile& p) { return format_value(v, profile_space(p)); }

inline json vector_json(const Vector& v) { return json(to_std(v)); }

// ---------------------------------------------------------------------------
// Argument helpers

inline Project open_project(const std::string& file) { return load_project(file); }

inline Vector parse_theta(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error&) {
    throw UsageError("theta must be a bracketed list of numbers, got '" + text + "'");
  }
  if (!j.is_array()) throw UsageError("theta must be a bracketed list of numbers");
  std::vector<double> v;
  for (const auto& x : j) {
    if (!x.is_number()) throw UsageError("theta must be a bracketed list of numbers");
    v.push_back(x.get<double>());
  }
  return to_eigen(v);
}

/// Theta from a literal, a file, the diagram's default, or zeros, in that order.
inline Vector resolve_theta(const Project& p, const std::string& pd_name, const std::string& literal, const std::string& file) {
  const ParamDiagram& pd = p.param_diagram(pd_name);
  Vector th;
  if (!literal.empty())
    th = parse_theta(literal);
  else if (!file.empty())
    th = parse_theta(read_file(file));
  else if (!p.spec.param_diagrams.at(pd_name).theta.empty())
    th = to_eigen(p.spec.param_diagrams.at(pd_name).theta);
  else
    th = Vector::Zero(static_cast<Eigen::Index>(pd.theta_dim()));
  if (static_cast<std::size_t>(th.size()) != pd.theta_dim())
    throw UsageError("theta has " + std::to_string(th.size()) + " entries, '" + pd_name + "' needs " + std::to_string(pd.theta_dim()));
  return th;
}

/// An external input literal; malformed literals are usage errors.
inline Value input_value(const std::string& text, const Profile& p) {
  try {
    return parse_literal(text, p);
  } catch (const Error& e) {
    throw UsageError(std::string("input '") + text + "': " + e.what());
  }
}

/// The named objective, or the only one declared on the diagram.
inline std::string resolve_objective(const Project& p, const std::string& pd_name, const std::string& name) {
  p.param_diagram(pd_name);
  if (!name.empty()) {
    const Objective& o = p.objective(name);
    (void)o;
    if (p.spec.objectives.at(name).param_diagram != pd_name)
      throw UsageError("objective '" + name + "' is declared on '" + p.spec.objectives.at(name).param_diagram + "'");
    return name;
  }
  std::vector<std::string> found;
  for (const auto& [n, o] : p.spec.objectives)
    if (o.param_diagram == pd_name) found.push_back(n);
  if (found.size() != 1) throw UsageError("'" + pd_name + "' has " + std::to_string(found.size()) + " objectives; pass --objective");
  return found.front();
}

inline bool finite_problem(const ParamDiagram& pd, const Vector& theta, const Objective& obj) {
  if (!obj.rho_exact) return false;
  const Diagram d = pd.expanded(theta);
  for (const auto& [id, k] : d.vertices)
    if (!finite_convertible(k)) return false;
  return true;
}

/// Runs fn, mapping library errors to exit codes. Usage problems exit 2.
template <class F>
int guarded(std::ostream& err, F&& fn) {
  try {
    return fn();
  } catch (const UsageError& e) {
    err << "usage: " << e.what() << "\n";
    return usage;
  } catch (const Error& e) {
    if (e.code() == Errc::unknown_name || e.code() == Errc::dimension_mismatch) {
      err << "usage: " << e.what() << "\n";
      return usage;
    }
    err << "error: " << e.what() << "\n";
    return failure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return failure;
  }
}

/// Loads the project; file problems are failures rather than usage errors.
template <class F>
int with_project(const std::string& file, std::ostream& err, F&& fn) {
  Project p;
  try {
    p = open_project(file);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return failure;
  }
  return guarded(err, [&] { return fn(p); });
}

// ---------------------------------------------------------------------------
// validate

struct Check {
  std::string what;
  std::vector<std::string> problems;
};

inline std::vector<Check> validation_checks(const Project& p) {
  std::vector<Check> out;
  out.push_back({"color system", check_color_system(*p.colors)});
  for (const auto& [name, s] : p.spec.diagrams) {
    Check c{"diagram " + name, {}};
    for (const auto& v : p.validate_diagram(name).violations) c.problems.push_back(std::string(clause_name(v.clause)) + ": " + v.message);
    out.push_back(c);
  }
  for (const auto& [name, s] : p.spec.param_diagrams) {
    Check c{"parameterized diagram " + name, {}};
    const ParamDiagram& pd = p.param_diagrams.at(name);
    const ColoredDiagram cd = pd.instantiate(Vector::Zero(static_cast<Eigen::Index>(pd.theta_dim())));
    const ValidationReport r = pd.interfaces ? validate_colored(cd, *pd.interfaces) : validate(cd.shape);
    for (const auto& v : r.violations) c.problems.push_back(std::string(clause_name(v.clause)) + ": " + v.message);
    out.push_back(c);
  }
  if (p.ccmp) out.push_back({"index category", p.ccmp->index.check()});
  return out;
}

inline int cmd_validate(const std::string& file, const Options& opt, std::ostream& out, std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    Report r({"check", "status", "detail"});
    bool ok = true;
    for (const auto& c : validation_checks(p)) {
      if (c.problems.empty()) r.add({c.what, "pass", ""});
      for (const auto& pr : c.problems) r.add({c.what, "FAIL", pr});
      ok = ok && c.problems.empty();
    }
    r.print(out, opt.output);
    return ok ? pass : failure;
  });
}

// ---------------------------------------------------------------------------
// trace-exact, trace-sample, trace-mc

inline int cmd_trace_exact(const std::string& file, const std::string& diagram, const std::string& input, const Options& opt,
                           std::ostream& out, std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    const Diagram d = p.evaluable(diagram);
    const Value x = input_value(input, d.input_profile());
    const ExactTrace t = trace_exact(d, x);
    const Profile op = d.output_profile();
    Report r({"output", "probability"});
    for (std::size_t y = 0; y < t.marginal.size(); ++y) r.add({value_text(point_at(t.output_space, y), op), t.marginal[y]});
    r.print(out, opt.output);
    return pass;
  });
}

inline int cmd_trace_sample(const std::string& file, const std::string& diagram, const std::string& input, const Options& opt,
                            std::ostream& out, std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    const Diagram d = p.evaluable(diagram);
    const Value x = input_value(input, d.input_profile());
    const EvalPlan plan = make_plan(d, topo_sort(d));
    const Profile op = d.output_profile();
    std::vector<Value> ys(opt.samples);
    parallel_for(opt.samples, opt.threads, [&](std::size_t s) {
      Rng rng = substream(opt.seed, "sample", s);
      ys[s] = trace_sample(plan, x, rng).external_output;
    });
    Report r({"sample", "output"});
    for (std::size_t s = 0; s < ys.size(); ++s) r.add({s, value_text(ys[s], op)});
    r.print(out, opt.output);
    return pass;
  });
}

/// Per output slot: label frequencies for finite slots, coordinate means for real ones.
inline int cmd_trace_mc(const std::string& file, const std::string& diagram, const std::string& input, const Options& opt,
                        std::ostream& out, std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    if (opt.samples < 2) throw UsageError("trace-mc needs at least two samples");
    const Diagram d = p.evaluable(diagram);
    const Value x = input_value(input, d.input_profile());
    const EvalPlan plan = make_plan(d, topo_sort(d));
    const Profile op = d.output_profile();
    std::vector<Value> ys(opt.samples);
    parallel_for(opt.samples, opt.threads, [&](std::size_t s) {
      Rng rng = substream(opt.seed, "trace", s);
      ys[s] = trace_sample(plan, x, rng).external_output;
    });
    Report r({"slot", "object", "statistic", "estimate", "std_error"});
    std::vector<double> vals(ys.size());
    for (std::size_t slot = 0; slot < op.size(); ++slot) {
      const Space& s = op[slot].space;
      if (s.is_finite()) {
        for (std::size_t l = 0; l < s.size(); ++l) {
          for (std::size_t i = 0; i < ys.size(); ++i) vals[i] = ys[i][slot].index() == l ? 1.0 : 0.0;
          const McEstimate e = summarize(vals);
          r.add({slot, op[slot].name, "P(" + s.labels()[l] + ")", e.mean, e.std_error});
        }
      } else {
        const std::size_t dim = s.real_dim();
        for (std::size_t c = 0; c < dim; ++c) {
          for (std::size_t i = 0; i < ys.size(); ++i) vals[i] = flatten_real(ys[i][slot])[c];
          const McEstimate e = summarize(vals);
          r.add({slot, op[slot].name, "mean[" + std::to_string(c) + "]", e.mean, e.std_error});
        }
      }
    }
    r.print(out, opt.output);
    return pass;
  });
}

// ---------------------------------------------------------------------------
// eval-objective, grad, grad-check, train

struct LearnArgs {
  std::string param_diagram, objective, theta, theta_file;
  bool exact = false;
};

inline int cmd_eval_objective(const std::string& file, const LearnArgs& a, const Options& opt, std::ostream& out, std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    const ParamDiagram& pd = p.param_diagram(a.param_diagram);
    const Objective& obj = p.objective(resolve_objective(p, a.param_diagram, a.objective));
    const Vector th = resolve_theta(p, a.param_diagram, a.theta, a.theta_file);
    Report r({"mode", "value", "std_error", "samples"});
    if (a.exact) {
      r.add({"exact", expected_objective_exact(pd, th, obj), 0.0, 0});
    } else {
      const McEstimate e = expected_objective_mc(pd, th, obj, opt.samples, opt.seed, opt.threads);
      r.add({"mc", e.mean, e.std_error, e.n});
    }
    r.print(out, opt.output);
    return pass;
  });
}

inline int cmd_grad(const std::string& file, const LearnArgs& a, const Options& opt, std::ostream& out, std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    const ParamDiagram& pd = p.param_diagram(a.param_diagram);
    const Objective& obj = p.objective(resolve_objective(p, a.param_diagram, a.objective));
    const Vector th = resolve_theta(p, a.param_diagram, a.theta, a.theta_file);
    const AdmissibilityReport adm = validate_pathwise_admissibility(pd, obj);
    if (!adm.ok()) {
      err << "pathwise-inadmissible:\n" << adm.to_string();
      return failure;
    }
    Report r({"vertex", "coord", "value", "std_error"});
    if (a.exact) {
      const Vector g = grad_exact_enumeration(pd, th, obj);
      for (const auto& b : pd.layout())
        for (std::size_t c = 0; c < b.dim; ++c) r.add({b.vertex, c, g(static_cast<Eigen::Index>(b.offset + c)), 0.0});
    } else {
      const GradEstimate g = grad_reverse_mode_mc(pd, th, obj, opt.samples, opt.seed, {0.0, opt.threads});
      for (const auto& b : pd.layout())
        for (std::size_t c = 0; c < b.dim; ++c) {
          const auto i = static_cast<Eigen::Index>(b.offset + c);
          r.add({b.vertex, c, g.flat(i), g.std_errors(i)});
        }
    }
    r.print(out, opt.output);
    return pass;
  });
}

struct GradCheckResult {
  bool ok = true;
  std::vector<std::string> notes;
};

/// Reverse-mode Monte Carlo against enumeration and finite differences (finite
/// problems), or against frozen-noise finite differences (continuous problems).
inline GradCheckResult grad_check(const ParamDiagram& pd, const Vector& th, const Objective& obj, const Options& opt, Report* table) {
  GradCheckResult res;
  const AdmissibilityReport adm = validate_pathwise_admissibility(pd, obj);
  if (!adm.ok()) {
    res.ok = false;
    res.notes.push_back("pathwise-inadmissible: " + adm.to_string());
    return res;
  }
  const std::size_t n = std::max<std::size_t>(opt.samples, 2);
  const GradEstimate mc = grad_reverse_mode_mc(pd, th, obj, n, opt.seed, {0.0, opt.threads});
  auto row = [&](const ParamDiagram::Block& b, std::size_t c, json enumeration, json fd, bool ok) {
    const auto i = static_cast<Eigen::Index>(b.offset + c);
    if (table) table->add({b.vertex, c, mc.flat(i), mc.std_errors(i), std::move(enumeration), std::move(fd), ok ? "pass" : "FAIL"});
    res.ok = res.ok && ok;
  };
  if (finite_problem(pd, th, obj)) {
    const Vector g = grad_exact_enumeration(pd, th, obj);
    const Vector fd = central_differences([&](const Vector& t) { return expected_objective_exact(pd, t, obj); }, th);
    const double rel = relative_error(g, fd);
    const double unbiased = g.size() ? (expected_estimator_exact(pd, th, obj) - g).cwiseAbs().maxCoeff() : 0.0;
    res.notes.push_back("enumeration vs finite differences: relative error " + fmt(rel) + " (limit 1e-6)");
    res.notes.push_back("exact expectation of the estimator vs enumeration: " + fmt(unbiased) + " (limit 1e-12)");
    res.ok = res.ok && rel <= 1e-6 && unbiased <= 1e-12;
    for (const auto& b : pd.layout())
      for (std::size_t c = 0; c < b.dim; ++c) {
        const auto i = static_cast<Eigen::Index>(b.offset + c);
        const bool ok = std::abs(mc.flat(i) - g(i)) <= 5.0 * mc.std_errors(i) + 1e-12;
        row(b, c, g(i), fd(i), ok);
      }
    return res;
  }
  // Continuous problems: frozen-noise central differences of each sample's
  // objective, on the estimator's own streams. Valid when every parameterized
  // vertex has a real target (the sampling map is smooth in theta).
  for (const auto& [v, pk] : pd.params)
    if (!profile_space(pk.target()).purely_real()) {
      res.ok = false;
      res.notes.push_back("vertex '" + v + "' has a discrete target in a continuous problem: no finite-difference reference");
      return res;
    }
  bool all_pathwise = true;
  for (const auto& [v, pk] : pd.params) all_pathwise = all_pathwise && pk.is_pathwise();
  const std::size_t m = std::min<std::size_t>(n, 4000);
  std::vector<Vector> est(m), ref(m);
  parallel_for(m, opt.threads, [&](std::size_t s) {
    const Rng rng = substream(opt.seed, "grad", s);
    est[s] = sample_gradient(pd, th, obj, rng).second;
    ref[s] = central_differences([&](const Vector& t) { return sample_gradient(pd, t, obj, rng).first; }, th);
  });
  const auto dim = th.size();
  Vector est_mean = Vector::Zero(dim), ref_mean = Vector::Zero(dim), ref_se(dim);
  for (std::size_t s = 0; s < m; ++s) {
    est_mean += est[s] / static_cast<double>(m);
    ref_mean += ref[s] / static_cast<double>(m);
  }
  std::vector<double> col(m);
  for (Eigen::Index i = 0; i < dim; ++i) {
    for (std::size_t s = 0; s < m; ++s) col[s] = ref[s](i);
    ref_se(i) = summarize(col).std_error;
  }
  if (all_pathwise) {
    double worst = 0.0;
    for (std::size_t s = 0; s < std::min<std::size_t>(m, 20); ++s) worst = std::max(worst, relative_error(est[s], ref[s]));
    res.notes.push_back("per-sample pathwise vs frozen-noise finite differences: worst relative error " + fmt(worst) + " (limit 1e-6)");
    const double rel = relative_error(est_mean, ref_mean);
    res.notes.push_back("average over " + std::to_string(m) + " samples vs averaged finite differences: relative error " + fmt(rel) +
                        " (limit 1e-6)");
    res.ok = res.ok && worst <= 1e-6 && rel <= 1e-6;
  } else {
    res.notes.push_back("score-function vertices present: coordinates compared within 5 combined standard errors");
  }
  for (const auto& b : pd.layout())
    for (std::size_t c = 0; c < b.dim; ++c) {
      const auto i = static_cast<Eigen::Index>(b.offset + c);
      const double tol = 5.0 * std::hypot(mc.std_errors(i), ref_se(i)) + 1e-6 * std::max(ref_mean.norm(), 1e-12);
      row(b, c, nullptr, ref_mean(i), std::abs(mc.flat(i) - ref_mean(i)) <= tol);
    }
  return res;
}

inline int cmd_grad_check(const std::string& file, const LearnArgs& a, const Options& opt, std::ostream& out, std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    const ParamDiagram& pd = p.param_diagram(a.param_diagram);
    const Objective& obj = p.objective(resolve_objective(p, a.param_diagram, a.objective));
    const Vector th = resolve_theta(p, a.param_diagram, a.theta, a.theta_file);
    Report r({"vertex", "coord", "reverse_mode", "std_error", "enumeration", "finite_diff", "status"});
    const GradCheckResult res = grad_check(pd, th, obj, opt, &r);
    r.print(out, opt.output);
    for (const auto& n : res.notes) err << n << "\n";
    return res.ok ? pass : failure;
  });
}

struct TrainArgs {
  std::size_t steps = 50;
  double step_size = 0.1;
};

inline int cmd_train(const std::string& file, const LearnArgs& a, const TrainArgs& t, const Options& opt, std::ostream& out,
                     std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    const ParamDiagram& pd = p.param_diagram(a.param_diagram);
    const Objective& obj = p.objective(resolve_objective(p, a.param_diagram, a.objective));
    const Vector th = resolve_theta(p, a.param_diagram, a.theta, a.theta_file);
    TrainOptions to;
    to.steps = t.steps;
    to.step_size = t.step_size;
    to.samples = opt.samples;
    to.seed = opt.seed;
    to.exact = a.exact;
    to.threads = opt.threads;
    const TrainResult res = train_sgd(pd, th, obj, to);
    Report r({"step", "objective", "theta"});
    for (std::size_t k = 0; k < res.thetas.size(); ++k) r.add({k, res.objectives[k], vector_json(res.thetas[k])});
    r.print(out, opt.output);
    return pass;
  });
}

// ---------------------------------------------------------------------------
// coherence-check, push

inline int cmd_coherence(const std::string& file, const Options& opt, std::ostream& out, std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    const CoherenceReport rep = check_interface_coherence(*p.interfaces, {3, opt.samples, opt.seed, 0.01});
    Report r({"path", "mode", "deviation", "status"});
    for (const auto& e : rep.entries) r.add({e.path, e.exact ? "exact" : "tv", e.deviation, e.pass ? "pass" : "FAIL"});
    for (const auto& v : rep.violations) r.add({v, "closure", nullptr, "FAIL"});
    r.print(out, opt.output);
    return rep.ok() ? pass : failure;
  });
}

inline int cmd_push(const std::string& file, const std::string& transition, const std::string& diagram, const std::string& theta,
                    const Options& opt, std::ostream& out, std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    if (!p.ccmp) throw UsageError("project has no index category");
    const CCMP& c = *p.ccmp;
    if (!c.index.has_morphism(transition)) throw UsageError("unknown transition '" + transition + "'");
    const Morphism& m = c.index.morphism(transition);
    const DiagramSpec& ds = p.diagram_spec(diagram);
    if (ds.state != m.src) throw UsageError("diagram '" + diagram + "' lives in state '" + ds.state + "', transition starts at " + m.src);
    const ColoredDiagram img = c.push_diagram(transition, p.diagram(diagram));
    const ParamPushforward pp = c.param_map(transition);
    Vector th = theta.empty() ? Vector::Zero(static_cast<Eigen::Index>(pp.in_dim)) : parse_theta(theta);
    if (static_cast<std::size_t>(th.size()) != pp.in_dim)
      throw UsageError("theta has " + std::to_string(th.size()) + " entries, state " + m.src + " has " + std::to_string(pp.in_dim));
    const Vector th2 = pp(th);
    const ValidationReport vr = validate_colored(img, *c.state(m.dst).interfaces);
    Report r({"kind", "name", "value"});
    for (const auto& [id, k] : img.shape.vertices) r.add({"vertex", id, k.name()});
    for (const auto& w : img.shape.wires)
      r.add({"wire", port_to_string(w.from) + " -> " + port_to_string(w.to), w.witness});
    for (const auto& port : img.shape.inputs) r.add({"input", port_to_string(port), img.shape.input_object(port).name});
    for (const auto& port : img.shape.outputs) r.add({"output", port_to_string(port), img.shape.output_object(port).name});
    for (Eigen::Index i = 0; i < th2.size(); ++i) r.add({"theta", std::to_string(i), th2(i)});
    r.print(out, opt.output);
    if (!vr.ok()) {
      err << "transported diagram is invalid in " << m.dst << ":\n" << vr.to_string();
      return failure;
    }
    return pass;
  });
}

// ---------------------------------------------------------------------------
// check: every property suite on one project

struct SuiteResult {
  std::string suite;
  std::size_t checks = 0;
  std::vector<std::string> failures;
  double seconds = 0.0;
};

namespace detail {

inline bool all_finite(const Diagram& d) {
  for (const auto& [id, k] : d.vertices)
    if (!finite_convertible(k)) return false;
  return true;
}

/// Kernel-form reductions of a finite diagram under every wire order (capped).
inline double reduction_order_deviation(const Diagram& d, std::size_t cap = 720) {
  const Kernel ref = trace_kernel_exact(d);
  std::vector<std::size_t> order(d.wires.size());
  std::iota(order.begin(), order.end(), 0);
  double worst = 0.0;
  std::size_t seen = 0;
  do {
    const Kernel k = reduce_in_order(d, order, ksc_merge);
    worst = std::max(worst, max_abs_diff(to_finite_table(k), to_finite_table(ref)));
  } while (++seen < cap && std::next_permutation(order.begin(), order.end()));
  return worst;
}

}  // namespace detail

inline std::vector<SuiteResult> run_check_suites(const Project& p, const Options& opt) {
  using clock = std::chrono::steady_clock;
  std::vector<SuiteResult> out;
  auto timed = [&](const std::string& name, auto&& body) {
    SuiteResult r{name, 0, {}, 0.0};
    const auto t0 = clock::now();
    try {
      body(r);
    } catch (const std::exception& e) {
      r.failures.push_back(e.what());
    }
    r.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    out.push_back(std::move(r));
  };

  timed("validation", [&](SuiteResult& r) {
    for (const auto& c : validation_checks(p)) {
      ++r.checks;
      for (const auto& pr : c.problems) r.failures.push_back(c.what + ": " + pr);
    }
  });

  timed("order-invariance", [&](SuiteResult& r) {
    for (const auto& [name, s] : p.spec.diagrams) {
      if (!p.validate_diagram(name).ok()) continue;
      const Diagram d = p.evaluable(name);
      if (!detail::all_finite(d)) continue;
      const auto orders = all_topo_orders(d, 5000);
      for (const auto& x : probe_points(profile_space(d.input_profile()))) {
        ++r.checks;
        const double dev = order_invariance_check(d, x, orders);
        if (dev > kExactTol) r.failures.push_back(name + ": deviation " + fmt(dev));
      }
    }
  });

  timed("unit-associativity-interchange", [&](SuiteResult& r) {
    ++r.checks;
    for (const auto& v : check_color_system(*p.colors)) r.failures.push_back("colors: " + v);
    for (const auto& [name, ck] : p.kernels) {
      const Kernel& k = ck.kernel;
      if (!finite_convertible(k)) continue;
      const FiniteTable t = to_finite_table(k);
      for (std::size_t i = 0; i < k.target().size(); ++i) {
        ++r.checks;
        const Kernel left = ksc_kernel(k, identity_kernel(k.target()[i]), i, 0);
        if (max_abs_diff(to_finite_table(left), t) > kExactTol) r.failures.push_back(name + ": left unit law at output " + std::to_string(i));
      }
      for (std::size_t j = 0; j < k.source().size(); ++j) {
        ++r.checks;
        const Kernel right = ksc_kernel(identity_kernel(k.source()[j]), k, 0, j);
        if (max_abs_diff(to_finite_table(right), t) > kExactTol) r.failures.push_back(name + ": right unit law at input " + std::to_string(j));
      }
    }
    for (const auto& [name, s] : p.spec.diagrams) {
      if (!p.validate_diagram(name).ok()) continue;
      const Diagram d = p.evaluable(name);
      if (!detail::all_finite(d) || d.wires.empty()) continue;
      ++r.checks;
      const double dev = detail::reduction_order_deviation(d);
      if (dev > kExactTol) r.failures.push_back(name + ": reduction orders deviate by " + fmt(dev));
    }
  });

  timed("interface-coherence", [&](SuiteResult& r) {
    const CoherenceReport rep = check_interface_coherence(*p.interfaces, {3, std::max<std::size_t>(opt.samples, 100000), opt.seed, 0.01});
    r.checks += rep.entries.size();
    for (const auto& e : rep.entries)
      if (!e.pass) r.failures.push_back(e.path + ": deviation " + fmt(e.deviation));
    for (const auto& v : rep.violations) r.failures.push_back(v);
  });

  timed("functoriality", [&](SuiteResult& r) {
    if (!p.ccmp) return;
    const CCMP& c = *p.ccmp;
    ++r.checks;
    for (const auto& v : check_strict_functoriality(c, opt.seed)) r.failures.push_back(v);
    for (const auto& [id, m] : c.index.morphisms()) {
      CMPFunctor g;
      ParamPushforward pp;
      try {
        g = c.state_functor(id);
        pp = c.param_map(id);
      } catch (const Error&) {
        continue;  // reported above
      }
      auto fit = p.state_composites.find(m.src);
      if (fit != p.state_composites.end()) {
        // Image of each registered composite against the trace of the transported two-vertex diagram.
        ++r.checks;
        for (const auto& v : check_cmp_functor(g, c.state(m.src), c.state(m.dst), fit->second)) r.failures.push_back(id + ": " + v);
        for (const auto& fx : fit->second) {
          const StateCMP& s = c.state(m.src);
          const ColoredDiagram two = fixture_diagram(s, fx);
          const ColoredDiagram img = pushforward_diagram(g, s, c.state(m.dst), two);
          const Diagram e = interface_expand(img, *c.state(m.dst).interfaces);
          if (!detail::all_finite(e)) continue;
          ++r.checks;
          const Kernel traced = trace_kernel_exact(e);
          const Kernel& image = c.state(m.dst).kernel(g.kernel(fx.composite)).kernel;
          const double dev = max_abs_diff(to_finite_table(traced), to_finite_table(image));
          if (dev > kExactTol) r.failures.push_back(id + ": trace of image differs from image of " + fx.composite + " by " + fmt(dev));
        }
      }
      ++r.checks;
      const double jerr = jacobian_fd_error(pp, opt.seed);
      if (pp.in_dim > 0 && jerr > 1e-4) r.failures.push_back(id + ": parameter Jacobian deviates from finite differences by " + fmt(jerr));
    }
  });

  timed("gradients", [&](SuiteResult& r) {
    for (const auto& [name, os] : p.spec.objectives) {
      const ParamDiagram& pd = p.param_diagrams.at(os.param_diagram);
      const Objective& obj = p.objectives.at(name);
      const Vector th = resolve_theta(p, os.param_diagram, "", "");
      ++r.checks;
      Options o = opt;
      o.samples = std::min<std::size_t>(std::max<std::size_t>(opt.samples, 2), 20000);
      const GradCheckResult g = grad_check(pd, th, obj, o, nullptr);
      if (!g.ok) {
        r.failures.push_back(name + ": gradient check failed");
        for (const auto& n : g.notes) r.failures.push_back(name + ": " + n);
      }
    }
  });
  return out;
}

inline int cmd_check(const std::string& file, const Options& opt, std::ostream& out, std::ostream& err) {
  return with_project(file, err, [&](const Project& p) {
    const auto suites = run_check_suites(p, opt);
    Report r({"suite", "checks", "failures", "seconds", "status"});
    bool ok = true;
    for (const auto& s : suites) {
      r.add({s.suite, s.checks, s.failures.size(), s.seconds, s.failures.empty() ? "pass" : "FAIL"});
      ok = ok && s.failures.empty();
    }
    r.print(out, opt.output);
    for (const auto& s : suites)
      for (const auto& f : s.failures) err << s.suite << ": " << f << "\n";
    return ok ? pass : failure;
  });
}

}  // namespace polyk::cli
