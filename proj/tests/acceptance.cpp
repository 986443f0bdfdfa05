// Acceptance run: one line per criterion with its runtime. Exit 0 iff all pass.

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "polyk/cli.hpp"
#include "support.hpp"

using namespace polyk;
using polyk::testing::fin;
using polyk::testing::random_finite;

namespace {

const std::string kFixtures = POLYK_FIXTURE_DIR;

Project fixture(const std::string& name) { return load_project(kFixtures + "/" + name + ".json"); }

struct Verdict {
  bool ok = true;
  std::ostringstream note;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      note << " [failed: " << what << "]";
    }
  }
};

std::string sci(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << std::scientific << v;
  return os.str();
}

double table_diff(const Kernel& a, const Kernel& b) { return max_abs_diff(to_finite_table(a), to_finite_table(b)); }

// 1 ---------------------------------------------------------------------------

void gaussian_ksc(Verdict& v) {
  const Project p = fixture("gaussian_ksc");
  const double s1sq = 0.36, s2sq = 0.64;
  const Kernel& h = p.kernels.at("h").kernel;
  const auto* g = h.as<GaussianLinear>();
  v.require(g != nullptr, "composite stays Gaussian-linear");
  if (!g) return;
  // Output (D, B2) from input (a, c2): D ~ N(a + c2, s1^2 + s2^2), B2 = a.
  double dev = 0.0;
  dev = std::max(dev, std::abs(g->weight(0, 0) - 1.0));
  dev = std::max(dev, std::abs(g->weight(0, 1) - 1.0));
  dev = std::max(dev, std::abs(g->weight(1, 0) - 1.0));
  dev = std::max(dev, std::abs(g->weight(1, 1)));
  dev = std::max(dev, g->bias.cwiseAbs().maxCoeff());
  dev = std::max(dev, std::abs(g->cov_diag(0) - (s1sq + s2sq)));
  dev = std::max(dev, std::abs(g->cov_diag(1)));
  v.require(dev <= 1e-12, "exact moments");
  v.note << "exact dev " << sci(dev);

  const Diagram d = p.evaluable("h");
  const double a = 0.7, c2 = -1.9;
  const Value x = parse_literal("0.7, -1.9", d.input_profile());
  const std::size_t n = 100000;
  const EvalPlan plan = make_plan(d, topo_sort(d));
  std::vector<double> ds(n);
  bool second_exact = true;
  for (std::size_t s = 0; s < n; ++s) {
    Rng rng = substream(1, "trace", s);
    const Value y = trace_sample(plan, x, rng).external_output;
    ds[s] = y[0].coords()[0];
    second_exact = second_exact && y[1].coords()[0] == a;
  }
  const McEstimate mean = summarize(ds);
  std::vector<double> sq(n);
  for (std::size_t s = 0; s < n; ++s) sq[s] = (ds[s] - (a + c2)) * (ds[s] - (a + c2));
  const McEstimate var = summarize(sq);
  const double zm = std::abs(mean.mean - (a + c2)) / mean.std_error;
  const double zv = std::abs(var.mean - (s1sq + s2sq)) / var.std_error;
  v.require(zm <= 5.0, "MC mean within 5 SE");
  v.require(zv <= 5.0, "MC variance within 5 SE");
  v.require(second_exact, "second output equals a");
  v.note << "; MC mean z=" << std::setprecision(2) << std::fixed << zm << ", variance z=" << zv << std::defaultfloat;
}

// 2 ---------------------------------------------------------------------------

void diagnosis(Verdict& v) {
  const Project p = fixture("diagnosis");
  const Diagram d = p.evaluable("workflow");
  const double band = 5.0 * std::sqrt(0.25 / 1e5);
  for (const char* pat : {"p0", "p3"}) {
    const Value x = parse_literal(pat, d.input_profile());
    const McEstimate e = trace_expectation_mc(
        d, x, [](const Value& y) { return y[0].index() == 0 ? 1.0 : 0.0; }, 100000, 17);
    v.require(std::abs(e.mean - 0.5) <= band, std::string("P(antibiotic | ") + pat + ") in 0.5 +- 0.0079");
    v.note << " P(antibiotic|" << pat << ")=" << std::setprecision(5) << e.mean;
  }
}

// 3 ---------------------------------------------------------------------------

void bayes(Verdict& v) {
  const Project p = fixture("bayes_chain");
  auto rows = [&](const std::string& k) { return to_finite_table(p.kernels.at(k).kernel).rows; };
  double worst = 0.0;
  {
    const auto m1 = rows("k1"), m2 = rows("k2"), m3 = rows("k3");
    const Diagram d = p.evaluable("chain");
    const Kernel left = p.kernels.at("chain_left").kernel, right = p.kernels.at("chain_right").kernel;
    for (std::size_t a = 0; a < m1.size(); ++a) {
      const Value x = Value::tuple({Value::index(a)});
      const FiniteDist traced = trace_exact(d, x).marginal;
      const FiniteDist l = apply_exact(left, x), r = apply_exact(right, x);
      for (std::size_t dd = 0; dd < m3[0].size(); ++dd) {
        double sum = 0.0;
        for (std::size_t b = 0; b < m2.size(); ++b)
          for (std::size_t c = 0; c < m3.size(); ++c) sum += m3[c][dd] * m2[b][c] * m1[a][b];
        worst = std::max({worst, std::abs(traced[dd] - sum), std::abs(l[dd] - sum), std::abs(r[dd] - sum)});
      }
    }
  }
  {
    const auto m1 = rows("m1"), m2 = rows("m2"), m3 = rows("m3");
    const Diagram d = p.evaluable("v_structure");
    const Kernel left = p.kernels.at("v_left").kernel, right = p.kernels.at("v_right").kernel;
    const std::size_t nb = m2.size() ? m1[0].size() : 0, nd = m2[0].size();
    for (std::size_t a = 0; a < m1.size(); ++a)
      for (std::size_t c = 0; c < m2.size(); ++c) {
        const Value x = Value::tuple({Value::index(a), Value::index(c)});
        const FiniteDist traced = trace_exact(d, x).marginal;
        const FiniteDist l = apply_exact(left, x), r = apply_exact(right, x);
        for (std::size_t e = 0; e < m3[0].size(); ++e) {
          double sum = 0.0;
          for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t dd = 0; dd < nd; ++dd) sum += m3[b * nd + dd][e] * m1[a][b] * m2[c][dd];
          worst = std::max({worst, std::abs(traced[e] - sum), std::abs(l[e] - sum), std::abs(r[e] - sum)});
        }
      }
  }
  v.require(worst <= 1e-12, "trace and both bracketings equal the double sums");
  v.note << "max dev " << sci(worst);
}

// 4 ---------------------------------------------------------------------------

void order_independence(Verdict& v) {
  Rng rng(404);
  polyk::testing::RandomDiagramOptions opt;
  opt.max_vertices = 6;
  opt.max_states = 4;
  double worst = 0.0;
  std::size_t orders_seen = 0;
  for (int t = 0; t < 100; ++t) {
    const Diagram d = polyk::testing::random_diagram(rng, opt);
    const auto orders = all_topo_orders(d);
    orders_seen += orders.size();
    const Space in = profile_space(d.input_profile());
    for (std::size_t x = 0; x < in.cardinality(); ++x) worst = std::max(worst, order_invariance_check(d, point_at(in, x), orders));
  }
  v.require(worst <= 1e-12, "all topological orders agree");
  v.note << "100 diagrams, " << orders_seen << " orders, max dev " << sci(worst);
}

// 5 ---------------------------------------------------------------------------

void laws(Verdict& v) {
  Rng rng(505);
  double worst = 0.0;
  // Unit laws: identities on either side of every slot.
  for (int t = 0; t < 40; ++t) {
    const Profile in = {fin("A", 1 + rng() % 4), fin("B", 1 + rng() % 4)}, out = {fin("C", 1 + rng() % 4), fin("D", 1 + rng() % 4)};
    const Kernel h = random_finite(rng, in, out);
    for (std::size_t j = 0; j < in.size(); ++j) worst = std::max(worst, table_diff(ksc_kernel(identity_kernel(in[j]), h, 0, j), h));
    for (std::size_t i = 0; i < out.size(); ++i) worst = std::max(worst, table_diff(ksc_kernel(h, identity_kernel(out[i]), i, 0), h));
  }
  // Associativity: sequential bracketings of three kernels along random slots.
  for (int t = 0; t < 40; ++t) {
    const Object a = fin("A", 1 + rng() % 3), b = fin("B", 1 + rng() % 3), c = fin("C", 1 + rng() % 3);
    const Object e = fin("E", 1 + rng() % 3), f = fin("F", 1 + rng() % 3), g = fin("G", 1 + rng() % 3);
    const Kernel k = random_finite(rng, {a}, {b, e});  // k.0 -> l.1
    const Kernel l = random_finite(rng, {f, b}, {c});  // l.0 -> m.0
    const Kernel m = random_finite(rng, {c, g}, {e});
    const Kernel lk = ksc_kernel(k, l, 0, 1);           // (F, A) -> (C, E)
    const Kernel left = ksc_kernel(lk, m, 0, 0);        // m o (l o k)
    const Kernel ml = ksc_kernel(l, m, 0, 0);           // (F, B, G) -> (E)
    const Kernel right = ksc_kernel(k, ml, 0, 1);       // (m o l) o k
    worst = std::max(worst, table_diff(left, right));
  }
  // Interchange and general bracketing: every wire order of random tree diagrams.
  polyk::testing::RandomDiagramOptions opt;
  opt.tree = true;
  opt.max_vertices = 5;
  for (int t = 0; t < 30; ++t) {
    const Diagram d = polyk::testing::random_diagram(rng, opt);
    const Kernel whole = trace_kernel_exact(d);
    std::vector<std::size_t> order(d.wires.size());
    std::iota(order.begin(), order.end(), 0);
    do worst = std::max(worst, table_diff(reduce_in_order(d, order, ksc_merge), whole));
    while (std::next_permutation(order.begin(), order.end()));
  }
  // CKSC: unit laws through identity witnesses, then every reduction order of 5-vertex colored trees.
  bool colors_agree = true;
  {
    auto cs = std::make_shared<ColorSystem>();
    cs->add_color("c");
    InterfaceSystem is(cs);
    const Object a = fin("A", 3), b = fin("B", 2);
    is.add_object(a);
    is.add_object(b);
    for (int t = 0; t < 20; ++t) {
      const Kernel h = random_finite(rng, {a}, {b});
      const ColoredKernel ch{h, kernel_atom("h", h)};
      const auto left = cksc({identity_kernel(a), ColorTerm::unit("c")}, ch, 0, 0, "id.c", is);
      const auto right = cksc(ch, {identity_kernel(b), ColorTerm::unit("c")}, 0, 0, "id.c", is);
      worst = std::max({worst, table_diff(std::get<Kernel>(left.value), h), table_diff(std::get<Kernel>(right.value), h)});
      colors_agree = colors_agree && left.color == ch.color && right.color == ch.color;
    }
  }
  std::size_t reductions = 0;
  for (int t = 0; t < 20; ++t) {
    auto fx = polyk::testing::random_colored_tree(rng, 5);
    std::vector<std::size_t> order(fx.cd.shape.wires.size());
    std::iota(order.begin(), order.end(), 0);
    const Kernel traced = colored_trace_kernel(fx.cd, *fx.is);
    const ColoredKernel first = reduce_colored_in_order(fx.cd, *fx.is, order);
    do {
      const ColoredKernel r = reduce_colored_in_order(fx.cd, *fx.is, order);
      worst = std::max(worst, table_diff(r.kernel, traced));
      colors_agree = colors_agree && r.color == first.color;
      ++reductions;
    } while (std::next_permutation(order.begin(), order.end()));
  }
  v.require(worst <= 1e-12, "table equalities");
  v.require(colors_agree, "color terms agree");
  v.note << reductions << " colored reductions, max dev " << sci(worst);
}

// 6 ---------------------------------------------------------------------------

void coherence(Verdict& v) {
  std::size_t exact = 0, tv = 0;
  double worst_exact = 0.0, worst_tv = 0.0;
  for (const char* name : {"interfaces", "diagnosis", "score_chain", "dynamic_graph"}) {
    const Project p = fixture(name);
    const CoherenceReport r = check_interface_coherence(*p.interfaces, {3, 100000, 6, 0.01});
    v.require(r.ok(), std::string(name) + " coherent");
    for (const auto& e : r.entries) {
      if (e.exact) {
        ++exact;
        worst_exact = std::max(worst_exact, e.deviation);
      } else {
        ++tv;
        worst_tv = std::max(worst_tv, e.deviation);
      }
    }
  }
  v.require(worst_exact <= 1e-12, "exact paths");
  v.require(tv >= 1 && worst_tv <= 0.01, "continuous path TV");
  v.note << exact << " exact paths (max " << sci(worst_exact) << "), " << tv << " statistical (max TV " << std::setprecision(3)
         << worst_tv << ")";
}

// 7 ---------------------------------------------------------------------------

void score_gradients(Verdict& v) {
  const Project p = fixture("score_chain");
  const ParamDiagram& pd = p.param_diagram("encode_decode");
  const Objective& obj = p.objective("loss");
  const Vector th = to_eigen(p.spec.param_diagrams.at("encode_decode").theta);
  const Vector g = grad_exact_enumeration(pd, th, obj);
  const Vector fd = central_differences([&](const Vector& t) { return expected_objective_exact(pd, t, obj); }, th);
  const double rel = relative_error(g, fd);
  const double unbiased = (expected_estimator_exact(pd, th, obj) - g).cwiseAbs().maxCoeff();
  const GradEstimate mc = grad_reverse_mode_mc(pd, th, obj, 50000, 7, {0.0, 1});
  double worst_z = 0.0;
  for (Eigen::Index i = 0; i < g.size(); ++i) worst_z = std::max(worst_z, std::abs(mc.flat(i) - g(i)) / mc.std_errors(i));
  v.require(rel <= 1e-6, "(a) enumeration vs FD");
  v.require(unbiased <= 1e-12, "(b) unbiasedness");
  v.require(worst_z <= 5.0, "(c) MC within 5 SE");
  v.note << "(a) " << sci(rel) << " (b) " << sci(unbiased) << " (c) max z " << std::setprecision(3) << worst_z;
}

// 8 ---------------------------------------------------------------------------

void pathwise_gradients(Verdict& v) {
  const Project p = fixture("pathwise_chain");
  const ParamDiagram& pd = p.param_diagram("chain");
  const Objective& obj = p.objective("point");
  const Vector th = to_eigen(p.spec.param_diagrams.at("chain").theta);
  double per_sample = 0.0;
  for (std::size_t s = 0; s < 200; ++s) {
    const Rng rng = substream(8, "grad", s);
    const Vector g = sample_gradient(pd, th, obj, rng).second;
    const Vector fd = central_differences([&](const Vector& t) { return sample_gradient(pd, t, obj, rng).first; }, th);
    per_sample = std::max(per_sample, relative_error(g, fd));
  }
  // Closed form for x = 1, r = -1, sigma = 0.1 on both vertices:
  // E[(y2 - r)^2] = (w2 (w1 x + b1) + b2 - r)^2 + sigma^2 w2^2 + sigma^2.
  auto closed = [](const Vector& t) {
    const double m = t(2) * (t(0) * 1.0 + t(1)) + t(3) + 1.0;
    return m * m + 0.01 * t(2) * t(2) + 0.01;
  };
  const Vector fd = central_differences(closed, th);
  const GradEstimate mc = grad_reverse_mode_mc(pd, th, obj, 100000, 8, {0.0, 1});
  const double rel = relative_error(mc.flat, fd);
  v.require(per_sample <= 1e-6, "per-sample frozen-noise FD");
  v.require(rel <= 1e-3, "average vs closed form");
  v.note << "per-sample " << sci(per_sample) << ", averaged " << sci(rel);
}

// 9 ---------------------------------------------------------------------------

void functoriality(Verdict& v) {
  const Project p = fixture("dynamic_graph");
  const CCMP& c = *p.ccmp;
  const auto strict = check_strict_functoriality(c, 9);
  v.require(strict.empty(), "strict functoriality" + (strict.empty() ? std::string() : ": " + strict.front()));
  v.require(c.states.size() == 3, "three states");

  // Exact identities and composites on parameters (matrices: compared exactly).
  Rng rng(909);
  double par = 0.0;
  for (int t = 0; t < 20; ++t) {
    Vector th(3);
    for (auto& x : th) x = standard_normal(rng);
    par = std::max(par, (c.param_map("beta.alpha")(th) - c.param_map("beta")(c.param_map("alpha")(th))).cwiseAbs().maxCoeff());
    par = std::max(par, (c.param_map("id.G0")(th) - th).cwiseAbs().maxCoeff());
  }
  v.require(par == 0.0, "parameter identities and composites exact");
  v.require(c.state_functor("beta.alpha") == c.state_functor("alpha").then(c.state_functor("beta")), "state composite");

  // Trace of the image equals the image of the trace.
  double worst = 0.0;
  std::size_t checks = 0;
  for (const auto& [id, m] : c.index.morphisms()) {
    const CMPFunctor g = c.state_functor(id);
    for (const auto& [name, ds] : p.spec.diagrams) {
      if (ds.state != m.src) continue;
      const ColoredDiagram img = c.push_diagram(id, p.diagram(name));
      const Kernel before = colored_trace_kernel(p.diagram(name), *c.state(m.src).interfaces);
      const Kernel after = colored_trace_kernel(img, *c.state(m.dst).interfaces);
      worst = std::max(worst, table_diff(before, after));
      ++checks;
    }
    auto fit = p.state_composites.find(m.src);
    if (fit == p.state_composites.end()) continue;
    const auto viol = check_cmp_functor(g, c.state(m.src), c.state(m.dst), fit->second);
    v.require(viol.empty(), id + " preserves registered composites");
    for (const auto& fx : fit->second) {
      const ColoredDiagram img = pushforward_diagram(g, c.state(m.src), c.state(m.dst), fixture_diagram(c.state(m.src), fx));
      const Kernel traced = colored_trace_kernel(img, *c.state(m.dst).interfaces);
      worst = std::max(worst, table_diff(traced, c.state(m.dst).kernel(g.kernel(fx.composite)).kernel));
      ++checks;
    }
  }
  v.require(checks >= 6 && worst <= 1e-12, "trace of image");
  v.note << checks << " trace-of-image checks, max dev " << sci(worst);
}

// 10 --------------------------------------------------------------------------

void transport(Verdict& v) {
  const Project p = fixture("transport");
  const CCMP& c = *p.ccmp;
  const ParamDiagram& pd = p.param_diagram("policy_t2");
  const Objective& obj = p.objective("cost");
  const ParamPushforward ba = c.param_map("beta.alpha"), a = c.param_map("alpha"), b = c.param_map("beta");
  Rng rng(1010);
  double worst_fd = 0.0, worst_seq = 0.0;
  for (int t = 0; t < 10; ++t) {
    Vector th(2);
    for (auto& x : th) x = standard_normal(rng);
    const Vector g2 = grad_exact_enumeration(pd, ba(th), obj);
    const Vector pulled = pullback_gradient(c, "beta.alpha", th, g2);
    const Vector fd = central_differences([&](const Vector& u) { return expected_objective_exact(pd, ba(u), obj); }, th);
    worst_fd = std::max(worst_fd, relative_error(pulled, fd));
    const Vector seq = pullback_gradient(a, th, pullback_gradient(b, a(th), g2));
    worst_seq = std::max(worst_seq, (seq - pulled).cwiseAbs().maxCoeff());
  }
  v.require(worst_fd <= 1e-4, "pullback vs FD");
  v.require(worst_seq <= 1e-9, "composite vs sequential pullback");
  v.note << "FD " << sci(worst_fd) << ", sequential " << sci(worst_seq);
}

// 11 --------------------------------------------------------------------------

void training(Verdict& v) {
  const Project p = fixture("convex");
  const ParamDiagram& pd = p.param_diagram("echo");
  const Objective& obj = p.objective("mismatch");
  const Vector th0 = Vector::Zero(4);
  TrainOptions opt;
  opt.steps = 50;
  opt.step_size = 0.1;
  opt.exact = true;
  const TrainResult ex = train_sgd(pd, th0, obj, opt);
  bool monotone = true;
  for (std::size_t k = 1; k < ex.objectives.size(); ++k) monotone = monotone && ex.objectives[k] < ex.objectives[k - 1];
  opt.exact = false;
  opt.samples = 2000;
  opt.seed = 2024;
  const TrainResult mc = train_sgd(pd, th0, obj, opt);
  const double gap = std::abs(mc.objectives.back() - ex.objectives.back());
  v.require(monotone, "exact descent monotone");
  v.require(gap <= 0.05, "MC endpoint within 0.05");
  v.note << "L: " << std::setprecision(4) << ex.objectives.front() << " -> " << ex.objectives.back() << ", MC endpoint gap "
         << gap;
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<void(Verdict&)> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> all = {
      {1, "Gaussian KSC moments", 5, gaussian_ksc},
      {2, "diagnosis workflow P(antibiotic) = 1/2", 5, diagnosis},
      {3, "Bayesian-network fragments", 1, bayes},
      {4, "order independence", 60, order_independence},
      {5, "unit/associativity/interchange (KSC, CKSC)", 60, laws},
      {6, "interface coherence", 30, coherence},
      {7, "score-function gradients", 60, score_gradients},
      {8, "pathwise gradients", 30, pathwise_gradients},
      {9, "CCMP functoriality", 10, functoriality},
      {10, "gradient transport", 10, transport},
      {11, "training sanity", 60, training},
  };
  bool all_ok = true;
  for (const auto& c : all) {
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(v);
    } catch (const std::exception& e) {
      v.ok = false;
      v.note << " [exception: " << e.what() << "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs < c.budget_s;
    const bool ok = v.ok && in_budget;
    all_ok = all_ok && ok;
    std::cout << (ok ? "PASS" : "FAIL") << "  " << std::setw(2) << c.id << "  " << c.name << "  (" << std::fixed << std::setprecision(2)
              << secs << " s, budget " << std::setprecision(0) << c.budget_s << " s)" << std::defaultfloat << "  " << v.note.str()
              << (in_budget ? "" : " [over budget]") << std::endl;
  }
  return all_ok ? 0 : 1;
}
