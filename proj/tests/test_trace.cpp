#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "polyk/trace.hpp"
#include "support.hpp"

using namespace polyk;
using polyk::testing::fin;
using polyk::testing::random_finite;
using polyk::testing::real;
using polyk::testing::rows;

namespace {

Value idx(std::size_t i) { return Value::index(i); }
Value tup(std::vector<Value> v) { return Value::tuple(std::move(v)); }

struct VStructure {
  Kernel k1, k2, k3;
  Diagram d;
};

VStructure v_structure(Rng& rng) {
  VStructure v{random_finite(rng, {fin("A", 2)}, {fin("B", 3)}), random_finite(rng, {fin("C", 3)}, {fin("D", 2)}),
               random_finite(rng, {fin("B", 3), fin("D", 2)}, {fin("E", 2)}), {}};
  v.d.add_vertex("k1", v.k1);
  v.d.add_vertex("k2", v.k2);
  v.d.add_vertex("k3", v.k3);
  v.d.wires = {{{"k1", 0}, {"k3", 0}, ""}, {{"k2", 0}, {"k3", 1}, ""}};
  v.d.inputs = {{"k1", 0}, {"k2", 0}};
  v.d.outputs = {{"k3", 0}};
  return v;
}

Diagram chain(const Kernel& k1, const Kernel& k2, const Kernel& k3) {
  Diagram d;
  d.add_vertex("k1", k1);
  d.add_vertex("k2", k2);
  d.add_vertex("k3", k3);
  d.wires = {{{"k1", 0}, {"k2", 0}, ""}, {{"k2", 0}, {"k3", 0}, ""}};
  d.inputs = {{"k1", 0}};
  d.outputs = {{"k3", 0}};
  return d;
}

}  // namespace

TEST(Trace, InputAssemblyOnChain) {
  Rng rng(1);
  const Diagram d = chain(random_finite(rng, {fin("A", 2)}, {fin("B", 2)}), random_finite(rng, {fin("B", 2)}, {fin("C", 2)}),
                          random_finite(rng, {fin("C", 2)}, {fin("D", 2)}));
  const auto order = topo_sort(d);
  const Value x = tup({idx(1)});
  EXPECT_EQ(input_assembly(d, order, 0, x, {}), x);
  const Value y1 = tup({idx(0)});
  EXPECT_EQ(input_assembly(d, order, 1, x, {y1}), y1);
  EXPECT_THROW(input_assembly(d, order, 2, x, {y1}), Error);
}

TEST(Trace, InputAssemblyOnVStructure) {
  Rng rng(2);
  auto v = v_structure(rng);
  // Swap the input slot order of k3 to check declared slot order is honoured.
  Diagram d = v.d;
  d.vertices.erase("k3");
  d.add_vertex("k3", random_finite(rng, {fin("D", 2), fin("B", 3)}, {fin("E", 2)}));
  d.wires = {{{"k1", 0}, {"k3", 1}, ""}, {{"k2", 0}, {"k3", 0}, ""}};
  ASSERT_TRUE(validate(d).ok());
  const std::vector<VertexId> order = {"k2", "k1", "k3"};
  const Value x = tup({idx(1), idx(2)});
  EXPECT_EQ(input_assembly(d, order, 0, x, {}), tup({idx(2)}));
  EXPECT_EQ(input_assembly(d, order, 1, x, {tup({idx(1)})}), tup({idx(1)}));
  // k2 produced D=1 and k1 produced B=2; k3 reads (D, B).
  EXPECT_EQ(input_assembly(d, order, 2, x, {tup({idx(1)}), tup({idx(2)})}), tup({idx(1), idx(2)}));
}

TEST(Trace, ChainMatchesDoubleSum) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Kernel k1 = random_finite(rng, {fin("A", 2)}, {fin("B", 3)});
    const Kernel k2 = random_finite(rng, {fin("B", 3)}, {fin("C", 4)});
    const Kernel k3 = random_finite(rng, {fin("C", 4)}, {fin("D", 2)});
    const Kernel K = trace_kernel_exact(chain(k1, k2, k3));
    const auto &M1 = rows(k1), &M2 = rows(k2), &M3 = rows(k3);
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t dd = 0; dd < 2; ++dd) {
        double s = 0.0;
        for (std::size_t b = 0; b < 3; ++b)
          for (std::size_t c = 0; c < 4; ++c) s += M3[c][dd] * M2[b][c] * M1[a][b];
        EXPECT_NEAR(rows(K)[a][dd], s, kExactTol);
      }
  }
}

TEST(Trace, VStructureMatchesDoubleSum) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto v = v_structure(rng);
    const Kernel H = trace_kernel_exact(v.d);
    const auto &M1 = rows(v.k1), &M2 = rows(v.k2), &M3 = rows(v.k3);
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t e = 0; e < 2; ++e) {
          double s = 0.0;
          for (std::size_t b = 0; b < 3; ++b)
            for (std::size_t dd = 0; dd < 2; ++dd) s += M3[b * 2 + dd][e] * M1[a][b] * M2[c][dd];
          EXPECT_NEAR(rows(H)[a * 3 + c][e], s, kExactTol);
        }
  }
}

TEST(Trace, DiracDiagramIsPointMass) {
  const Object X = fin("X", 5);
  auto add = [&](std::size_t c) {
    return dirac_of_map([c](const Value& v) { return tup({idx((v[0].index() + c) % 5)}); }, {X}, {X});
  };
  const Diagram d = chain(add(1), add(2), add(4));
  for (std::size_t x = 0; x < 5; ++x) {
    const auto t = trace_exact(d, tup({idx(x)}));
    for (std::size_t y = 0; y < 5; ++y) EXPECT_EQ(t.marginal[y], y == (x + 7) % 5 ? 1.0 : 0.0);
    Rng rng(x);
    const auto s = trace_sample(d, tup({idx(x)}), rng);
    EXPECT_EQ(s.external_output, tup({idx((x + 7) % 5)}));
    EXPECT_EQ(s.vertex_outputs.at("k1"), tup({idx((x + 1) % 5)}));
    EXPECT_EQ(s.vertex_outputs.size(), 3u);
  }
}

TEST(Trace, SampledMarginalMatchesExact) {
  Rng rng(5);
  const Diagram d = chain(random_finite(rng, {fin("A", 2)}, {fin("B", 3)}), random_finite(rng, {fin("B", 3)}, {fin("C", 3)}),
                          random_finite(rng, {fin("C", 3)}, {fin("D", 3)}));
  const Value x = tup({idx(1)});
  const auto exact = trace_exact(d, x).marginal;
  const int n = 100000;
  std::vector<double> counts(3, 0.0);
  Rng srng(6);
  for (int i = 0; i < n; ++i) counts[trace_sample(d, x, srng).external_output[0].index()] += 1.0;
  for (std::size_t y = 0; y < 3; ++y) {
    const double p = exact[y];
    EXPECT_LE(std::abs(counts[y] / n - p), 5.0 * std::sqrt(p * (1 - p) / n) + 1e-12);
  }
}

TEST(Trace, GaussianChainSampleMean) {
  const double s1 = 0.8, s2 = 0.5;
  const Object A = real("A"), B1 = real("B1"), B2 = real("B2"), C2 = real("C2"), D = real("D");
  const Kernel k = gaussian_kernel({A}, {B1, B2}, Matrix::Constant(2, 1, 1.0), Vector::Zero(2),
                                   (Vector(2) << s1 * s1, 0.0).finished());
  const Kernel l = gaussian_kernel({B1, C2}, {D}, Matrix::Constant(1, 2, 1.0), Vector::Zero(1),
                                   Vector::Constant(1, s2 * s2));
  const Diagram d = ksc_diagram(k, l, 0, 0);
  const double a = 1.25, c2 = -0.5;
  const Value x = tup({Value::real({a}), Value::real({c2})});
  const std::size_t n = 100000;
  const auto est = trace_expectation_mc(d, x, [](const Value& y) { return y[0].coords()[0]; }, n, 42);
  EXPECT_LE(std::abs(est.mean - (a + c2)), 5.0 * std::sqrt(s1 * s1 + s2 * s2) / std::sqrt(double(n)));
  Rng rng(1);
  EXPECT_EQ(trace_sample(d, x, rng).external_output[1].coords()[0], a);
}

TEST(Trace, ConstantFunctionHasZeroError) {
  Rng rng(7);
  const Diagram d = single_vertex("u", random_finite(rng, {fin("A", 2)}, {fin("B", 3)}));
  const auto est = trace_expectation_mc(d, tup({idx(0)}), [](const Value&) { return 1.0; }, 100, 3);
  EXPECT_EQ(est.mean, 1.0);
  EXPECT_EQ(est.std_error, 0.0);
  EXPECT_THROW(trace_expectation_mc(d, tup({idx(0)}), [](const Value&) { return 1.0; }, 1, 3), Error);
}

TEST(Trace, IndicatorMatchesExactProbability) {
  Rng rng(8);
  auto v = v_structure(rng);
  const Value x = tup({idx(1), idx(0)});
  const double p = trace_exact(v.d, x).marginal[1];
  const auto est = trace_expectation_mc(v.d, x, [](const Value& y) { return y[0].index() == 1 ? 1.0 : 0.0; }, 50000, 9);
  EXPECT_LE(std::abs(est.mean - p), 5.0 * est.std_error);
}

TEST(Trace, ThreadedEstimateEqualsSequential) {
  Rng rng(9);
  auto v = v_structure(rng);
  const Value x = tup({idx(0), idx(2)});
  auto f = [](const Value& y) { return static_cast<double>(y[0].index()); };
  const auto a = trace_expectation_mc(v.d, x, f, 5000, 77, 1);
  const auto b = trace_expectation_mc(v.d, x, f, 5000, 77, 4);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.std_error, b.std_error);
}

TEST(Trace, OrderInvarianceSmallCases) {
  Rng rng(10);
  auto v = v_structure(rng);
  const Value x = tup({idx(1), idx(1)});
  EXPECT_LE(order_invariance_check(v.d, x, {{"k1", "k2", "k3"}, {"k2", "k1", "k3"}}), kExactTol);
  const Diagram single = single_vertex("u", random_finite(rng, {fin("A", 2)}, {fin("B", 3)}));
  EXPECT_EQ(order_invariance_check(single, tup({idx(0)}), all_topo_orders(single)), 0.0);
  EXPECT_THROW(order_invariance_check(v.d, x, {{"k3", "k1", "k2"}}), Error);
}

TEST(Trace, RandomDiagramsAreNormalizedAndOrderInvariant) {
  Rng rng(11);
  polyk::testing::RandomDiagramOptions opt;
  opt.max_vertices = 5;
  for (int trial = 0; trial < 30; ++trial) {
    const Diagram d = polyk::testing::random_diagram(rng, opt);
    ASSERT_TRUE(validate(d).ok()) << validate(d).to_string();
    const Space is = profile_space(d.input_profile());
    const auto orders = all_topo_orders(d);
    for (std::size_t a = 0; a < std::min<std::size_t>(is.cardinality(), 3); ++a) {
      const Value x = point_at(is, a);
      const auto t = trace_exact(d, x);
      EXPECT_NEAR(std::accumulate(t.marginal.begin(), t.marginal.end(), 0.0), 1.0, kExactTol);
      EXPECT_NEAR(std::accumulate(t.joint.probs.begin(), t.joint.probs.end(), 0.0), 1.0, kExactTol);
      EXPECT_LE(order_invariance_check(d, x, orders), kExactTol);
    }
  }
}

TEST(Trace, ChainBracketingsAgree) {
  Rng rng(12);
  const Kernel k1 = random_finite(rng, {fin("A", 2)}, {fin("B", 3)});
  const Kernel k2 = random_finite(rng, {fin("B", 3)}, {fin("C", 2)});
  const Kernel k3 = random_finite(rng, {fin("C", 2)}, {fin("D", 2)});
  const Kernel inner_first = ksc_kernel(ksc_kernel(k1, k2, 0, 0), k3, 0, 0);
  const Kernel outer_first = ksc_kernel(k1, ksc_kernel(k2, k3, 0, 0), 0, 0);
  const Kernel whole = trace_kernel_exact(chain(k1, k2, k3));
  EXPECT_LE(max_abs_diff(to_finite_table(inner_first), to_finite_table(whole)), kExactTol);
  EXPECT_LE(max_abs_diff(to_finite_table(outer_first), to_finite_table(whole)), kExactTol);
}

TEST(Trace, VStructureInterchange) {
  Rng rng(13);
  auto v = v_structure(rng);
  // (k3 o_(0,0) k1) o_(0,1) k2 and (k3 o_(0,1) k2) o_(0,0) k1.
  const Kernel a = ksc_kernel(v.k2, ksc_kernel(v.k1, v.k3, 0, 0), 0, 1);
  const Kernel b = ksc_kernel(v.k1, ksc_kernel(v.k2, v.k3, 0, 1), 0, 0);
  const Kernel whole = trace_kernel_exact(v.d);
  EXPECT_LE(max_abs_diff(to_finite_table(a), to_finite_table(whole)), kExactTol);
  EXPECT_LE(max_abs_diff(to_finite_table(b), to_finite_table(whole)), kExactTol);
}

TEST(Trace, EveryWireOrderReducesToTheTrace) {
  Rng rng(14);
  polyk::testing::RandomDiagramOptions opt;
  opt.tree = true;
  opt.max_vertices = 5;
  for (int trial = 0; trial < 25; ++trial) {
    const Diagram d = polyk::testing::random_diagram(rng, opt);
    ASSERT_TRUE(validate(d).ok());
    const Kernel whole = trace_kernel_exact(d);
    std::vector<std::size_t> order(d.wires.size());
    std::iota(order.begin(), order.end(), 0);
    int tried = 0;
    do {
      const Kernel r = reduce_in_order(d, order, ksc_merge);
      EXPECT_LE(max_abs_diff(to_finite_table(r), to_finite_table(whole)), kExactTol);
    } while (std::next_permutation(order.begin(), order.end()) && ++tried < 24);
  }
}

TEST(Trace, ConnectCommutesWithComposition) {
  Rng rng(15);
  polyk::testing::RandomDiagramOptions opt;
  opt.max_vertices = 3;
  opt.max_states = 3;
  for (int trial = 0; trial < 25; ++trial) {
    const Diagram d1 = polyk::testing::random_diagram(rng, opt);
    Diagram d2 = polyk::testing::random_diagram(rng, opt);
    if (d2.inputs.empty()) continue;
    const std::size_t i = rng() % d1.outputs.size(), j = rng() % d2.inputs.size();
    // Give d2's chosen input the same space as d1's chosen output by prepending an adapter.
    const Object o = d1.output_object(d1.outputs[i]), t = d2.input_object(d2.inputs[j]);
    const Diagram adapter = single_vertex("adapter", random_finite(rng, {o}, {t}));
    d2 = connect(adapter, 0, d2, j);
    const Diagram joined = connect(d1, i, d2, j);
    ASSERT_TRUE(validate(joined).ok()) << validate(joined).to_string();
    const Kernel lhs = trace_kernel_exact(joined);
    const Kernel rhs = ksc_kernel(trace_kernel_exact(d1), trace_kernel_exact(d2), i, j);
    EXPECT_LE(max_abs_diff(to_finite_table(lhs), to_finite_table(rhs)), kExactTol);
  }
}

TEST(Trace, NonFiniteKernelRejectedInExactMode) {
  const Kernel g = gaussian_kernel({real("A")}, {real("B")}, Matrix::Identity(1, 1), Vector::Zero(1), Vector::Ones(1));
  EXPECT_THROW(trace_exact(single_vertex("g", g), tup({Value::real({0.0})})), Error);
}

TEST(Trace, EnumerationGuard) {
  Diagram d;
  const Object big = fin("Big", 40);
  for (int v = 0; v < 5; ++v) {
    const std::string id = "v" + std::to_string(v);
    d.add_vertex(id, finite_kernel({}, {big}, {FiniteDist(40, 1.0 / 40)}));
    d.outputs.push_back({id, 0});
  }
  try {
    trace_exact(d, Value::empty());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::enumeration_limit);
  }
}
