#pragma once

#include <algorithm>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "polyk/colors.hpp"
#include "polyk/diagram.hpp"
#include "polyk/kernels.hpp"
#include "polyk/spaces.hpp"

namespace polyk::testing {

inline Object fin(const std::string& name, std::size_t n, const std::string& color = "c") {
  return Object{name, Space::finite(n), color};
}

inline Object real(const std::string& name, std::size_t dim = 1, const std::string& color = "r") {
  return Object{name, Space::realvec(dim), color};
}

inline FiniteDist random_row(Rng& rng, std::size_t n, bool allow_zeros = true) {
  FiniteDist row(n);
  double s = 0.0;
  for (auto& p : row) {
    p = uniform01(rng) + 0.05;
    if (allow_zeros && uniform01(rng) < 0.15) p = 0.0;
    s += p;
  }
  if (s == 0.0) {
    row[0] = 1.0;
    return row;
  }
  for (auto& p : row) p /= s;
  // Renormalize once more so the row sums to 1 within rounding.
  double t = 0.0;
  for (double p : row) t += p;
  row.back() += 1.0 - t;
  if (row.back() < 0.0) row.back() = 0.0;
  return row;
}

inline Kernel random_finite(Rng& rng, Profile source, Profile target, bool allow_zeros = true) {
  const std::size_t rows = profile_space(source).cardinality();
  const std::size_t cols = profile_space(target).cardinality();
  std::vector<FiniteDist> t;
  for (std::size_t r = 0; r < rows; ++r) t.push_back(random_row(rng, cols, allow_zeros));
  return finite_kernel(std::move(source), std::move(target), std::move(t));
}

/// Plain nested loops over a row-major table; shares no code with the library.
inline std::vector<std::vector<double>> matmul(const std::vector<std::vector<double>>& a,
                                               const std::vector<std::vector<double>>& b) {
  std::vector<std::vector<double>> c(a.size(), std::vector<double>(b.front().size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b.front().size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline double max_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double m = 0.0;
  if (a.size() != b.size()) return 1e300;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return 1e300;
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  }
  return m;
}

inline const std::vector<FiniteDist>& rows(const Kernel& k) { return std::get<FiniteTable>(k.rep()).rows; }


struct RandomDiagramOptions {
  std::size_t max_vertices = 6;
  std::size_t max_states = 4;
  bool tree = false;  // underlying undirected graph is a tree (reducible by binary composition)
  std::size_t max_joint = 512;
};

/// A random valid finite diagram. Vertex ids are shuffled so that id order and
/// topological order disagree; slot orders and external profile orders are
/// shuffled as well.
inline Diagram random_diagram(Rng& rng, const RandomDiagramOptions& opt) {
  for (;;) {
    const std::size_t n = 1 + rng() % opt.max_vertices;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    if (opt.tree) {
      for (std::size_t v = 1; v < n; ++v) {
        const std::size_t u = rng() % v;
        if (rng() % 2) edges.emplace_back(u, v); else edges.emplace_back(v, u);
      }
    } else {
      for (std::size_t v = 1; v < n; ++v)
        for (std::size_t u = 0; u < v; ++u)
          if (uniform01(rng) < 0.4) edges.emplace_back(u, v);
    }
    // Slot lists: each entry is (edge index or -1 for free, size).
    std::vector<std::vector<std::pair<long, std::size_t>>> ins(n), outs(n);
    std::vector<std::size_t> edge_size(edges.size());
    for (std::size_t e = 0; e < edges.size(); ++e) {
      edge_size[e] = 2 + rng() % (opt.max_states - 1);
      outs[edges[e].first].push_back({static_cast<long>(e), edge_size[e]});
      ins[edges[e].second].push_back({static_cast<long>(e), edge_size[e]});
    }
    for (std::size_t v = 0; v < n; ++v) {
      if (rng() % 2 || ins[v].empty()) ins[v].push_back({-1, 1 + rng() % opt.max_states});
      if (outs[v].empty() || rng() % 3 == 0) outs[v].push_back({-1, 1 + rng() % opt.max_states});
      std::shuffle(ins[v].begin(), ins[v].end(), rng);
      std::shuffle(outs[v].begin(), outs[v].end(), rng);
    }
    double joint = 1.0;
    for (std::size_t v = 0; v < n; ++v)
      for (const auto& s : outs[v]) joint *= static_cast<double>(s.second);
    if (joint > static_cast<double>(opt.max_joint)) continue;

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto id = [&](std::size_t v) { return "v" + std::to_string(perm[v]); };
    auto obj = [](std::size_t size) { return fin("X" + std::to_string(size), size); };

    Diagram d;
    std::vector<Port> ext_in, ext_out;
    std::vector<Port> edge_from(edges.size()), edge_to(edges.size());
    for (std::size_t v = 0; v < n; ++v) {
      Profile src, tgt;
      for (std::size_t q = 0; q < ins[v].size(); ++q) {
        src.push_back(obj(ins[v][q].second));
        if (ins[v][q].first < 0) ext_in.push_back({id(v), q}); else edge_to[ins[v][q].first] = {id(v), q};
      }
      for (std::size_t p = 0; p < outs[v].size(); ++p) {
        tgt.push_back(obj(outs[v][p].second));
        if (outs[v][p].first < 0) ext_out.push_back({id(v), p}); else edge_from[outs[v][p].first] = {id(v), p};
      }
      d.add_vertex(id(v), random_finite(rng, src, tgt));
    }
    for (std::size_t e = 0; e < edges.size(); ++e) d.wires.push_back({edge_from[e], edge_to[e], ""});
    std::shuffle(ext_in.begin(), ext_in.end(), rng);
    std::shuffle(ext_out.begin(), ext_out.end(), rng);
    d.inputs = ext_in;
    d.outputs = ext_out;
    return d;
  }
}

/// Color system with two colors b, c and one generator f : b -> c.
inline std::shared_ptr<ColorSystem> two_color_system() {
  auto cs = std::make_shared<ColorSystem>();
  cs->add_color("b");
  cs->add_color("c");
  cs->add_morphism("f", "b", "c");
  return cs;
}

struct ColoredFixture {
  std::shared_ptr<InterfaceSystem> is;
  ColoredDiagram cd;
};

/// A random tree-shaped finite colored diagram with exactly n vertices. Every
/// wire leaves an object colored b and enters a differently sized object colored
/// c through witness f with a random interface kernel.
inline ColoredFixture random_colored_tree(Rng& rng, std::size_t n, std::size_t max_states = 3) {
  auto is = std::make_shared<InterfaceSystem>(two_color_system());
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t v = 1; v < n; ++v) {
    const std::size_t u = rng() % v;
    if (rng() % 2) edges.emplace_back(u, v); else edges.emplace_back(v, u);
  }
  auto size = [&] { return 1 + rng() % max_states; };
  std::vector<Profile> src(n), tgt(n);
  std::vector<Port> from(edges.size()), to(edges.size());
  ColoredDiagram cd;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const Object b = fin("B" + std::to_string(e), 2 + rng() % (max_states - 1), "b");
    const Object c = fin("C" + std::to_string(e), 2 + rng() % (max_states - 1), "c");
    is->add_object(b);
    is->add_object(c);
    is->add_interface("f", b.name, c.name, random_finite(rng, {b}, {c}));
    from[e] = {"", tgt[edges[e].first].size()};
    tgt[edges[e].first].push_back(b);
    to[e] = {"", src[edges[e].second].size()};
    src[edges[e].second].push_back(c);
  }
  std::vector<Port> ext_in, ext_out;
  for (std::size_t v = 0; v < n; ++v) {
    if (src[v].empty() || rng() % 3 == 0) {
      const Object o = fin("I" + std::to_string(v), size(), "c");
      is->add_object(o);
      ext_in.push_back({"", v * 100 + src[v].size()});
      src[v].push_back(o);
    }
    if (tgt[v].empty() || rng() % 3 == 0) {
      const Object o = fin("O" + std::to_string(v), size(), "b");
      is->add_object(o);
      ext_out.push_back({"", v * 100 + tgt[v].size()});
      tgt[v].push_back(o);
    }
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto id = [&](std::size_t v) { return "v" + std::to_string(perm[v]); };
  for (std::size_t v = 0; v < n; ++v) cd.shape.add_vertex(id(v), random_finite(rng, src[v], tgt[v]).named("k" + std::to_string(v)));
  for (std::size_t e = 0; e < edges.size(); ++e) {
    from[e].vertex = id(edges[e].first);
    to[e].vertex = id(edges[e].second);
    cd.shape.wires.push_back({from[e], to[e], "f"});
  }
  for (auto& p : ext_in) {
    p = {id(p.slot / 100), p.slot % 100};
  }
  for (auto& p : ext_out) {
    p = {id(p.slot / 100), p.slot % 100};
  }
  std::shuffle(ext_in.begin(), ext_in.end(), rng);
  std::shuffle(ext_out.begin(), ext_out.end(), rng);
  cd.shape.inputs = ext_in;
  cd.shape.outputs = ext_out;
  return {is, cd};
}

}  // namespace polyk::testing
