#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "polyk/cli.hpp"

using namespace polyk;
namespace cli = polyk::cli;

namespace {

const std::string kFixtures = POLYK_FIXTURE_DIR;
const std::string kData = POLYK_TEST_DATA_DIR;

std::string fixture(const std::string& name) { return kFixtures + "/" + name + ".json"; }

std::vector<std::string> bundled() {
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(kFixtures))
    if (e.path().extension() == ".json") out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

struct Outcome {
  int code;
  std::string out, err;
};

template <class F>
Outcome run(F&& f) {
  std::ostringstream out, err;
  const int code = f(out, err);
  return {code, out.str(), err.str()};
}

cli::Options opts(std::size_t samples = 2000, std::uint64_t seed = 5) {
  cli::Options o;
  o.samples = samples;
  o.seed = seed;
  return o;
}

cli::LearnArgs learn(const std::string& param_diagram) {
  cli::LearnArgs a;
  a.param_diagram = param_diagram;
  return a;
}

}  // namespace

// --- file format -----------------------------------------------------------

TEST(ProjectFile, CanonicalFormRoundTripsByteIdentically) {
  const auto files = bundled();
  ASSERT_GE(files.size(), 9u);
  for (const auto& f : files) {
    SCOPED_TRACE(f);
    const ProjectSpec a = parse_project_text(read_file(f), f);
    const std::string text = canonical_text(a);
    const ProjectSpec b = parse_project_text(text);
    EXPECT_EQ(a, b);
    EXPECT_EQ(canonical_text(b), text);
    EXPECT_NO_THROW(build_project(b));
  }
}

TEST(ProjectFile, SingleAndListedCompositesAreEquivalent) {
  const std::string one = R"({"colors": ["a", "b"], "k_morphisms": {"f": {"src": "a", "dst": "b"},
      "g": {"src": "b", "dst": "b"}, "h": {"src": "a", "dst": "b", "composite_of": ["g", "f"]}}})";
  const std::string many = R"({"colors": ["a", "b"], "k_morphisms": {"f": {"src": "a", "dst": "b"},
      "g": {"src": "b", "dst": "b"}, "h": {"src": "a", "dst": "b", "composite_of": [["g", "f"]]}}})";
  EXPECT_EQ(parse_project_text(one), parse_project_text(many));
}

TEST(ProjectFile, SyntaxErrorsReportLineAndColumn) {
  const std::string text = "{\n  \"spaces\": {\n    \"S\": {\"finite\": 2},,\n  }\n}\n";
  try {
    parse_project_text(text, "bad.json");
    FAIL() << "expected a parse error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::parse);
    EXPECT_NE(std::string(e.what()).find("bad.json:3:"), std::string::npos) << e.what();
  }
}

TEST(ProjectFile, UnknownKeysAndNamesAreRejected) {
  EXPECT_THROW(parse_project_text(R"({"spaces": {"S": {"finite": 2, "colour": "x"}}})"), Error);
  EXPECT_THROW(parse_project_text(R"({"space": {}})"), Error);
  const auto spec = parse_project_text(R"({"spaces": {"S": {"finite": 2}},
      "kernels": {"k": {"builtin": "table", "rows": [[1, 0], [0, 1]], "from": ["S"], "to": ["T"]}}})");
  try {
    build_project(spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::unknown_name);
  }
}

TEST(ProjectFile, DuplicateInterfacesAreRejected) {
  const std::string entry = R"({"witness": "f", "from": "A", "to": "B", "kernel": "k"})";
  EXPECT_THROW(parse_project_text(R"({"interfaces": [)" + entry + ", " + entry + "]}"), Error);
}

TEST(ProjectFile, CompositeKernelsAreCheckedAgainstTheirDeclaredProfiles) {
  const auto spec = parse_project_text(R"({"spaces": {"S": {"finite": 2}, "T": {"finite": 3}},
      "kernels": {"k": {"builtin": "table", "rows": [[1, 0], [0, 1]], "from": ["S"], "to": ["S"]},
                  "kk": {"builtin": "ksc", "k": "k", "l": "k", "i": 0, "j": 0, "from": ["S"], "to": ["T"]}}})");
  EXPECT_THROW(build_project(spec), Error);
}

TEST(Literals, LabelsIndicesAndBracketedReals) {
  const Project p = load_project(fixture("diagnosis"));
  const Profile pat = p.profile({"Pat"});
  EXPECT_EQ(parse_literal("p2", pat)[0].index(), 2u);
  EXPECT_EQ(parse_literal("(p3)", pat)[0].index(), 3u);
  EXPECT_THROW(parse_literal("p9", pat), Error);

  const Project g = load_project(fixture("gaussian_ksc"));
  const Profile two = g.profile({"A", "C2"});
  const Value v = parse_literal("[1.5], -2", two);
  EXPECT_EQ(v[0].coords()[0], 1.5);
  EXPECT_EQ(v[1].coords()[0], -2.0);
  EXPECT_THROW(parse_literal("1.5", two), Error);
  EXPECT_THROW(parse_literal("1.5, x", two), Error);
}

// --- validate --------------------------------------------------------------

TEST(Validate, BundledFixturesPass) {
  for (const auto& f : bundled()) {
    const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_validate(f, opts(), o, e); });
    EXPECT_EQ(r.code, cli::pass) << f << "\n" << r.out << r.err;
  }
}

TEST(Validate, CyclicWireFails) {
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_validate(kData + "/cyclic.json", opts(), o, e); });
  EXPECT_EQ(r.code, cli::failure);
  EXPECT_NE(r.out.find("acyclicity"), std::string::npos) << r.out;
}

TEST(Validate, InadmissibleWitnessIsNamed) {
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_validate(kData + "/inadmissible.json", opts(), o, e); });
  EXPECT_EQ(r.code, cli::failure);
  EXPECT_NE(r.out.find("witness 'f'"), std::string::npos) << r.out;
}

TEST(Validate, UnreadableOrMalformedFileFails) {
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_validate(kData + "/missing.json", opts(), o, e); });
  EXPECT_EQ(r.code, cli::failure);
}

// --- trace -----------------------------------------------------------------

TEST(TraceCommands, ExactChainListsEveryOutput) {
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_trace_exact(fixture("bayes_chain"), "chain", "a1", opts(), o, e); });
  ASSERT_EQ(r.code, cli::pass) << r.err;
  for (const char* d : {"(d0)", "(d1)", "(d2)"}) EXPECT_NE(r.out.find(d), std::string::npos);
}

TEST(TraceCommands, ExactModeRejectsContinuousDiagrams) {
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_trace_exact(fixture("diagnosis"), "workflow", "p0", opts(), o, e); });
  EXPECT_EQ(r.code, cli::failure);
}

TEST(TraceCommands, SameSeedIsByteIdentical) {
  auto go = [&](std::uint64_t seed, std::size_t threads) {
    cli::Options o = opts(3000, seed);
    o.threads = threads;
    return run([&](auto& out, auto& err) { return cli::cmd_trace_mc(fixture("diagnosis"), "workflow", "p1", o, out, err); }).out;
  };
  EXPECT_EQ(go(9, 1), go(9, 1));
  EXPECT_EQ(go(9, 1), go(9, 4));  // per-sample storage keeps threaded runs identical
  EXPECT_NE(go(9, 1), go(10, 1));
  auto samples = [&](std::uint64_t seed) {
    return run([&](auto& out, auto& err) { return cli::cmd_trace_sample(fixture("gaussian_ksc"), "h", "0.5, 1", opts(5, seed), out, err); })
        .out;
  };
  EXPECT_EQ(samples(3), samples(3));
}

TEST(TraceCommands, RecordsAreJsonLines) {
  cli::Options o = opts(500);
  o.output = "records";
  const Outcome r = run([&](auto& out, auto& err) { return cli::cmd_trace_mc(fixture("gaussian_ksc"), "h", "0, 0", o, out, err); });
  ASSERT_EQ(r.code, cli::pass);
  std::istringstream in(r.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const json j = json::parse(line);
    EXPECT_TRUE(j.contains("estimate"));
    EXPECT_TRUE(j.contains("std_error"));
    ++n;
  }
  EXPECT_EQ(n, 2u);
}

TEST(TraceCommands, BadInputsAreUsageErrors) {
  Outcome r = run([&](auto& o, auto& e) { return cli::cmd_trace_mc(fixture("diagnosis"), "workflow", "p7", opts(), o, e); });
  EXPECT_EQ(r.code, cli::usage);
  r = run([&](auto& o, auto& e) { return cli::cmd_trace_mc(fixture("diagnosis"), "nope", "p0", opts(), o, e); });
  EXPECT_EQ(r.code, cli::usage);
}

// --- learning --------------------------------------------------------------

TEST(GradCommands, FiniteFixturePassesGradCheck) {
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_grad_check(fixture("score_chain"), learn("encode_decode"), opts(20000), o, e); });
  EXPECT_EQ(r.code, cli::pass) << r.out << r.err;
}

TEST(GradCommands, PathwiseFixturePassesGradCheck) {
  cli::LearnArgs a{"chain", "point", "", "", false};
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_grad_check(fixture("pathwise_chain"), a, opts(5000), o, e); });
  EXPECT_EQ(r.code, cli::pass) << r.out << r.err;
  EXPECT_NE(r.err.find("frozen-noise"), std::string::npos);
}

TEST(GradCommands, WrongThetaDimensionIsUsageError) {
  cli::LearnArgs a{"echo", "", "[1, 2]", "", false};
  EXPECT_EQ(run([&](auto& o, auto& e) { return cli::cmd_grad(fixture("convex"), a, opts(), o, e); }).code, cli::usage);
  EXPECT_EQ(run([&](auto& o, auto& e) { return cli::cmd_grad_check(fixture("convex"), a, opts(), o, e); }).code, cli::usage);
  a.theta = "[1, 2";
  EXPECT_EQ(run([&](auto& o, auto& e) { return cli::cmd_eval_objective(fixture("convex"), a, opts(), o, e); }).code, cli::usage);
}

TEST(GradCommands, AmbiguousObjectiveNeedsAName) {
  cli::LearnArgs a{"chain", "", "", "", false};
  EXPECT_EQ(run([&](auto& o, auto& e) { return cli::cmd_eval_objective(fixture("pathwise_chain"), a, opts(), o, e); }).code, cli::usage);
}

TEST(GradCommands, InadmissiblePathwiseDiagramReportsBlockers) {
  // A pathwise vertex feeding a logistic interface: not differentiable downstream.
  const std::string file = testing::TempDir() + "/blocked.json";
  {
    std::ofstream f(file);
    f << R"({"spaces": {"X": {"real": 1, "color": "r"}, "Y": {"real": 1, "color": "r"}, "D": {"finite": 2, "color": "d"}},
      "colors": ["r", "d"], "k_morphisms": {"thr": {"src": "r", "dst": "d"}},
      "interfaces": [{"witness": "thr", "from": "Y", "to": "D", "kernel": "squash"}],
      "kernels": {"squash": {"builtin": "logistic-interface", "from": ["Y"], "to": ["D"]},
                  "keep": {"builtin": "identity", "from": ["D"], "to": ["D"]}},
      "param_diagrams": {"p": {"vertices": {"k": "keep"},
        "params": {"g": {"family": "gaussian-affine", "sigma": [1], "from": ["X"], "to": ["Y"]}},
        "wires": [{"from": "g.0", "to": "k.0", "witness": "thr"}], "inputs": ["g.0"], "outputs": ["k.0"], "colored": true}},
      "objectives": {"o": {"param_diagram": "p", "reference": [], "rho": {"builtin": "atoms", "atoms": [{"x": [0.0], "weight": 1}]},
        "f": {"builtin": "table", "values": [0, 1]}}}})";
  }
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_grad(file, learn("p"), opts(), o, e); });
  EXPECT_EQ(r.code, cli::failure);
  EXPECT_NE(r.err.find("pathwise-inadmissible"), std::string::npos) << r.err;
}

TEST(GradCommands, ExactAndSampledObjectiveAgree) {
  cli::LearnArgs a{"encode_decode", "", "", "", true};
  cli::Options o = opts(20000);
  o.output = "records";
  const Outcome ex = run([&](auto& out, auto& err) { return cli::cmd_eval_objective(fixture("score_chain"), a, o, out, err); });
  a.exact = false;
  const Outcome mc = run([&](auto& out, auto& err) { return cli::cmd_eval_objective(fixture("score_chain"), a, o, out, err); });
  const json je = json::parse(ex.out), jm = json::parse(mc.out);
  EXPECT_LE(std::abs(je["value"].get<double>() - jm["value"].get<double>()), 5.0 * jm["std_error"].get<double>());
}

TEST(TrainCommand, ExactDescentReportsEveryStep) {
  cli::LearnArgs a{"echo", "", "", "", true};
  cli::TrainArgs t{10, 0.5};
  cli::Options o = opts();
  o.output = "records";
  const Outcome r = run([&](auto& out, auto& err) { return cli::cmd_train(fixture("convex"), a, t, o, out, err); });
  ASSERT_EQ(r.code, cli::pass) << r.err;
  std::istringstream in(r.out);
  std::string line;
  double prev = 1e9;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const double v = json::parse(line)["objective"].get<double>();
    EXPECT_LT(v, prev);
    prev = v;
    ++n;
  }
  EXPECT_EQ(n, 11u);
}

// --- transitions and suites ------------------------------------------------

TEST(Push, IdentityTransitionLeavesDiagramAndThetaUnchanged) {
  const Project p = load_project(fixture("dynamic_graph"));
  const ColoredDiagram& d = p.diagram("update_step");
  const ColoredDiagram img = p.ccmp->push_diagram("id.G0", d);
  EXPECT_TRUE(same_structure(img, d));
  const Vector th = (Vector(3) << 0.1, -0.2, 0.3).finished();
  EXPECT_EQ(p.ccmp->param_map("id.G0")(th), th);
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_push(fixture("dynamic_graph"), "id.G0", "update_step", "[0.1,-0.2,0.3]", opts(), o, e); });
  EXPECT_EQ(r.code, cli::pass) << r.err;
  EXPECT_NE(r.out.find("theta   2           0.3"), std::string::npos) << r.out;
}

TEST(Push, CompositeTransitionEqualsSequentialPushes) {
  const Project p = load_project(fixture("dynamic_graph"));
  const CCMP& c = *p.ccmp;
  const ColoredDiagram& d = p.diagram("update_step");
  const ColoredDiagram once = c.push_diagram("beta.alpha", d);
  const ColoredDiagram twice = c.push_diagram("beta", c.push_diagram("alpha", d));
  EXPECT_TRUE(same_structure(once, twice));
  const Vector th = (Vector(3) << 0.4, 1.1, -0.6).finished();
  EXPECT_LE((c.param_map("beta.alpha")(th) - c.param_map("beta")(c.param_map("alpha")(th))).cwiseAbs().maxCoeff(), 0.0);

  const Project t = load_project(fixture("transport"));
  const Vector u = (Vector(2) << 0.4, 1.1).finished();
  const auto& tc = *t.ccmp;
  EXPECT_LE((tc.param_map("beta.alpha")(u) - tc.param_map("beta")(tc.param_map("alpha")(u))).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Push, UnknownTransitionIsUsageError) {
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_push(fixture("dynamic_graph"), "gamma", "update_step", "", opts(), o, e); });
  EXPECT_EQ(r.code, cli::usage);
  EXPECT_NE(r.err.find("gamma"), std::string::npos);
}

TEST(Push, DiagramMustStartAtTheTransitionSource) {
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_push(fixture("dynamic_graph"), "alpha", "propagate", "", opts(), o, e); });
  EXPECT_EQ(r.code, cli::usage);
}

TEST(Check, BundledFixturesAreAllGreen) {
  for (const auto& f : bundled()) {
    const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_check(f, opts(20000), o, e); });
    EXPECT_EQ(r.code, cli::pass) << f << "\n" << r.out << r.err;
  }
}

TEST(Check, BrokenFixturesFailTheValidationSuite) {
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_check(kData + "/cyclic.json", opts(), o, e); });
  EXPECT_EQ(r.code, cli::failure);
  EXPECT_NE(r.err.find("validation: diagram loop: acyclicity"), std::string::npos) << r.err;
}

TEST(Coherence, InterfaceFixturePasses) {
  const Outcome r = run([&](auto& o, auto& e) { return cli::cmd_coherence(fixture("interfaces"), opts(100000), o, e); });
  EXPECT_EQ(r.code, cli::pass) << r.out;
  EXPECT_NE(r.out.find("=>  f03"), std::string::npos);
}
