// polyk: validate, evaluate and train diagrams of Markov kernels described in JSON project files.

#include <iostream>

#include "CLI11.hpp"
#include "polyk/cli.hpp"

namespace cli = polyk::cli;

int main(int argc, char** argv) {
  CLI::App app{"Diagrams of Markov kernels: exact and sampled traces, colored interfaces, state transitions, gradients"};
  app.require_subcommand(1);

  cli::Options opt;
  bool sequential = false;
  auto common = [&](CLI::App* s, bool sampling) {
    s->add_option("--output", opt.output, "table or records (JSON lines)")->check(CLI::IsMember({"table", "records"}));
    if (!sampling) return;
    s->add_option("--seed", opt.seed, "random seed");
    s->add_option("--samples", opt.samples, "Monte Carlo sample count");
    s->add_option("--threads", opt.threads, "worker threads (results do not depend on this)")->check(CLI::PositiveNumber);
    s->add_flag("--sequential", sequential, "force a single thread");
  };

  std::string file, diagram, input, transition, theta;
  cli::LearnArgs la;
  cli::TrainArgs ta;

  auto* validate = app.add_subcommand("validate", "check every diagram, color system and index category in a project");
  validate->add_option("project", file)->required();
  common(validate, false);

  auto trace_cmd = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("project", file)->required();
    s->add_option("diagram", diagram)->required();
    s->add_option("--input", input, "external input, e.g. \"p2, 0.5\"");
    common(s, true);
    return s;
  };
  auto* trace_exact = trace_cmd("trace-exact", "exact output distribution of a finite diagram");
  auto* trace_sample = trace_cmd("trace-sample", "draw output samples");
  auto* trace_mc = trace_cmd("trace-mc", "Monte Carlo output statistics with standard errors");

  auto learn_cmd = [&](const char* name, const char* help, bool exact_flag) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("project", file)->required();
    s->add_option("param_diagram", la.param_diagram)->required();
    s->add_option("--objective", la.objective, "objective name (needed when several are declared)");
    auto* t = s->add_option("--theta", la.theta, "parameter vector as a JSON list");
    s->add_option("--theta-file", la.theta_file, "file holding the parameter vector")->excludes(t);
    if (exact_flag) s->add_flag("--exact", la.exact, "enumerate instead of sampling");
    common(s, true);
    return s;
  };
  auto* eval = learn_cmd("eval-objective", "expected objective at theta", true);
  auto* grad = learn_cmd("grad", "reverse-mode gradient estimate", true);
  auto* grad_check = learn_cmd("grad-check", "reverse-mode gradient against independent references", false);
  auto* train = learn_cmd("train", "stochastic gradient descent", true);
  train->add_option("--steps", ta.steps, "number of steps");
  train->add_option("--step-size", ta.step_size, "learning rate");

  auto* coherence = app.add_subcommand("coherence-check", "check that interface kernels compose along composable paths");
  coherence->add_option("project", file)->required();
  common(coherence, true);

  auto* push = app.add_subcommand("push", "transport a diagram and parameters along a state transition");
  push->add_option("project", file)->required();
  push->add_option("transition", transition)->required();
  push->add_option("diagram", diagram)->required();
  push->add_option("--theta", theta, "parameter vector of the source state");
  common(push, false);

  auto* check = app.add_subcommand("check", "run every property suite and print a scoreboard");
  check->add_option("project", file)->required();
  common(check, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::usage;
  }
  if (sequential) opt.threads = 1;

  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
  if (*validate) return cli::cmd_validate(file, opt, out, err);
  if (*trace_exact) return cli::cmd_trace_exact(file, diagram, input, opt, out, err);
  if (*trace_sample) return cli::cmd_trace_sample(file, diagram, input, opt, out, err);
  if (*trace_mc) return cli::cmd_trace_mc(file, diagram, input, opt, out, err);
  if (*eval) return cli::cmd_eval_objective(file, la, opt, out, err);
  if (*grad) return cli::cmd_grad(file, la, opt, out, err);
  if (*grad_check) return cli::cmd_grad_check(file, la, opt, out, err);
  if (*train) return cli::cmd_train(file, la, ta, opt, out, err);
  if (*coherence) return cli::cmd_coherence(file, opt, out, err);
  if (*push) return cli::cmd_push(file, transition, diagram, theta, opt, out, err);
  if (*check) return cli::cmd_check(file, opt, out, err);
  return cli::usage;
}
