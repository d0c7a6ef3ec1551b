#include "smile/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace smile {

namespace {

double evaluate(const ScalarGraph& graph, std::span<const Tensor> point) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  vars.reserve(point.size());
  for (const Tensor& p : point) vars.push_back(tape.parameter(p));
  return graph(tape, vars).value().item();
}

}  // namespace

GradCheckReport grad_check(const ScalarGraph& graph, std::span<const Tensor> point,
                           const GradCheckOptions& options) {
  std::vector<Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Tensor& p : point) vars.push_back(tape.parameter(p));
    ad::Var root = graph(tape, vars);
    tape.backward(root);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Tensor* g = tape.grad(vars[i]);
      analytic.push_back(g ? *g : Tensor(point[i].shape(), 0.0));
    }
  }

  GradCheckReport report;
  std::vector<Tensor> probe(point.begin(), point.end());
  for (std::size_t p = 0; p < probe.size(); ++p) {
    for (std::size_t i = 0; i < probe[p].size(); ++i) {
      const double x0 = probe[p][i];
      probe[p][i] = x0 + options.step;
      const double up = evaluate(graph, probe);
      probe[p][i] = x0 - options.step;
      const double down = evaluate(graph, probe);
      probe[p][i] = x0;

      GradCheckEntry e;
      e.param = p;
      e.index = i;
      e.analytic = analytic[p][i];
      e.numeric = (up - down) / (2.0 * options.step);
      const double denom =
          std::max({std::abs(e.analytic), std::abs(e.numeric), options.floor});
      e.rel_error = std::abs(e.analytic - e.numeric) / denom;
      report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      report.entries.push_back(e);
    }
  }
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace smile
