#pragma once

// Oracle suites: finite-difference gradients, scan vs convolution kernel,
// ZOH closed forms, causality, metrics brute force and loss algebra. Each
// suite returns measured errors next to their tolerances so the same code
// backs the `verify` command, the unit tests and the acceptance run.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "sitsmamba/tensor.hpp"
#include "sitsmamba/zoh.hpp"

namespace sitsmamba::verify {

struct Check {
  std::string suite;
  std::string name;
  double measured = 0;
  double tolerance = 0;
  bool passed = false;
  std::string note;
};

class Report {
 public:
  /// Passes when measured <= tolerance (and is not NaN).
  void bound(const std::string& suite, const std::string& name, double measured, double tolerance,
             std::string note = {});
  /// Boolean check; measured is 0 on success, 1 on failure.
  void expect(const std::string& suite, const std::string& name, bool ok, std::string note = {});
  void merge(const Report& other);

  bool passed() const;
  const std::vector<Check>& checks() const { return checks_; }
  /// Largest measured value among checks of `suite` whose name starts with `prefix`.
  double max_measured(const std::string& suite, const std::string& prefix = {}) const;
  void print(std::ostream& os) const;

 private:
  std::vector<Check> checks_;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
};

/// Compares the tape gradient of `loss` with central differences of step h
/// for every coordinate of every leaf. The error is normwise over the
/// concatenated gradient: |g_analytic - g_numeric|_2 / max(|g_analytic|_2, |g_numeric|_2).
/// `numeric_loss`, when given, is differenced instead of `loss`; it lets a
/// gradient-stopped quantity be frozen at its value at the base point.
GradCheckResult gradcheck(const std::function<Tensor<double>()>& loss, const std::vector<Tensor<double>*>& leaves,
                          double h = 1e-5, const std::function<Tensor<double>()>& numeric_loss = {});

using ZohFn = std::function<ZohPair<double>(double a, double b, double delta)>;

Report gradient_suite(std::size_t points = 10, std::uint64_t seed = 1);
Report scan_kernel_suite(std::size_t instances = 10, std::uint64_t seed = 2);
/// `discretize` is the routine under test; tests inject broken ones.
Report zoh_suite(const ZohFn& discretize = discretize_zoh<double>);
Report causality_suite(std::uint64_t seed = 4);
Report metrics_suite(std::size_t pairs = 100, std::uint64_t seed = 5);
Report loss_suite(std::uint64_t seed = 6);

Report run_all();

}  // namespace sitsmamba::verify
