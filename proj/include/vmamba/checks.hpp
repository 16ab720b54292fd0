#pragma once
// Self-checks shipped with the library: analytic-vs-finite-difference
// gradients for every differentiable op and model component, and randomised
// agreement between the sequential scan, the parallel scan and the closed-form
// oracle.

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace vmamba::checks {

enum class GradKind { op, component, model };
std::string_view to_string(GradKind kind);

struct GradCase {
  std::string name;
  GradKind kind;
  double tolerance;
  // Returns the worst relative error over the case's inputs.
  std::function<double()> run;
};

// Every op name the library can record on a Graph.
std::vector<std::string_view> differentiable_op_names();

// One case per differentiable op, per model component, and the tiny model
// end to end (unless `include_model` is false).
std::vector<GradCase> grad_cases(bool include_model = true);

struct GradRow {
  std::string name;
  GradKind kind;
  double rel_error;
  double tolerance;
  bool pass;
};

std::vector<GradRow> run_grad_checks(const std::vector<GradCase>& cases,
                                     const std::function<void(const GradRow&)>& on_row = {});
std::string format_grad_table(const std::vector<GradRow>& rows);

struct ScanCheckConfig {
  std::size_t trials = 100;
  std::size_t max_length = 512;
  std::size_t max_state = 16;
  std::size_t max_channels = 4;
  std::uint64_t seed = 0;
  bool single_precision = false;
  // Absolute tolerance; defaults to 1e-10 (double) or 1e-4 (single) when zero.
  double tolerance = 0.0;
  bool with_oracle = true;
};

struct ScanFailure {
  std::uint64_t seed;
  std::size_t length;
  std::size_t state;
  double deviation;
  std::string what;
};

struct ScanCheckResult {
  std::size_t trials = 0;
  double tolerance = 0.0;
  double max_parallel_dev = 0.0;
  double max_oracle_dev = 0.0;
  std::vector<ScanFailure> failures;
  bool passed() const { return failures.empty(); }
};

// Trial i uses seed config.seed + i; the first two trials have L = 1.
ScanCheckResult run_scan_check(const ScanCheckConfig& config);

}  // namespace vmamba::checks
