#pragma once
// Confusion matrices and the accuracy / precision / recall / F1 family, with
// JSON and CSV evaluation reports.

#include <array>
#include <cstdint>
#include <span>
#include <string>

#include "json.hpp"
#include "vmamba/volume.hpp"

namespace vmamba::metrics {

using volume::ClassLabel;
using volume::kNumClasses;

// counts[true][predicted], classes ordered AD, MCI, CN.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

  std::uint64_t total() const;
  std::uint64_t trace() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

// One-vs-rest counts for one class.
struct OneVsRest {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

ConfusionMatrix confusion(std::span<const ClassLabel> predictions, std::span<const ClassLabel> truths);
OneVsRest one_vs_rest(const ConfusionMatrix& cm, ClassLabel label);

// trace / total; throws ValidationError for an empty matrix.
double accuracy(const ConfusionMatrix& cm);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

// Zero when the denominator is zero.
PrecisionRecall precision_recall(const ConfusionMatrix& cm, ClassLabel label);
double f1(double precision, double recall);

struct ClassScores {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::uint64_t support = 0;
};

struct ClassMetrics {
  std::array<ClassScores, kNumClasses> per_class{};
  double accuracy = 0.0;
  ClassScores macro;  // unweighted means; support = total
  ClassScores micro;  // pooled one-vs-rest counts; support = total
};

ClassMetrics compute_metrics(const ConfusionMatrix& cm);

struct EvalReport {
  std::string dataset;
  ConfusionMatrix confusion;
  ClassMetrics metrics;
  std::string checkpoint_id;
  std::string timestamp;  // ISO-8601 UTC

  static EvalReport build(std::string dataset, const ConfusionMatrix& cm, std::string checkpoint_id,
                          std::string timestamp);
};

// Fixed key order; numbers are printed with round-trip precision.
std::string report_json(const EvalReport& r);
EvalReport parse_report_json(std::string_view text);
// label,precision,recall,f1,support with rows AD, MCI, CN, overall (micro).
std::string report_csv(const EvalReport& r);

}  // namespace vmamba::metrics
