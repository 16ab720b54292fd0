// Confusion matrices, the precision / recall / F1 family and reports.

#include <cmath>

#include "doctest.h"
#include "vmamba/error.hpp"
#include "vmamba/metrics.hpp"

using namespace vmamba;
using namespace vmamba::metrics;

TEST_CASE("reference (precision, recall) pairs give the reference F1") {
  struct Triple {
    double p, r, f;
  };
  // AD, CN, MCI for each of the three evaluation sets (domains A, B, C).
  const Triple triples[] = {{0.73, 0.40, 0.51}, {0.74, 0.48, 0.58}, {0.62, 0.87, 0.72},
                            {0.30, 0.10, 0.15}, {0.45, 0.22, 0.29}, {0.45, 0.77, 0.57},
                            {0.29, 0.12, 0.18}, {0.42, 0.24, 0.30}, {0.52, 0.78, 0.62}};
  for (const auto& t : triples) CHECK(std::abs(f1(t.p, t.r) - t.f) <= 0.015);
  CHECK(f1(0, 0) == 0.0);
}

TEST_CASE("confusion and one-vs-rest counts") {
  using L = ClassLabel;
  const std::vector<L> truth{L::AD, L::AD, L::MCI, L::CN, L::CN, L::CN};
  const std::vector<L> pred{L::AD, L::MCI, L::MCI, L::CN, L::AD, L::CN};
  const auto cm = confusion(pred, truth);
  CHECK(cm.counts[0][0] == 1);
  CHECK(cm.counts[0][1] == 1);
  CHECK(cm.counts[2][0] == 1);
  CHECK(cm.total() == 6);
  CHECK(cm.trace() == 4);
  const auto ad = one_vs_rest(cm, L::AD);
  CHECK(ad.tp == 1);
  CHECK(ad.fp == 1);
  CHECK(ad.fn == 1);
  CHECK(ad.tn == 3);
  CHECK_THROWS_AS(confusion(pred, std::vector<L>{L::AD}), ValidationError);
  CHECK_THROWS_AS(accuracy(ConfusionMatrix{}), ValidationError);
}

TEST_CASE("accuracy and precision arithmetic") {
  ConfusionMatrix cm;
  cm.counts[0][0] = 100;
  cm.counts[1][1] = 100;
  cm.counts[2][2] = 100;
  cm.counts[0][1] = 161;
  CHECK(accuracy(cm) == doctest::Approx(300.0 / 461.0));
  CHECK(std::abs(accuracy(cm) - 0.6508) < 5e-5);

  ConfusionMatrix p;
  p.counts[1][1] = 62;  // TP for MCI
  p.counts[0][1] = 38;  // FP
  p.counts[1][2] = 17;  // FN
  CHECK(precision_recall(p, ClassLabel::MCI).precision == doctest::Approx(0.62));
  CHECK(precision_recall(p, ClassLabel::AD).precision == 0.0);
}

TEST_CASE("micro-averaged F1 equals accuracy") {
  ConfusionMatrix cm;
  std::uint64_t v = 3;
  for (auto& row : cm.counts)
    for (auto& c : row) c = (v = v * 7 % 23);
  const auto m = compute_metrics(cm);
  CHECK(m.micro.f1 == doctest::Approx(m.accuracy).epsilon(1e-12));
  CHECK(m.micro.precision == doctest::Approx(m.accuracy).epsilon(1e-12));
  double mean_f1 = 0;
  for (const auto& c : m.per_class) mean_f1 += c.f1 / 3.0;
  CHECK(m.macro.f1 == doctest::Approx(mean_f1).epsilon(1e-12));
  CHECK(m.macro.support == cm.total());
}

TEST_CASE("report JSON emit, parse, emit is byte identical") {
  ConfusionMatrix cm;
  cm.counts = {{{7, 2, 1}, {3, 11, 0}, {1, 4, 9}}};
  const auto r = EvalReport::build("synthetic-A", cm, "0123456789abcdef", "2026-01-01T00:00:00Z");
  const std::string json = report_json(r);
  CHECK(report_json(parse_report_json(json)) == json);
  CHECK(json.find("\"dataset\"") < json.find("\"checkpoint\""));
  CHECK(json.back() == '\n');
  CHECK_THROWS_AS(parse_report_json("{"), FormatError);

  const std::string csv = report_csv(r);
  CHECK(csv.rfind("label,precision,recall,f1,support\nAD,", 0) == 0);
  CHECK(csv.find("\noverall,") != std::string::npos);
}
