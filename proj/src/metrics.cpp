#include "vmamba/metrics.hpp"

#include <cstdio>

#include "vmamba/error.hpp"

namespace vmamba::metrics {

using volume::index_of;

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (const auto& row : counts)
    for (auto c : row) n += c;
  return n;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < kNumClasses; ++i) n += counts[i][i];
  return n;
}

ConfusionMatrix confusion(std::span<const ClassLabel> predictions, std::span<const ClassLabel> truths) {
  if (predictions.size() != truths.size())
    throw ValidationError("confusion: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(truths.size()) + " labels");
  if (predictions.empty()) throw ValidationError("confusion: no samples");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < predictions.size(); ++i) ++cm.counts[index_of(truths[i])][index_of(predictions[i])];
  return cm;
}

OneVsRest one_vs_rest(const ConfusionMatrix& cm, ClassLabel label) {
  const std::size_t k = index_of(label);
  OneVsRest r;
  r.tp = cm.counts[k][k];
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    if (i == k) continue;
    r.fp += cm.counts[i][k];
    r.fn += cm.counts[k][i];
  }
  r.tn = cm.total() - r.tp - r.fp - r.fn;
  return r;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw ValidationError("accuracy: empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(n);
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

PrecisionRecall precision_recall(const ConfusionMatrix& cm, ClassLabel label) {
  const auto r = one_vs_rest(cm, label);
  return {ratio(r.tp, r.tp + r.fp), ratio(r.tp, r.tp + r.fn)};
}

double f1(double precision, double recall) {
  const double sum = precision + recall;
  return sum == 0.0 ? 0.0 : 2.0 * precision * recall / sum;
}

ClassMetrics compute_metrics(const ConfusionMatrix& cm) {
  ClassMetrics m;
  m.accuracy = accuracy(cm);
  OneVsRest pooled;
  for (auto label : volume::kAllLabels) {
    const auto k = index_of(label);
    const auto pr = precision_recall(cm, label);
    auto& s = m.per_class[k];
    s.precision = pr.precision;
    s.recall = pr.recall;
    s.f1 = f1(pr.precision, pr.recall);
    for (auto c : cm.counts[k]) s.support += c;
    m.macro.precision += s.precision / kNumClasses;
    m.macro.recall += s.recall / kNumClasses;
    m.macro.f1 += s.f1 / kNumClasses;
    const auto r = one_vs_rest(cm, label);
    pooled.tp += r.tp;
    pooled.fp += r.fp;
    pooled.fn += r.fn;
  }
  m.macro.support = m.micro.support = cm.total();
  m.micro.precision = ratio(pooled.tp, pooled.tp + pooled.fp);
  m.micro.recall = ratio(pooled.tp, pooled.tp + pooled.fn);
  m.micro.f1 = f1(m.micro.precision, m.micro.recall);
  return m;
}

EvalReport EvalReport::build(std::string dataset, const ConfusionMatrix& cm, std::string checkpoint_id,
                             std::string timestamp) {
  return {std::move(dataset), cm, compute_metrics(cm), std::move(checkpoint_id), std::move(timestamp)};
}

// ---------------------------------------------------------------- reports --

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json scores_json(const ClassScores& s) {
  return ordered_json{{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}};
}

ClassScores scores_from(const ordered_json& j) {
  return {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>(),
          j.at("support").get<std::uint64_t>()};
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string report_json(const EvalReport& r) {
  ordered_json doc;
  doc["dataset"] = r.dataset;
  doc["checkpoint"] = r.checkpoint_id;
  doc["timestamp"] = r.timestamp;
  doc["labels"] = ordered_json::array({"AD", "MCI", "CN"});
  doc["confusion"] = r.confusion.counts;
  ordered_json per_class = ordered_json::array();
  for (auto label : volume::kAllLabels) {
    ordered_json row{{"label", volume::to_string(label)}};
    row.update(scores_json(r.metrics.per_class[index_of(label)]));
    per_class.push_back(std::move(row));
  }
  doc["per_class"] = std::move(per_class);
  doc["accuracy"] = r.metrics.accuracy;
  doc["macro"] = scores_json(r.metrics.macro);
  doc["micro"] = scores_json(r.metrics.micro);
  return doc.dump(2) + "\n";
}

EvalReport parse_report_json(std::string_view text) {
  try {
    const auto doc = ordered_json::parse(text);
    EvalReport r;
    r.dataset = doc.at("dataset").get<std::string>();
    r.checkpoint_id = doc.at("checkpoint").get<std::string>();
    r.timestamp = doc.at("timestamp").get<std::string>();
    r.confusion.counts = doc.at("confusion").get<decltype(r.confusion.counts)>();
    const auto& per_class = doc.at("per_class");
    if (per_class.size() != kNumClasses) throw FormatError("report: per_class must list AD, MCI and CN");
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      if (per_class[k].at("label").get<std::string>() != volume::to_string(volume::kAllLabels[k]))
        throw FormatError("report: per_class rows out of order");
      r.metrics.per_class[k] = scores_from(per_class[k]);
    }
    r.metrics.accuracy = doc.at("accuracy").get<double>();
    r.metrics.macro = scores_from(doc.at("macro"));
    r.metrics.micro = scores_from(doc.at("micro"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

std::string report_csv(const EvalReport& r) {
  std::string out = "label,precision,recall,f1,support\n";
  auto row = [&](const std::string& label, const ClassScores& s) {
    out += label + ',' + number(s.precision) + ',' + number(s.recall) + ',' + number(s.f1) + ',' +
           std::to_string(s.support) + '\n';
  };
  for (auto label : volume::kAllLabels) row(volume::to_string(label), r.metrics.per_class[index_of(label)]);
  row("overall", r.metrics.micro);
  return out;
}

}  // namespace vmamba::metrics
