#pragma once

#include <array>
#include <cctype>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "malnet/error.hpp"
#include "malnet/data.hpp"
#include "malnet/model.hpp"
#include "malnet/train.hpp"

namespace malnet {

struct ConfusionMatrix {
  // counts[actual][predicted]
  std::array<std::array<std::size_t, 2>, 2> counts{};
  std::vector<std::string> class_names = default_class_names();

  std::size_t total() const {
    return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1];
  }
  std::size_t trace() const { return counts[0][0] + counts[1][1]; }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(std::span<const int> labels, std::span<const int> preds) {
  if (labels.size() != preds.size())
    throw ArgumentError("confusion: " + std::to_string(labels.size()) + " labels vs " +
                        std::to_string(preds.size()) + " predictions");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int a = labels[i], p = preds[i];
    if (a < 0 || a > 1 || p < 0 || p > 1)
      throw ArgumentError("confusion: class index out of range at position " + std::to_string(i));
    ++cm.counts[static_cast<std::size_t>(a)][static_cast<std::size_t>(p)];
  }
  return cm;
}

struct ClassMetrics {
  std::string name;
  double precision = 0, recall = 0, f1 = 0;
  std::size_t support = 0;
  bool degenerate = false;  // a zero denominator forced some metric to 0
};

struct ClassificationReport {
  std::vector<ClassMetrics> classes;
  double accuracy = 0;
  ConfusionMatrix confusion;
};

/// precision_k = cm[k][k] / column_k, recall_k = cm[k][k] / row_k, f1 their
/// harmonic mean, accuracy = trace / total. A zero denominator yields 0 and
/// flags the class as degenerate.
inline ClassificationReport report(const ConfusionMatrix& cm) {
  const std::size_t total = cm.total();
  if (total == 0) throw ArgumentError("report: confusion matrix is empty");
  ClassificationReport r;
  r.confusion = cm;
  for (std::size_t k = 0; k < 2; ++k) {
    ClassMetrics m;
    m.name = cm.class_names.at(k);
    const std::size_t tp = cm.counts[k][k];
    const std::size_t row = cm.counts[k][0] + cm.counts[k][1];
    const std::size_t col = cm.counts[0][k] + cm.counts[1][k];
    m.support = row;
    if (col > 0) m.precision = static_cast<double>(tp) / static_cast<double>(col);
    else m.degenerate = true;
    if (row > 0) m.recall = static_cast<double>(tp) / static_cast<double>(row);
    else m.degenerate = true;
    if (m.precision + m.recall > 0) m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
    else m.degenerate = true;
    r.classes.push_back(std::move(m));
  }
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  return r;
}

inline nlohmann::json to_json(const ClassificationReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.classes)
    classes.push_back({{"name", c.name},
                       {"precision", c.precision},
                       {"recall", c.recall},
                       {"f1", c.f1},
                       {"support", c.support}});
  const auto& k = r.confusion.counts;
  return {{"classes", classes},
          {"accuracy", r.accuracy},
          {"confusion", {{k[0][0], k[0][1]}, {k[1][0], k[1][1]}}}};
}

/// Fixed-width table: one row per class, then the accuracy line.
inline std::string render_table(const ClassificationReport& r) {
  auto title = [](std::string s) {
    if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
  };
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-13s %9s %9s %9s %9s\n", "Class", "Precision", "Recall", "F1-Score",
                "Support");
  out += line;
  for (const auto& c : r.classes) {
    std::snprintf(line, sizeof line, "%-13s %9.3f %9.3f %9.3f %9zu\n", title(c.name).c_str(), c.precision,
                  c.recall, c.f1, c.support);
    out += line;
  }
  std::snprintf(line, sizeof line, "%-13s %9.3f\n", "Accuracy", r.accuracy);
  out += line;
  return out;
}

/// Infer-mode predictions over a dataset, in index order.
template <typename T>
std::vector<int> predict_dataset(const ModelGraph<T>& model, const DatasetIndex& index, std::size_t batch_size,
                                 ImageLoader<T> loader = {}) {
  if (!loader) loader = file_loader<T>(model.config().input_size);
  BatchStream<T> stream(index, batch_size, false, 0, std::nullopt, loader);
  std::vector<int> preds(index.size());
  Batch<T> batch;
  while (stream.next(batch)) {
    const auto rows = argmax_rows(model.predict_proba(batch.images));
    for (std::size_t i = 0; i < rows.size(); ++i) preds[batch.indices[i]] = rows[i];
  }
  return preds;
}

template <typename T>
ClassificationReport evaluate(const ModelGraph<T>& model, const DatasetIndex& index, std::size_t batch_size,
                              ImageLoader<T> loader = {}) {
  const auto preds = predict_dataset(model, index, batch_size, std::move(loader));
  const auto labels = index.labels();
  ConfusionMatrix cm = confusion(labels, preds);
  cm.class_names = index.class_names;
  return report(cm);
}

}  // namespace malnet
