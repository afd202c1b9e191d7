#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "malnet/malnet.hpp"
#include "support/fixtures.hpp"

using namespace malnet;
using namespace malnet::testing;

namespace {

using Counts = std::array<std::array<std::size_t, 2>, 2>;

ConfusionMatrix matrix(Counts c) {
  ConfusionMatrix cm;
  cm.counts = c;
  return cm;
}

ConfusionMatrix random_matrix(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, 50);
  ConfusionMatrix cm;
  do {
    for (auto& row : cm.counts)
      for (auto& v : row) v = d(rng);
  } while (cm.total() == 0);
  return cm;
}

std::string fmt3(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3f", v);
  return b;
}

std::vector<std::vector<std::string>> table_tokens(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    std::istringstream ws(line);
    std::vector<std::string> row;
    for (std::string t; ws >> t;) row.push_back(t);
    rows.push_back(row);
  }
  return rows;
}

// Reference per-class report used as the rendering fixture.
const std::vector<std::vector<std::string>> kReferenceTable{
    {"Class", "Precision", "Recall", "F1-Score", "Support"},
    {"Parasitized", "0.986", "0.972", "0.979", "2808"},
    {"Uninfected", "0.971", "0.985", "0.978", "2705"},
    {"Accuracy", "0.978"}};

// Every (TP, TN) with the reference supports whose rounded report matches.
std::vector<ConfusionMatrix> invert_reference_table() {
  std::vector<ConfusionMatrix> hits;
  const std::size_t rp = 2808, ru = 2705;
  for (std::size_t tp = 0; tp <= rp; ++tp) {
    if (fmt3(static_cast<double>(tp) / rp) != "0.972") continue;
    for (std::size_t tn = 0; tn <= ru; ++tn) {
      if (fmt3(static_cast<double>(tn) / ru) != "0.985") continue;
      auto cm = matrix({{{tp, rp - tp}, {ru - tn, tn}}});
      cm.class_names = {"parasitized", "uninfected"};
      const auto r = report(cm);
      if (table_tokens(render_table(r)) == kReferenceTable) hits.push_back(cm);
    }
  }
  return hits;
}

}  // namespace

TEST(Confusion, Examples) {
  const std::vector<int> a{0, 1, 0};
  EXPECT_EQ(confusion(a, a).counts, (Counts{{{2, 0}, {0, 1}}}));
  const std::vector<int> l{0, 0, 1, 1}, p{1, 1, 0, 0};
  EXPECT_EQ(confusion(l, p).counts, (Counts{{{0, 2}, {2, 0}}}));
}

TEST(Confusion, Errors) {
  const std::vector<int> a{0, 1}, b{0}, c{0, 2};
  EXPECT_THROW(confusion(a, b), ArgumentError);
  EXPECT_THROW(confusion(a, c), ArgumentError);
  EXPECT_EQ(confusion(std::vector<int>{}, std::vector<int>{}).total(), 0u);
}

TEST(Confusion, MatchesBruteForceCount) {
  std::mt19937_64 rng(8);
  std::bernoulli_distribution coin(0.4);
  std::vector<int> l(1000), p(1000);
  for (std::size_t i = 0; i < l.size(); ++i) {
    l[i] = coin(rng);
    p[i] = coin(rng);
  }
  const auto cm = confusion(l, p);
  for (int a = 0; a < 2; ++a)
    for (int q = 0; q < 2; ++q) {
      std::size_t n = 0;
      for (std::size_t i = 0; i < l.size(); ++i) n += l[i] == a && p[i] == q;
      EXPECT_EQ(cm.counts[a][q], n);
    }
  EXPECT_EQ(cm.total(), 1000u);
}

TEST(Confusion, JointPermutationInvariant) {
  std::mt19937_64 rng(9);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::pair<int, int>> pairs(200);
  for (auto& [a, b] : pairs) a = coin(rng), b = coin(rng);
  auto cm_of = [](const std::vector<std::pair<int, int>>& ps) {
    std::vector<int> l, p;
    for (auto [a, b] : ps) l.push_back(a), p.push_back(b);
    return confusion(l, p);
  };
  const auto base = cm_of(pairs);
  for (int t = 0; t < 20; ++t) {
    std::shuffle(pairs.begin(), pairs.end(), rng);
    EXPECT_EQ(cm_of(pairs), base);
  }
}

TEST(Confusion, ClassSwapTransposesAboutAntiDiagonal) {
  std::mt19937_64 rng(10);
  std::bernoulli_distribution coin(0.3);
  std::vector<int> l(300), p(300), ls(300), ps(300);
  for (std::size_t i = 0; i < l.size(); ++i) {
    l[i] = coin(rng), p[i] = coin(rng);
    ls[i] = 1 - l[i], ps[i] = 1 - p[i];
  }
  const auto cm = confusion(l, p), sw = confusion(ls, ps);
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t q = 0; q < 2; ++q) EXPECT_EQ(sw.counts[a][q], cm.counts[1 - a][1 - q]);
  const auto r = report(cm), rs = report(sw);
  EXPECT_EQ(r.accuracy, rs.accuracy);
  EXPECT_EQ(r.classes[0].precision, rs.classes[1].precision);
  EXPECT_EQ(r.classes[0].recall, rs.classes[1].recall);
  EXPECT_EQ(r.classes[1].f1, rs.classes[0].f1);
  EXPECT_EQ(r.classes[1].support, rs.classes[0].support);
}

TEST(Report, SymmetricHandExample) {
  const auto r = report(matrix({{{9, 1}, {1, 9}}}));
  for (const auto& c : r.classes) {
    EXPECT_NEAR(c.precision, 0.9, 1e-9);
    EXPECT_NEAR(c.recall, 0.9, 1e-9);
    EXPECT_NEAR(c.f1, 0.9, 1e-9);
    EXPECT_EQ(c.support, 10u);
    EXPECT_FALSE(c.degenerate);
  }
  EXPECT_NEAR(r.accuracy, 0.9, 1e-9);
}

TEST(Report, PerfectDiagonal) {
  const auto r = report(matrix({{{7, 0}, {0, 3}}}));
  for (const auto& c : r.classes) {
    EXPECT_EQ(c.precision, 1.0);
    EXPECT_EQ(c.recall, 1.0);
    EXPECT_EQ(c.f1, 1.0);
  }
  EXPECT_EQ(r.accuracy, 1.0);
}

TEST(Report, DegenerateClassesAreZeroAndFlagged) {
  // class 1 is never present nor predicted
  const auto r = report(matrix({{{5, 0}, {0, 0}}}));
  EXPECT_FALSE(r.classes[0].degenerate);
  EXPECT_TRUE(r.classes[1].degenerate);
  EXPECT_EQ(r.classes[1].precision, 0.0);
  EXPECT_EQ(r.classes[1].recall, 0.0);
  EXPECT_EQ(r.classes[1].f1, 0.0);
  // class 1 predicted but never correct
  const auto q = report(matrix({{{2, 3}, {0, 0}}}));
  EXPECT_TRUE(q.classes[1].degenerate);
  EXPECT_EQ(q.classes[1].precision, 0.0);
  EXPECT_EQ(q.accuracy, 0.4);
}

TEST(Report, EmptyMatrixThrows) { EXPECT_THROW(report(ConfusionMatrix{}), ArgumentError); }

TEST(Report, InvariantsOnRandomMatrices) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 1000; ++t) {
    const auto cm = random_matrix(rng);
    const auto r = report(cm);
    double weighted_recall = 0;
    std::size_t support = 0;
    for (const auto& c : r.classes) {
      for (double m : {c.precision, c.recall, c.f1}) {
        ASSERT_GE(m, 0.0);
        ASSERT_LE(m, 1.0);
      }
      if (c.precision + c.recall > 0)
        ASSERT_NEAR(c.f1, 2 * c.precision * c.recall / (c.precision + c.recall), 1e-9);
      weighted_recall += c.recall * static_cast<double>(c.support);
      support += c.support;
    }
    ASSERT_EQ(support, cm.total());
    ASSERT_EQ(r.accuracy, static_cast<double>(cm.trace()) / static_cast<double>(cm.total()));
    ASSERT_NEAR(r.accuracy, weighted_recall / static_cast<double>(support), 1e-12);
  }
}

TEST(Report, ReferenceCountsExistAndRoundTrip) {
  const auto hits = invert_reference_table();
  ASSERT_FALSE(hits.empty());
  bool found = false;
  for (const auto& cm : hits) {
    EXPECT_EQ(cm.counts[0][0] + cm.counts[0][1], 2808u);
    EXPECT_EQ(cm.counts[1][0] + cm.counts[1][1], 2705u);
    EXPECT_EQ(cm.total(), 5513u);
    found |= cm.counts == Counts{{{2729, 79}, {40, 2665}}};
  }
  EXPECT_TRUE(found);
}

TEST(Report, RenderTableLayout) {
  auto cm = matrix({{{2729, 79}, {40, 2665}}});
  const std::string text = render_table(report(cm));
  EXPECT_EQ(table_tokens(text), kReferenceTable);
  EXPECT_EQ(text,
            "Class         Precision    Recall  F1-Score   Support\n"
            "Parasitized       0.986     0.972     0.979      2808\n"
            "Uninfected        0.971     0.985     0.978      2705\n"
            "Accuracy          0.978\n");
}

TEST(Report, JsonShape) {
  const auto r = report(matrix({{{9, 1}, {2, 8}}}));
  const auto j = to_json(r);
  ASSERT_TRUE(j.is_object());
  ASSERT_EQ(j.size(), 3u);
  ASSERT_EQ(j["classes"].size(), 2u);
  EXPECT_EQ(j["classes"][0]["name"], "parasitized");
  EXPECT_EQ(j["classes"][1]["support"], 10);
  EXPECT_DOUBLE_EQ(j["classes"][0]["recall"].get<double>(), 0.9);
  EXPECT_DOUBLE_EQ(j["accuracy"].get<double>(), 0.85);
  EXPECT_EQ(j["confusion"], nlohmann::json::parse("[[9,1],[2,8]]"));
  for (const auto& c : j["classes"])
    for (const char* k : {"name", "precision", "recall", "f1", "support"}) EXPECT_TRUE(c.contains(k)) << k;
}

TEST(Evaluate, SaturatedModelIsPerfectAndRepeatable) {
  DatasetIndex index;
  std::map<std::string, Tensorf> images;
  for (int i = 0; i < 5; ++i) {
    const std::string path = "mem/" + std::to_string(i);
    images.emplace(path, preprocess_image<float>(synthetic_png(0, 40, i), 32));
    index.records.push_back({path, 0});
  }
  auto m = build_model<float>(2, toy_config());
  m.parameters().find("head.output.weight")->value.fill(0.0f);
  m.parameters().find("head.output.bias")->value[0] = 10.0f;
  ImageLoader<float> loader = [&](const ImageRecord& r) { return images.at(r.path.string()); };
  const auto r = evaluate<float>(m, index, 2, loader);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.confusion.counts[0][0], 5u);
  EXPECT_EQ(to_json(r).dump(), to_json(evaluate<float>(m, index, 3, loader)).dump());
}
