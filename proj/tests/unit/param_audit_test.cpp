#include <gtest/gtest.h>

#include "qghc/param_audit.hpp"
#include "qghc/vqa_model.hpp"

namespace qghc {
namespace {

QGHCConfig small(std::size_t n = 1, std::size_t K = 2) {
  QGHCConfig c;
  c.in_channels = c.out_channels = 16;
  c.groups = 4;
  c.dynamic_groups = n;
  c.question_dim = 7;
  c.hidden = 5;
  c.modules = K;
  return c;
}

AuditReport enumerated(Variant v, const QGHCConfig& c) {
  Registry<float> reg;
  Rng r(1);
  make_variant<float>(v, c, reg, r);
  return enumerate_params(reg, "stack");
}

void expect_mutual(Variant v, const QGHCConfig& c) {
  std::string why;
  const AuditReport a = count_analytic(c, v), e = enumerated(v, c);
  EXPECT_TRUE(same_counts(a, e, &why)) << variant_name(v) << ": " << why;
  EXPECT_EQ(a.qd_second_fc, e.qd_second_fc);
  EXPECT_EQ(a.qd_first_fc, e.qd_first_fc);
  EXPECT_EQ(a.qi_total, e.qi_total);
  EXPECT_EQ(a.total(), e.total());
}

TEST(CountAnalytic, PublishedScaleExamples) {
  QGHCConfig base = table1_base(3);
  EXPECT_EQ(count_analytic(base, Variant::hybrid).qd_second_fc, 5474304u);
  EXPECT_EQ(count_analytic(table1_base(4), Variant::hybrid).qd_second_fc, 7299072u);
  EXPECT_EQ(count_analytic(table1_base(1), Variant::group).qd_second_fc, 14598144u);
  EXPECT_EQ(count_analytic(table1_base(1), Variant::full).qd_second_fc, 116785152u);
  EXPECT_EQ(count_analytic(table1_base(1), Variant::naive).qd_second_fc, 467140608u);
  QGHCConfig g16 = base;
  g16.groups = 16;
  EXPECT_EQ(count_analytic(g16, Variant::hybrid).qd_second_fc, 1368576u);
  QGHCConfig half = base;
  half.mid_per_group = 16;
  half.out_channels = 256;
  EXPECT_EQ(count_analytic(half, Variant::hybrid).qd_second_fc, 1368576u);
}

TEST(CountAnalytic, FirstFcAndBiasesReportedSeparately) {
  const AuditReport r = count_analytic(table1_base(3), Variant::hybrid);
  EXPECT_EQ(r.qd_first_fc, 3u * 2400 * 198);
  EXPECT_EQ(r.qd_bias, 3u * (198 + 9216));
  EXPECT_EQ(r.qd_total(), r.qd_first_fc + r.qd_second_fc);
  EXPECT_EQ(r.rows_sum(), r.total());
}

TEST(EnumerateParams, EqualsAnalyticForEveryVariant) {
  for (Variant v : {Variant::hybrid, Variant::naive, Variant::full, Variant::group})
    for (std::size_t n : {0u, 1u, 2u, 4u}) {
      if (v == Variant::naive && n != 1) continue;
      QGHCConfig c = small(n);
      expect_mutual(v, c);
      c.dynamic_group_indices.clear();
      c.index_seed = 9;
      expect_mutual(v, c);
    }
  QGHCConfig rect = small(1, 3);
  rect.out_channels = 8;
  rect.mid_per_group = 3;
  expect_mutual(Variant::hybrid, rect);
  expect_mutual(Variant::full, rect);
}

TEST(EnumerateParams, EqualsAnalyticAtDefaults) {
  expect_mutual(Variant::hybrid, table1_base(3));
  expect_mutual(Variant::group, table1_base(1));
  expect_mutual(Variant::hybrid, toy_qghc());
}

TEST(EnumerateParams, RowsCoverWholeModelOnce) {
  for (Fusion f : {Fusion::qghc, Fusion::qghc_concat, Fusion::concat_baseline, Fusion::blind}) {
    ModelConfig c;
    c.fusion = f;
    c.head = Head::attention;
    VqaModel m(c, 1);
    const AuditReport r = enumerate_params(m.registry(), "model");
    EXPECT_EQ(r.rows_sum(), m.registry().parameter_count());
    EXPECT_EQ(r.total(), m.registry().parameter_count());
    EXPECT_EQ(r.rows.size(), m.registry().parameters().size());
    if (!m.config().uses_stack()) EXPECT_EQ(r.qd_total() + r.qd_bias, 0u) << fusion_name(f);
  }
}

TEST(EnumerateParams, UntaggedParameterIsAnError) {
  Registry<float> reg;
  reg.add_parameter("w", Tensor<float>({2, 2}), Role::qi_free);
  reg.add_parameter("mystery", Tensor<float>({3}), Role::untagged);
  EXPECT_THROW(enumerate_params(reg, "x"), ConfigError);
}

TEST(CountAnalytic, QdMonotoneInEachKnob) {
  const QGHCConfig base = table1_base(2);
  const std::size_t qd = count_analytic(base, Variant::hybrid).qd_total();
  auto bigger = [&](auto edit) {
    QGHCConfig c = base;
    edit(c);
    EXPECT_GT(count_analytic(c, Variant::hybrid).qd_total(), qd);
  };
  bigger([](QGHCConfig& c) { c.dynamic_groups = 2; });
  bigger([](QGHCConfig& c) { c.mid_per_group = 40; });
  bigger([](QGHCConfig& c) { c.hidden = 199; });
  bigger([](QGHCConfig& c) { c.modules = 3; });
}

TEST(CountAnalytic, VariantOrderingAtPublishedScale) {
  const QGHCConfig c = table1_base(1);
  const auto h = count_analytic(c, Variant::hybrid).qd_second_fc;
  const auto g = count_analytic(c, Variant::group).qd_second_fc;
  const auto f = count_analytic(c, Variant::full).qd_second_fc;
  const auto n = count_analytic(c, Variant::naive).qd_second_fc;
  EXPECT_LT(h, g);
  EXPECT_LT(g, f);
  EXPECT_LT(f, n);
}

TEST(CompareTable1, GatedRowsWithinTolerance) {
  const auto results = compare_table1();
  EXPECT_EQ(results.size(), 11u);
  for (const auto& r : results) {
    if (r.row.gated) EXPECT_TRUE(r.within) << r.row.label << " " << r.deviation;
    else EXPECT_FALSE(r.row.note.empty());
  }
  // 3x3x256x256 kernel predicted through h hidden units: "117 million".
  EXPECT_NEAR(count_analytic(table1_base(1), Variant::full).qd_second_fc / 117e6, 1.0, 0.005);
  const std::string text = format_table1(results);
  EXPECT_NE(text.find("unreconciled"), std::string::npos);
  EXPECT_EQ(text.find("FAIL"), std::string::npos);
}

TEST(FormatReport, CsvHasOneLinePerRow) {
  const AuditReport r = count_analytic(small(), Variant::hybrid);
  const std::string csv = report_csv(r);
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), r.rows.size() + 1);
  EXPECT_EQ(csv.rfind("name,shape,count,role,kind\n", 0), 0u);
  EXPECT_NE(format_report(r).find("QD second FC (headline)"), std::string::npos);
}

}  // namespace
}  // namespace qghc
