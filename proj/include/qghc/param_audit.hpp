#pragma once

// Question-dependent (QD) vs question-independent (QI) parameter accounting.
//
// The headline QD figure is the second predictor FC (h x predicted kernel
// elements): it is the only reading under which a single hidden width
// reproduces the published ablation counts. The first FC (d_q x h) is
// reported on its own line. FC biases are tallied separately from both
// headline totals.

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qghc/qghc_module.hpp"

namespace qghc {

enum class ParamKind { qd_second_fc, qd_first_fc, qd_bias, qi_weight, qi_bias };

inline const char* param_kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::qd_second_fc: return "qd_second_fc";
    case ParamKind::qd_first_fc: return "qd_first_fc";
    case ParamKind::qd_bias: return "qd_bias";
    case ParamKind::qi_weight: return "qi";
    case ParamKind::qi_bias: return "qi_bias";
  }
  return "?";
}

struct AuditRow {
  std::string name;
  Shape shape;
  std::size_t count = 0;
  Role role = Role::qi_free;
  ParamKind kind = ParamKind::qi_weight;
};

struct AuditReport {
  std::string label;
  std::vector<AuditRow> rows;
  std::size_t qd_second_fc = 0;
  std::size_t qd_first_fc = 0;
  std::size_t qd_bias = 0;
  std::size_t qi_total = 0;
  std::size_t qi_bias = 0;
  std::vector<std::pair<std::string, std::string>> config;

  std::size_t qd_total() const { return qd_second_fc + qd_first_fc; }
  std::size_t total() const { return qd_second_fc + qd_first_fc + qd_bias + qi_total + qi_bias; }

  void add(std::string name, Shape shape, Role role) {
    if (role == Role::untagged) throw ConfigError("audit: parameter '" + name + "' has no QD/QI role");
    AuditRow r{std::move(name), std::move(shape), 0, role, ParamKind::qi_weight};
    r.count = shape_numel(r.shape);
    const bool bias = r.name.size() >= 5 && r.name.compare(r.name.size() - 5, 5, ".bias") == 0;
    if (role == Role::qd_predictor) {
      if (bias) r.kind = ParamKind::qd_bias;
      else if (r.name.find("fc1.weight") != std::string::npos) r.kind = ParamKind::qd_first_fc;
      else r.kind = ParamKind::qd_second_fc;
    } else {
      r.kind = bias ? ParamKind::qi_bias : ParamKind::qi_weight;
    }
    switch (r.kind) {
      case ParamKind::qd_second_fc: qd_second_fc += r.count; break;
      case ParamKind::qd_first_fc: qd_first_fc += r.count; break;
      case ParamKind::qd_bias: qd_bias += r.count; break;
      case ParamKind::qi_weight: qi_total += r.count; break;
      case ParamKind::qi_bias: qi_bias += r.count; break;
    }
    rows.push_back(std::move(r));
  }

  std::size_t rows_sum() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.count;
    return n;
  }
};

inline std::vector<std::pair<std::string, std::string>> config_echo(const QGHCConfig& c, Variant v) {
  return {{"variant", variant_name(v)},
          {"in_channels", std::to_string(c.in_channels)},
          {"out_channels", std::to_string(c.out_channels)},
          {"groups", std::to_string(c.groups)},
          {"dynamic_groups", std::to_string(c.dynamic_groups)},
          {"mid_per_group", std::to_string(c.mid())},
          {"question_dim", std::to_string(c.question_dim)},
          {"hidden", std::to_string(c.hidden)},
          {"modules", std::to_string(c.modules)}};
}

// Closed-form counts, one row per tensor the constructor would register,
// with the same names. Per module with d = n*9*m^2: second FC h*d, first FC
// d_q*h, stage1 C_i*m, free stage2 (N-n)*9*m^2 plus (N-n)*m gains, stage3
// m*C_o, shortcut C_i*C_o, BN affine 2*(2*N*m + C_o).
inline AuditReport count_analytic(const QGHCConfig& config, Variant kind, const std::string& prefix = "qghc") {
  AuditReport rep;
  rep.label = variant_name(kind);
  rep.config = config_echo(config, kind);
  const std::size_t h = config.hidden, dq = config.question_dim;
  for (std::size_t k = 0; k < config.modules; ++k) {
    QGHCConfig c = variant_module_config(kind, config);
    if (k > 0) c.in_channels = config.out_channels;
    const std::string p = prefix + "." + std::to_string(k);
    const std::size_t Ci = c.in_channels, Co = c.out_channels;
    auto predictor = [&](std::size_t d) {
      rep.add(p + ".predictor.fc1.weight", {dq, h}, Role::qd_predictor);
      rep.add(p + ".predictor.fc1.bias", {h}, Role::qd_predictor);
      rep.add(p + ".predictor.fc2.weight", {h, d}, Role::qd_predictor);
      rep.add(p + ".predictor.fc2.bias", {d}, Role::qd_predictor);
    };
    if (kind == Variant::naive) {
      predictor(Co * Ci * 9);
      continue;
    }
    const std::size_t N = c.groups, n = c.dynamic_groups, m = c.mid();
    const auto slots = choose_dynamic_slots(c, k);
    std::vector<bool> dyn(N, false);
    for (auto s : slots) dyn[s] = true;
    rep.add(p + ".stage1.weight", {N * m, Ci / N, 1, 1}, Role::qi_free);
    rep.add(p + ".stage1.bn.gamma", {N * m}, Role::qi_free);
    rep.add(p + ".stage1.bn.beta", {N * m}, Role::qi_free);
    for (std::size_t g = 0; g < N; ++g) {
      if (dyn[g]) continue;
      const std::string name = p + ".stage2.free." + std::to_string(g);
      rep.add(name, {m, m, 3, 3}, Role::qi_free);
      rep.add(name + ".gain", {m}, Role::qi_free);
    }
    if (n > 0) predictor(n * 9 * m * m);
    rep.add(p + ".stage2.bn.gamma", {N * m}, Role::qi_free);
    rep.add(p + ".stage2.bn.beta", {N * m}, Role::qi_free);
    rep.add(p + ".stage3.weight", {Co, m, 1, 1}, Role::qi_free);
    rep.add(p + ".stage3.bn.gamma", {Co}, Role::qi_free);
    rep.add(p + ".stage3.bn.beta", {Co}, Role::qi_free);
    rep.add(p + ".shortcut.weight", {Co, Ci, 1, 1}, Role::qi_free);
  }
  return rep;
}

// Walks the registered parameters of an instantiated model.
template <class T>
AuditReport enumerate_params(const Registry<T>& reg, std::string label = "model") {
  AuditReport rep;
  rep.label = std::move(label);
  for (const auto& p : reg.parameters()) rep.add(p.name, p.var.shape(), p.role);
  return rep;
}

// Per-kind totals equal and the same (name, shape, role) rows in any order.
inline bool same_counts(const AuditReport& a, const AuditReport& b, std::string* why = nullptr) {
  auto fail = [&](const std::string& s) {
    if (why) *why = s;
    return false;
  };
  if (a.qd_second_fc != b.qd_second_fc) return fail("qd_second_fc differs");
  if (a.qd_first_fc != b.qd_first_fc) return fail("qd_first_fc differs");
  if (a.qd_bias != b.qd_bias) return fail("qd_bias differs");
  if (a.qi_total != b.qi_total) return fail("qi differs");
  if (a.qi_bias != b.qi_bias) return fail("qi_bias differs");
  std::map<std::string, const AuditRow*> idx;
  for (const auto& r : b.rows) idx[r.name] = &r;
  if (idx.size() != a.rows.size()) return fail("row count differs");
  for (const auto& r : a.rows) {
    auto it = idx.find(r.name);
    if (it == idx.end()) return fail("missing row " + r.name);
    if (it->second->shape != r.shape || it->second->role != r.role) return fail("row " + r.name + " differs");
  }
  return true;
}

inline std::string format_count(double v) {
  char buf[32];
  if (v >= 1e6) std::snprintf(buf, sizeof buf, "%.2fM", v / 1e6);
  else if (v >= 1e3) std::snprintf(buf, sizeof buf, "%.1fK", v / 1e3);
  else std::snprintf(buf, sizeof buf, "%.0f", v);
  return buf;
}

inline std::string format_report(const AuditReport& r, bool with_rows = true) {
  std::string s;
  char buf[256];
  s += "# " + r.label + "\n";
  for (const auto& [k, v] : r.config) s += "#   " + k + " = " + v + "\n";
  if (with_rows) {
    std::snprintf(buf, sizeof buf, "%-40s %-18s %12s  %-4s %s\n", "name", "shape", "count", "role", "kind");
    s += buf;
    for (const auto& row : r.rows) {
      std::snprintf(buf, sizeof buf, "%-40s %-18s %12zu  %-4s %s\n", row.name.c_str(), shape_str(row.shape).c_str(),
                    row.count, role_name(row.role), param_kind_name(row.kind));
      s += buf;
    }
  }
  auto line = [&](const char* k, std::size_t v) {
    std::snprintf(buf, sizeof buf, "%-28s %14zu  (%s)\n", k, v, format_count(static_cast<double>(v)).c_str());
    s += buf;
  };
  line("QD second FC (headline)", r.qd_second_fc);
  line("QD first FC", r.qd_first_fc);
  line("QD biases", r.qd_bias);
  line("QI weights", r.qi_total);
  line("QI biases", r.qi_bias);
  line("total", r.total());
  s += "note: headline QD is the second predictor FC (h x predicted kernel elements); the first FC is listed separately\n";
  return s;
}

inline std::string report_csv(const AuditReport& r) {
  std::string s = "name,shape,count,role,kind\n";
  for (const auto& row : r.rows) {
    std::string shape;
    for (std::size_t i = 0; i < row.shape.size(); ++i) shape += (i ? "x" : "") + std::to_string(row.shape[i]);
    s += row.name + "," + shape + "," + std::to_string(row.count) + "," + role_name(row.role) + "," +
         param_kind_name(row.kind) + "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Published ablation rows

struct Table1Row {
  std::string label;
  double paper_qd = 0;  // parameters
  double paper_qi = 0;
  QGHCConfig config;
  Variant variant = Variant::hybrid;
  bool gated = true;     // QD within tolerance is required
  std::string note;
};

struct Table1Result {
  Table1Row row;
  std::size_t analytic_qd = 0;
  std::size_t analytic_qi = 0;
  double deviation = 0;  // (analytic - paper) / paper
  bool within = false;
};

inline constexpr double kTable1Tolerance = 0.10;
inline constexpr std::size_t kTable1Hidden = 198;
inline constexpr std::size_t kTable1QuestionDim = 2400;

// Full-scale configuration: C_i = C_o = 512, N = 8, m = C_i/(2N) = 32.
inline QGHCConfig table1_base(std::size_t modules = 3) {
  QGHCConfig c;
  c.in_channels = c.out_channels = 512;
  c.groups = 8;
  c.dynamic_groups = 1;
  c.question_dim = kTable1QuestionDim;
  c.hidden = kTable1Hidden;
  c.modules = modules;
  return c;
}

inline std::vector<Table1Row> table1_rows() {
  std::vector<Table1Row> rows;
  auto add = [&](std::string label, double qd, double qi, QGHCConfig c, Variant v, bool gated = true,
                 std::string note = {}) {
    rows.push_back({std::move(label), qd, qi, std::move(c), v, gated, std::move(note)});
  };
  add("QGHC", 5.4e6, 0.9e6, table1_base(3), Variant::hybrid);
  add("QGHC-1", 1.8e6, 0.3e6, table1_base(1), Variant::hybrid);
  add("QGHC-2", 3.6e6, 0.6e6, table1_base(2), Variant::hybrid);
  add("QGHC-4", 7.2e6, 1.2e6, table1_base(4), Variant::hybrid);
  {
    QGHCConfig c = table1_base(3);
    c.mid_per_group = 16;
    c.out_channels = 256;
    add("QGHC-1/2", 1.3e6, 0.7e6, c, Variant::hybrid);
  }
  {
    QGHCConfig c = table1_base(3);
    c.groups = 4;
    add("QGHC-group 4", 8.7e6, 2.1e6, c, Variant::hybrid, false,
        "unreconciled: no single h fits this row and the others");
  }
  {
    QGHCConfig c = table1_base(3);
    c.groups = 16;
    add("QGHC-group 16", 1.3e6, 0.15e6, c, Variant::hybrid);
  }
  add("QGHC-w/o shuffle", 5.4e6, 0.9e6, table1_base(3), Variant::hybrid, true, "shuffle has no parameters");
  add("QGHC-1-naive", 471e6, 0, table1_base(1), Variant::naive);
  add("QGHC-1-full", 117e6, 0.2e6, table1_base(1), Variant::full);
  add("QGHC-1-group", 14e6, 0.03e6, table1_base(1), Variant::group);
  return rows;
}

inline std::vector<Table1Result> compare_table1(const std::vector<Table1Row>& rows = table1_rows(),
                                                double tolerance = kTable1Tolerance) {
  std::vector<Table1Result> out;
  for (const auto& row : rows) {
    const AuditReport rep = count_analytic(row.config, row.variant);
    Table1Result r{row, rep.qd_second_fc, rep.qi_total, 0, false};
    r.deviation = (static_cast<double>(r.analytic_qd) - row.paper_qd) / row.paper_qd;
    r.within = std::abs(r.deviation) <= tolerance;
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string format_table1(const std::vector<Table1Result>& results, bool csv = false) {
  std::string s;
  char buf[320];
  if (csv) {
    s = "model,paper_qd,analytic_qd,deviation,status,paper_qi,analytic_qi\n";
    for (const auto& r : results) {
      std::snprintf(buf, sizeof buf, "%s,%.0f,%zu,%.6f,%s,%.0f,%zu\n", r.row.label.c_str(), r.row.paper_qd,
                    r.analytic_qd, r.deviation, !r.row.gated ? "unreconciled" : (r.within ? "ok" : "FAIL"),
                    r.row.paper_qi, r.analytic_qi);
      s += buf;
    }
    return s;
  }
  std::snprintf(buf, sizeof buf, "%-18s %10s %14s %9s  %-12s %9s %12s\n", "model", "paper QD", "analytic QD", "dev",
                "status", "paper QI", "analytic QI");
  s += buf;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-18s %10s %14zu %+8.2f%%  %-12s %9s %12zu%s%s\n", r.row.label.c_str(),
                  format_count(r.row.paper_qd).c_str(), r.analytic_qd, 100.0 * r.deviation,
                  !r.row.gated ? "unreconciled" : (r.within ? "ok" : "FAIL"), format_count(r.row.paper_qi).c_str(),
                  r.analytic_qi, r.row.note.empty() ? "" : "  # ", r.row.note.c_str());
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "QD = h x predicted kernel elements with h=%zu; tolerance %.0f%%; QI not gated\n",
                kTable1Hidden, 100 * kTable1Tolerance);
  s += buf;
  return s;
}

}  // namespace qghc
