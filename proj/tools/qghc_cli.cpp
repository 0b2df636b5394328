// qghc: dataset generation, training, evaluation, parameter audit, gradient
// checks and activation maps from the command line.
//
// Every failure prints exactly one line "error: <kind>: <message>" to stderr
// and exits nonzero (2 for usage errors, 1 otherwise).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "qghc/cam.hpp"
#include "qghc/checkpoint.hpp"
#include "qghc/grad_suite.hpp"
#include "qghc/param_audit.hpp"

namespace {

using namespace qghc;

struct Failure {
  int code;
};

void append_file(const std::string& path, const std::string& header, const std::string& text) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::FILE* f = std::fopen(path.c_str(), "ab");
  if (!f) throw IoError("cannot append to " + path);
  if (fresh) std::fputs(header.c_str(), f);
  std::fputs(text.c_str(), f);
  if (std::fclose(f) != 0) throw IoError("write failed: " + path);
}

void print_family_line(const Metrics& m) {
  std::printf("accuracy=%.6f samples=%zu\n", m.accuracy, m.samples);
  for (std::size_t f = 0; f < 4; ++f)
    std::printf("family=%s accuracy=%.6f samples=%zu\n", data::kFamilyNames[f], m.family_acc[f], m.family_count[f]);
}

// --- gen-data ---------------------------------------------------------------

struct GenArgs {
  std::uint64_t seed = 1;
  std::size_t count = 0;
  std::string out;
};

int cmd_gen_data(const GenArgs& a) {
  if (a.count == 0) throw UsageError("--count must be at least 1");
  data::Dataset ds = data::generate_dataset(a.seed, a.count);
  data::save_dataset(ds, a.out);
  const auto hist = data::answer_histogram(ds);
  std::printf("wrote %zu samples to %s\n", ds.size(), a.out.c_str());
  for (std::size_t i = 0; i < hist.size(); ++i) std::printf("answer=%s count=%zu\n", ds.answers[i].c_str(), hist[i]);
  std::printf("blind_optimal_accuracy=%.6f\n", data::blind_optimal_accuracy(ds));
  return 0;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string data, val, config, variant, out, log;
  bool attention = false;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.variant.empty()) rc.set_variant(a.variant);
  if (a.attention) rc.model.head = Head::attention;
  if (a.seed) rc.train.seed = *a.seed;
  const data::Dataset train_set = data::load_dataset(a.data);
  const data::Dataset val = a.val.empty() ? train_set : data::load_dataset(a.val);
  if (val.vocab != train_set.vocab || val.answers != train_set.answers)
    throw FormatError("vocab_mismatch", "validation set vocabulary differs from the training set's");
  rc.model.vocab = train_set.vocab.size();
  rc.model.answers = train_set.answers.size();

  VqaModel model(rc.model, rc.train.seed);
  std::string log;
  train(model, train_set, val, rc.train, [&](const Metrics& m) {
    const std::string row = csv_row(m);
    std::fputs(row.c_str(), stdout);
    std::fflush(stdout);
    log += row;
  });
  save_checkpoint(a.out, model, rc, train_set.vocab, train_set.answers);
  if (!a.log.empty()) append_file(a.log, csv_header(), log);
  return 0;
}

// --- eval -------------------------------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& data_path) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const data::Dataset ds = data::load_dataset(data_path);
  check_compatible(ck, ds);
  print_family_line(evaluate(*ck.model, ds));
  return 0;
}

// --- audit-params -----------------------------------------------------------

struct AuditArgs {
  std::string config, variant;
  bool table1 = false, csv = false;
};

int cmd_audit(const AuditArgs& a) {
  if (a.table1) {
    const auto results = compare_table1();
    std::fputs(format_table1(results, a.csv).c_str(), stdout);
    for (const auto& r : results)
      if (r.row.gated && !r.within) return 1;
    return 0;
  }
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.variant.empty()) rc.set_variant(a.variant);
  VqaModel model(rc.model, rc.train.seed);
  const AuditReport full = enumerate_params(model.registry(), "model (" + rc.variant_label() + ")");
  std::fputs((a.csv ? report_csv(full) : format_report(full)).c_str(), stdout);
  if (rc.model.uses_stack()) {
    QGHCConfig q = rc.model.qghc;
    q.question_dim = rc.model.question_hidden;
    Registry<float> reg;
    Rng rng(0);
    make_variant<float>(rc.model.variant, q, reg, rng);
    const AuditReport analytic = count_analytic(q, rc.model.variant);
    std::string why;
    const bool same = same_counts(analytic, enumerate_params(reg, "stack"), &why);
    if (!a.csv) std::fputs(format_report(analytic, false).c_str(), stdout);
    std::printf("analytic_equals_enumerated=%s\n", same ? "yes" : ("no (" + why + ")").c_str());
    if (!same) return 1;
  }
  return 0;
}

// --- grad-check -------------------------------------------------------------

int cmd_grad_check(std::uint64_t seed, double tol) {
  std::string failed;
  for (const auto& r : run_grad_suite(seed, tol)) {
    std::printf("%-24s max_rel_err=%.3e checked=%zu %s\n", r.op.c_str(), r.max_rel_err, r.checked,
                r.passed ? "pass" : "FAIL");
    if (!r.passed) failed += (failed.empty() ? "" : ",") + r.op;
  }
  if (!failed.empty()) {
    std::fflush(stdout);
    std::fprintf(stderr, "error: grad_check: failing ops: %s\n", failed.c_str());
    throw Failure{1};
  }
  return 0;
}

// --- cam --------------------------------------------------------------------

struct CamArgs {
  std::string checkpoint, data, out, csv;
  std::size_t index = 0;
};

int cmd_cam(const CamArgs& a) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  const data::Dataset ds = data::load_dataset(a.data);
  check_compatible(ck, ds);
  const CamResult c = compute_cam(*ck.model, ds, a.index);
  io::write_file(a.out, encode_pgm(c.pixels, data::kImage));
  std::string csv = a.csv;
  if (csv.empty()) csv = std::filesystem::path(a.out).replace_extension(".csv").string();
  append_file(csv, cam_csv_header(), cam_csv_row(c, ds.answers));
  std::fputs(cam_csv_row(c, ds.answers).c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Question-guided hybrid convolution toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--count", gen.count, "Number of samples")->required();
  g->add_option("--out", gen.out, "Output path")->required();

  TrainArgs tr;
  std::uint64_t train_seed = 0;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  t->add_option("--data", tr.data, "Training dataset")->required();
  t->add_option("--val", tr.val, "Validation dataset (default: the training set)");
  t->add_option("--config", tr.config, "Run configuration file");
  t->add_option("--variant", tr.variant, kVariantChoices);
  t->add_flag("--attention", tr.attention, "Use the question-guided attention head");
  auto* seed_opt = t->add_option("--seed", train_seed, "Seed for initialisation and shuffling");
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--log", tr.log, "CSV log to append to");

  std::string ev_ck, ev_data;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", ev_ck)->required();
  e->add_option("--data", ev_data)->required();

  AuditArgs au;
  auto* a = app.add_subcommand("audit-params", "Count question-dependent and -independent parameters");
  a->add_option("--config", au.config);
  a->add_option("--variant", au.variant, kVariantChoices);
  a->add_flag("--table1", au.table1, "Compare against the published ablation counts");
  a->add_flag("--csv", au.csv, "CSV output");

  std::uint64_t gc_seed = 1;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every op");
  gc->add_option("--seed", gc_seed);
  gc->add_option("--tol", gc_tol);

  CamArgs cam;
  auto* c = app.add_subcommand("cam", "Write a class activation heatmap");
  c->add_option("--checkpoint", cam.checkpoint)->required();
  c->add_option("--data", cam.data)->required();
  c->add_option("--index", cam.index)->required();
  c->add_option("--out", cam.out, "PGM path")->required();
  c->add_option("--csv", cam.csv, "Metadata CSV (default: PGM path with .csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& s) {
    return app.exit(s);
  } catch (const CLI::ParseError& err) {
    std::string msg = err.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    std::fprintf(stderr, "error: usage: %s\n", msg.c_str());
    return 2;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) {
      if (*seed_opt) tr.seed = train_seed;
      return cmd_train(tr);
    }
    if (*e) return cmd_eval(ev_ck, ev_data);
    if (*a) return cmd_audit(au);
    if (*gc) return cmd_grad_check(gc_seed, gc_tol);
    if (*c) return cmd_cam(cam);
  } catch (const Failure& f) {
    return f.code;
  } catch (const UsageError& err) {
    std::fprintf(stderr, "error: usage: %s\n", err.what());
    return 2;
  } catch (const qghc::Error& err) {
    std::fprintf(stderr, "error: %s: %s\n", err.kind().c_str(), err.what());
    return 1;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: internal: %s\n", err.what());
    return 1;
  }
  return 2;
}
