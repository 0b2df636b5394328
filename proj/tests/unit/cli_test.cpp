#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "qghc/checkpoint.hpp"

namespace qghc {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static fs::path dir() {
    static const fs::path d = [] {
      fs::path p = fs::temp_directory_path() / ("qghc_cli_test_" + std::to_string(::getpid()));
      fs::create_directories(p);
      return p;
    }();
    return d;
  }

  static CliRun run(const std::string& args) {
    const fs::path out = dir() / "stdout.txt", err = dir() / "stderr.txt";
    const std::string cmd = std::string(QGHC_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  static std::string path(const std::string& name) { return (dir() / name).string(); }

  static void SetUpTestSuite() {
    std::ofstream(path("tiny.cfg")) << "enc1=4\nenc2=8\nembed=8\nquestion_hidden=16\nchannels=16\n"
                                       "modules=1\npredictor_hidden=8\nepochs=2\nbatch_size=16\ntiming=false\n";
    ASSERT_EQ(run("gen-data --seed 1 --count 96 --out " + path("train.qvd")).code, 0);
    ASSERT_EQ(run("gen-data --seed 2 --count 48 --out " + path("val.qvd")).code, 0);
  }
};

void expect_single_error_line(const CliRun& r, const std::string& prefix) {
  EXPECT_EQ(r.err.rfind(prefix, 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
}

TEST_F(Cli, GenDataIsDeterministicAndReportsBlindOptimal) {
  const CliRun a = run("gen-data --seed 1 --count 100 --out " + path("a.qvd"));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(run("gen-data --seed 1 --count 100 --out " + path("b.qvd")).code, 0);
  EXPECT_EQ(slurp(path("a.qvd")), slurp(path("b.qvd")));
  char want[64];
  std::snprintf(want, sizeof want, "blind_optimal_accuracy=%.6f\n", data::blind_optimal_accuracy(data::generate_dataset(1, 100)));
  EXPECT_NE(a.out.find(want), std::string::npos) << a.out;
}

TEST_F(Cli, UsageErrors) {
  const CliRun zero = run("gen-data --count 0 --out " + path("z.qvd"));
  EXPECT_EQ(zero.code, 2);
  expect_single_error_line(zero, "error: usage:");

  const CliRun bad = run("train --data " + path("train.qvd") + " --variant mutan --out " + path("x.qck"));
  EXPECT_EQ(bad.code, 2);
  expect_single_error_line(bad, "error: usage:");
  EXPECT_NE(bad.err.find("qghc, naive, full, group, concat, blind"), std::string::npos);

  const CliRun none = run("");
  EXPECT_EQ(none.code, 2);
  expect_single_error_line(none, "error: usage:");

  const CliRun missing = run("eval --checkpoint " + path("nope.qck") + " --data " + path("train.qvd"));
  EXPECT_EQ(missing.code, 1);
  expect_single_error_line(missing, "error: io:");
}

TEST_F(Cli, TrainEvalAndCam) {
  const std::string ck = path("m.qck"), log = path("m.csv");
  fs::remove(log);
  const CliRun t = run("train --data " + path("train.qvd") + " --val " + path("val.qvd") + " --config " + path("tiny.cfg") +
                    " --out " + ck + " --log " + log);
  ASSERT_EQ(t.code, 0) << t.err;
  const std::string csv = slurp(log);
  ASSERT_EQ(csv.rfind("epoch,train_loss,train_acc,val_acc,seconds\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);

  // Final logged val accuracy equals a fresh eval of the checkpoint.
  const std::string last = csv.substr(csv.rfind('\n', csv.size() - 2) + 1);
  const std::string val_acc = io::split(last, ',')[3];
  const CliRun e = run("eval --checkpoint " + ck + " --data " + path("val.qvd"));
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(e.out.rfind("accuracy=" + val_acc + " ", 0), 0u) << e.out << " vs " << last;
  EXPECT_NE(e.out.find("family=exist"), std::string::npos);

  const CliRun c = run("cam --checkpoint " + ck + " --data " + path("val.qvd") + " --index 4 --out " + path("h.pgm"));
  ASSERT_EQ(c.code, 0) << c.err;
  const std::string pgm = slurp(path("h.pgm"));
  EXPECT_EQ(pgm.substr(0, 13), "P5\n32 32\n255\n");
  EXPECT_EQ(pgm.size(), 13u + 1024);
  EXPECT_EQ(slurp(path("h.csv")).rfind("sample,question,predicted,truth,argmax_row,argmax_col\n4,", 0), 0u);

  const CliRun oob = run("cam --checkpoint " + ck + " --data " + path("val.qvd") + " --index 48 --out " + path("o.pgm"));
  EXPECT_EQ(oob.code, 1);
  expect_single_error_line(oob, "error: index:");

  // Same seed and config: byte-identical checkpoint and log.
  const std::string ck2 = path("m2.qck"), log2 = path("m2.csv");
  fs::remove(log2);
  ASSERT_EQ(run("train --data " + path("train.qvd") + " --val " + path("val.qvd") + " --config " + path("tiny.cfg") +
                " --out " + ck2 + " --log " + log2)
                .code,
            0);
  EXPECT_EQ(slurp(ck), slurp(ck2));
  EXPECT_EQ(slurp(log), slurp(log2));
}

TEST_F(Cli, BlindTrainsWithoutImages) {
  const CliRun t = run("train --data " + path("train.qvd") + " --config " + path("tiny.cfg") + " --variant blind --out " +
                    path("b.qck"));
  ASSERT_EQ(t.code, 0) << t.err;
  const Checkpoint ck = load_checkpoint(path("b.qck"));
  for (const auto& p : ck.model->registry().parameters()) EXPECT_EQ(p.name.rfind("image.", 0), std::string::npos);
}

TEST_F(Cli, EvalRejectsMismatchedAnswers) {
  ASSERT_EQ(run("train --data " + path("train.qvd") + " --config " + path("tiny.cfg") + " --variant blind --out " +
                path("v.qck"))
                .code,
            0);
  data::Dataset ds = data::load_dataset(path("val.qvd"));
  std::swap(ds.answers[2], ds.answers[3]);
  data::save_dataset(ds, path("perm.qvd"));
  const CliRun e = run("eval --checkpoint " + path("v.qck") + " --data " + path("perm.qvd"));
  EXPECT_EQ(e.code, 1);
  expect_single_error_line(e, "error: vocab_mismatch:");
}

TEST_F(Cli, AuditParams) {
  const CliRun t = run("audit-params --table1");
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_NE(t.out.find("5474304"), std::string::npos);
  EXPECT_NE(t.out.find("116785152"), std::string::npos);
  EXPECT_NE(t.out.find("unreconciled"), std::string::npos);

  const CliRun d = run("audit-params --config " + path("tiny.cfg"));
  ASSERT_EQ(d.code, 0) << d.err;
  EXPECT_NE(d.out.find("analytic_equals_enumerated=yes"), std::string::npos);

  const CliRun b = run("audit-params --variant blind");
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_NE(b.out.find("QD second FC (headline)                   0"), std::string::npos) << b.out;

  const CliRun csv = run("audit-params --table1 --csv");
  EXPECT_EQ(csv.out.rfind("model,paper_qd,analytic_qd,deviation,status,paper_qi,analytic_qi\n", 0), 0u);
}

TEST_F(Cli, GradCheck) {
  const CliRun ok = run("grad-check");
  ASSERT_EQ(ok.code, 0) << ok.err;
  std::vector<std::string> ops;
  for (const auto& line : io::split(ok.out, '\n'))
    if (!line.empty()) ops.push_back(io::split(line, ' ')[0]);
  std::set<std::string> unique(ops.begin(), ops.end());
  EXPECT_EQ(unique.size(), ops.size());
  EXPECT_TRUE(unique.count("qghc_hybrid_path"));
  EXPECT_TRUE(unique.count("conv2d_grouped"));
  EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);

  const CliRun strict = run("grad-check --tol 0");
  EXPECT_EQ(strict.code, 1);
  expect_single_error_line(strict, "error: grad_check: failing ops:");
}

}  // namespace
}  // namespace qghc
