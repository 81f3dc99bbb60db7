#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>

#include "test_support.hpp"

using namespace tal;
using tal::testing::TempDir;

namespace {

std::string config_error_message(const std::string& text) {
  try {
    experiment_from_ini(IniFile::parse(text, "t.ini"));
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.exit_code(), 2);
    return e.what();
  }
  ADD_FAILURE() << "no ConfigError for:\n" << text;
  return {};
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    ::setenv(name, value, 1);
  }
  ~ScopedEnv() {
    if (old_.empty()) ::unsetenv(name_);
    else ::setenv(name_, old_.c_str(), 1);
  }

 private:
  const char* name_;
  std::string old_;
};

// Small trained zoo shared by the experiment tests: 10x10 glyphs, 4 classes.
class Lab : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = std::make_unique<TempDir>("harness");
    save_dataset(generate_dataset({11, 320, 10, 10, 1, 4, {}}), dir_->file("train.tads"));
    save_dataset(generate_dataset({12, 40, 10, 10, 1, 4, {}}), dir_->file("eval.tads"));
    const Dataset train = load_dataset(dir_->file("train.tads"));
    TrainOptions opt;
    opt.epochs = 6;
    opt.seed = 1;
    std::uint64_t init = 3;
    for (const auto& [name, arch] : {std::pair{"cnn_a", Arch::cnn_a}, {"mlp2", Arch::mlp2}, {"cnn_pool", Arch::cnn_pool}}) {
      Model m = build_model(tal::testing::small_spec(arch), init++);
      train_model(m, train, opt);
      save_weights(m, dir_->file(std::string(name) + ".talw"));
    }
  }
  static void TearDownTestSuite() { dir_.reset(); }

  static std::string file(const std::string& name) { return dir_->file(name); }

  static ExperimentConfig base() {
    ExperimentConfig c;
    c.attack.method = Method::mifgsm;
    c.attack.iters = 4;
    c.dataset = file("eval.tads");
    c.surrogate = file("cnn_a.talw");
    c.victims = {file("mlp2.talw"), file("cnn_pool.talw")};
    c.samples = 12;
    c.seed = 5;
    return c;
  }

  static std::unique_ptr<TempDir> dir_;
};

std::unique_ptr<TempDir> Lab::dir_;

}  // namespace

TEST(Ini, ParseErrorsNameTheLine) {
  EXPECT_NE(config_error_message("[attack\nmethod = mifgsm\n").find("t.ini:1"), std::string::npos);
  EXPECT_NE(config_error_message("[attack]\n\n[bogus]\n").find("t.ini:3: unknown section"), std::string::npos);
  EXPECT_NE(config_error_message("method = mifgsm\n").find("outside of a section"), std::string::npos);
  EXPECT_NE(config_error_message("[attack]\nmethod mifgsm\n").find("t.ini:2"), std::string::npos);
  EXPECT_NE(config_error_message("[attack]\n = 3\n").find("empty key"), std::string::npos);
}

TEST(Ini, CommentsAndWhitespace) {
  const IniFile ini = IniFile::parse("# top\n[attack]  ; tail\n  iters = 7   # seven\n");
  ASSERT_NE(ini.get("attack", "iters"), nullptr);
  EXPECT_EQ(*ini.get("attack", "iters"), "7");
  EXPECT_EQ(ini.get("attack", "decay"), nullptr);
}

TEST(Config, UnknownKeysAndBadValues) {
  EXPECT_NE(config_error_message("[attack]\nitres = 3\n").find("attack.itres"), std::string::npos);
  EXPECT_NE(config_error_message("[data]\nsamples = many\n").find("data.samples"), std::string::npos);
  EXPECT_NE(config_error_message("[attack]\nmethod = fgsm9\n"), "");
  EXPECT_NE(config_error_message("[attack]\npreset = fast\n").find("attack.preset"), std::string::npos);
  EXPECT_NE(config_error_message("[ensemble]\nconflict_rule = dot\n"), "");
  EXPECT_NE(config_error_message("[output]\ntiming = maybe\n"), "");
}

TEST(Config, ReadsEverySection) {
  const ExperimentConfig c = experiment_from_ini(IniFile::parse(R"(
[attack]
method = nifgsm
iters = 12
decay = 0.8
init = rgi
rgi_copies = 3
dual_copies = 2
dual_schedule = linear
dual_direction = increasing
[transform]
kind = ssa
copies = 5
rho = 0.25
[ensemble]
surrogates = a.talw, b.talw
fusion = longitude
ga = true
ms = on
[data]
dataset = d.tads
victims = v1.talw,v2.talw
samples = 40
seed = 9
[output]
csv = out.csv
)"));
  EXPECT_EQ(c.attack.method, Method::nifgsm);
  EXPECT_EQ(c.attack.iters, 12u);
  EXPECT_EQ(c.attack.decay, 0.8);
  EXPECT_EQ(c.attack.init, MomentumInit::rgi);
  EXPECT_EQ(c.attack.rgi_copies, 3u);
  EXPECT_EQ(c.attack.dual_copies, 2u);
  EXPECT_EQ(c.attack.dual_schedule.kind, ScheduleKind::linear);
  EXPECT_EQ(c.attack.dual_schedule.direction, Direction::increasing);
  EXPECT_EQ(c.transform.kind, TransformKind::ssa);
  EXPECT_EQ(c.transform.copies, 5u);
  EXPECT_EQ(c.transform.rho, 0.25);
  EXPECT_EQ(c.ensemble.surrogates, (std::vector<std::string>{"a.talw", "b.talw"}));
  EXPECT_EQ(c.ensemble.fusion, Fusion::longitude);
  EXPECT_TRUE(c.ensemble.ga);
  EXPECT_TRUE(c.ensemble.ms);
  EXPECT_EQ(c.victims, (std::vector<std::string>{"v1.talw", "v2.talw"}));
  EXPECT_EQ(c.samples, 40u);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.output, "out.csv");
}

TEST(Config, OverridesReplaceFileValues) {
  IniFile ini = IniFile::parse("[attack]\niters = 3\n");
  ini.set("attack.iters", "8");
  ini.set("data.seed", "4");
  const ExperimentConfig c = experiment_from_ini(ini);
  EXPECT_EQ(c.attack.iters, 8u);
  EXPECT_EQ(c.seed, 4u);
  EXPECT_THROW(ini.set("iters", "1"), ConfigError);
  EXPECT_THROW(ini.set("sweep.iters", "1"), ConfigError);
}

TEST(Config, AdjustmentPresetFillsUnsetKeys) {
  ExperimentConfig c = experiment_from_ini(IniFile::parse("[attack]\nmethod = mifgsm\npreset = adjustment\n"));
  EXPECT_EQ(c.attack.iters, 5u);
  EXPECT_EQ(c.attack.decay, 1.2);
  c = experiment_from_ini(IniFile::parse("[attack]\nmethod = mifgsm\npreset = adjustment\niters = 9\n"));
  EXPECT_EQ(c.attack.iters, 9u);
  EXPECT_EQ(c.attack.decay, 1.2);
  c = experiment_from_ini(IniFile::parse("[attack]\nmethod = gimifgsm\npreset = adjustment\n"));
  EXPECT_EQ(c.attack.iters, 4u);
  EXPECT_EQ(c.attack.params.gimi_pre_iters, 9u);
  c = experiment_from_ini(IniFile::parse("[attack]\nmethod = nifgsm\npreset = adjustment\n"));
  EXPECT_EQ(c.attack.iters, 10u);
  EXPECT_EQ(c.attack.decay, 1.0);
}

TEST(Config, CanonicalEchoRoundTrips) {
  ExperimentConfig c;
  c.attack.method = Method::pifgsm;
  c.attack.decay = 0.3;
  c.attack.schedule.kind = ScheduleKind::pvalue;
  c.transform.kind = TransformKind::admix;
  c.ensemble.weights = {0.25, 0.75};
  c.ensemble.ait_pool = {AitKind::rotate, AitKind::noise};
  c.victims = {"x.talw"};
  c.seed = 17;
  const std::string echo = canonical_config(c);
  EXPECT_EQ(canonical_config(experiment_from_ini(IniFile::parse(echo))), echo);
}

TEST_F(Lab, SuccessRateExamples) {
  const Model m = load_weights(file("cnn_a.talw"));
  const Dataset d = load_dataset(file("eval.tads"));
  std::vector<Tensor> xs;
  std::vector<std::size_t> ys;
  for (std::size_t i = 0; i < d.size() && xs.size() < 10; ++i) {
    if (classify(m, d.images[i]).predicted != d.labels[i]) continue;
    xs.push_back(d.images[i]);
    ys.push_back(d.labels[i]);
  }
  ASSERT_EQ(xs.size(), 10u);
  std::vector<Tensor> zero;
  for (const Tensor& x : xs) zero.push_back(Tensor(x.shape()));
  EXPECT_EQ(success_rate(m, xs, ys, zero), 0.0);

  // Moving an image onto one of another class fools the model by construction.
  std::vector<Tensor> swap(10);
  for (std::size_t i = 0; i < 10; ++i) {
    std::size_t j = 0;
    while (ys[j] == ys[i]) ++j;
    swap[i] = xs[j] - xs[i];
  }
  EXPECT_EQ(success_rate(m, xs, ys, swap), 1.0);

  std::vector<Tensor> mixed = swap;
  for (std::size_t i = 7; i < 10; ++i) mixed[i] = zero[i];
  const RateCount rc = success_count(m, xs, ys, mixed);
  EXPECT_EQ(rc.eligible, 10u);
  EXPECT_EQ(rc.fooled, 7u);
  EXPECT_DOUBLE_EQ(rc.rate(), 0.7);

  // Clean-misclassified images leave the denominator.
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (classify(m, d.images[i]).predicted == d.labels[i]) continue;
    xs.push_back(d.images[i]);
    ys.push_back(d.labels[i]);
    mixed.push_back(Tensor(d.images[i].shape()));
    break;
  }
  if (xs.size() == 11) {
    EXPECT_EQ(success_count(m, xs, ys, mixed).eligible, 10u);
  }

  EXPECT_THROW(success_rate(m, {}, {}, {}), UndefinedRateError);
  EXPECT_THROW(success_rate(m, xs, ys, zero), ConfigError);
}

TEST(Metrics, UndefinedRateIsANumericError) {
  const RateCount none;
  try {
    none.rate();
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_EQ(e.exit_code(), 3);
  }
}

TEST_F(Lab, MeanRowIsTheVictimMean) {
  const ExperimentConfig c = base();
  ResourceStore store;
  const AttackReport r = run_experiment(c, store);
  ASSERT_EQ(r.victims.size(), 2u);
  ASSERT_TRUE(r.mean_transfer.has_value());
  EXPECT_NEAR(*r.mean_transfer, (*r.victims[0].asr + *r.victims[1].asr) / 2.0, 1e-12);
  ASSERT_TRUE(r.whitebox.has_value());
  EXPECT_GT(*r.whitebox, 0.5);

  const CsvTable t = parse_csv(render_csv({r}));
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(t.rows[2][t.column("victim")], "mean");
  EXPECT_NEAR(std::stod(t.rows[2][t.column("transfer_asr")]), *r.mean_transfer, 1e-12);
  EXPECT_EQ(t.rows[0][t.column("victim")], "mlp2");
  EXPECT_EQ(t.rows[0][t.column("method")], "mifgsm");
  EXPECT_EQ(t.rows[0][t.column("tricks")], "none");
  EXPECT_EQ(t.rows[0][t.column("wall_ms")], "0");
  EXPECT_EQ(std::stoul(t.rows[0][t.column("n_eval")]), r.victims[0].count.eligible);
  EXPECT_EQ(r.images.size(), c.samples);
}

TEST_F(Lab, SelfVictimMatchesWhitebox) {
  ExperimentConfig c = base();
  c.victims = {c.surrogate};
  ResourceStore store;
  const AttackReport r = run_experiment(c, store);
  EXPECT_EQ(r.victims[0].asr, r.whitebox);
  EXPECT_EQ(r.victims[0].count.eligible, r.whitebox_count.eligible);
}

TEST_F(Lab, ResultsDoNotDependOnWorkerCount) {
  ExperimentConfig c = base();
  c.attack.init = MomentumInit::rgi;
  c.transform.kind = TransformKind::ssa;
  c.transform.copies = 2;
  std::string one, three;
  {
    ScopedEnv env("TAL_WORKERS", "1");
    ResourceStore store;
    one = render_csv({run_experiment(c, store)});
  }
  {
    ScopedEnv env("TAL_WORKERS", "3");
    ResourceStore store;
    three = render_csv({run_experiment(c, store)});
  }
  EXPECT_EQ(one, three);
}

TEST_F(Lab, ExperimentErrors) {
  ResourceStore store;
  ExperimentConfig c = base();
  c.dataset.clear();
  EXPECT_THROW(run_experiment(c, store), ConfigError);
  c = base();
  c.samples = 41;
  EXPECT_THROW(run_experiment(c, store), ConfigError);
  c = base();
  c.ensemble.surrogates = {file("cnn_a.talw"), file("mlp2.talw")};
  c.transform.kind = TransformKind::dim;
  EXPECT_THROW(run_experiment(c, store), UnsupportedError);
  c = base();
  c.surrogate = file("missing.talw");
  EXPECT_THROW(run_experiment(c, store), IoError);
}

TEST_F(Lab, EnsembleRunsNameAllSurrogates) {
  ExperimentConfig c = base();
  c.ensemble.surrogates = {file("cnn_a.talw"), file("cnn_pool.talw")};
  c.ensemble.fusion = Fusion::longitude;
  c.victims = {file("mlp2.talw")};
  ResourceStore store;
  const AttackReport r = run_experiment(c, store);
  EXPECT_EQ(r.surrogate, "cnn_a+cnn_pool");
  EXPECT_EQ(r.tricks, "ens=longitude");
}

TEST_F(Lab, SweepCardinality) {
  ExperimentConfig c = base();
  c.samples = 4;
  c.attack.iters = 2;
  const std::vector<std::string> gammas = {"0", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9", "1"};
  ResourceStore store;
  const auto reports = sweep(c, "decay", gammas, store, {Method::mifgsm, Method::nifgsm});
  ASSERT_EQ(reports.size(), 22u);
  EXPECT_EQ(reports[0].method, "mifgsm");
  EXPECT_EQ(reports[11].method, "nifgsm");
  EXPECT_EQ(reports[3].axis_value, "0.3");
  const CsvTable t = parse_csv(render_csv(reports));
  EXPECT_EQ(t.rows.size(), 22u * (c.victims.size() + 1));
  for (const auto& row : t.rows) EXPECT_EQ(row[t.column("axis")], "decay");
  EXPECT_THROW(sweep(c, "gamma", {"1"}, store), ConfigError);
  EXPECT_THROW(sweep(c, "decay", {}, store), ConfigError);
}

TEST_F(Lab, SingleValueSweepMatchesPlainRun) {
  ExperimentConfig c = base();
  ResourceStore store;
  const auto swept = sweep(c, "iters", {"4"}, store);
  ASSERT_EQ(swept.size(), 1u);
  const AttackReport plain = run_experiment(c, store);
  EXPECT_EQ(swept[0].whitebox, plain.whitebox);
  EXPECT_EQ(swept[0].mean_transfer, plain.mean_transfer);
  EXPECT_EQ(swept[0].run_id, plain.run_id);
  for (std::size_t v = 0; v < plain.victims.size(); ++v) EXPECT_EQ(swept[0].victims[v].asr, plain.victims[v].asr);
}

TEST_F(Lab, TimingIsOptIn) {
  ExperimentConfig c = base();
  c.samples = 2;
  c.timing = true;
  ResourceStore store;
  EXPECT_GT(run_experiment(c, store).wall_ms, 0.0);
}

TEST(Report, ParsesConcatenatedFilesAndRenders) {
  const std::string csv =
      csv_header() +
      "\nr1,mifgsm,none,decay,0.5,cnn_a,mlp2,0.9,0.97,0.4,45,7,0\n"
      "r1,mifgsm,none,decay,0.5,cnn_a,mean,0.9,0.97,0.4,45,7,0\n\n" +
      csv_header() + "\nr2,mifgsm,none,decay,1,cnn_a,mlp2,0.9,0.99,NA,0,7,0\n";
  const CsvTable t = parse_csv(csv);
  EXPECT_EQ(t.rows.size(), 3u);
  const std::string table = render_report(t);
  EXPECT_NE(table.find("decay=0.5"), std::string::npos);
  EXPECT_NE(table.find("97.0"), std::string::npos);
  EXPECT_NE(table.find("40.0"), std::string::npos);
  EXPECT_NE(table.find("NA"), std::string::npos);
  const std::string plot = render_gnuplot(t);
  EXPECT_EQ(plot, "# mifgsm none decay\n# axis_value mean_transfer whitebox\n0.5 0.4 0.97\n");
}

TEST(Report, MalformedCsv) {
  EXPECT_THROW(parse_csv(""), FormatError);
  try {
    parse_csv("a,b\n1,2\n1,2,3\n");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }
  EXPECT_THROW(render_report(parse_csv("a,b\n1,2\n")), FormatError);
}

TEST(Parallel, CoversEveryIndexOnce) {
  std::vector<int> hits(101);
  parallel_for(hits.size(), [&](std::size_t i) { ++hits[i]; }, 4);
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(Parallel, RethrowsLowestFailingIndex) {
  try {
    parallel_for(20, [](std::size_t i) {
      if (i == 13 || i == 6) throw ConfigError("index " + std::to_string(i));
    }, 3);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_STREQ(e.what(), "index 6");
  }
}

TEST(Parallel, WorkerCountFromEnvironment) {
  {
    ScopedEnv env("TAL_WORKERS", "3");
    EXPECT_EQ(worker_count(), 3u);
  }
  {
    ScopedEnv env("TAL_WORKERS", "0");
    EXPECT_THROW(worker_count(), ConfigError);
  }
  {
    ScopedEnv env("TAL_WORKERS", "2x");
    EXPECT_THROW(worker_count(), ConfigError);
  }
}

namespace {

int run_cli(const std::string& args, const std::string& out_file) {
  const std::string cmd = std::string(TAL_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_F(Lab, CliExitCodes) {
  const std::string log = file("cli.log");
  EXPECT_EQ(run_cli("", log), 2);
  EXPECT_EQ(run_cli("attack --no-such-flag", log), 2);
  EXPECT_EQ(run_cli("attack --attack.itres 3", log), 2);
  EXPECT_NE(slurp(log).find("attack.itres"), std::string::npos);
  EXPECT_EQ(run_cli("attack --data.dataset " + file("missing.tads") + " --data.surrogate " + file("cnn_a.talw"), log), 4);

  std::ofstream(file("bad.ini")) << "[attack]\nmethod = ifgsm\n[data]\nsamples = 9999\ndataset = " << file("eval.tads")
                                 << "\nsurrogate = " << file("cnn_a.talw") << "\n";
  EXPECT_EQ(run_cli("attack -c " + file("bad.ini"), log), 2);

  std::ofstream(file("broken.tads")) << "TADS";
  EXPECT_EQ(run_cli("attack --data.dataset " + file("broken.tads") + " --data.surrogate " + file("cnn_a.talw"), log),
            4);
  EXPECT_NE(slurp(log).find("at byte"), std::string::npos);
}

TEST_F(Lab, CliAttackSweepAndReport) {
  const std::string log = file("cli.log");
  const std::string common = "--data.dataset " + file("eval.tads") + " --data.surrogate " + file("cnn_a.talw") +
                             " --data.victims " + file("mlp2.talw") + " --data.samples 6 --attack.iters 3";
  ASSERT_EQ(run_cli("attack -o " + file("a.csv") + " " + common, log), 0) << slurp(log);
  ExperimentConfig c = base();
  c.victims = {file("mlp2.talw")};
  c.samples = 6;
  c.seed = 0;
  c.attack.iters = 3;
  ResourceStore store;
  EXPECT_EQ(slurp(file("a.csv")), render_csv({run_experiment(c, store)}));

  ASSERT_EQ(run_cli("sweep --axis iters --values 1,2 --methods ifgsm,mifgsm -o " + file("s.csv") + " " + common, log),
            0)
      << slurp(log);
  EXPECT_EQ(parse_csv(slurp(file("s.csv"))).rows.size(), 8u);
  ASSERT_EQ(run_cli("report " + file("a.csv") + " " + file("s.csv"), file("r.txt")), 0);
  EXPECT_NE(slurp(file("r.txt")).find("iters=2"), std::string::npos);
  ASSERT_EQ(run_cli("report --gnuplot " + file("s.csv"), file("g.txt")), 0);
  EXPECT_NE(slurp(file("g.txt")).find("# ifgsm none iters"), std::string::npos);
  EXPECT_EQ(run_cli("report " + file("nope.csv"), log), 4);
}
