// tal: command-line front end for the transfer-attack lab.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tal/tal.hpp"

namespace {

// Applies trailing "--section.key value" / "--section.key=value" overrides.
void apply_overrides(tal::IniFile& ini, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw tal::ConfigError("unexpected argument '" + a + "'");
    std::string key = a.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw tal::ConfigError("override '" + a + "' needs a value");
      value = extras[++i];
    }
    ini.set(key, value);
  }
}

tal::ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& extras) {
  tal::IniFile ini = path.empty() ? tal::IniFile{} : tal::IniFile::load(path);
  apply_overrides(ini, extras);
  return tal::experiment_from_ini(ini);
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    tal::write_text(path, text);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw tal::IoError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transfer-attack lab: datasets, toy models, attacks, sweeps and reports"};
  app.require_subcommand(1);

  tal::DatasetParams gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a procedural glyph dataset");
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("-n,--count", gen.count, "Number of images")->capture_default_str();
  gen_cmd->add_option("--height", gen.height)->capture_default_str();
  gen_cmd->add_option("--width", gen.width)->capture_default_str();
  gen_cmd->add_option("--channels", gen.channels)->capture_default_str();
  gen_cmd->add_option("--classes", gen.classes)->capture_default_str();
  gen_cmd->add_option("-o,--out", gen_out, "Output file (.tads)")->required();

  std::string train_arch = "cnn_a", train_data, train_out;
  std::uint64_t init_seed = 1;
  tal::TrainOptions topt;
  auto* train_cmd = app.add_subcommand("train", "Train one model on a dataset file");
  train_cmd->add_option("--arch", train_arch, "mlp2, cnn_a, cnn_b or cnn_pool")->capture_default_str();
  train_cmd->add_option("--data", train_data, "Training dataset (.tads)")->required();
  train_cmd->add_option("--epochs", topt.epochs)->capture_default_str();
  train_cmd->add_option("--lr", topt.lr)->capture_default_str();
  train_cmd->add_option("--momentum", topt.momentum)->capture_default_str();
  train_cmd->add_option("--batch", topt.batch)->capture_default_str();
  train_cmd->add_option("--holdout", topt.holdout_fraction)->capture_default_str();
  train_cmd->add_option("--seed", topt.seed, "Shuffling seed")->capture_default_str();
  train_cmd->add_option("--init-seed", init_seed, "Parameter initialisation seed")->capture_default_str();
  train_cmd->add_option("-o,--out", train_out, "Output weight file (.talw)")->required();

  std::string zoo_dir;
  std::size_t zoo_epochs = 20;
  auto* zoo_cmd = app.add_subcommand("zoo", "Generate the datasets and train the bundled model zoo");
  zoo_cmd->add_option("dir", zoo_dir, "Output directory")->required();
  zoo_cmd->add_option("--epochs", zoo_epochs)->capture_default_str();
  bool zoo_reuse = false;
  zoo_cmd->add_flag("--reuse", zoo_reuse, "Leave an already complete zoo directory untouched");

  std::string attack_cfg, attack_out;
  auto* attack_cmd = app.add_subcommand("attack", "Run one experiment; extra --section.key value pairs override");
  attack_cmd->add_option("-c,--config", attack_cfg, "Config file");
  attack_cmd->add_option("-o,--out", attack_out, "CSV output (overrides output.csv)");
  attack_cmd->allow_extras();

  std::string sweep_cfg, sweep_out, sweep_axis, sweep_values, sweep_methods;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run one experiment per axis value (long-form CSV)");
  sweep_cmd->add_option("-c,--config", sweep_cfg, "Config file");
  sweep_cmd->add_option("--axis", sweep_axis, "iters, step_scale, decay, copies, rho, rgi_copies or dual_copies")
      ->required();
  sweep_cmd->add_option("--values", sweep_values, "Comma-separated values")->required();
  sweep_cmd->add_option("--methods", sweep_methods, "Comma-separated methods (default: attack.method)");
  sweep_cmd->add_option("-o,--out", sweep_out, "CSV output (overrides output.csv)");
  sweep_cmd->allow_extras();

  std::vector<std::string> report_inputs;
  bool report_gnuplot = false;
  auto* report_cmd = app.add_subcommand("report", "Summarise harness CSV files");
  report_cmd->add_option("csv", report_inputs, "CSV files")->required();
  report_cmd->add_flag("--gnuplot", report_gnuplot, "Emit gnuplot data blocks instead of a table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen_cmd->parsed()) {
      const tal::Dataset d = tal::generate_dataset(gen);
      tal::save_dataset(d, gen_out);
      std::printf("wrote %zu images (%zux%zux%zu, %zu classes) to %s\n", d.size(), d.height, d.width, d.channels,
                  d.classes, gen_out.c_str());
    } else if (train_cmd->parsed()) {
      const tal::Dataset d = tal::load_dataset(train_data);
      tal::ArchSpec spec{tal::parse_arch(train_arch), d.height, d.width, d.channels, d.classes};
      tal::Model m = tal::build_model(spec, init_seed);
      const tal::TrainReport r = tal::train_model(m, d, topt);
      tal::save_weights(m, train_out);
      std::printf("%s: %zu epochs, final loss %.6f, train acc %.4f, holdout acc %.4f -> %s\n", train_arch.c_str(),
                  r.epochs, r.loss_curve.empty() ? 0.0 : r.loss_curve.back(), r.train_accuracy, r.holdout_accuracy,
                  train_out.c_str());
    } else if (zoo_cmd->parsed()) {
      tal::ZooOptions opt;
      opt.train.epochs = zoo_epochs;
      opt.reuse = zoo_reuse;
      tal::build_zoo(zoo_dir, opt, [](const std::string& line) { std::printf("%s\n", line.c_str()); });
    } else if (attack_cmd->parsed()) {
      tal::ExperimentConfig cfg = load_config(attack_cfg, attack_cmd->remaining());
      if (!attack_out.empty()) cfg.output = attack_out;
      tal::ResourceStore store;
      const tal::AttackReport r = tal::run_experiment(cfg, store);
      emit(cfg.output, tal::render_csv({r}));
      for (const auto& e : r.errors) std::fprintf(stderr, "warning: %s\n", e.c_str());
    } else if (sweep_cmd->parsed()) {
      tal::ExperimentConfig cfg = load_config(sweep_cfg, sweep_cmd->remaining());
      if (!sweep_out.empty()) cfg.output = sweep_out;
      std::vector<tal::Method> methods;
      for (const auto& m : tal::parse::list(sweep_methods)) methods.push_back(tal::parse_method(m));
      tal::ResourceStore store;
      const auto reports = tal::sweep(cfg, sweep_axis, tal::parse::list(sweep_values), store, methods);
      emit(cfg.output, tal::render_csv(reports));
    } else if (report_cmd->parsed()) {
      std::string text;
      for (const auto& p : report_inputs) text += read_file(p) + "\n";
      const tal::CsvTable t = tal::parse_csv(text);
      std::cout << (report_gnuplot ? tal::render_gnuplot(t) : tal::render_report(t));
    }
  } catch (const tal::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
