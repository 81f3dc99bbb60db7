#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tal/dataset.hpp"
#include "tal/model.hpp"
#include "tal/train.hpp"
#include "tal/weights_io.hpp"

namespace tal {

struct ZooEntry {
  std::string name;
  Arch arch;
  std::uint64_t seed;
  std::string role;  // surrogate, victim or ensemble
};

/// The bundled zoo: one surrogate, three victims of different architectures,
/// and three more surrogates (other seeds) for four-model ensembles.
inline std::vector<ZooEntry> default_zoo() {
  return {
      {"cnn_a", Arch::cnn_a, 11, "surrogate"},   {"mlp2", Arch::mlp2, 21, "victim"},
      {"cnn_b", Arch::cnn_b, 31, "victim"},      {"cnn_pool", Arch::cnn_pool, 41, "victim"},
      {"mlp2_e", Arch::mlp2, 52, "ensemble"},    {"cnn_b_e", Arch::cnn_b, 62, "ensemble"},
      {"cnn_pool_e", Arch::cnn_pool, 73, "ensemble"},
  };
}

struct ZooOptions {
  DatasetParams train_data{1, 4000, 16, 16, 1, 8, {}};
  DatasetParams eval_data{2, 1000, 16, 16, 1, 8, {}};
  TrainOptions train;  // seed is replaced per model
  bool reuse = false;  // keep an existing complete zoo untouched
};

/// Files build_zoo writes.
inline std::vector<std::string> zoo_files() {
  std::vector<std::string> out{"train.tads", "eval.tads"};
  for (const ZooEntry& e : default_zoo()) out.push_back(e.name + ".talw");
  return out;
}

/// Generates train.tads / eval.tads and trains every zoo model into `dir`.
/// Deterministic; `log` receives one line per model.
inline void build_zoo(const std::filesystem::path& dir, const ZooOptions& opt = {},
                      const std::function<void(const std::string&)>& log = {}) {
  if (opt.reuse) {
    bool complete = true;
    for (const auto& f : zoo_files()) complete = complete && std::filesystem::exists(dir / f);
    if (complete) {
      if (log) log("zoo at " + dir.string() + " is complete; reusing it");
      return;
    }
  }
  std::filesystem::create_directories(dir);
  const Dataset train = generate_dataset(opt.train_data);
  save_dataset(train, (dir / "train.tads").string());
  const Dataset eval = generate_dataset(opt.eval_data);
  save_dataset(eval, (dir / "eval.tads").string());
  for (const ZooEntry& e : default_zoo()) {
    ArchSpec spec{e.arch, train.height, train.width, train.channels, train.classes};
    Model m = build_model(spec, e.seed);
    TrainOptions to = opt.train;
    to.seed = e.seed;
    const TrainReport rep = train_model(m, train, to);
    save_weights(m, (dir / (e.name + ".talw")).string());
    if (log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-11s %-9s %-8s holdout %.4f  eval %.4f", e.name.c_str(),
                    std::string(to_string(e.arch)).c_str(), e.role.c_str(), rep.holdout_accuracy,
                    [&] {
                      std::vector<std::size_t> all(eval.size());
                      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
                      return accuracy(m, eval, all);
                    }());
      log(buf);
    }
  }
}

}  // namespace tal
