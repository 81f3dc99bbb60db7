#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tal/dataset.hpp"
#include "tal/error.hpp"
#include "tal/graph.hpp"
#include "tal/model.hpp"
#include "tal/rng.hpp"

namespace tal {

struct TrainOptions {
  std::size_t epochs = 20;
  double lr = 0.02;
  double momentum = 0.9;
  std::size_t batch = 32;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 1;
};

struct TrainReport {
  std::size_t epochs = 0;
  double train_accuracy = 0.0;
  double holdout_accuracy = 0.0;
  std::vector<double> loss_curve;  // mean training loss per epoch
};

/// Fraction of `indices` the model classifies correctly.
inline double accuracy(const Model& model, const Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i : indices)
    if (classify(model, data.images[i]).predicted == data.labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(indices.size());
}

/// Train/holdout split used by train_model: the trailing fraction is held out.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> train_holdout_split(std::size_t n,
                                                                                         double fraction) {
  const auto held = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
  std::vector<std::size_t> train, holdout;
  for (std::size_t i = 0; i < n; ++i) (i + held < n ? train : holdout).push_back(i);
  return {train, holdout};
}

/// Minibatch SGD with heavy-ball momentum on softmax cross-entropy.
/// Deterministic given options.seed.
inline TrainReport train_model(Model& model, const Dataset& data, const TrainOptions& opt) {
  const ArchSpec& spec = model.spec();
  if (data.image_shape() != spec.input_shape() || data.classes != spec.classes) {
    throw ConfigError("dataset " + shape_str(data.image_shape()) + "/" + std::to_string(data.classes) +
                      " classes does not match model input " + shape_str(spec.input_shape()) + "/" +
                      std::to_string(spec.classes));
  }
  if (opt.batch == 0 || !(opt.lr > 0.0)) throw ConfigError("training needs batch >= 1 and lr > 0");
  auto [train_idx, holdout_idx] = train_holdout_split(data.size(), opt.holdout_fraction);
  if (train_idx.empty()) throw ConfigError("no training images after holdout split");

  auto& params = model.params();
  std::vector<Tensor> velocity, grad_sum;
  for (const auto& p : params) {
    velocity.push_back(Tensor::zeros_like(p.value));
    grad_sum.push_back(Tensor::zeros_like(p.value));
  }

  Rng rng(derive_seed(opt.seed, 0x7a1e));
  TrainReport report;
  report.epochs = opt.epochs;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto order = rng.permutation(train_idx.size());
    double loss_total = 0.0;
    try {
      for (std::size_t start = 0; start < order.size(); start += opt.batch) {
        const std::size_t stop = std::min(order.size(), start + opt.batch);
        for (Tensor& g : grad_sum) g.fill(0.0);
        for (std::size_t j = start; j < stop; ++j) {
          const std::size_t idx = train_idx[order[j]];
          ComputeGraph g;
          const NodeId x = g.input(data.images[idx], false);
          std::vector<NodeId> leaves;
          const NodeId logits = model.forward(g, x, true, &leaves);
          const NodeId loss = g.cross_entropy(logits, data.labels[idx]);
          loss_total += g.value(loss)[0];
          g.backward(loss);
          for (std::size_t p = 0; p < leaves.size(); ++p) grad_sum[p] += g.take_grad(leaves[p]);
        }
        const double inv = 1.0 / static_cast<double>(stop - start);
        for (std::size_t p = 0; p < params.size(); ++p) {
          Tensor& v = velocity[p];
          Tensor& w = params[p].value;
          for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = opt.momentum * v[i] - opt.lr * grad_sum[p][i] * inv;
            w[i] += v[i];
          }
          if (!w.all_finite()) throw NumericError("parameter '" + params[p].name + "' became non-finite");
        }
      }
    } catch (const NumericError& e) {
      throw NumericError("training diverged in epoch " + std::to_string(epoch + 1) + ": " + e.what());
    }
    const double mean_loss = loss_total / static_cast<double>(train_idx.size());
    if (!std::isfinite(mean_loss)) {
      throw NumericError("training diverged in epoch " + std::to_string(epoch + 1) + ": loss is not finite");
    }
    report.loss_curve.push_back(mean_loss);
  }
  report.train_accuracy = accuracy(model, data, train_idx);
  report.holdout_accuracy = accuracy(model, data, holdout_idx);
  model.mark_trained(opt.seed);
  return report;
}

}  // namespace tal
