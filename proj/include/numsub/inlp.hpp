#pragma once

// Iterative nullspace projection: each iteration trains a probe on the data
// with all earlier directions erased (alpha = 1) and appends the probe's unit
// weight direction to the basis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "numsub/probe.hpp"
#include "numsub/subspace.hpp"

namespace numsub {

struct InlpIteration {
  int basis_vector_index = 0;
  double training_accuracy = 0.0;
  double heldout_accuracy = 0.0;
};

struct InlpReport {
  Provenance provenance;
  std::vector<InlpIteration> iterations;
  double orthonormality_defect = 0.0;
  bool degenerate = false;
  std::string message;
};

struct InlpResult {
  NumberSubspace subspace;
  InlpReport report;
};

inline void to_json(nlohmann::json& j, const InlpReport& r) {
  j = nlohmann::json{{"layer", r.provenance.layer},
                     {"position_role", std::string(to_string(r.provenance.role))},
                     {"orthonormality_defect", r.orthonormality_defect},
                     {"degenerate", r.degenerate},
                     {"message", r.message},
                     {"iterations", nlohmann::json::array()}};
  for (const auto& it : r.iterations) {
    j["iterations"].push_back({{"basis_vector_index", it.basis_vector_index},
                               {"training_accuracy", it.training_accuracy},
                               {"heldout_accuracy", it.heldout_accuracy}});
  }
}

inline void check_balanced(const LabeledVectorSet& data, double tolerance = 0.05) {
  const double n = static_cast<double>(data.size());
  const double sg = static_cast<double>(data.count(Number::Singular));
  if (data.empty() || std::abs(sg - (n - sg)) > tolerance * n) {
    throw Error("INLP training data must be balanced within 5% between labels");
  }
}

/// Runs k INLP iterations. Iteration j trains with seed config.seed + j on the
/// same vectors, ablated along b(1)..b(j-1). If a probe degenerates the
/// shorter basis is returned with report.degenerate set.
inline InlpResult find_number_subspace(const LabeledVectorSet& data, int k,
                                       const ProbeConfig& config,
                                       const LabeledVectorSet& heldout) {
  if (k < 1) throw Error("find_number_subspace: k must be >= 1");
  data.validate();
  heldout.validate();
  check_balanced(data);
  const int d = data.dim();
  if (heldout.dim() != d) throw Error("find_number_subspace: held-out dimension mismatch");
  if (k > d) throw Error("find_number_subspace: k exceeds the hidden dimension");

  Matrix basis(0, d);
  InlpReport report;
  report.provenance = data.provenance;

  for (int j = 0; j < k; ++j) {
    const NumberSubspace current(basis, d);
    const LabeledVectorSet train = data.ablated(current);
    const LabeledVectorSet test = heldout.ablated(current);

    ProbeConfig iteration_config = config;
    iteration_config.seed = config.seed + static_cast<std::uint64_t>(j);
    LinearProbe probe;
    Vector direction;
    try {
      probe = train_probe(train, iteration_config);
      direction = probe_direction(probe);
    } catch (const Error& e) {
      report.degenerate = true;
      report.message = "iteration " + std::to_string(j) + ": " + e.what();
      break;
    }

    // The raw-space weight may have components along earlier directions
    // (standardization is not rotation invariant); those components see
    // only zeros after ablation, so removing them changes no decision.
    for (int pass = 0; pass < 2; ++pass) {
      if (basis.rows() > 0) direction -= basis.transpose() * (basis * direction);
    }
    const double remaining = direction.norm();
    if (!(remaining > 1e-8)) {
      report.degenerate = true;
      report.message = "iteration " + std::to_string(j) + ": probe direction lies in the existing basis";
      break;
    }
    direction /= remaining;
    probe.weight = probe.weight.dot(direction) * direction;

    InlpIteration record;
    record.basis_vector_index = j;
    record.training_accuracy = probe_accuracy(probe, train);
    record.heldout_accuracy = heldout.empty() ? std::nan("") : probe_accuracy(probe, test);
    report.iterations.push_back(record);

    basis.conservativeResize(basis.rows() + 1, Eigen::NoChange);
    basis.row(basis.rows() - 1) = direction.transpose();
  }

  InlpResult result{NumberSubspace(basis, d), std::move(report)};
  result.report.orthonormality_defect = orthonormality_defect(result.subspace);
  return result;
}

/// Trains a fresh probe on `train` and scores it on `test`, both ablated
/// along the whole of `s`. Near 0.5 when `s` removed the linear signal.
inline double residual_probe_accuracy(const NumberSubspace& s, const LabeledVectorSet& train,
                                      const LabeledVectorSet& test, const ProbeConfig& config) {
  if (train.dim() != s.dim() || test.dim() != s.dim()) {
    throw Error("residual_probe_accuracy: dimension mismatch");
  }
  const LinearProbe probe = train_probe(train.ablated(s), config);
  return probe_accuracy(probe, test.ablated(s));
}

/// Single-set form: a seeded shuffle splits `heldout` in half (train / test).
inline double residual_probe_accuracy(const NumberSubspace& s, const LabeledVectorSet& heldout,
                                      const ProbeConfig& config) {
  heldout.validate();
  if (heldout.size() < 4) throw Error("residual_probe_accuracy: need at least 4 vectors");
  std::vector<Eigen::Index> order(heldout.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  std::mt19937_64 rng(config.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t half = order.size() / 2;
  auto take = [&](std::size_t from, std::size_t to) {
    LabeledVectorSet out;
    out.provenance = heldout.provenance;
    out.vectors.resize(static_cast<Eigen::Index>(to - from), heldout.dim());
    for (std::size_t i = from; i < to; ++i) {
      out.vectors.row(static_cast<Eigen::Index>(i - from)) = heldout.vectors.row(order[i]);
      out.labels.push_back(heldout.labels[static_cast<std::size_t>(order[i])]);
    }
    return out;
  };
  return residual_probe_accuracy(s, take(0, half), take(half, order.size()), config);
}

}  // namespace numsub
