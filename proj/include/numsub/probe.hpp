#pragma once

// Binary logistic-regression probes for subject number.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "numsub/subspace.hpp"

namespace numsub {

enum class Number : std::uint8_t { Singular = 0, Plural = 1 };
enum class PositionRole : std::uint8_t { Subject = 0, MainVerb = 1, EmbeddedVerb = 2 };

inline Number opposite(Number n) { return n == Number::Singular ? Number::Plural : Number::Singular; }

inline std::string_view to_string(Number n) { return n == Number::Singular ? "singular" : "plural"; }

inline Number parse_number(std::string_view s) {
  if (s == "singular" || s == "sg") return Number::Singular;
  if (s == "plural" || s == "pl") return Number::Plural;
  throw Error("unknown number label: " + std::string(s));
}

inline std::string_view to_string(PositionRole r) {
  switch (r) {
    case PositionRole::Subject: return "subject";
    case PositionRole::MainVerb: return "main_verb";
    case PositionRole::EmbeddedVerb: return "embedded_verb";
  }
  return "?";
}

inline PositionRole parse_position_role(std::string_view s) {
  if (s == "subject") return PositionRole::Subject;
  if (s == "main_verb" || s == "verb") return PositionRole::MainVerb;
  if (s == "embedded_verb") return PositionRole::EmbeddedVerb;
  throw Error("unknown position role: " + std::string(s));
}

/// Singular is the positive class.
inline double label_sign(Number n) { return n == Number::Singular ? 1.0 : -1.0; }

struct Provenance {
  int layer = -1;
  PositionRole role = PositionRole::Subject;
};

/// Hidden vectors (one per row) with their subject-number labels.
struct LabeledVectorSet {
  Matrix vectors;
  std::vector<Number> labels;
  Provenance provenance;

  std::size_t size() const { return labels.size(); }
  int dim() const { return static_cast<int>(vectors.cols()); }
  bool empty() const { return labels.empty(); }

  std::size_t count(Number n) const {
    std::size_t c = 0;
    for (Number l : labels) c += (l == n);
    return c;
  }

  void validate() const {
    if (static_cast<std::size_t>(vectors.rows()) != labels.size()) {
      throw Error("LabeledVectorSet: vector and label counts differ");
    }
  }

  /// Copy with every vector ablated along `s` (alpha = 1).
  LabeledVectorSet ablated(const NumberSubspace& s) const {
    LabeledVectorSet out = *this;
    out.vectors = ablate_rows(vectors, s);
    return out;
  }
};

/// How features are scaled before gradient descent. Isotropic centers the
/// data and divides by one shared scale, so the raw-space weight direction is
/// the direction actually learned. PerFeature divides each feature by its own
/// standard deviation; mapped back to raw space this inflates the weight on
/// low-variance features.
enum class FeatureScaling : std::uint8_t { Isotropic, PerFeature };

struct ProbeConfig {
  int epochs = 500;
  double learning_rate = 0.1;
  double l2_penalty = 1e-4;
  std::uint64_t seed = 0;
  FeatureScaling scaling = FeatureScaling::Isotropic;
};

struct LinearProbe {
  Vector weight;
  double bias = 0.0;

  double score(const Eigen::Ref<const Vector>& h) const { return weight.dot(h) + bias; }
};

/// Thrown when gradient descent diverges or stops decreasing the loss.
class ProbeTrainingError : public Error {
 public:
  using Error::Error;
};

/// Mean logistic loss plus (l2/2)||w||^2; y = +1 for Singular.
inline double logistic_loss(const Matrix& x, const std::vector<Number>& labels, const Vector& w,
                            double b, double l2) {
  const Vector margins = x * w;
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = label_sign(labels[static_cast<std::size_t>(i)]) * (margins(i) + b);
    // log(1 + exp(-m)) computed without overflow
    total += m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
  }
  return total / static_cast<double>(x.rows()) + 0.5 * l2 * w.squaredNorm();
}

struct LossGradient {
  Vector weight;
  double bias = 0.0;
};

inline LossGradient logistic_loss_gradient(const Matrix& x, const std::vector<Number>& labels,
                                           const Vector& w, double b, double l2) {
  const Vector margins = x * w;
  Vector coeff(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double y = label_sign(labels[static_cast<std::size_t>(i)]);
    const double m = y * (margins(i) + b);
    // d/dz log(1 + exp(-y z)) = -y * sigmoid(-m)
    const double s = m > 0 ? std::exp(-m) / (1.0 + std::exp(-m)) : 1.0 / (1.0 + std::exp(m));
    coeff(i) = -y * s;
  }
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  LossGradient g;
  g.weight = inv_n * (x.transpose() * coeff) + l2 * w;
  g.bias = inv_n * coeff.sum();
  return g;
}

/// Full-batch gradient descent on centered, scaled features; the returned
/// probe acts on raw vectors. Throws ProbeTrainingError if the loss becomes
/// non-finite or increases between epochs.
inline LinearProbe train_probe(const LabeledVectorSet& data, const ProbeConfig& config = {}) {
  data.validate();
  if (data.count(Number::Singular) == 0 || data.count(Number::Plural) == 0) {
    throw Error("train_probe: both labels must be present");
  }
  if (config.epochs < 1 || !(config.learning_rate > 0.0)) {
    throw Error("train_probe: invalid configuration");
  }
  const Matrix& raw = data.vectors;
  const Eigen::Index d = raw.cols();
  const Vector mean = raw.colwise().mean().transpose();
  Vector var(d);
  for (Eigen::Index j = 0; j < d; ++j) var(j) = (raw.col(j).array() - mean(j)).square().mean();
  // Features with (relatively) vanishing variance, e.g. after ablation along
  // an axis, are left unscaled instead of amplifying rounding noise.
  const double var_floor = std::max(1e-12 * (d > 0 ? var.maxCoeff() : 0.0), 1e-30);
  std::vector<bool> constant(static_cast<std::size_t>(d));
  double shared = 0.0;
  int informative = 0;
  for (Eigen::Index j = 0; j < d; ++j) {
    constant[static_cast<std::size_t>(j)] = !(var(j) > var_floor);
    if (!constant[static_cast<std::size_t>(j)]) {
      shared += var(j);
      ++informative;
    }
  }
  shared = informative > 0 ? std::sqrt(shared / informative) : 1.0;
  Vector scale(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    if (constant[static_cast<std::size_t>(j)]) {
      scale(j) = 1.0;
    } else {
      scale(j) = config.scaling == FeatureScaling::PerFeature ? std::sqrt(var(j)) : shared;
    }
  }
  const Matrix z = (raw.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> init(0.0, 1e-3);
  Vector w(d);
  for (Eigen::Index j = 0; j < d; ++j) w(j) = init(rng);
  double b = 0.0;

  double previous = logistic_loss(z, data.labels, w, b, config.l2_penalty);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const LossGradient g = logistic_loss_gradient(z, data.labels, w, b, config.l2_penalty);
    w -= config.learning_rate * g.weight;
    b -= config.learning_rate * g.bias;
    const double loss = logistic_loss(z, data.labels, w, b, config.l2_penalty);
    if (!std::isfinite(loss)) {
      throw ProbeTrainingError("train_probe: loss became non-finite at epoch " +
                               std::to_string(epoch) + "; lower the learning rate");
    }
    if (loss > previous + 1e-12 * std::max(1.0, std::abs(previous))) {
      throw ProbeTrainingError("train_probe: loss increased at epoch " + std::to_string(epoch) +
                               " (" + std::to_string(previous) + " -> " + std::to_string(loss) +
                               "); lower the learning rate");
    }
    previous = loss;
  }

  // Constant features carry no information; their weights would only be
  // leftover initialization noise.
  for (Eigen::Index j = 0; j < d; ++j) {
    if (constant[static_cast<std::size_t>(j)]) w(j) = 0.0;
  }
  LinearProbe probe;
  probe.weight = w.array() / scale.array();
  probe.bias = b - probe.weight.dot(mean);
  if (!probe.weight.allFinite() || !std::isfinite(probe.bias)) {
    throw ProbeTrainingError("train_probe: non-finite parameters");
  }
  return probe;
}

/// Predicts Singular iff w^T h + b > 0 (ties count as Plural).
inline Number predict(const LinearProbe& p, const Eigen::Ref<const Vector>& h) {
  return p.score(h) > 0.0 ? Number::Singular : Number::Plural;
}

inline double probe_accuracy(const LinearProbe& p, const LabeledVectorSet& data) {
  data.validate();
  if (data.empty()) throw Error("probe_accuracy: empty data");
  if (data.dim() != p.weight.size()) throw Error("probe_accuracy: dimension mismatch");
  const Vector scores = (data.vectors * p.weight).array() + p.bias;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Number guess = scores(static_cast<Eigen::Index>(i)) > 0.0 ? Number::Singular : Number::Plural;
    correct += guess == data.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// weight / ||weight||.
inline Vector probe_direction(const LinearProbe& p) {
  const double n = p.weight.norm();
  if (!(n > 1e-8)) throw Error("probe_direction: zero weight vector (degenerate probe)");
  return p.weight / n;
}

}  // namespace numsub
