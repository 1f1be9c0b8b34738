#include <cmath>
#include <random>

#include "catch_amalgamated.hpp"
#include "numsub/inlp.hpp"

using namespace numsub;

namespace {

// Labels live on coordinate 0 only: clusters at +-5 e0 plus isotropic noise.
LabeledVectorSet axis_data(int per_class, int d, std::uint64_t seed, double noise = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, noise);
  LabeledVectorSet out;
  out.vectors.resize(2 * per_class, d);
  for (int i = 0; i < 2 * per_class; ++i) {
    const Number label = i < per_class ? Number::Singular : Number::Plural;
    for (int j = 0; j < d; ++j) out.vectors(i, j) = n(rng);
    out.vectors(i, 0) += label == Number::Singular ? 5.0 : -5.0;
    out.labels.push_back(label);
  }
  return out;
}

// Labels spread over the first `informative` coordinates with decreasing strength.
LabeledVectorSet spread_data(int per_class, int d, int informative, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  LabeledVectorSet out;
  out.vectors.resize(2 * per_class, d);
  for (int i = 0; i < 2 * per_class; ++i) {
    const Number label = i % 2 ? Number::Plural : Number::Singular;
    for (int j = 0; j < d; ++j) out.vectors(i, j) = n(rng);
    for (int j = 0; j < informative; ++j) out.vectors(i, j) += label_sign(label) * 2.0 / (1.0 + j);
    out.labels.push_back(label);
  }
  return out;
}

}  // namespace

TEST_CASE("INLP recovers a single informative axis") {
  const auto train = axis_data(200, 10, 1);
  const auto held = axis_data(200, 10, 2);
  const InlpResult r = find_number_subspace(train, 2, {}, held);
  REQUIRE(r.subspace.rank() == 2);
  REQUIRE(r.report.iterations.size() == 2);
  CHECK(std::abs(r.subspace.basis_vector(0)(0)) >= 0.99);
  CHECK(r.report.iterations[0].heldout_accuracy == 1.0);
  CHECK(r.report.iterations[1].heldout_accuracy >= 0.40);
  CHECK(r.report.iterations[1].heldout_accuracy <= 0.60);
  CHECK(r.report.orthonormality_defect <= 1e-5);
  CHECK_FALSE(r.report.degenerate);
}

TEST_CASE("INLP basis is orthonormal and each vector is orthogonal to its predecessors") {
  const auto train = spread_data(300, 24, 6, 3);
  const auto held = spread_data(300, 24, 6, 4);
  const InlpResult r = find_number_subspace(train, 8, {}, held);
  REQUIRE(r.subspace.rank() == 8);
  CHECK(orthonormality_defect(r.subspace) <= 1e-5);
  for (int j = 1; j < 8; ++j) {
    for (int i = 0; i < j; ++i) {
      CHECK(std::abs(scalar_projection(r.subspace.basis_vector(j), r.subspace.basis_vector(i))) <= 1e-5);
    }
  }
}

TEST_CASE("INLP is prefix-deterministic") {
  const auto train = spread_data(200, 16, 4, 5);
  const auto held = spread_data(200, 16, 4, 6);
  ProbeConfig cfg;
  cfg.seed = 9;
  const InlpResult a = find_number_subspace(train, 3, cfg, held);
  const InlpResult b = find_number_subspace(train, 4, cfg, held);
  CHECK(b.subspace.prefix(3) == a.subspace);
  CHECK(find_number_subspace(train, 4, cfg, held).subspace == b.subspace);
}

TEST_CASE("held-out accuracy does not increase across iterations beyond noise") {
  const auto train = spread_data(400, 20, 5, 7);
  const auto held = spread_data(400, 20, 5, 8);
  const InlpResult r = find_number_subspace(train, 8, {}, held);
  for (std::size_t j = 1; j < r.report.iterations.size(); ++j) {
    CHECK(r.report.iterations[j].heldout_accuracy <= r.report.iterations[j - 1].heldout_accuracy + 0.05);
  }
}

TEST_CASE("residual probe accuracy") {
  const auto train = axis_data(200, 6, 10);
  const auto test = axis_data(200, 6, 11);
  ProbeConfig cfg;

  const NumberSubspace full = random_subspace(6, 6, 1);
  const double erased = residual_probe_accuracy(full, train, test, cfg);
  CHECK(erased >= 0.40);
  CHECK(erased <= 0.60);

  Matrix off_axis = Matrix::Zero(2, 6);
  off_axis(0, 3) = 1.0;
  off_axis(1, 4) = 1.0;
  CHECK(residual_probe_accuracy(NumberSubspace(off_axis), train, test, cfg) >= 0.95);

  const InlpResult r = find_number_subspace(train, 1, cfg, test);
  const double after = residual_probe_accuracy(r.subspace, train, test, cfg);
  CHECK(after >= 0.40);
  CHECK(after <= 0.60);
}

TEST_CASE("single-set residual probe splits its input") {
  const auto data = axis_data(200, 6, 12);
  CHECK(residual_probe_accuracy(NumberSubspace(Matrix{{0.0, 0.0, 0.0, 1.0, 0.0, 0.0}}), data, {}) >= 0.95);
  const double erased = residual_probe_accuracy(random_subspace(6, 6, 3), data, {});
  CHECK(erased >= 0.40);
  CHECK(erased <= 0.60);
}

TEST_CASE("INLP errors") {
  const auto train = axis_data(50, 4, 13);
  CHECK_THROWS_AS(find_number_subspace(train, 0, {}, train), Error);
  CHECK_THROWS_AS(find_number_subspace(train, 5, {}, train), Error);
  CHECK_THROWS_AS(find_number_subspace(train, 2, {}, axis_data(50, 3, 14)), Error);

  auto unbalanced = train;
  for (int i = 0; i < 10; ++i) unbalanced.labels[static_cast<std::size_t>(i) + 50] = Number::Singular;
  CHECK_THROWS_AS(find_number_subspace(unbalanced, 1, {}, train), Error);
  auto slightly = train;
  for (int i = 0; i < 2; ++i) slightly.labels[static_cast<std::size_t>(i) + 50] = Number::Singular;
  CHECK_NOTHROW(find_number_subspace(slightly, 1, {}, train));
}

TEST_CASE("INLP returns a shorter basis when the signal is exhausted") {
  // All variance lives on coordinate 0; once it is erased the data is constant.
  LabeledVectorSet data;
  data.vectors = Matrix::Zero(40, 3);
  for (int i = 0; i < 40; ++i) {
    const Number label = i % 2 ? Number::Plural : Number::Singular;
    data.vectors(i, 0) = label_sign(label) * (1.0 + 0.01 * i);
    data.labels.push_back(label);
  }
  const InlpResult r = find_number_subspace(data, 3, {}, data);
  CHECK(r.report.degenerate);
  CHECK_FALSE(r.report.message.empty());
  CHECK(r.subspace.rank() == 1);
  CHECK(r.report.iterations.size() == 1);
}

TEST_CASE("InlpReport serializes every iteration") {
  const auto train = axis_data(50, 4, 15);
  const InlpResult r = find_number_subspace(train, 2, {}, train);
  const nlohmann::json j = r.report;
  CHECK(j.at("iterations").size() == 2);
  CHECK(j.at("position_role") == "subject");
}
