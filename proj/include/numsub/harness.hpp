#pragma once

// Experiment runner: conjugation accuracy under interventions, layer sweeps,
// the alpha x k grid, cue-redundancy breakdown, upper-layer verb probes,
// side-effect perplexity and seed robustness, with Student-t intervals.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"
#include "numsub/corpus.hpp"
#include "numsub/exchange.hpp"
#include "numsub/inlp.hpp"
#include "numsub/mlm.hpp"
#include "numsub/probe.hpp"
#include "numsub/subspace.hpp"

namespace numsub {

// ------------------------------------------------------------ scopes/plans

enum class ScopeKind : std::uint8_t {
  Global,                  // every position (delimiters optional)
  Subject,                 // local: main subject
  MainVerb,                // local: masked main copula
  SubjectAndEmbeddedVerb,  // local: subject + embedded verb
  NumberNeutral            // every non-noun, non-verb word
};

inline std::string_view to_string(ScopeKind s) {
  switch (s) {
    case ScopeKind::Global: return "global";
    case ScopeKind::Subject: return "subject";
    case ScopeKind::MainVerb: return "main_verb";
    case ScopeKind::SubjectAndEmbeddedVerb: return "subject_verb";
    case ScopeKind::NumberNeutral: return "neutral";
  }
  return "?";
}

inline ScopeKind parse_scope(std::string_view s) {
  if (s == "global") return ScopeKind::Global;
  if (s == "subject" || s == "local") return ScopeKind::Subject;
  if (s == "main_verb" || s == "verb") return ScopeKind::MainVerb;
  if (s == "subject_verb") return ScopeKind::SubjectAndEmbeddedVerb;
  if (s == "neutral") return ScopeKind::NumberNeutral;
  throw Error("unknown scope: " + std::string(s));
}

/// Positions of `s` covered by a scope. `tokens` is the sequence actually fed
/// to the model (it may carry extra masks).
inline std::vector<int> scope_positions(ScopeKind scope, const AgreementSentence& s,
                                        const Vocabulary& vocab, bool include_delimiters = true) {
  std::vector<int> out;
  const int len = static_cast<int>(s.tokens.size());
  switch (scope) {
    case ScopeKind::Global:
      for (int i = 0; i < len; ++i) {
        const bool special = vocab.info(s.tokens[static_cast<std::size_t>(i)]).category ==
                             WordCategory::Special;
        if (include_delimiters || !special) out.push_back(i);
      }
      break;
    case ScopeKind::Subject: out.push_back(s.subject_index); break;
    case ScopeKind::MainVerb: out.push_back(s.main_verb_index); break;
    case ScopeKind::SubjectAndEmbeddedVerb:
      out.push_back(s.subject_index);
      if (s.embedded_verb_index) out.push_back(*s.embedded_verb_index);
      break;
    case ScopeKind::NumberNeutral:
      for (int i = 0; i < len; ++i) {
        if (is_number_neutral(vocab.info(s.tokens[static_cast<std::size_t>(i)]).category)) {
          out.push_back(i);
        }
      }
      break;
  }
  return out;
}

/// Harness-level intervention: like InterventionSpec but with a scope that
/// is resolved per sentence.
struct InterventionPlan {
  int layer = 0;
  ScopeKind scope = ScopeKind::Global;
  std::shared_ptr<const NumberSubspace> subspace;
  double alpha = 0.0;
  int k_used = -1;
  bool include_delimiters = true;
};

enum class Condition : std::uint8_t { All, Redundant, NoRedundant };

inline std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::All: return "all";
    case Condition::Redundant: return "redundant";
    case Condition::NoRedundant: return "no_redundant";
  }
  return "?";
}

inline bool in_condition(const AgreementSentence& s, Condition c) {
  return c == Condition::All || (c == Condition::Redundant) == s.has_redundant_cue;
}

// ---------------------------------------------------- conjugation accuracy

/// Caches the clean forward pass of a test set so each intervention only
/// recomputes the blocks above its layer.
class ConjugationEvaluator {
 public:
  ConjugationEvaluator(const Model& model, const Vocabulary& vocab,
                       std::vector<AgreementSentence> testset)
      : model_(&model), vocab_(&vocab), sentences_(std::move(testset)) {
    if (sentences_.empty()) throw Error("conjugation accuracy: empty test set");
    batch_ = masked_batch(sentences_, vocab.mask_id());
    hidden_ = forward_hidden(model, batch_);
    baseline_ = predict_from(hidden_.back());
  }

  const std::vector<AgreementSentence>& sentences() const { return sentences_; }
  const SequenceBatch& batch() const { return batch_; }
  const std::vector<Mat<float>>& clean_hidden() const { return hidden_; }

  /// Per sentence: true iff P[gold] > P[wrong] (ties predict plural).
  std::vector<bool> correct(const std::optional<InterventionPlan>& plan = std::nullopt) const {
    if (!plan) return baseline_;
    return predict_from(final_hidden(*plan));
  }

  /// Softmax probabilities of the two copula forms at each masked position.
  std::vector<ProbabilityRecord> probabilities(const std::optional<InterventionPlan>& plan = std::nullopt) const {
    const Mat<float> logits = mask_logits(plan ? final_hidden(*plan) : hidden_.back());
    const int is = vocab_->copula_id(Number::Singular);
    const int are = vocab_->copula_id(Number::Plural);
    std::vector<ProbabilityRecord> out;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const auto row = logits.row(i).cast<double>();
      const double mx = row.maxCoeff();
      const double z = (row.array() - mx).exp().sum();
      out.push_back({static_cast<int>(i), sentences_[static_cast<std::size_t>(i)].subject_number,
                     std::exp(row(is) - mx) / z, std::exp(row(are) - mx) / z});
    }
    return out;
  }

  double accuracy(const std::vector<bool>& correct, Condition c = Condition::All) const {
    std::size_t n = 0, k = 0;
    for (std::size_t i = 0; i < sentences_.size(); ++i) {
      if (!in_condition(sentences_[i], c)) continue;
      ++n;
      k += correct[i];
    }
    if (n == 0) return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(k) / static_cast<double>(n);
  }

  double accuracy(const std::optional<InterventionPlan>& plan = std::nullopt,
                  Condition c = Condition::All) const {
    return accuracy(correct(plan), c);
  }

 private:
  Mat<float> final_hidden(const InterventionPlan& p) const {
    if (p.layer < 0 || p.layer > model_->num_layers()) throw Error("plan layer out of range");
    RowIntervention iv{p.layer, {}, p.subspace, p.alpha, p.k_used};
    for (int s = 0; s < batch_.num_sequences(); ++s) {
      for (int pos : scope_positions(p.scope, sentences_[static_cast<std::size_t>(s)], *vocab_,
                                     p.include_delimiters)) {
        iv.rows.push_back(batch_.start(s) + pos);
      }
    }
    Mat<float> h = hidden_[static_cast<std::size_t>(p.layer)];
    apply_rows(h, iv);
    return resume_forward(*model_, batch_, p.layer, std::move(h));
  }

  Mat<float> mask_logits(const Mat<float>& last) const {
    Mat<float> rows(batch_.num_sequences(), model_->hidden_dim());
    for (int s = 0; s < batch_.num_sequences(); ++s) {
      rows.row(s) = last.row(batch_.start(s) + sentences_[static_cast<std::size_t>(s)].main_verb_index);
    }
    return model_->logits(rows);
  }

  std::vector<bool> predict_from(const Mat<float>& last) const {
    const Mat<float> logits = mask_logits(last);
    const int is = vocab_->copula_id(Number::Singular);
    const int are = vocab_->copula_id(Number::Plural);
    std::vector<bool> out;
    out.reserve(sentences_.size());
    for (std::size_t s = 0; s < sentences_.size(); ++s) {
      const auto r = static_cast<Eigen::Index>(s);
      const Number predicted = logits(r, is) > logits(r, are) ? Number::Singular : Number::Plural;
      out.push_back(predicted == sentences_[s].subject_number);
    }
    return out;
  }

  const Model* model_;
  const Vocabulary* vocab_;
  std::vector<AgreementSentence> sentences_;
  SequenceBatch batch_;
  std::vector<Mat<float>> hidden_;
  std::vector<bool> baseline_;
};

/// Fraction of test sentences whose gold copula outscores the other form.
inline double conjugation_accuracy(const Model& model, const Vocabulary& vocab,
                                   const std::vector<AgreementSentence>& testset,
                                   const std::optional<InterventionPlan>& plan = std::nullopt) {
  return ConjugationEvaluator(model, vocab, testset).accuracy(plan);
}

// -------------------------------------------------------------- perplexity

/// Masked-LM perplexity over number-neutral words: each neutral word is
/// masked in its own forward pass (copula left visible) and interventions
/// touch only number-neutral positions.
class NeutralPerplexity {
 public:
  NeutralPerplexity(const Model& model, const Vocabulary& vocab,
                    const std::vector<AgreementSentence>& sentences, bool include_masked_position = true)
      : model_(&model) {
    for (const auto& s : sentences) {
      const auto neutral = scope_positions(ScopeKind::NumberNeutral, s, vocab);
      for (int p : neutral) {
        std::vector<int> tokens = s.tokens;
        const int start = batch_.rows();
        target_rows_.push_back(start + p);
        target_ids_.push_back(tokens[static_cast<std::size_t>(p)]);
        tokens[static_cast<std::size_t>(p)] = vocab.mask_id();
        batch_.add(tokens);
        for (int q : neutral) {
          if (q != p || include_masked_position) scope_rows_.push_back(start + q);
        }
      }
    }
    if (target_rows_.empty()) throw Error("perplexity: no number-neutral tokens in scope");
    hidden_ = forward_hidden(model, batch_);
    base_ = perplexity_from(hidden_.back());
  }

  double base() const { return base_; }
  std::size_t num_targets() const { return target_rows_.size(); }

  /// exp(mean NLL) with the plan applied at neutral positions (plan.scope is ignored).
  double perplexity(const InterventionPlan& plan) const {
    RowIntervention iv{plan.layer, scope_rows_, plan.subspace, plan.alpha, plan.k_used};
    Mat<float> h = hidden_.at(static_cast<std::size_t>(plan.layer));
    apply_rows(h, iv);
    return perplexity_from(resume_forward(*model_, batch_, plan.layer, std::move(h)));
  }

 private:
  double perplexity_from(const Mat<float>& last) const {
    Mat<float> rows(static_cast<Eigen::Index>(target_rows_.size()), model_->hidden_dim());
    for (std::size_t i = 0; i < target_rows_.size(); ++i) {
      rows.row(static_cast<Eigen::Index>(i)) = last.row(target_rows_[i]);
    }
    const Mat<float> logits = model_->logits(rows);
    double nll = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const auto row = logits.row(i).cast<double>();
      const double mx = row.maxCoeff();
      const double lse = mx + std::log((row.array() - mx).exp().sum());
      nll += lse - row(target_ids_[static_cast<std::size_t>(i)]);
    }
    return std::exp(nll / static_cast<double>(logits.rows()));
  }

  const Model* model_;
  SequenceBatch batch_;
  std::vector<int> target_rows_, target_ids_, scope_rows_;
  std::vector<Mat<float>> hidden_;
  double base_ = 0.0;
};

/// (ppl with number subspace / ppl before, ppl with random subspace / ppl before).
inline std::pair<double, double> perplexity_factor(const Model& model, const Vocabulary& vocab,
                                                   const std::vector<AgreementSentence>& testset,
                                                   const InterventionPlan& number_plan,
                                                   const InterventionPlan& random_plan) {
  const NeutralPerplexity ppl(model, vocab, testset);
  return {ppl.perplexity(number_plan) / ppl.base(), ppl.perplexity(random_plan) / ppl.base()};
}

// ------------------------------------------------------------- statistics

struct Interval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// mean +- t(0.975, n-1) * s / sqrt(n).
inline Interval confidence_interval(const std::vector<double>& samples) {
  if (samples.size() < 2) throw Error("confidence_interval: need at least 2 samples");
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double x : samples) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : samples) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  const boost::math::students_t dist(n - 1.0);
  const double half = boost::math::quantile(dist, 0.975) * sd / std::sqrt(n);
  return {mean, mean - half, mean + half};
}

// ------------------------------------------------------------ experiments

enum class ExperimentKind : std::uint8_t {
  LayerSweep,
  HyperGrid,
  RedundancyBreakdown,
  UpperLayerVerbProbe,
  SideEffectPerplexity,
  SeedRobustness
};

inline std::string_view to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::LayerSweep: return "layer-sweep";
    case ExperimentKind::HyperGrid: return "hyper-grid";
    case ExperimentKind::RedundancyBreakdown: return "redundancy";
    case ExperimentKind::UpperLayerVerbProbe: return "upper-layer";
    case ExperimentKind::SideEffectPerplexity: return "side-effects";
    case ExperimentKind::SeedRobustness: return "seed-robustness";
  }
  return "?";
}

inline ExperimentKind parse_experiment(std::string_view s) {
  for (auto k : {ExperimentKind::LayerSweep, ExperimentKind::HyperGrid,
                 ExperimentKind::RedundancyBreakdown, ExperimentKind::UpperLayerVerbProbe,
                 ExperimentKind::SideEffectPerplexity, ExperimentKind::SeedRobustness}) {
    if (s == to_string(k)) return k;
  }
  throw Error("unknown experiment: " + std::string(s));
}

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::LayerSweep;
  std::vector<double> alpha_grid;  // empty: kind default
  std::vector<int> k_grid;         // empty: kind default
  int num_trials = 5;
  std::vector<ScopeKind> scopes;          // empty: kind default
  std::vector<PositionRole> probe_roles;  // empty: kind default
  std::vector<int> layers;                // empty: 0..L
  std::uint64_t seed = 0;
  std::size_t inlp_samples = 4000;
  ProbeConfig probe;
  bool include_delimiters = true;
  // The subject + embedded-verb scope uses the subject-trained subspace
  // unless this is set, in which case its subspace is trained on subject and
  // embedded-verb vectors of redundant-cue sentences pooled together.
  bool pooled_subject_verb_probe = false;
  std::size_t perplexity_sentences = 200;
  int workers = 1;

  /// Fills empty fields with the defaults of `kind`.
  ExperimentConfig resolved(int num_layers) const {
    ExperimentConfig c = *this;
    const bool grid = kind == ExperimentKind::HyperGrid;
    if (c.alpha_grid.empty()) c.alpha_grid = grid ? std::vector<double>{2, 3, 5} : std::vector<double>{5};
    if (c.k_grid.empty()) c.k_grid = grid ? std::vector<int>{2, 4, 8} : std::vector<int>{8};
    if (c.scopes.empty()) {
      switch (kind) {
        case ExperimentKind::RedundancyBreakdown:
          c.scopes = {ScopeKind::Global, ScopeKind::Subject, ScopeKind::SubjectAndEmbeddedVerb};
          break;
        case ExperimentKind::UpperLayerVerbProbe:
          c.scopes = {ScopeKind::Global, ScopeKind::Subject, ScopeKind::MainVerb};
          break;
        case ExperimentKind::SideEffectPerplexity: c.scopes = {ScopeKind::NumberNeutral}; break;
        default: c.scopes = {ScopeKind::Global, ScopeKind::Subject}; break;
      }
    }
    if (c.probe_roles.empty()) {
      c.probe_roles = kind == ExperimentKind::UpperLayerVerbProbe
                          ? std::vector<PositionRole>{PositionRole::Subject, PositionRole::MainVerb}
                          : std::vector<PositionRole>{PositionRole::Subject};
    }
    if (c.layers.empty()) {
      for (int l = 0; l <= num_layers; ++l) c.layers.push_back(l);
    }
    if (c.num_trials < 1) throw Error("experiment: num_trials must be >= 1");
    for (int l : c.layers) {
      if (l < 0 || l > num_layers) throw Error("experiment: layer out of range");
    }
    for (int k : c.k_grid) {
      if (k < 1) throw Error("experiment: k must be >= 1");
    }
    for (double a : c.alpha_grid) detail::check_alpha(a);
    return c;
  }
};

/// One measured value. Failed cells keep their row with status != "ok".
struct ResultRow {
  std::string experiment;
  std::uint64_t model = 0;
  int layer = -1;
  std::string scope = "none";
  std::string probe_role = "none";
  double alpha = 0.0;
  int k = 0;
  std::string condition = "all";
  int trial = 0;
  std::string metric;
  double value = 0.0;
  std::string status = "ok";

  auto cell_key() const {
    return std::tie(experiment, model, metric, probe_role, scope, layer, alpha, k, condition);
  }
  friend bool operator<(const ResultRow& a, const ResultRow& b) {
    return std::tuple_cat(a.cell_key(), std::tie(a.trial)) < std::tuple_cat(b.cell_key(), std::tie(b.trial));
  }
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
};

struct ModelHandle {
  const Model* model = nullptr;
  std::uint64_t id = 0;  // model seed, used to label rows
};

/// Everything an experiment reads: trained model(s), the training split that
/// INLP vectors are sampled from, and the evaluation split.
struct ExperimentInputs {
  std::vector<ModelHandle> models;
  const Vocabulary* vocab = nullptr;
  const std::vector<AgreementSentence>* inlp_pool = nullptr;
  const std::vector<AgreementSentence>* testset = nullptr;
};

namespace detail {

inline LabeledVectorSet gather(const Mat<float>& hidden, const SequenceBatch& batch,
                               const std::vector<AgreementSentence>& sentences, int layer,
                               PositionRole role) {
  LabeledVectorSet out;
  out.provenance = {layer, role};
  out.vectors.resize(static_cast<Eigen::Index>(sentences.size()), hidden.cols());
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto idx = sentences[i].role_index(role);
    if (!idx) throw Error("sentence lacks the requested position");
    out.vectors.row(static_cast<Eigen::Index>(i)) =
        hidden.row(batch.start(static_cast<int>(i)) + *idx).cast<double>();
    out.labels.push_back(sentences[i].subject_number);
  }
  return out;
}

inline LabeledVectorSet concat(const LabeledVectorSet& a, const LabeledVectorSet& b) {
  LabeledVectorSet out;
  out.provenance = a.provenance;
  out.vectors.resize(a.vectors.rows() + b.vectors.rows(), a.dim());
  out.vectors << a.vectors, b.vectors;
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

inline std::uint64_t trial_seed(std::uint64_t seed, int trial) {
  return seed * 1000003ull + static_cast<std::uint64_t>(trial) * 7919ull + 17ull;
}

/// Per-trial work for one model: returns the rows of that trial.
inline std::vector<ResultRow> run_trial(const ExperimentConfig& cfg, const ExperimentInputs& in,
                                        const ModelHandle& handle, const ConjugationEvaluator* eval,
                                        const NeutralPerplexity* ppl, int trial) {
  const Model& model = *handle.model;
  const std::string kind{to_string(cfg.kind)};
  const int kmax = *std::max_element(cfg.k_grid.begin(), cfg.k_grid.end());
  std::vector<ResultRow> rows;
  auto row = [&](int layer, std::string scope, std::string role, double alpha, int k,
                 std::string condition, std::string metric, double value, std::string status = "ok") {
    rows.push_back({kind, handle.id, layer, std::move(scope), std::move(role), alpha, k,
                    std::move(condition), trial, std::move(metric), value, std::move(status)});
  };

  const std::uint64_t tseed = trial_seed(cfg.seed, trial);
  const auto sample = sample_balanced(*in.inlp_pool, cfg.inlp_samples, tseed);
  const SequenceBatch sample_batch = masked_batch(sample, in.vocab->mask_id());
  const auto sample_hidden = forward_hidden(model, sample_batch);
  const auto& test = *in.testset;
  const SequenceBatch test_batch = masked_batch(test, in.vocab->mask_id());
  const std::vector<Mat<float>>& test_hidden =
      eval ? eval->clean_hidden() : forward_hidden(model, test_batch);

  if (eval) {
    const auto base = eval->correct();
    for (Condition c : {Condition::All, Condition::Redundant, Condition::NoRedundant}) {
      row(-1, "none", "none", 0.0, 0, std::string(to_string(c)), "baseline_accuracy", eval->accuracy(base, c));
    }
  } else if (ppl) {
    row(-1, "neutral", "none", 0.0, 0, "neutral", "baseline_perplexity", ppl->base());
  }

  for (int layer : cfg.layers) {
    for (PositionRole role : cfg.probe_roles) {
      const std::string role_name{to_string(role)};
      ProbeConfig pc = cfg.probe;
      pc.seed = tseed + static_cast<std::uint64_t>(layer) * 101;
      const auto data = gather(sample_hidden[static_cast<std::size_t>(layer)], sample_batch, sample, layer, role);
      const auto heldout = gather(test_hidden[static_cast<std::size_t>(layer)], test_batch, test, layer, role);
      const InlpResult inlp = find_number_subspace(data, kmax, pc, heldout);
      for (const auto& it : inlp.report.iterations) {
        row(layer, "none", role_name, 0.0, it.basis_vector_index + 1, "all", "inlp_heldout_accuracy",
            it.heldout_accuracy);
      }
      const auto subspace = std::make_shared<const NumberSubspace>(inlp.subspace);

      std::shared_ptr<const NumberSubspace> pooled;
      if (cfg.pooled_subject_verb_probe && role == PositionRole::Subject &&
          std::find(cfg.scopes.begin(), cfg.scopes.end(), ScopeKind::SubjectAndEmbeddedVerb) != cfg.scopes.end()) {
        std::vector<AgreementSentence> redundant;
        for (const auto& s : *in.inlp_pool) {
          if (s.has_redundant_cue) redundant.push_back(s);
        }
        const auto half = sample_balanced(redundant, cfg.inlp_samples / 2 + (cfg.inlp_samples / 2) % 2, tseed + 1);
        const auto hb = masked_batch(half, in.vocab->mask_id());
        const auto hh = forward_hidden(model, hb);
        const auto both = concat(gather(hh[static_cast<std::size_t>(layer)], hb, half, layer, PositionRole::Subject),
                                 gather(hh[static_cast<std::size_t>(layer)], hb, half, layer, PositionRole::EmbeddedVerb));
        pooled = std::make_shared<const NumberSubspace>(find_number_subspace(both, kmax, pc, heldout).subspace);
      }

      if (eval) {
        for (ScopeKind scope : cfg.scopes) {
          const std::string scope_name{to_string(scope)};
          const auto& used = (scope == ScopeKind::SubjectAndEmbeddedVerb && pooled) ? pooled : subspace;
          for (double alpha : cfg.alpha_grid) {
            for (int k : cfg.k_grid) {
              if (k > used->rank()) {
                for (Condition c : {Condition::All, Condition::Redundant, Condition::NoRedundant}) {
                  row(layer, scope_name, role_name, alpha, k, std::string(to_string(c)), "conjugation_accuracy",
                      std::numeric_limits<double>::quiet_NaN(), "inlp_degenerate");
                }
                continue;
              }
              const InterventionPlan plan{layer, scope, used, alpha, k, cfg.include_delimiters};
              const auto correct = eval->correct(plan);
              for (Condition c : {Condition::All, Condition::Redundant, Condition::NoRedundant}) {
                row(layer, scope_name, role_name, alpha, k, std::string(to_string(c)), "conjugation_accuracy",
                    eval->accuracy(correct, c));
              }
            }
          }
        }
      }

      if (ppl) {
        const auto random = std::make_shared<const NumberSubspace>(
            random_subspace(model.hidden_dim(), kmax, tseed + 31 * static_cast<std::uint64_t>(layer) + 5));
        for (double alpha : cfg.alpha_grid) {
          for (int k : cfg.k_grid) {
            const InterventionPlan rplan{layer, ScopeKind::NumberNeutral, random, alpha, k};
            row(layer, "neutral", "random", alpha, k, "neutral", "perplexity_factor",
                ppl->perplexity(rplan) / ppl->base());
            if (k > subspace->rank()) {
              row(layer, "neutral", role_name, alpha, k, "neutral", "perplexity_factor",
                  std::numeric_limits<double>::quiet_NaN(), "inlp_degenerate");
              continue;
            }
            const InterventionPlan nplan{layer, ScopeKind::NumberNeutral, subspace, alpha, k};
            row(layer, "neutral", role_name, alpha, k, "neutral", "perplexity_factor",
                ppl->perplexity(nplan) / ppl->base());
          }
        }
      }
    }
  }
  return rows;
}

}  // namespace detail

/// Runs every (model x trial x layer x role x scope x alpha x k) cell.
/// Each trial draws a fresh balanced INLP sample from the training split.
/// Rows come back sorted, so the table does not depend on worker scheduling.
inline ExperimentResult run_experiment(const ExperimentConfig& config, const ExperimentInputs& in) {
  if (in.models.empty() || !in.vocab || !in.inlp_pool || !in.testset) {
    throw Error("run_experiment: missing model or corpus");
  }
  for (const auto& m : in.models) {
    if (!m.model) throw Error("run_experiment: missing model");
  }
  const ExperimentConfig cfg = config.resolved(in.models.front().model->num_layers());
  std::vector<ModelHandle> models = in.models;
  if (cfg.kind != ExperimentKind::SeedRobustness) models.resize(1);

  ExperimentResult result;
  for (const auto& handle : models) {
    std::unique_ptr<ConjugationEvaluator> eval;
    std::unique_ptr<NeutralPerplexity> ppl;
    if (cfg.kind == ExperimentKind::SideEffectPerplexity) {
      std::vector<AgreementSentence> subset(in.testset->begin(),
                                            in.testset->begin() + static_cast<std::ptrdiff_t>(std::min(
                                                cfg.perplexity_sentences, in.testset->size())));
      ppl = std::make_unique<NeutralPerplexity>(*handle.model, *in.vocab, subset);
    } else {
      eval = std::make_unique<ConjugationEvaluator>(*handle.model, *in.vocab, *in.testset);
    }

    std::vector<std::vector<ResultRow>> per_trial(static_cast<std::size_t>(cfg.num_trials));
    std::atomic<int> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    auto worker = [&] {
      for (int t = next++; t < cfg.num_trials; t = next++) {
        try {
          per_trial[static_cast<std::size_t>(t)] = detail::run_trial(cfg, in, handle, eval.get(), ppl.get(), t);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    };
    const int workers = std::clamp(cfg.workers, 1, cfg.num_trials);
    if (workers == 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    if (error) std::rethrow_exception(error);
    for (auto& rows : per_trial) result.rows.insert(result.rows.end(), rows.begin(), rows.end());
  }
  std::sort(result.rows.begin(), result.rows.end());
  return result;
}

// ------------------------------------------------------------- result I/O

inline constexpr std::string_view kResultsHeader =
    "experiment,model,layer,scope,probe_role,alpha,k,condition,trial,metric,value,status";
inline constexpr std::string_view kResultsSchema = "# numsub-results v1";

inline std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

inline void write_results(std::ostream& out, const ExperimentResult& r) {
  out << kResultsSchema << '\n' << kResultsHeader << '\n';
  for (const auto& row : r.rows) {
    out << row.experiment << ',' << row.model << ',' << row.layer << ',' << row.scope << ','
        << row.probe_role << ',' << format_value(row.alpha) << ',' << row.k << ',' << row.condition
        << ',' << row.trial << ',' << row.metric << ',' << format_value(row.value) << ','
        << row.status << '\n';
  }
}

inline void save_results(const std::filesystem::path& path, const ExperimentResult& r) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_results(out, r);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_value(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

inline ExperimentResult read_results(std::istream& in) {
  ExperimentResult r;
  std::string line;
  if (!std::getline(in, line) || line != kResultsSchema) throw Error("results: missing schema line");
  if (!std::getline(in, line) || line != kResultsHeader) throw Error("results: unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 12) throw Error("results: malformed row: " + line);
    r.rows.push_back({f[0], std::stoull(f[1]), std::stoi(f[2]), f[3], f[4], parse_value(f[5]),
                      std::stoi(f[6]), f[7], std::stoi(f[8]), f[9], parse_value(f[10]), f[11]});
  }
  return r;
}

inline ExperimentResult load_results(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return read_results(in);
}

// ------------------------------------------------------------ aggregation

struct AggregateRow {
  ResultRow key;  // trial / value / status unused
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int trials = 0;
  int failures = 0;
};

/// Per cell: mean and 95% interval over successful trials. Cells with failed
/// trials are kept and report the failure count.
inline std::vector<AggregateRow> aggregate(const ExperimentResult& r) {
  std::vector<ResultRow> rows = r.rows;
  std::sort(rows.begin(), rows.end());
  std::vector<AggregateRow> out;
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    std::vector<double> values;
    int failures = 0;
    while (j < rows.size() && rows[j].cell_key() == rows[i].cell_key()) {
      if (rows[j].status == "ok" && std::isfinite(rows[j].value)) {
        values.push_back(rows[j].value);
      } else {
        ++failures;
      }
      ++j;
    }
    AggregateRow a;
    a.key = rows[i];
    a.trials = static_cast<int>(j - i);
    a.failures = failures;
    if (values.size() >= 2) {
      const Interval ci = confidence_interval(values);
      a.mean = ci.mean;
      a.ci_low = ci.lo;
      a.ci_high = ci.hi;
    } else if (values.size() == 1) {
      a.mean = a.ci_low = a.ci_high = values[0];
    } else {
      a.mean = a.ci_low = a.ci_high = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(a);
    i = j;
  }
  return out;
}

inline void write_aggregate(std::ostream& out, const std::vector<AggregateRow>& rows) {
  out << "experiment,model,layer,scope,probe_role,alpha,k,condition,metric,mean,ci_low,ci_high,trials,failures\n";
  for (const auto& a : rows) {
    const auto& k = a.key;
    out << k.experiment << ',' << k.model << ',' << k.layer << ',' << k.scope << ',' << k.probe_role
        << ',' << format_value(k.alpha) << ',' << k.k << ',' << k.condition << ',' << k.metric << ','
        << format_value(a.mean) << ',' << format_value(a.ci_low) << ',' << format_value(a.ci_high)
        << ',' << a.trials << ',' << a.failures << '\n';
  }
}

/// Mean of a metric over trials for one cell, NaN if absent.
inline double cell_mean(const ExperimentResult& r, std::uint64_t model, int layer,
                        std::string_view scope, std::string_view role, double alpha, int k,
                        std::string_view condition, std::string_view metric = "conjugation_accuracy") {
  double sum = 0.0;
  int n = 0;
  for (const auto& row : r.rows) {
    if (row.model == model && row.layer == layer && row.scope == scope && row.probe_role == role &&
        row.alpha == alpha && row.k == k && row.condition == condition && row.metric == metric &&
        row.status == "ok") {
      sum += row.value;
      ++n;
    }
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

/// Layer where Global intervention (subject-trained, given alpha and k)
/// leaves the lowest mean conjugation accuracy; -1 if no such cells.
inline int best_flipping_layer(const ExperimentResult& r, std::uint64_t model, double alpha, int k) {
  int best = -1;
  double best_acc = std::numeric_limits<double>::infinity();
  std::map<int, bool> layers;
  for (const auto& row : r.rows) {
    if (row.model == model && row.metric == "conjugation_accuracy" && row.scope == "global") {
      layers[row.layer] = true;
    }
  }
  for (const auto& [layer, _] : layers) {
    const double acc = cell_mean(r, model, layer, "global", "subject", alpha, k, "all");
    if (std::isfinite(acc) && acc < best_acc) {
      best_acc = acc;
      best = layer;
    }
  }
  return best;
}

// ---------------------------------------------------------------- reports

inline std::string figure_file_name(std::string_view experiment) {
  std::string name = "figure_" + std::string(experiment) + ".csv";
  std::replace(name.begin(), name.end(), '-', '_');
  return name;
}

/// Structured summary: per experiment and model, the baseline accuracy and
/// the best flipping layer at the largest alpha and k in the table.
inline nlohmann::json summarize(const ExperimentResult& r) {
  std::map<std::string, std::map<std::uint64_t, std::vector<const ResultRow*>>> groups;
  for (const auto& row : r.rows) groups[row.experiment][row.model].push_back(&row);
  nlohmann::json out = nlohmann::json::object();
  out["schema"] = "numsub-summary v1";
  out["experiments"] = nlohmann::json::object();
  for (const auto& [experiment, models] : groups) {
    nlohmann::json ej = nlohmann::json::array();
    for (const auto& [model, rows] : models) {
      double alpha_max = 0.0;
      int k_max = 0;
      int failures = 0;
      std::vector<double> baseline;
      for (const ResultRow* row : rows) {
        if (row->metric == "conjugation_accuracy") {
          alpha_max = std::max(alpha_max, row->alpha);
          k_max = std::max(k_max, row->k);
        }
        if (row->metric == "baseline_accuracy" && row->condition == "all") baseline.push_back(row->value);
        if (row->status != "ok") ++failures;
      }
      nlohmann::json mj = {{"model", model}, {"failed_rows", failures}};
      if (!baseline.empty()) mj["baseline_accuracy"] = baseline.front();
      if (k_max > 0) {
        const int best = best_flipping_layer(r, model, alpha_max, k_max);
        mj["alpha"] = alpha_max;
        mj["k"] = k_max;
        mj["best_flipping_layer"] = best;
        if (best >= 0) {
          mj["best_flipping_accuracy"] = cell_mean(r, model, best, "global", "subject", alpha_max, k_max, "all");
        }
      }
      ej.push_back(mj);
    }
    out["experiments"][experiment] = ej;
  }
  return out;
}

/// Writes results.csv, aggregate.csv, summary.json and one figure file per
/// experiment present in `r` into `dir`.
inline void write_report(const std::filesystem::path& dir, const ExperimentResult& r) {
  std::filesystem::create_directories(dir);
  save_results(dir / "results.csv", r);
  const auto agg = aggregate(r);
  {
    std::ofstream out(dir / "aggregate.csv");
    write_aggregate(out, agg);
  }
  {
    std::ofstream out(dir / "summary.json");
    out << summarize(r).dump(2) << '\n';
  }
  std::map<std::string, std::vector<AggregateRow>> by_experiment;
  for (const auto& a : agg) {
    const auto& m = a.key.metric;
    if (m == "conjugation_accuracy" || m == "perplexity_factor") by_experiment[a.key.experiment].push_back(a);
  }
  for (const auto& [experiment, rows] : by_experiment) {
    std::ofstream out(dir / figure_file_name(experiment));
    write_aggregate(out, rows);
  }
}

}  // namespace numsub
