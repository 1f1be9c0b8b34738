#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "catch_amalgamated.hpp"
#include "numsub/harness.hpp"
#include "numsub/mlm.hpp"

using namespace numsub;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v(default_lexicon());
  return v;
}

ModelConfig small_config(std::uint64_t seed) {
  ModelConfig c = default_model_config(vocab(), seed);
  c.num_layers = 2;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  return c;
}

std::vector<AgreementSentence> sentences(std::size_t per_cell, std::uint64_t seed) {
  std::vector<AgreementSentence> out;
  for (TemplateKind kind : {TemplateKind::SubjectRelative, TemplateKind::ObjectRelative}) {
    for (Number n1 : {Number::Singular, Number::Plural}) {
      for (Number n2 : {Number::Singular, Number::Plural}) {
        auto part = generate({kind, n1, n2, seed++, per_cell, {}, {}}, vocab());
        out.insert(out.end(), part.begin(), part.end());
      }
    }
  }
  return out;
}

std::vector<int> masked(const AgreementSentence& s) { return s.masked_tokens(vocab().mask_id()); }

}  // namespace

TEST_CASE("mask logits give a normalized distribution") {
  const Model model(default_model_config(vocab(), 1));
  for (const auto& s : sentences(3, 1)) {
    const ForwardTrace t = forward(model, masked(s));
    REQUIRE(t.mask_positions == std::vector<int>{7});
    const Vector z = t.first_mask_logits();
    REQUIRE(z.allFinite());
    const double total = (z.array() - z.maxCoeff()).exp().sum();
    const Vector p = (z.array() - z.maxCoeff()).exp() / total;
    CHECK(std::abs(p.sum() - 1.0) <= 1e-6);
    CHECK(t.hidden_states.size() == 7);
    CHECK(t.hidden_states[3].rows() == 11);
    CHECK(t.hidden_states[3].cols() == 64);
  }
}

TEST_CASE("outputs depend on token positions") {
  const Model model(default_model_config(vocab(), 2));
  const auto s = sentences(1, 2).front();
  auto tokens = masked(s);
  const Vector base = forward(model, tokens).first_mask_logits();
  std::swap(tokens[8], tokens[9]);  // adjective and period
  CHECK((forward(model, tokens).first_mask_logits() - base).norm() > 0.0);
}

TEST_CASE("forward is deterministic") {
  const Model model(default_model_config(vocab(), 3));
  const auto tokens = masked(sentences(1, 3).front());
  const ForwardTrace a = forward(model, tokens);
  const ForwardTrace b = forward(model, tokens);
  CHECK(a.mask_logits == b.mask_logits);
  for (std::size_t l = 0; l < a.hidden_states.size(); ++l) CHECK(a.hidden_states[l] == b.hidden_states[l]);
}

TEST_CASE("forward errors") {
  const Model model(default_model_config(vocab(), 4));
  std::vector<int> too_long(17, vocab().determiner_id());
  CHECK_THROWS_AS(forward(model, too_long), Error);
  CHECK_THROWS_AS(forward(model, std::vector<int>{1, 144, 2}), Error);
  CHECK_THROWS_AS(forward(model, std::vector<int>{1, -1, 2}), Error);
  CHECK_THROWS_AS(forward(model, std::vector<int>{}), Error);
  CHECK_THROWS_AS(forward(model, std::vector<int>{1, 4, 2}).first_mask_logits(), Error);

  ModelConfig bad = default_model_config(vocab(), 0);
  bad.num_heads = 5;
  CHECK_THROWS_AS(Model(bad), Error);
  bad = default_model_config(vocab(), 0);
  bad.num_layers = 1;
  CHECK_THROWS_AS(Model(bad), Error);
}

TEST_CASE("alpha 0 intervention is an exact no-op") {
  const Model model(default_model_config(vocab(), 5));
  const auto sub = std::make_shared<const NumberSubspace>(random_subspace(64, 8, 1));
  for (const auto& s : sentences(2, 5)) {
    const auto tokens = masked(s);
    const ForwardTrace clean = forward(model, tokens);
    for (int layer : {0, 3, 6}) {
      const ForwardTrace t = forward_with_intervention(model, tokens, {layer, GlobalScope{}, sub, 0.0, 8});
      CHECK(t.mask_logits == clean.mask_logits);
      for (std::size_t l = 0; l < t.hidden_states.size(); ++l) CHECK(t.hidden_states[l] == clean.hidden_states[l]);
    }
  }
}

TEST_CASE("position-scoped intervention leaves other positions and earlier layers untouched") {
  const Model model(default_model_config(vocab(), 6));
  const auto sub = std::make_shared<const NumberSubspace>(random_subspace(64, 4, 2));
  const auto tokens = masked(sentences(1, 6).front());
  const ForwardTrace clean = forward(model, tokens);
  for (int layer : {0, 2, 5}) {
    const ForwardTrace t = forward_with_intervention(model, tokens, {layer, PositionScope{{2, 4}}, sub, 3.0, 4});
    for (int l = 0; l < layer; ++l) CHECK(t.hidden_states[std::size_t(l)] == clean.hidden_states[std::size_t(l)]);
    const auto& h = t.hidden_states[std::size_t(layer)];
    const auto& c = clean.hidden_states[std::size_t(layer)];
    for (int i = 0; i < 11; ++i) {
      if (i == 2 || i == 4) {
        CHECK(h.row(i) != c.row(i));
      } else {
        CHECK(h.row(i) == c.row(i));
      }
    }
    CHECK(t.mask_logits != clean.mask_logits);
  }
  CHECK_THROWS_AS(forward_with_intervention(model, tokens, {1, PositionScope{{11}}, sub, 1.0, 4}), Error);
  CHECK_THROWS_AS(forward_with_intervention(model, tokens, {7, GlobalScope{}, sub, 1.0, 4}), Error);
  CHECK_THROWS_AS(forward_with_intervention(model, tokens, {1, GlobalScope{}, sub, 1.0, 5}), Error);
}

TEST_CASE("global ablation removes the subspace component") {
  const Model model(default_model_config(vocab(), 7));
  const auto sub = std::make_shared<const NumberSubspace>(random_subspace(64, 8, 3));
  const auto tokens = masked(sentences(1, 7).front());
  for (int layer : {0, 4, 6}) {
    const ForwardTrace t = forward_with_intervention(model, tokens, {layer, GlobalScope{}, sub, 1.0, 8});
    const Matrix& h = t.hidden_states[std::size_t(layer)];
    CHECK((h * sub->basis().transpose()).cwiseAbs().maxCoeff() <= 1e-5);
  }
  // Without delimiters the first and last positions keep their component.
  const ForwardTrace t = forward_with_intervention(model, tokens, {2, GlobalScope{false}, sub, 1.0, 8});
  const Matrix proj = t.hidden_states[2] * sub->basis().transpose();
  CHECK(proj.row(0).cwiseAbs().maxCoeff() > 1e-3);
  CHECK(proj.row(10).cwiseAbs().maxCoeff() > 1e-3);
  CHECK(proj.middleRows(1, 9).cwiseAbs().maxCoeff() <= 1e-5);
}

TEST_CASE("loss gradient matches central finite differences") {
  ModelConfig c = small_config(11);
  c.dropout = 0.0;
  TransformerMlm<double> model(c);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 0.3);
  // Larger weights than the default init so every term contributes.
  for (auto* t : model.params().tensors()) {
    for (Eigen::Index i = 0; i < t->size(); ++i) t->data()[i] += n(rng);
  }
  const auto corpus = sentences(2, 11);
  TrainSchedule sched;
  sched.batch_size = 6;
  std::mt19937_64 batch_rng(3);
  const MaskedBatch mb = draw_masked_batch(corpus, vocab(), sched, batch_rng);

  auto grad = MlmParams<double>::zeros(c);
  loss_and_gradient(model, mb, grad);
  auto loss_at = [&] {
    auto scratch = MlmParams<double>::zeros(c);
    return loss_and_gradient(model, mb, scratch);
  };

  const auto params = model.params().tensors();
  const auto grads = grad.tensors();
  std::uniform_int_distribution<int> pick_tensor(0, static_cast<int>(params.size()) - 1);
  const double eps = 1e-6;
  int checked = 0;
  for (std::size_t ti = 0; ti < params.size(); ++ti) {
    Mat<double>& p = *params[ti];
    std::uniform_int_distribution<Eigen::Index> pick(0, p.size() - 1);
    for (int draw = 0; draw < 3; ++draw) {
      const Eigen::Index i = pick(rng);
      const double orig = p.data()[i];
      p.data()[i] = orig + eps;
      const double up = loss_at();
      p.data()[i] = orig - eps;
      const double down = loss_at();
      p.data()[i] = orig;
      const double fd = (up - down) / (2 * eps);
      const double g = grads[ti]->data()[i];
      // Token rows that never appear in the batch have gradient exactly 0 in both.
      CHECK(std::abs(fd - g) <= 1e-3 * std::max(std::abs(fd), std::abs(g)) + 1e-9);
      ++checked;
    }
  }
  CHECK(checked == 3 * static_cast<int>(params.size()));
}

TEST_CASE("initial loss is close to uniform prediction") {
  const Vocabulary& v = vocab();
  Model model(default_model_config(v, 12));
  TrainSchedule sched;
  sched.steps = 1;
  const TrainReport r = train_mlm(model, sentences(20, 12), v, sched);
  CHECK(std::abs(r.initial_loss - std::log(v.size())) <= 0.15 * std::log(v.size()));
  CHECK(r.loss_curve.size() >= 1);
}

TEST_CASE("untrained model is at chance on conjugation") {
  const auto test = sentences(50, 13);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const double acc = conjugation_accuracy(Model(default_model_config(vocab(), seed)), vocab(), test);
    CHECK(acc >= 0.35);
    CHECK(acc <= 0.65);
  }
}

TEST_CASE("training is deterministic per seed and lowers the loss") {
  const auto corpus = sentences(40, 14);
  TrainSchedule sched;
  sched.steps = 40;
  sched.batch_size = 16;
  sched.warmup_steps = 5;
  Model a(small_config(21)), b(small_config(21)), c(small_config(22));
  const TrainReport ra = train_mlm(a, corpus, vocab(), sched);
  const TrainReport rb = train_mlm(b, corpus, vocab(), sched);
  train_mlm(c, corpus, vocab(), sched);
  const auto ta = a.params().tensors();
  const auto tb = b.params().tensors();
  const auto tc = c.params().tensors();
  bool differs = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK(*ta[i] == *tb[i]);
    differs = differs || *ta[i] != *tc[i];
  }
  CHECK(differs);
  CHECK(ra.final_loss == rb.final_loss);
  CHECK(ra.final_loss < ra.initial_loss);

  CHECK_THROWS_AS(train_mlm(a, {}, vocab(), sched), Error);
  TrainSchedule diverge = sched;
  diverge.learning_rate = 1e6;
  diverge.grad_clip = 1e12;
  diverge.warmup_steps = 0;
  CHECK_THROWS_AS(train_mlm(c, corpus, vocab(), diverge), Error);
}

TEST_CASE("masked batches") {
  const auto corpus = sentences(20, 15);
  TrainSchedule sched;
  sched.batch_size = 400;
  std::mt19937_64 rng(4);
  const MaskedBatch mb = draw_masked_batch(corpus, vocab(), sched, rng);
  REQUIRE(mb.inputs.num_sequences() == 400);
  int copula_only = 0;
  for (int s = 0; s < mb.inputs.num_sequences(); ++s) {
    int masks = 0;
    bool copula = false;
    for (int i = 0; i < mb.inputs.length(s); ++i) {
      const int r = mb.inputs.start(s) + i;
      if (mb.inputs.tokens[std::size_t(r)] == vocab().mask_id()) {
        ++masks;
        copula = copula || i == 7;
      }
    }
    CHECK(masks >= 1);
    copula_only += masks == 1 && copula;
  }
  // Half the examples plus the occasional random draw that hits only the copula.
  CHECK(copula_only >= 160);
  CHECK(copula_only <= 260);
  for (std::size_t i = 0; i < mb.target_rows.size(); ++i) {
    CHECK(mb.inputs.tokens[std::size_t(mb.target_rows[i])] == vocab().mask_id());
    CHECK(vocab().info(mb.target_ids[i]).category != WordCategory::Special);
  }
}

TEST_CASE("extract_hidden") {
  const Model model(default_model_config(vocab(), 16));
  const auto s = sentences(5, 16);
  const LabeledVectorSet x = extract_hidden(model, s, 3, PositionRole::MainVerb);
  CHECK(x.size() == s.size());
  CHECK(x.dim() == 64);
  CHECK(x.provenance.layer == 3);
  CHECK(x.provenance.role == PositionRole::MainVerb);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(x.labels[i] == s[i].subject_number);

  const LabeledVectorSet e = extract_hidden(model, s, 0, PositionRole::Subject);
  const auto& P = model.params();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int tok = s[i].tokens[2];
    const Eigen::RowVectorXf expected = P.tok_emb.row(tok) + P.pos_emb.row(2);
    CHECK(e.vectors.row(Eigen::Index(i)) == expected.cast<double>());
  }
  const auto sg = detail::build_sentence(vocab(), TemplateKind::ObjectRelative, Number::Singular, Number::Plural, 0, 1, 0, 0);
  const auto pl = detail::build_sentence(vocab(), TemplateKind::ObjectRelative, Number::Plural, Number::Plural, 0, 1, 0, 0);
  const auto pair = extract_hidden(model, {sg, pl}, 0, PositionRole::Subject);
  CHECK(pair.vectors.row(0) != pair.vectors.row(1));

  // Agrees with the full forward pass.
  const ForwardTrace t = forward(model, s.front().masked_tokens(vocab().mask_id()));
  CHECK((x.vectors.row(0) - t.hidden_states[3].row(7)).norm() <= 1e-6);

  auto missing = s.front();
  missing.embedded_verb_index.reset();
  CHECK_THROWS_AS(extract_hidden(model, {missing}, 1, PositionRole::EmbeddedVerb), Error);
  CHECK_THROWS_AS(extract_hidden(model, s, 7, PositionRole::Subject), Error);
}

TEST_CASE("checkpoint layout and round trip") {
  const ModelConfig c = small_config(17);
  const Model model(c);
  std::stringstream buf;
  write_checkpoint(buf, model);
  const std::string bytes = buf.str();

  std::size_t params = 0;
  for (const auto* t : model.params().tensors()) params += static_cast<std::size_t>(t->size());
  const std::size_t header = 4 + 2 + 7 * 4 + 4 + 8;
  CHECK(bytes.size() == header + 4 * params);
  CHECK(bytes.substr(0, 4) == "TMLM");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  CHECK(static_cast<unsigned char>(bytes[5]) == 0);
  CHECK(static_cast<unsigned char>(bytes[6]) == 2);  // num_layers, little-endian
  std::uint32_t hidden = 0;
  std::memcpy(&hidden, bytes.data() + 10, 4);
  CHECK(hidden == 16);
  float first = 0.0f;
  std::memcpy(&first, bytes.data() + header, 4);
  CHECK(first == model.params().tok_emb(0, 0));

  std::stringstream in(bytes);
  const Model back = read_checkpoint<float>(in);
  CHECK(back.config().seed == 17);
  CHECK(back.config().num_layers == 2);
  const auto ta = model.params().tensors();
  const auto tb = back.params().tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i] == *tb[i]);
  const auto s = sentences(1, 17).front();
  CHECK(forward(model, masked(s)).mask_logits == forward(back, masked(s)).mask_logits);

  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream bad_magic(bad);
  CHECK_THROWS_AS(read_checkpoint<float>(bad_magic), Error);
  bad = bytes;
  bad[4] = 9;
  std::stringstream bad_version(bad);
  CHECK_THROWS_AS(read_checkpoint<float>(bad_version), Error);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_checkpoint<float>(truncated), Error);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/model.tmlm"), Error);
}
