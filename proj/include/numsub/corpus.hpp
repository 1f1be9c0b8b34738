#pragma once

// Controlled agreement sentences with a relative clause between the main
// subject and the (masked) main copula:
//
//   SubjectRelative: [CLS] the N1 that V the N2 COP ADJ . [SEP]   (V agrees with N1)
//   ObjectRelative:  [CLS] the N1 that the N2 V COP ADJ . [SEP]   (V agrees with N2)

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "numsub/probe.hpp"

namespace numsub {

using WordPair = std::pair<std::string, std::string>;  // (singular, plural)

struct Lexicon {
  std::vector<WordPair> noun_pairs;
  std::vector<WordPair> transitive_verb_pairs;  // (admires, admire)
  std::vector<std::string> adjectives;
  WordPair copulas{"is", "are"};
  std::string determiner = "the";
  std::string complementizer = "that";
  std::string period = ".";
  std::string pad = "[PAD]";
  std::string cls = "[CLS]";
  std::string sep = "[SEP]";
  std::string mask = "[MASK]";

  void validate() const {
    if (noun_pairs.size() < 2 || transitive_verb_pairs.empty() || adjectives.empty()) {
      throw Error("lexicon needs >= 2 noun pairs, >= 1 verb pair and >= 1 adjective");
    }
  }
};

/// 40 noun pairs, 20 transitive verb pairs, 15 adjectives.
inline Lexicon default_lexicon() {
  Lexicon lex;
  lex.noun_pairs = {
      {"author", "authors"},       {"teacher", "teachers"},     {"pilot", "pilots"},
      {"surgeon", "surgeons"},     {"farmer", "farmers"},       {"senator", "senators"},
      {"manager", "managers"},     {"customer", "customers"},   {"officer", "officers"},
      {"dancer", "dancers"},       {"doctor", "doctors"},       {"lawyer", "lawyers"},
      {"student", "students"},     {"painter", "painters"},     {"singer", "singers"},
      {"writer", "writers"},       {"banker", "bankers"},       {"guard", "guards"},
      {"executive", "executives"}, {"minister", "ministers"},   {"architect", "architects"},
      {"athlete", "athletes"},     {"baker", "bakers"},         {"clerk", "clerks"},
      {"consultant", "consultants"}, {"driver", "drivers"},     {"editor", "editors"},
      {"engineer", "engineers"},   {"judge", "judges"},         {"mechanic", "mechanics"},
      {"nurse", "nurses"},         {"player", "players"},       {"poet", "poets"},
      {"professor", "professors"}, {"reporter", "reporters"},   {"sailor", "sailors"},
      {"scientist", "scientists"}, {"soldier", "soldiers"},     {"child", "children"},
      {"woman", "women"}};
  lex.transitive_verb_pairs = {
      {"admires", "admire"}, {"likes", "like"},     {"loves", "love"},       {"hates", "hate"},
      {"knows", "know"},     {"hires", "hire"},     {"thanks", "thank"},     {"praises", "praise"},
      {"blames", "blame"},   {"trusts", "trust"},   {"helps", "help"},       {"attacks", "attack"},
      {"meets", "meet"},     {"calls", "call"},     {"follows", "follow"},   {"watches", "watch"},
      {"avoids", "avoid"},   {"defends", "defend"}, {"greets", "greet"},     {"ignores", "ignore"}};
  lex.adjectives = {"happy", "tall",  "old",   "young", "smart", "rich", "brave", "famous",
                    "tired", "angry", "quiet", "kind",  "busy",  "calm", "strong"};
  return lex;
}

inline void to_json(nlohmann::json& j, const Lexicon& l) {
  j = nlohmann::json{{"noun_pairs", l.noun_pairs},
                     {"transitive_verb_pairs", l.transitive_verb_pairs},
                     {"adjectives", l.adjectives},
                     {"copulas", l.copulas},
                     {"determiner", l.determiner},
                     {"complementizer", l.complementizer},
                     {"period", l.period},
                     {"special_tokens", {l.pad, l.cls, l.sep, l.mask}}};
}

inline void from_json(const nlohmann::json& j, Lexicon& l) {
  j.at("noun_pairs").get_to(l.noun_pairs);
  j.at("transitive_verb_pairs").get_to(l.transitive_verb_pairs);
  j.at("adjectives").get_to(l.adjectives);
  if (j.contains("copulas")) j.at("copulas").get_to(l.copulas);
  if (j.contains("determiner")) j.at("determiner").get_to(l.determiner);
  if (j.contains("complementizer")) j.at("complementizer").get_to(l.complementizer);
  if (j.contains("period")) j.at("period").get_to(l.period);
  if (j.contains("special_tokens")) {
    const auto specials = j.at("special_tokens").get<std::vector<std::string>>();
    if (specials.size() != 4) throw Error("lexicon: special_tokens needs 4 entries");
    l.pad = specials[0];
    l.cls = specials[1];
    l.sep = specials[2];
    l.mask = specials[3];
  }
  l.validate();
}

enum class WordCategory : std::uint8_t {
  Special,
  Determiner,
  Complementizer,
  Punctuation,
  Copula,
  Noun,
  Verb,
  Adjective
};

/// Neither noun nor verb (copulas count as verbs); specials excluded.
inline bool is_number_neutral(WordCategory c) {
  return c == WordCategory::Determiner || c == WordCategory::Complementizer ||
         c == WordCategory::Punctuation || c == WordCategory::Adjective;
}

struct WordInfo {
  std::string surface;
  WordCategory category = WordCategory::Special;
  std::optional<Number> number;  // nouns, verbs, copulas
  int pair_index = -1;           // index into the lexicon pair/adjective list
};

/// Bijective word <-> id mapping over every lexicon surface form plus the
/// four special tokens.
class Vocabulary {
 public:
  explicit Vocabulary(const Lexicon& lex) {
    lex.validate();
    add(lex.pad, WordCategory::Special);
    add(lex.cls, WordCategory::Special);
    add(lex.sep, WordCategory::Special);
    add(lex.mask, WordCategory::Special);
    add(lex.determiner, WordCategory::Determiner);
    add(lex.complementizer, WordCategory::Complementizer);
    add(lex.period, WordCategory::Punctuation);
    is_ = add(lex.copulas.first, WordCategory::Copula, Number::Singular, 0);
    are_ = add(lex.copulas.second, WordCategory::Copula, Number::Plural, 0);
    for (std::size_t i = 0; i < lex.noun_pairs.size(); ++i) {
      nouns_.push_back({add(lex.noun_pairs[i].first, WordCategory::Noun, Number::Singular, int(i)),
                        add(lex.noun_pairs[i].second, WordCategory::Noun, Number::Plural, int(i))});
    }
    for (std::size_t i = 0; i < lex.transitive_verb_pairs.size(); ++i) {
      verbs_.push_back(
          {add(lex.transitive_verb_pairs[i].first, WordCategory::Verb, Number::Singular, int(i)),
           add(lex.transitive_verb_pairs[i].second, WordCategory::Verb, Number::Plural, int(i))});
    }
    for (std::size_t i = 0; i < lex.adjectives.size(); ++i) {
      adjectives_.push_back(add(lex.adjectives[i], WordCategory::Adjective, std::nullopt, int(i)));
    }
  }

  int size() const { return static_cast<int>(words_.size()); }
  int id(std::string_view surface) const {
    auto it = ids_.find(std::string(surface));
    if (it == ids_.end()) throw Error("out-of-vocabulary token: " + std::string(surface));
    return it->second;
  }
  const WordInfo& info(int id) const {
    if (id < 0 || id >= size()) throw Error("unknown token id " + std::to_string(id));
    return words_[static_cast<std::size_t>(id)];
  }
  const std::string& surface(int id) const { return info(id).surface; }

  int pad_id() const { return 0; }
  int cls_id() const { return 1; }
  int sep_id() const { return 2; }
  int mask_id() const { return 3; }
  int determiner_id() const { return 4; }
  int complementizer_id() const { return 5; }
  int period_id() const { return 6; }
  int copula_id(Number n) const { return n == Number::Singular ? is_ : are_; }
  int noun_id(int pair, Number n) const { return pick(nouns_.at(std::size_t(pair)), n); }
  int verb_id(int pair, Number n) const { return pick(verbs_.at(std::size_t(pair)), n); }
  int adjective_id(int i) const { return adjectives_.at(std::size_t(i)); }
  int num_noun_pairs() const { return static_cast<int>(nouns_.size()); }
  int num_verb_pairs() const { return static_cast<int>(verbs_.size()); }
  int num_adjectives() const { return static_cast<int>(adjectives_.size()); }

  std::vector<int> encode(const std::vector<std::string>& words) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }
  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(surface(i));
    return out;
  }

 private:
  static int pick(const std::pair<int, int>& p, Number n) {
    return n == Number::Singular ? p.first : p.second;
  }
  int add(const std::string& s, WordCategory c, std::optional<Number> n = std::nullopt,
          int pair = -1) {
    if (ids_.count(s)) throw Error("duplicate surface form in lexicon: " + s);
    const int id = static_cast<int>(words_.size());
    words_.push_back({s, c, n, pair});
    ids_.emplace(s, id);
    return id;
  }

  std::vector<WordInfo> words_;
  std::unordered_map<std::string, int> ids_;
  std::vector<std::pair<int, int>> nouns_;
  std::vector<std::pair<int, int>> verbs_;
  std::vector<int> adjectives_;
  int is_ = -1;
  int are_ = -1;
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

enum class TemplateKind : std::uint8_t { SubjectRelative, ObjectRelative };

inline std::string_view to_string(TemplateKind k) {
  return k == TemplateKind::SubjectRelative ? "subject_relative" : "object_relative";
}

struct AgreementSentence {
  std::vector<int> tokens;  // gold tokens; the copula is present
  int subject_index = 0;
  int main_verb_index = 0;
  std::optional<int> embedded_verb_index;
  int embedded_np_index = -1;
  Number subject_number = Number::Singular;
  Number embedded_np_number = Number::Singular;
  bool has_redundant_cue = false;
  TemplateKind kind = TemplateKind::ObjectRelative;

  /// Tokens as seen at evaluation time: the main copula replaced by [MASK].
  std::vector<int> masked_tokens(int mask_id) const {
    std::vector<int> out = tokens;
    out.at(static_cast<std::size_t>(main_verb_index)) = mask_id;
    return out;
  }

  std::optional<int> role_index(PositionRole role) const {
    switch (role) {
      case PositionRole::Subject: return subject_index;
      case PositionRole::MainVerb: return main_verb_index;
      case PositionRole::EmbeddedVerb: return embedded_verb_index;
    }
    return std::nullopt;
  }

  friend bool operator==(const AgreementSentence&, const AgreementSentence&) = default;
};

/// Gold main verb: Singular -> "is", Plural -> "are".
inline int gold_copula(const Vocabulary& vocab, const AgreementSentence& s) {
  return vocab.copula_id(s.subject_number);
}

struct GenerationRequest {
  TemplateKind kind = TemplateKind::ObjectRelative;
  Number subject_number = Number::Singular;
  Number embedded_np_number = Number::Plural;
  std::uint64_t seed = 0;
  std::size_t count = 1;
  std::vector<int> subject_nouns;   // noun-pair indices allowed as N1 (empty = all)
  std::vector<int> embedded_nouns;  // noun-pair indices allowed as N2 (empty = all)
};

namespace detail {

inline std::vector<int> resolve_pool(const std::vector<int>& pool, int n) {
  if (!pool.empty()) {
    for (int i : pool) {
      if (i < 0 || i >= n) throw Error("noun index out of range");
    }
    return pool;
  }
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  return all;
}

inline AgreementSentence build_sentence(const Vocabulary& vocab, TemplateKind kind, Number n1_num,
                                        Number n2_num, int n1, int n2, int verb, int adj) {
  AgreementSentence s;
  s.kind = kind;
  s.subject_number = n1_num;
  s.embedded_np_number = n2_num;
  const int the = vocab.determiner_id();
  const int n1_id = vocab.noun_id(n1, n1_num);
  const int n2_id = vocab.noun_id(n2, n2_num);
  const int cop = vocab.copula_id(n1_num);
  const int a = vocab.adjective_id(adj);
  if (kind == TemplateKind::SubjectRelative) {
    const int v = vocab.verb_id(verb, n1_num);
    s.tokens = {vocab.cls_id(), the, n1_id, vocab.complementizer_id(), v, the, n2_id,
                cop,            a,   vocab.period_id(), vocab.sep_id()};
    s.embedded_verb_index = 4;
    s.embedded_np_index = 6;
  } else {
    const int v = vocab.verb_id(verb, n2_num);
    s.tokens = {vocab.cls_id(), the, n1_id, vocab.complementizer_id(), the, n2_id, v,
                cop,            a,   vocab.period_id(), vocab.sep_id()};
    s.embedded_verb_index = 6;
    s.embedded_np_index = 5;
  }
  s.subject_index = 2;
  s.main_verb_index = 7;
  // The embedded verb is a cue to subject number only when the subject
  // controls its agreement.
  s.has_redundant_cue = kind == TemplateKind::SubjectRelative;
  return s;
}

}  // namespace detail

/// Samples `count` distinct sentences of one template/number cell, without
/// replacement over (N1, N2, V, ADJ) with N1 != N2. Deterministic in seed.
inline std::vector<AgreementSentence> generate(const GenerationRequest& req,
                                               const Vocabulary& vocab) {
  if (req.count < 1) throw Error("generate: count must be >= 1");
  const auto subj = detail::resolve_pool(req.subject_nouns, vocab.num_noun_pairs());
  const auto emb = detail::resolve_pool(req.embedded_nouns, vocab.num_noun_pairs());
  const std::uint64_t nv = static_cast<std::uint64_t>(vocab.num_verb_pairs());
  const std::uint64_t na = static_cast<std::uint64_t>(vocab.num_adjectives());
  const std::uint64_t ne = emb.size();
  const std::uint64_t raw_total = subj.size() * ne * nv * na;

  std::uint64_t total = 0;
  for (int a : subj) {
    for (int b : emb) total += (a != b) ? nv * na : 0;
  }
  if (req.count > total) {
    throw Error("generate: requested " + std::to_string(req.count) + " sentences but only " +
                std::to_string(total) + " distinct combinations exist");
  }

  auto decode = [&](std::uint64_t code) {
    const int adj = static_cast<int>(code % na);
    code /= na;
    const int verb = static_cast<int>(code % nv);
    code /= nv;
    const int n2 = emb[code % ne];
    const int n1 = subj[code / ne];
    return std::array<int, 4>{n1, n2, verb, adj};
  };

  std::mt19937_64 rng(req.seed);
  std::vector<std::uint64_t> codes;
  codes.reserve(req.count);
  if (req.count * 4 <= total) {
    std::uniform_int_distribution<std::uint64_t> pick(0, raw_total - 1);
    std::unordered_set<std::uint64_t> seen;
    while (codes.size() < req.count) {
      const std::uint64_t c = pick(rng);
      const auto parts = decode(c);
      if (parts[0] == parts[1] || !seen.insert(c).second) continue;
      codes.push_back(c);
    }
  } else {
    std::vector<std::uint64_t> all;
    all.reserve(total);
    for (std::uint64_t c = 0; c < raw_total; ++c) {
      const auto parts = decode(c);
      if (parts[0] != parts[1]) all.push_back(c);
    }
    std::shuffle(all.begin(), all.end(), rng);
    codes.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(req.count));
  }

  std::vector<AgreementSentence> out;
  out.reserve(codes.size());
  for (std::uint64_t c : codes) {
    const auto p = decode(c);
    out.push_back(detail::build_sentence(vocab, req.kind, req.subject_number,
                                         req.embedded_np_number, p[0], p[1], p[2], p[3]));
  }
  return out;
}

/// n/2 singular-subject and n/2 plural-subject sentences drawn without
/// replacement, returned in shuffled order.
inline std::vector<AgreementSentence> sample_balanced(const std::vector<AgreementSentence>& pool,
                                                      std::size_t n, std::uint64_t seed) {
  if (n == 0 || n % 2 != 0) throw Error("sample_balanced: n must be even and positive");
  std::vector<std::size_t> sg, pl;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    (pool[i].subject_number == Number::Singular ? sg : pl).push_back(i);
  }
  if (sg.size() < n / 2 || pl.size() < n / 2) {
    throw Error("sample_balanced: pool has too few sentences of one subject number");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(sg.begin(), sg.end(), rng);
  std::shuffle(pl.begin(), pl.end(), rng);
  std::vector<std::size_t> chosen(sg.begin(), sg.begin() + static_cast<std::ptrdiff_t>(n / 2));
  chosen.insert(chosen.end(), pl.begin(), pl.begin() + static_cast<std::ptrdiff_t>(n / 2));
  std::shuffle(chosen.begin(), chosen.end(), rng);
  std::vector<AgreementSentence> out;
  out.reserve(n);
  for (std::size_t i : chosen) out.push_back(pool[i]);
  return out;
}

/// Noun pairs reserved as test-time subjects.
struct NounSplit {
  std::vector<int> train_subjects;
  std::vector<int> test_subjects;
};

inline NounSplit split_nouns(int num_pairs, double heldout_fraction, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(num_pairs));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::lround(heldout_fraction * num_pairs));
  if (n_test < 1 || n_test >= order.size()) throw Error("split_nouns: bad held-out fraction");
  NounSplit split;
  split.test_subjects.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  split.train_subjects.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(split.test_subjects.begin(), split.test_subjects.end());
  std::sort(split.train_subjects.begin(), split.train_subjects.end());
  return split;
}

struct CorpusConfig {
  std::uint64_t seed = 0;
  std::size_t train_per_cell = 2500;  // 8 cells: template x subject number x N2 number
  std::size_t test_per_cell = 100;
  double heldout_noun_fraction = 0.2;
};

/// Train and test splits. Reserved nouns never head a training subject; they
/// occur in training only as the embedded noun, so their number is learnable
/// from embedded-verb agreement while every test subject is unseen in that role.
struct Corpus {
  NounSplit nouns;
  std::vector<AgreementSentence> train;
  std::vector<AgreementSentence> test;
};

inline Corpus build_corpus(const Vocabulary& vocab, const CorpusConfig& cfg) {
  Corpus c;
  c.nouns = split_nouns(vocab.num_noun_pairs(), cfg.heldout_noun_fraction, cfg.seed);
  std::uint64_t cell = 0;
  for (TemplateKind kind : {TemplateKind::SubjectRelative, TemplateKind::ObjectRelative}) {
    for (Number n1 : {Number::Singular, Number::Plural}) {
      for (Number n2 : {Number::Singular, Number::Plural}) {
        GenerationRequest req{kind, n1, n2, cfg.seed * 1000 + 2 * cell + 1, cfg.train_per_cell,
                              c.nouns.train_subjects, {}};
        auto train = generate(req, vocab);
        c.train.insert(c.train.end(), train.begin(), train.end());
        req.seed = cfg.seed * 1000 + 2 * cell + 2;
        req.count = cfg.test_per_cell;
        req.subject_nouns = c.nouns.test_subjects;
        auto test = generate(req, vocab);
        c.test.insert(c.test.end(), test.begin(), test.end());
        ++cell;
      }
    }
  }
  std::mt19937_64 rng(cfg.seed + 77);
  std::shuffle(c.train.begin(), c.train.end(), rng);
  std::shuffle(c.test.begin(), c.test.end(), rng);
  return c;
}

// Corpus export: one JSON object per line with exactly the fields
// surface, subject_index, main_verb_index, embedded_verb_index (-1 if none),
// subject_number, has_redundant_cue. The main copula appears as the mask token.

inline nlohmann::json to_record(const AgreementSentence& s, const Vocabulary& vocab) {
  const auto words = vocab.decode(s.masked_tokens(vocab.mask_id()));
  std::string surface;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) surface += ' ';
    surface += words[i];
  }
  return nlohmann::json{{"surface", surface},
                        {"subject_index", s.subject_index},
                        {"main_verb_index", s.main_verb_index},
                        {"embedded_verb_index", s.embedded_verb_index.value_or(-1)},
                        {"subject_number", std::string(to_string(s.subject_number))},
                        {"has_redundant_cue", s.has_redundant_cue}};
}

inline AgreementSentence from_record(const nlohmann::json& j, const Vocabulary& vocab) {
  AgreementSentence s;
  s.tokens = vocab.encode(split_words(j.at("surface").get<std::string>()));
  s.subject_index = j.at("subject_index").get<int>();
  s.main_verb_index = j.at("main_verb_index").get<int>();
  const int emb = j.at("embedded_verb_index").get<int>();
  if (emb >= 0) s.embedded_verb_index = emb;
  s.subject_number = parse_number(j.at("subject_number").get<std::string>());
  s.has_redundant_cue = j.at("has_redundant_cue").get<bool>();
  const auto n = static_cast<int>(s.tokens.size());
  for (int idx : {s.subject_index, s.main_verb_index, emb}) {
    if (idx >= n) throw Error("corpus record index out of range");
  }
  if (s.subject_index < 0 || s.main_verb_index < 0 || s.subject_index >= s.main_verb_index) {
    throw Error("corpus record: subject must precede the main verb");
  }
  s.tokens[static_cast<std::size_t>(s.main_verb_index)] = vocab.copula_id(s.subject_number);
  s.kind = s.has_redundant_cue ? TemplateKind::SubjectRelative : TemplateKind::ObjectRelative;
  for (int i = s.subject_index + 1; i < s.main_verb_index; ++i) {
    const auto& w = vocab.info(s.tokens[static_cast<std::size_t>(i)]);
    if (w.category == WordCategory::Noun) {
      s.embedded_np_index = i;
      s.embedded_np_number = *w.number;
    }
  }
  return s;
}

inline void write_corpus(const std::filesystem::path& path,
                         const std::vector<AgreementSentence>& sentences, const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& s : sentences) out << to_record(s, vocab).dump() << '\n';
}

inline std::vector<AgreementSentence> read_corpus(const std::filesystem::path& path,
                                                  const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<AgreementSentence> out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    out.push_back(from_record(nlohmann::json::parse(line), vocab));
  }
  return out;
}

inline Lexicon load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return nlohmann::json::parse(in).get<Lexicon>();
}

inline void save_lexicon(const std::filesystem::path& path, const Lexicon& lex) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << nlohmann::json(lex).dump(2) << '\n';
}

}  // namespace numsub
