#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "numsub/corpus.hpp"
#include "numsub/exchange.hpp"
#include "numsub/harness.hpp"
#include "numsub/inlp.hpp"
#include "numsub/mlm.hpp"

namespace fs = std::filesystem;
using namespace numsub;

namespace {

struct CorpusFiles {
  Vocabulary vocab;
  std::vector<AgreementSentence> train;
  std::vector<AgreementSentence> test;
};

CorpusFiles load_corpus_dir(const fs::path& dir) {
  const fs::path lexicon = dir / "lexicon.json";
  Vocabulary vocab(fs::exists(lexicon) ? load_lexicon(lexicon) : default_lexicon());
  auto train = read_corpus(dir / "train.jsonl", vocab);
  auto test = read_corpus(dir / "test.jsonl", vocab);
  return {std::move(vocab), std::move(train), std::move(test)};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Number-subspace discovery and counterfactual intervention on a toy masked LM"};
  app.set_config("--config", "", "TOML/INI file whose keys mirror the command-line flags");
  app.require_subcommand(1);

  // generate-corpus
  auto* gen = app.add_subcommand("generate-corpus", "Write train/test agreement sentences as JSONL");
  fs::path gen_out = "corpus";
  std::string gen_lexicon;
  CorpusConfig corpus_cfg;
  gen->add_option("--out", gen_out, "Output directory");
  gen->add_option("--lexicon", gen_lexicon, "Lexicon JSON (default: built-in lexicon)");
  gen->add_option("--seed", corpus_cfg.seed, "Corpus seed");
  gen->add_option("--train-per-cell", corpus_cfg.train_per_cell);
  gen->add_option("--test-per-cell", corpus_cfg.test_per_cell);
  gen->add_option("--heldout-noun-fraction", corpus_cfg.heldout_noun_fraction);

  // train-mlm
  auto* train = app.add_subcommand("train-mlm", "Train the toy masked LM");
  fs::path train_corpus = "corpus";
  fs::path train_out = "model.tmlm";
  std::uint64_t train_seed = 0;
  TrainSchedule sched;
  ModelConfig model_overrides;
  train->add_option("--corpus", train_corpus, "Corpus directory");
  train->add_option("--out", train_out, "Checkpoint path");
  train->add_option("--seed", train_seed, "Model seed");
  train->add_option("--steps", sched.steps);
  train->add_option("--batch-size", sched.batch_size);
  train->add_option("--learning-rate", sched.learning_rate);
  train->add_option("--layers", model_overrides.num_layers);
  train->add_option("--hidden-dim", model_overrides.hidden_dim);
  train->add_option("--heads", model_overrides.num_heads);
  train->add_option("--ffn-dim", model_overrides.ffn_dim);
  train->add_option("--dropout", model_overrides.dropout);

  // extract-hidden
  auto* extract = app.add_subcommand("extract-hidden", "Dump labeled hidden vectors as an activation file");
  fs::path ex_model, ex_corpus = "corpus", ex_out = "hidden.nact";
  std::string ex_split = "test", ex_role = "subject";
  int ex_layer = 0;
  extract->add_option("--model", ex_model)->required();
  extract->add_option("--corpus", ex_corpus);
  extract->add_option("--split", ex_split)->check(CLI::IsMember({"train", "test"}));
  extract->add_option("--layer", ex_layer);
  extract->add_option("--role", ex_role);
  extract->add_option("--out", ex_out);

  // find-subspace
  auto* find = app.add_subcommand("find-subspace", "Run INLP and write the basis (NSUB) plus a report");
  fs::path fs_model, fs_corpus = "corpus", fs_activations, fs_heldout, fs_out = "subspace.nsub";
  int fs_layer = 0, fs_k = 8;
  std::string fs_role = "subject";
  std::size_t fs_samples = 4000;
  std::uint64_t fs_seed = 0;
  find->add_option("--model", fs_model, "Checkpoint (ignored with --activations)");
  find->add_option("--corpus", fs_corpus);
  find->add_option("--activations", fs_activations, "Training vectors from an activation file");
  find->add_option("--heldout-activations", fs_heldout, "Held-out vectors from an activation file");
  find->add_option("--layer", fs_layer);
  find->add_option("--probe-role", fs_role);
  find->add_option("--k", fs_k);
  find->add_option("--samples", fs_samples);
  find->add_option("--seed", fs_seed);
  find->add_option("--out", fs_out);

  // run
  auto* run = app.add_subcommand("run", "Run an experiment and write a result table");
  std::string run_kind = "layer-sweep";
  ExperimentConfig run_cfg;
  std::vector<fs::path> run_models;
  fs::path run_corpus = "corpus", run_out = "results";
  std::vector<std::string> run_scopes, run_roles;
  bool no_delimiters = false;
  run->add_option("--experiment", run_kind)
      ->check(CLI::IsMember({"layer-sweep", "hyper-grid", "redundancy", "upper-layer", "side-effects",
                             "seed-robustness"}));
  run->add_option("--alpha-grid", run_cfg.alpha_grid)->delimiter(',');
  run->add_option("--k-grid", run_cfg.k_grid)->delimiter(',');
  run->add_option("--trials", run_cfg.num_trials);
  run->add_option("--scope", run_scopes)->delimiter(',');
  run->add_option("--probe-role", run_roles)->delimiter(',');
  run->add_option("--layers", run_cfg.layers)->delimiter(',');
  run->add_option("--seed", run_cfg.seed);
  run->add_option("--inlp-samples", run_cfg.inlp_samples);
  run->add_option("--workers", run_cfg.workers);
  run->add_flag("--no-delimiters", no_delimiters, "Leave [CLS]/[SEP] out of global scope");
  run->add_flag("--pooled-subject-verb-probe", run_cfg.pooled_subject_verb_probe);
  run->add_option("--model", run_models, "Checkpoint; repeat for seed robustness")->required();
  run->add_option("--corpus", run_corpus);
  run->add_option("--out", run_out, "Output directory");

  // report
  auto* report = app.add_subcommand("report", "Aggregate a result table or score probability records");
  fs::path rep_results, rep_probs, rep_out = "report";
  report->add_option("--results", rep_results);
  report->add_option("--probabilities", rep_probs);
  report->add_option("--out", rep_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const Lexicon lex = gen_lexicon.empty() ? default_lexicon() : load_lexicon(gen_lexicon);
      const Vocabulary vocab(lex);
      const Corpus corpus = build_corpus(vocab, corpus_cfg);
      fs::create_directories(gen_out);
      save_lexicon(gen_out / "lexicon.json", lex);
      write_corpus(gen_out / "train.jsonl", corpus.train, vocab);
      write_corpus(gen_out / "test.jsonl", corpus.test, vocab);
      std::cout << "wrote " << corpus.train.size() << " train and " << corpus.test.size()
                << " test sentences to " << gen_out << '\n';
    } else if (*train) {
      const auto files = load_corpus_dir(train_corpus);
      ModelConfig cfg = default_model_config(files.vocab, train_seed);
      cfg.num_layers = model_overrides.num_layers;
      cfg.hidden_dim = model_overrides.hidden_dim;
      cfg.num_heads = model_overrides.num_heads;
      cfg.ffn_dim = model_overrides.ffn_dim;
      cfg.dropout = model_overrides.dropout;
      Model model(cfg);
      const TrainReport rep = train_mlm(model, files.train, files.vocab, sched);
      save_checkpoint(train_out, model);
      const double acc = conjugation_accuracy(model, files.vocab, files.test);
      nlohmann::json j = rep;
      j["model"] = cfg;
      j["test_conjugation_accuracy"] = acc;
      fs::path curve = train_out;
      curve.replace_extension(".train.json");
      write_json(curve, j);
      std::cout << "loss " << rep.initial_loss << " -> " << rep.final_loss
                << ", test conjugation accuracy " << acc << '\n';
    } else if (*extract) {
      const auto files = load_corpus_dir(ex_corpus);
      const Model model = load_checkpoint(ex_model);
      const auto& sentences = ex_split == "train" ? files.train : files.test;
      save_activations(ex_out, extract_hidden(model, sentences, ex_layer, parse_position_role(ex_role)));
    } else if (*find) {
      LabeledVectorSet data, heldout;
      if (!fs_activations.empty()) {
        data = load_activations(fs_activations);
        heldout = fs_heldout.empty() ? data : load_activations(fs_heldout);
      } else {
        if (fs_model.empty()) throw Error("find-subspace needs --model or --activations");
        const auto files = load_corpus_dir(fs_corpus);
        const Model model = load_checkpoint(fs_model);
        const auto role = parse_position_role(fs_role);
        data = extract_hidden(model, sample_balanced(files.train, fs_samples, fs_seed), fs_layer, role);
        heldout = extract_hidden(model, files.test, fs_layer, role);
      }
      ProbeConfig pc;
      pc.seed = fs_seed;
      const InlpResult r = find_number_subspace(data, fs_k, pc, heldout);
      save_subspace(fs_out, r.subspace);
      fs::path meta = fs_out;
      meta.replace_extension(".json");
      write_json(meta, r.report);
      std::cout << "k=" << r.subspace.rank() << " defect=" << r.report.orthonormality_defect
                << (r.report.degenerate ? " (degenerate: " + r.report.message + ")" : std::string()) << '\n';
    } else if (*run) {
      const auto files = load_corpus_dir(run_corpus);
      run_cfg.kind = parse_experiment(run_kind);
      run_cfg.include_delimiters = !no_delimiters;
      for (const auto& s : run_scopes) run_cfg.scopes.push_back(parse_scope(s));
      for (const auto& r : run_roles) run_cfg.probe_roles.push_back(parse_position_role(r));
      std::vector<Model> models;
      models.reserve(run_models.size());
      for (const auto& p : run_models) models.push_back(load_checkpoint(p));
      ExperimentInputs in{{}, &files.vocab, &files.train, &files.test};
      for (const auto& m : models) in.models.push_back({&m, m.config().seed});
      const ExperimentResult result = run_experiment(run_cfg, in);
      write_report(run_out, result);
      std::cout << result.rows.size() << " rows written to " << run_out << '\n';
    } else if (*report) {
      if (rep_results.empty() && rep_probs.empty()) throw Error("report needs --results or --probabilities");
      if (!rep_results.empty()) {
        write_report(rep_out, load_results(rep_results));
        std::cout << "report written to " << rep_out << '\n';
      }
      if (!rep_probs.empty()) {
        const auto records = load_probabilities(rep_probs);
        std::cout << "conjugation accuracy " << score_probabilities(records) << " over " << records.size()
                  << " sentences\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
