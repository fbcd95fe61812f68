// Command-line front end for the SRA toolkit.
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>

#include "sra/adaptation.hpp"
#include "sra/classifier.hpp"
#include "sra/corpus.hpp"
#include "sra/evaluation.hpp"
#include "sra/judge.hpp"
#include "sra/pipeline.hpp"
#include "sra/prompt.hpp"
#include "sra/sra_metric.hpp"
#include "sra/tokenizer.hpp"
#include "sra/transformer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sra;

namespace {

constexpr int kUsageExit = 2;
constexpr int kErrorExit = 1;

struct Common {
  std::string catalog;
  std::string templates;
  bool quiet = false;
};

StrategyCatalog load_catalog(const Common& c) {
  return c.catalog.empty() ? StrategyCatalog::load_default() : StrategyCatalog::load(c.catalog);
}

TemplateText load_templates(const Common& c) {
  return c.templates.empty() ? TemplateText::load_default() : TemplateText::load(c.templates);
}

void require_file(const std::string& path, std::string_view what) {
  if (path.empty()) throw InvalidArgument(std::string(what) + " path is required");
  if (!fs::is_regular_file(path)) throw Error(std::string(what) + " not found: " + path);
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

/// Metadata written next to every primary output: enough to rerun the command.
void write_metadata(const fs::path& output, const CLI::App& sub, const json& extra = json::object()) {
  json meta = {{"format", "sra-run-metadata/1"},
               {"tool_version", std::string(kVersion)},
               {"command", sub.get_name()},
               {"config", sub.config_to_str(true, false)}};
  for (const auto& [k, v] : extra.items()) meta[k] = v;
  auto out = open_out(fs::path(output.string() + ".meta.json"));
  out << meta.dump(2) << '\n';
}

std::map<std::string, Conversation> index_corpus(const std::vector<Conversation>& corpus) {
  std::map<std::string, Conversation> m;
  for (const auto& c : corpus) m.emplace(c.id, c);
  return m;
}

std::vector<Conversation> load_normalized(const std::string& path) {
  auto corpus = load_conversations(path);
  for (auto& c : corpus) c = normalize_turns(c);
  return corpus;
}

struct ModelPaths {
  std::string checkpoint;
  std::string adapter;
};

Weights load_model(const ModelPaths& p) {
  auto w = Weights::load(p.checkpoint);
  if (!p.adapter.empty()) w = apply_adapters(w, AdapterSet::load(p.adapter));
  return w;
}

void add_model_options(CLI::App* sub, ModelPaths& p, bool adapter = true) {
  sub->add_option("--checkpoint", p.checkpoint, "Base model checkpoint")->required();
  if (adapter) sub->add_option("--adapter", p.adapter, "Adapter checkpoint applied on top of the base");
}

void add_train_options(CLI::App* sub, TrainConfig& t, std::string& schedule) {
  sub->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
  sub->add_option("--batch-size", t.batch_size, "Examples per optimizer step")->capture_default_str();
  sub->add_option("--lr", t.learning_rate, "Peak learning rate")->capture_default_str();
  sub->add_option("--schedule", schedule, "constant|cosine|cosine_restarts")->capture_default_str();
  sub->add_option("--restarts", t.restarts, "Cycles for cosine_restarts")->capture_default_str();
  sub->add_option("--warmup", t.warmup_steps, "Linear warmup steps")->capture_default_str();
  sub->add_option("--weight-decay", t.weight_decay, "Decoupled weight decay")->capture_default_str();
  sub->add_option("--grad-clip", t.grad_clip, "Global gradient-norm clip, 0 disables")->capture_default_str();
  sub->add_option("--seed", t.seed, "Shuffling seed")->capture_default_str();
}

json train_report_json(const TrainReport& r) {
  return {{"initial_loss", r.initial_loss}, {"epoch_loss", r.epoch_loss}, {"steps", r.steps}};
}

std::vector<TokenId> response_ids(const Vocab& vocab, const std::string& response) {
  auto ids = vocab.encode(" " + response);
  ids.push_back(special::eos);
  return ids;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void write_csv_row(std::ostream& out, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out << ',';
    const auto& c = cells[i];
    if (c.find_first_of(",\"\n") != std::string::npos) {
      out << '"';
      for (char ch : c) out << (ch == '"' ? std::string("\"\"") : std::string(1, ch));
      out << '"';
    } else {
      out << c;
    }
  }
  out << '\n';
}

std::string num(double v) { return fmt::format("{:.10g}", v); }

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_st("sra");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");

  CLI::App app{"Strategy Relevant Attention toolkit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.set_config("--config", "", "Plain-text (INI/TOML) config file; command-line flags take precedence");
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--catalog", common.catalog, "Strategy catalog JSON (defaults to the shipped one)");
  app.add_option("--templates", common.templates, "Prompt template file (defaults to the shipped one)");
  app.add_flag("-q,--quiet", common.quiet, "Only log warnings and errors");

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic conversation corpus");
  SynthConfig synth_cfg;
  std::string synth_out;
  bool synth_plain = false;
  synth->add_option("--out", synth_out, "Output conversation JSONL")->required();
  synth->add_option("--conversations", synth_cfg.conversations)->capture_default_str();
  synth->add_option("--min-turns", synth_cfg.min_turns)->capture_default_str();
  synth->add_option("--max-turns", synth_cfg.max_turns)->capture_default_str();
  synth->add_option("--seed", synth_cfg.seed)->capture_default_str();
  synth->add_flag("--plain-history", synth_plain, "Supporter turns are unlabelled acknowledgements");

  // train-vocab
  auto* tv = app.add_subcommand("train-vocab", "Train the subword vocabulary");
  std::string tv_corpus, tv_out;
  std::size_t tv_size = 2048;
  tv->add_option("--corpus", tv_corpus, "Conversation JSONL")->required();
  tv->add_option("--out", tv_out, "Vocabulary file")->required();
  tv->add_option("--size", tv_size, "Target vocabulary size")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Train a base model on the supporter turns of a corpus");
  std::string pre_corpus, pre_vocab, pre_out, pre_schedule = "cosine", pre_templates = "standard,c1_hf";
  ModelConfig pre_model;
  TrainConfig pre_train;
  pre_train.learning_rate = 3e-3;
  pre_train.batch_size = 4;
  std::size_t pre_min = 5, pre_max = 23, pre_align = 0;
  bool pre_full = true;
  std::uint64_t pre_init_seed = 0;
  pre->add_option("--corpus", pre_corpus)->required();
  pre->add_option("--vocab", pre_vocab)->required();
  pre->add_option("--out", pre_out, "Checkpoint to write")->required();
  pre->add_option("--d", pre_model.d)->capture_default_str();
  pre->add_option("--layers", pre_model.layers)->capture_default_str();
  pre->add_option("--heads", pre_model.heads)->capture_default_str();
  pre->add_option("--max-len", pre_model.max_len)->capture_default_str();
  pre->add_option("--templates-used", pre_templates, "Comma-separated template ids")->capture_default_str();
  pre->add_option("--min-turn", pre_min)->capture_default_str();
  pre->add_option("--max-turn", pre_max)->capture_default_str();
  pre->add_option("--align-to", pre_align, "Left-pad prompts to this many tokens (0 = off)")->capture_default_str();
  pre->add_option("--full-sequence", pre_full, "Score prompt tokens too")->capture_default_str();
  pre->add_option("--init-seed", pre_init_seed)->capture_default_str();
  add_train_options(pre, pre_train, pre_schedule);

  // extend
  auto* ext = app.add_subcommand("extend", "Generate strategy-conditioned continuations");
  std::string ext_corpus, ext_vocab, ext_out, ext_sra_out, ext_tag = "model", ext_template = "c1_hf";
  ModelPaths ext_model;
  JobConfig ext_jobs;
  GenerationConfig ext_gen;
  std::size_t ext_align = 0;
  std::string ext_ids;
  ext->add_option("--corpus", ext_corpus)->required();
  ext->add_option("--vocab", ext_vocab)->required();
  add_model_options(ext, ext_model);
  ext->add_option("--out", ext_out, "Extended-example JSONL")->required();
  ext->add_option("--sra-out", ext_sra_out, "Also write the SRA of every generation");
  ext->add_option("--model-tag", ext_tag)->capture_default_str();
  ext->add_option("--template", ext_template)->capture_default_str();
  ext->add_option("--strategy-prob", ext_jobs.strategy_prob)->capture_default_str();
  ext->add_option("--min-turn", ext_jobs.min_turn)->capture_default_str();
  ext->add_option("--max-turn", ext_jobs.max_turn)->capture_default_str();
  ext->add_option("--repetitions", ext_jobs.repetitions)->capture_default_str();
  ext->add_option("--seed", ext_jobs.seed)->capture_default_str();
  ext->add_option("--top-p", ext_gen.top_p)->capture_default_str();
  ext->add_option("--temperature", ext_gen.temperature)->capture_default_str();
  ext->add_option("--max-new-tokens", ext_gen.max_new_tokens)->capture_default_str();
  ext->add_option("--align-to", ext_align, "Left-pad prompts to this many tokens (0 = off)")->capture_default_str();
  ext->add_option("--ids", ext_ids, "File of conversation ids to restrict to (one per line)");

  // sra
  auto* sra_cmd = app.add_subcommand("sra", "Teacher-forced SRA of existing continuations");
  std::string sra_extended, sra_corpus, sra_vocab, sra_out, sra_group = "template";
  ModelPaths sra_model;
  std::size_t sra_align = 0, sra_bin = 2;
  sra_cmd->add_option("--extended", sra_extended, "Extended-example JSONL")->required();
  sra_cmd->add_option("--corpus", sra_corpus)->required();
  sra_cmd->add_option("--vocab", sra_vocab)->required();
  add_model_options(sra_cmd, sra_model);
  sra_cmd->add_option("--out", sra_out, "SRA report JSONL")->required();
  sra_cmd->add_option("--group-by", sra_group, "template|turn_bin|model_tag|constant")->capture_default_str();
  sra_cmd->add_option("--bin-width", sra_bin)->capture_default_str();
  sra_cmd->add_option("--align-to", sra_align)->capture_default_str();

  // finetune
  auto* ft = app.add_subcommand("finetune", "Train low-rank adapters on extended examples");
  std::string ft_data, ft_corpus, ft_vocab, ft_out, ft_schedule = "cosine";
  ModelPaths ft_model;
  AdapterConfig ft_adapter;
  TrainConfig ft_train;
  std::size_t ft_align = 0;
  ft->add_option("--data", ft_data, "Extended-example JSONL")->required();
  ft->add_option("--corpus", ft_corpus)->required();
  ft->add_option("--vocab", ft_vocab)->required();
  add_model_options(ft, ft_model, false);
  ft->add_option("--out", ft_out, "Adapter checkpoint to write")->required();
  ft->add_option("--rank", ft_adapter.rank)->capture_default_str();
  ft->add_option("--alpha", ft_adapter.alpha)->capture_default_str();
  ft->add_option("--adapter-seed", ft_adapter.seed)->capture_default_str();
  ft->add_option("--align-to", ft_align)->capture_default_str();
  add_train_options(ft, ft_train, ft_schedule);

  // train-classifier
  auto* tc = app.add_subcommand("train-classifier", "Train the n-gram strategy classifier");
  std::string tc_data, tc_out, tc_stop, tc_embeddings;
  ClassifierTrainConfig tc_cfg;
  tc->add_option("--data", tc_data, "JSONL with `strategy` and `response` (or `text`) fields")->required();
  tc->add_option("--out", tc_out, "Model file")->required();
  tc->add_option("--folds", tc_cfg.folds)->capture_default_str();
  tc->add_option("--test-fraction", tc_cfg.test_fraction)->capture_default_str();
  tc->add_option("--l2", tc_cfg.fit.l2)->capture_default_str();
  tc->add_option("--max-df", tc_cfg.vocab.max_df)->capture_default_str();
  tc->add_option("--seed", tc_cfg.seed)->capture_default_str();
  tc->add_option("--stop-words", tc_stop, "Stop-word list (defaults to the shipped one)");
  tc->add_option("--embeddings", tc_embeddings, "Train on embedding JSONL keyed by example_id instead of n-grams");

  // predict
  auto* pr = app.add_subcommand("predict", "Classify responses");
  std::string pr_model, pr_text, pr_input, pr_out;
  pr->add_option("--model", pr_model)->required();
  pr->add_option("--text", pr_text, "Single response to classify");
  pr->add_option("--input", pr_input, "Extended-example JSONL to classify");
  pr->add_option("--out", pr_out, "Prediction JSONL (stdout when omitted)");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Adherence accuracy, turn curves and SRA correlation");
  std::string ev_records, ev_extended, ev_sra, ev_model, ev_out, ev_group = "template";
  std::size_t ev_bin = 2;
  ev->add_option("--records", ev_records, "Adherence JSONL");
  ev->add_option("--extended", ev_extended, "Extended-example JSONL (with --sra and --classifier)");
  ev->add_option("--sra", ev_sra, "SRA report JSONL");
  ev->add_option("--classifier", ev_model, "Classifier model");
  ev->add_option("--out", ev_out, "Report JSON")->required();
  ev->add_option("--group-by", ev_group, "template|model_tag|template+model")->capture_default_str();
  ev->add_option("--bin-width", ev_bin)->capture_default_str();

  // judge
  auto* jd = app.add_subcommand("judge", "Pairwise LLM-as-judge comparison in both orders");
  std::string jd_pairs, jd_out, jd_record, jd_replay;
  JudgeConfig jd_cfg;
  double jd_timeout = 60.0;
  jd->add_option("--pairs", jd_pairs, "JSONL of {pair_id, history, strategy, response_a, response_b}")->required();
  jd->add_option("--out", jd_out, "Verdict JSONL")->required();
  jd->add_option("--judge-url", jd_cfg.url)->capture_default_str();
  jd->add_option("--judge-model", jd_cfg.model)->capture_default_str();
  jd->add_option("--api-key-env", jd_cfg.api_key_env)->capture_default_str();
  jd->add_option("--timeout", jd_timeout, "Seconds per request")->capture_default_str();
  jd->add_option("--concurrency", jd_cfg.concurrency)->capture_default_str();
  jd->add_option("--max-attempts", jd_cfg.max_attempts)->capture_default_str();
  jd->add_option("--max-prompt-chars", jd_cfg.max_prompt_chars)->capture_default_str();
  auto* rec_opt = jd->add_option("--record", jd_record, "Write a cassette of all exchanges");
  jd->add_option("--replay", jd_replay, "Serve responses from a cassette instead of the network")->excludes(rec_opt);

  // report
  auto* rp = app.add_subcommand("report", "CSV, JSON and plot-data emission");
  std::string rp_sra, rp_records, rp_annotations, rp_out_dir;
  std::size_t rp_bin = 2;
  int rp_min = -4, rp_max = 4;
  rp->add_option("--sra", rp_sra, "SRA report JSONL");
  rp->add_option("--records", rp_records, "Adherence JSONL");
  rp->add_option("--annotations", rp_annotations, "Human annotation CSV");
  rp->add_option("--out-dir", rp_out_dir)->required();
  rp->add_option("--bin-width", rp_bin)->capture_default_str();
  rp->add_option("--score-min", rp_min)->capture_default_str();
  rp->add_option("--score-max", rp_max)->capture_default_str();

  // experiment
  auto* ex = app.add_subcommand("experiment", "Run the desk-scale adherence experiment end to end");
  ExperimentConfig ex_cfg;
  std::string ex_out;
  ex->add_option("--out", ex_out, "Adherence JSONL for all evaluated generations")->required();
  ex->add_option("--seed", ex_cfg.seed)->capture_default_str();
  ex->add_option("--train-conversations", ex_cfg.train_conversations)->capture_default_str();
  ex->add_option("--eval-conversations", ex_cfg.eval_conversations)->capture_default_str();
  ex->add_option("--pretrain-epochs", ex_cfg.pretrain.epochs)->capture_default_str();
  ex->add_option("--finetune-epochs", ex_cfg.finetune.epochs)->capture_default_str();
  ex->add_option("--finetune-lr", ex_cfg.finetune.learning_rate)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "error: usage: " << e.what() << '\n';
    return kUsageExit;
  }
  if (common.quiet) spdlog::set_level(spdlog::level::warn);

  try {
    if (synth->parsed()) {
      synth_cfg.strategy_history = !synth_plain;
      const auto corpus = synthesize_corpus(load_catalog(common), synth_cfg);
      auto out = open_out(synth_out);
      write_conversations(out, corpus);
      write_metadata(synth_out, *synth);
      spdlog::info("wrote {} conversations to {}", corpus.size(), synth_out);
    } else if (tv->parsed()) {
      require_file(tv_corpus, "corpus");
      const auto corpus = load_normalized(tv_corpus);
      const auto catalog = load_catalog(common);
      const auto tt = load_templates(common);
      std::string text;
      for (const auto* s : {&tt.system_prefix, &tt.instruction, &tt.situation, &tt.strategy_lead, &tt.overflow_header,
                            &tt.overflow_line, &tt.user_prefix, &tt.assistant_prefix, &tt.response_prefix}) {
        text += *s + "\n";
      }
      for (const auto& s : catalog.strategies()) text += s.name + ": " + s.description + "\n";
      for (const auto& c : corpus) {
        text += c.situation + "\n";
        for (const auto& t : c.turns) text += tt.role_seeker + ": " + t.text + "\n " + t.text + "\n";
      }
      const auto vocab = Vocab::train(text, tv_size);
      vocab.save(tv_out);
      write_metadata(tv_out, *tv, {{"vocab_size", vocab.size()}});
      spdlog::info("vocabulary of {} tokens written to {}", vocab.size(), tv_out);
    } else if (pre->parsed()) {
      require_file(pre_corpus, "corpus");
      require_file(pre_vocab, "vocabulary");
      pre_train.schedule = parse_schedule(pre_schedule);
      const auto corpus = load_normalized(pre_corpus);
      const auto catalog = load_catalog(common);
      const auto tt = load_templates(common);
      const auto vocab = Vocab::load(pre_vocab);
      pre_model.vocab = vocab.size();
      pre_model.validate();
      Rng rng(derive_seed(pre_train.seed, "pretrain-strategies"));
      std::vector<TrainExample> data;
      for (const auto& tmpl_name : split_csv(pre_templates)) {
        const auto tmpl = parse_template_id(tmpl_name);
        for (const auto& c : corpus) {
          for (auto p : enumerate_split_points(c, pre_min, pre_max)) {
            if (p >= c.turns.size() || c.turns[p].speaker != Speaker::supporter) continue;
            const auto& next = c.turns[p];
            const auto& strategy =
                next.strategy && catalog.contains(*next.strategy)
                    ? catalog.at(*next.strategy)
                    : catalog.strategies()[std::uniform_int_distribution<std::size_t>(0, catalog.size() - 1)(rng)];
            auto tp = left_pad(tokenize_prompt(assemble(prefix_turns(c, p), c.situation, strategy, tmpl, tt), vocab),
                               pre_align);
            TrainExample ex{tp.ids, response_ids(vocab, next.text)};
            if (pre_full) {
              ex.prompt.insert(ex.prompt.end(), ex.response.begin(), ex.response.end());
              ex.response.assign(ex.prompt.begin() + 1, ex.prompt.end());
              ex.prompt.resize(1);
            }
            data.push_back(std::move(ex));
          }
        }
      }
      if (data.empty()) throw Error("no training examples: no supporter turn follows a legal split point");
      auto w = Weights::random(pre_model, pre_init_seed);
      const auto report = train_full(w, data, pre_train, [](std::size_t e, double l) {
        spdlog::info("epoch {} loss {:.4f}", e, l);
      });
      w.save(pre_out);
      write_metadata(pre_out, *pre, {{"examples", data.size()}, {"training", train_report_json(report)}});
    } else if (ext->parsed()) {
      require_file(ext_corpus, "corpus");
      require_file(ext_vocab, "vocabulary");
      require_file(ext_model.checkpoint, "checkpoint");
      if (!ext_model.adapter.empty()) require_file(ext_model.adapter, "adapter");
      ext_gen.validate();
      ext_jobs.template_id = std::string(to_string(parse_template_id(ext_template)));
      auto corpus = load_normalized(ext_corpus);
      if (!ext_ids.empty()) {
        require_file(ext_ids, "id list");
        std::set<std::string> keep;
        for (const auto& l : read_lines(ext_ids))
          if (!l.empty()) keep.insert(l);
        std::erase_if(corpus, [&](const Conversation& c) { return !keep.count(c.id); });
      }
      const auto catalog = load_catalog(common);
      const auto tt = load_templates(common);
      const auto vocab = Vocab::load(ext_vocab);
      const auto w = load_model(ext_model);
      const auto by_id = index_corpus(corpus);
      const auto jobs = build_extension_jobs(corpus, catalog, ext_jobs);
      auto out = open_out(ext_out);
      std::optional<std::ofstream> sra_out;
      if (!ext_sra_out.empty()) sra_out = open_out(ext_sra_out);
      std::size_t rejected = 0;
      for (const auto& job : jobs) {
        const auto r = run_extension_job(w, vocab, catalog, tt, by_id.at(job.conv_id), job, ext_gen, ext_tag, ext_align);
        if (!r.accepted) {
          ++rejected;
          continue;
        }
        out << serialize_extended(r.example) << '\n';
        if (sra_out && r.sra) *sra_out << serialize_sra_record(*r.sra) << '\n';
      }
      write_metadata(ext_out, *ext, {{"jobs", jobs.size()}, {"rejected", rejected}});
      spdlog::info("{} jobs, {} continuations written, {} rejected by post-processing", jobs.size(),
                   jobs.size() - rejected, rejected);
    } else if (sra_cmd->parsed()) {
      require_file(sra_extended, "extended examples");
      require_file(sra_corpus, "corpus");
      require_file(sra_vocab, "vocabulary");
      require_file(sra_model.checkpoint, "checkpoint");
      const auto grouping = parse_sra_grouping(sra_group);
      const auto examples = load_extended(sra_extended);
      const auto by_id = index_corpus(load_normalized(sra_corpus));
      const auto catalog = load_catalog(common);
      const auto tt = load_templates(common);
      const auto vocab = Vocab::load(sra_vocab);
      const auto w = load_model(sra_model);
      std::vector<SraRecord> records;
      auto out = open_out(sra_out);
      for (const auto& e : examples) {
        const auto it = by_id.find(e.job.conv_id);
        if (it == by_id.end()) throw Error("extended example refers to unknown conversation " + e.job.conv_id);
        const auto tp = left_pad(tokenize_prompt(job_prompt(it->second, e.job, catalog, tt), vocab), sra_align);
        auto resp = vocab.encode(" " + e.response);
        const auto r = compute_sra(response_trace(w, tp.ids, resp), tp.strategy_span);
        SraRecord rec{example_id(e.job), e.job.template_id, e.model_tag, e.job.prefix_len, r.sra, r.log_sra,
                      w.config.layers, w.config.heads, resp.size(), tp.length(), tp.strategy_span.begin,
                      tp.strategy_span.end};
        out << serialize_sra_record(rec) << '\n';
        records.push_back(std::move(rec));
      }
      json groups = json::array();
      for (const auto& g : corpus_sra(records, grouping, sra_bin)) {
        groups.push_back({{"key", g.key}, {"count", g.count}, {"mean_log_sra", g.mean}, {"stddev", g.stddev}});
        std::cout << g.key << '\t' << g.count << '\t' << num(g.mean) << '\t' << num(g.stddev) << '\n';
      }
      write_metadata(sra_out, *sra_cmd, {{"groups", groups}});
    } else if (ft->parsed()) {
      require_file(ft_data, "training data");
      require_file(ft_corpus, "corpus");
      require_file(ft_vocab, "vocabulary");
      require_file(ft_model.checkpoint, "checkpoint");
      ft_train.schedule = parse_schedule(ft_schedule);
      const auto examples = load_extended(ft_data);
      const auto by_id = index_corpus(load_normalized(ft_corpus));
      const auto catalog = load_catalog(common);
      const auto tt = load_templates(common);
      const auto vocab = Vocab::load(ft_vocab);
      const auto base = Weights::load(ft_model.checkpoint);
      std::vector<TrainExample> data;
      for (const auto& e : examples) {
        const auto it = by_id.find(e.job.conv_id);
        if (it == by_id.end()) throw Error("training example refers to unknown conversation " + e.job.conv_id);
        const auto tp = left_pad(tokenize_prompt(job_prompt(it->second, e.job, catalog, tt), vocab), ft_align);
        data.push_back({tp.ids, response_ids(vocab, e.response)});
      }
      auto adapters = AdapterSet::init(base.config, ft_adapter);
      const auto before = base.checksum();
      const auto report = finetune(base, adapters, data, ft_train, [](std::size_t e, double l) {
        spdlog::info("epoch {} loss {:.4f}", e, l);
      });
      if (base.checksum() != before) throw Error("base weights changed during adapter training");
      adapters.save(ft_out);
      write_metadata(ft_out, *ft, {{"examples", data.size()}, {"training", train_report_json(report)}});
    } else if (tc->parsed()) {
      require_file(tc_data, "training data");
      const auto catalog = load_catalog(common);
      std::vector<std::string> classes;
      for (const auto& s : catalog.strategies()) classes.push_back(s.id);
      std::vector<std::string> ids, texts;
      std::vector<std::size_t> labels;
      std::size_t lineno = 0;
      for (const auto& line : read_lines(tc_data)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          const auto j = json::parse(line);
          const std::string text = j.contains("response") ? j.at("response") : j.at("text");
          labels.push_back(catalog.index_of(j.at("strategy").get<std::string>()));
          texts.push_back(text);
          ids.push_back(j.contains("conv_id") ? fmt::format("{}:{}:{}", j.at("conv_id").get<std::string>(),
                                                            j.value("prefix_len", 0), j.at("strategy").get<std::string>())
                                              : j.value("example_id", std::to_string(lineno)));
        } catch (const json::exception& e) {
          throw ParseError(tc_data, lineno, e.what());
        }
      }
      ClassifierReport report;
      if (!tc_embeddings.empty()) {
        require_file(tc_embeddings, "embeddings");
        std::map<std::string, std::vector<double>> emb;
        for (auto& r : load_embeddings(tc_embeddings)) emb[r.example_id] = std::move(r.vector);
        std::vector<std::vector<double>> vecs;
        for (const auto& id : ids) {
          auto it = emb.find(id);
          if (it == emb.end()) throw Error("no embedding for example " + id);
          vecs.push_back(it->second);
        }
        report = train_vector_classifier(vecs, labels, classes, tc_cfg);
      } else {
        const auto stop = tc_stop.empty() ? default_stop_words() : load_stop_words(tc_stop);
        report = train_text_classifier(texts, labels, classes, stop, tc_cfg);
      }
      report.model.save(tc_out);
      json top = json::object();
      if (report.model.kind() == LogRegModel::FeatureKind::ngram) {
        for (std::size_t k = 0; k < classes.size(); ++k) top[classes[k]] = top_coefficients(report.model, k, 5);
      }
      write_metadata(tc_out, *tc,
                     {{"fold_accuracy", report.fold_accuracy},
                      {"cv_accuracy", report.cv_accuracy},
                      {"test_accuracy", report.test_accuracy},
                      {"train_size", report.train_size},
                      {"test_size", report.test_size},
                      {"top_features", top}});
      std::cout << "cv_accuracy " << num(report.cv_accuracy) << "\ntest_accuracy " << num(report.test_accuracy)
                << '\n';
    } else if (pr->parsed()) {
      require_file(pr_model, "model");
      if (pr_text.empty() == pr_input.empty()) throw InvalidArgument("give exactly one of --text or --input");
      const auto model = LogRegModel::load(pr_model);
      std::optional<std::ofstream> file;
      if (!pr_out.empty()) file = open_out(pr_out);
      std::ostream& out = file ? *file : std::cout;
      auto emit = [&](const std::string& id, const std::string& text) {
        const auto p = predict(model, text);
        out << json{{"example_id", id}, {"predicted", p.strategy}, {"posterior", p.posterior}}.dump() << '\n';
      };
      if (!pr_text.empty()) {
        emit("text", pr_text);
      } else {
        require_file(pr_input, "input");
        for (const auto& e : load_extended(pr_input)) emit(example_id(e.job), e.response);
      }
    } else if (ev->parsed()) {
      std::vector<AdherenceRecord> records;
      if (!ev_records.empty()) {
        require_file(ev_records, "adherence records");
        records = load_adherence(ev_records);
      } else {
        require_file(ev_extended, "extended examples");
        require_file(ev_sra, "SRA report");
        require_file(ev_model, "classifier");
        const auto model = LogRegModel::load(ev_model);
        std::map<std::pair<std::string, std::string>, SraRecord> sra;
        for (auto& r : load_sra_records(ev_sra)) sra[{r.example_id, r.model_tag}] = r;
        for (const auto& e : load_extended(ev_extended)) {
          const auto id = example_id(e.job);
          const auto it = sra.find({id, e.model_tag});
          if (it == sra.end()) throw Error("no SRA record for " + id + " (" + e.model_tag + ")");
          records.push_back(make_adherence_record(id, e.job.strategy, predict(model, e.response).strategy,
                                                  e.job.prefix_len, it->second.log_sra, e.job.template_id,
                                                  e.model_tag));
        }
      }
      if (records.empty()) throw Error("no adherence records to evaluate");
      std::size_t hits = 0;
      for (const auto& r : records) hits += r.correct ? 1 : 0;
      json report = {{"format", "sra-evaluation/1"},
                     {"n", records.size()},
                     {"accuracy", static_cast<double>(hits) / static_cast<double>(records.size())}};
      json bins = json::array();
      for (const auto& b : accuracy_by_turn(records, ev_bin))
        bins.push_back({{"bin_start", b.bin_start}, {"accuracy", b.accuracy}, {"n", b.n}});
      report["accuracy_by_turn"] = bins;
      try {
        const auto corr = correlate_sra_accuracy(records, parse_adherence_grouping(ev_group));
        json pts = json::array();
        for (const auto& p : corr.points)
          pts.push_back({{"group", p.key}, {"mean_log_sra", p.mean_log_sra}, {"accuracy", p.accuracy}, {"n", p.n}});
        report["correlation"] = {{"grouping", ev_group}, {"points", pts}, {"pearson_r", corr.r}};
      } catch (const InvalidArgument& e) {
        spdlog::warn("SRA/accuracy correlation skipped: {}", e.what());
        report["correlation"] = nullptr;
      }
      auto out = open_out(ev_out);
      out << report.dump(2) << '\n';
      write_metadata(ev_out, *ev);
      std::cout << "accuracy " << num(report["accuracy"].get<double>()) << " n " << records.size() << '\n';
    } else if (jd->parsed()) {
      require_file(jd_pairs, "judge pairs");
      jd_cfg.timeout = std::chrono::milliseconds(static_cast<long>(jd_timeout * 1000.0));
      const auto pairs = load_judge_pairs(jd_pairs);
      std::unique_ptr<Transport> transport;
      std::unique_ptr<Transport> recorder;
      if (!jd_replay.empty()) {
        require_file(jd_replay, "cassette");
        transport = std::make_unique<ReplayTransport>(fs::path(jd_replay));
      } else {
        const char* key = std::getenv(jd_cfg.api_key_env.c_str());
        if (!key) spdlog::warn("${} is not set; sending requests without credentials", jd_cfg.api_key_env);
        transport = std::make_unique<HttpTransport>(jd_cfg.url, key ? key : "", jd_cfg.timeout);
        if (!jd_record.empty()) recorder = std::make_unique<RecordingTransport>(*transport, jd_record);
      }
      JudgeClient client(recorder ? *recorder : *transport, jd_cfg);
      const auto results = run_head_to_head(client, pairs);
      auto out = open_out(jd_out);
      for (const auto& r : results) out << serialize_head_to_head(r) << '\n';
      const auto outcomes = completed_outcomes(results);
      json summary = {{"pairs", pairs.size()}, {"completed", outcomes.size()}, {"temperature", 0}};
      if (!outcomes.empty()) {
        const auto wtl = win_tie_lose(outcomes);
        summary["win"] = wtl.win;
        summary["tie"] = wtl.tie;
        summary["lose"] = wtl.lose;
        std::cout << fmt::format("win {:.2f} tie {:.2f} lose {:.2f} (n = {})\n", wtl.win, wtl.tie, wtl.lose, wtl.n);
      }
      write_metadata(jd_out, *jd, {{"summary", summary}, {"template_version", std::string(kJudgeTemplateVersion)}});
    } else if (rp->parsed()) {
      if (rp_sra.empty() && rp_records.empty() && rp_annotations.empty()) {
        throw InvalidArgument("report needs at least one of --sra, --records, --annotations");
      }
      const fs::path dir(rp_out_dir);
      fs::create_directories(dir);
      json summary = {{"format", "sra-report/1"}};
      if (!rp_sra.empty()) {
        require_file(rp_sra, "SRA report");
        const auto records = load_sra_records(rp_sra);
        for (auto [name, g] : {std::pair{"template", SraGrouping::template_id},
                               std::pair{"turn_bin", SraGrouping::turn_bin},
                               std::pair{"model_tag", SraGrouping::model_tag}}) {
          auto csv = open_out(dir / fmt::format("sra_by_{}.csv", name));
          write_csv_row(csv, {"group", "count", "mean_log_sra", "stddev"});
          json arr = json::array();
          for (const auto& s : corpus_sra(records, g, rp_bin)) {
            write_csv_row(csv, {s.key, std::to_string(s.count), num(s.mean), num(s.stddev)});
            arr.push_back({{"group", s.key}, {"count", s.count}, {"mean_log_sra", s.mean}, {"stddev", s.stddev}});
          }
          summary[fmt::format("sra_by_{}", name)] = arr;
        }
        // One x,y series per model tag: turn bin vs mean log-SRA.
        std::map<std::string, std::vector<SraRecord>> by_tag;
        for (const auto& r : records) by_tag[r.model_tag].push_back(r);
        auto plot = open_out(dir / "plot_sra_by_turn.dat");
        for (const auto& [tag, rs] : by_tag) {
          plot << "# " << tag << "\n";
          for (const auto& s : corpus_sra(rs, SraGrouping::turn_bin, rp_bin)) plot << s.key << ' ' << num(s.mean) << '\n';
          plot << "\n\n";
        }
      }
      if (!rp_records.empty()) {
        require_file(rp_records, "adherence records");
        const auto records = load_adherence(rp_records);
        std::map<std::string, std::vector<AdherenceRecord>> by_tag;
        for (const auto& r : records) by_tag[r.model_tag].push_back(r);
        auto csv = open_out(dir / "accuracy_by_turn.csv");
        write_csv_row(csv, {"model_tag", "bin_start", "accuracy", "n"});
        auto plot = open_out(dir / "plot_accuracy_by_turn.dat");
        json arr = json::array();
        for (const auto& [tag, rs] : by_tag) {
          plot << "# " << tag << "\n";
          for (const auto& b : accuracy_by_turn(rs, rp_bin)) {
            write_csv_row(csv, {tag, std::to_string(b.bin_start), num(b.accuracy), std::to_string(b.n)});
            plot << b.bin_start << ' ' << num(b.accuracy) << '\n';
            arr.push_back({{"model_tag", tag}, {"bin_start", b.bin_start}, {"accuracy", b.accuracy}, {"n", b.n}});
          }
          plot << "\n\n";
        }
        summary["accuracy_by_turn"] = arr;
        try {
          const auto corr = correlate_sra_accuracy(records, AdherenceGrouping::template_and_model);
          auto pcsv = open_out(dir / "sra_accuracy_points.csv");
          write_csv_row(pcsv, {"group", "mean_log_sra", "accuracy", "n"});
          auto pplot = open_out(dir / "plot_sra_vs_accuracy.dat");
          for (const auto& p : corr.points) {
            write_csv_row(pcsv, {p.key, num(p.mean_log_sra), num(p.accuracy), std::to_string(p.n)});
            pplot << num(p.mean_log_sra) << ' ' << num(p.accuracy) << '\n';
          }
          summary["sra_accuracy_pearson"] = corr.r;
        } catch (const InvalidArgument& e) {
          spdlog::warn("SRA/accuracy correlation skipped: {}", e.what());
        }
      }
      if (!rp_annotations.empty()) {
        require_file(rp_annotations, "annotations");
        const auto items = load_annotations(rp_annotations, {rp_min, rp_max});
        summary["annotations"] = items.size();
        try {
          summary["krippendorff_alpha"] = krippendorff_alpha_interval(annotation_table(items));
        } catch (const InvalidArgument& e) {
          spdlog::warn("agreement skipped: {}", e.what());
        }
        if (!items.empty() && std::all_of(items.begin(), items.end(), [](const AnnotationItem& i) {
              return i.sra_a && i.sra_b;
            })) {
          summary["human_sra_pearson"] = human_sra_correlation(items);
          // Normalized score vs normalized log-SRA difference.
          std::vector<double> xs, ys;
          for (const auto& i : items) {
            xs.push_back(*i.sra_b - *i.sra_a);
            ys.push_back(i.score);
          }
          const auto nx = min_max_normalize(xs), ny = min_max_normalize(ys);
          auto plot = open_out(dir / "plot_human_vs_sra.dat");
          for (std::size_t i = 0; i < nx.size(); ++i) plot << num(nx[i]) << ' ' << num(ny[i]) << '\n';
        }
      }
      auto out = open_out(dir / "summary.json");
      out << summary.dump(2) << '\n';
      write_metadata(dir / "summary.json", *rp);
    } else if (ex->parsed()) {
      const auto report = run_directional_experiment(load_catalog(common), load_templates(common), ex_cfg,
                                                     [](const std::string& s) { spdlog::info("{}", s); });
      auto out = open_out(ex_out);
      for (const auto& r : report.records) out << serialize_adherence(r) << '\n';
      json pts = json::array();
      for (const auto& p : report.correlation.points)
        pts.push_back({{"group", p.key}, {"mean_log_sra", p.mean_log_sra}, {"accuracy", p.accuracy}, {"n", p.n}});
      write_metadata(ex_out, *ex,
                     {{"base_log_sra", report.base_log_sra},
                      {"tuned_log_sra", report.tuned_log_sra},
                      {"base_accuracy", report.base_accuracy},
                      {"tuned_accuracy", report.tuned_accuracy},
                      {"pearson_r", report.correlation.r},
                      {"points", pts},
                      {"pretrain", train_report_json(report.pretrain)},
                      {"finetune", train_report_json(report.finetune)}});
      std::cout << fmt::format("base log-SRA {:.4f} accuracy {:.3f}\ntuned log-SRA {:.4f} accuracy {:.3f}\nr {:.3f}\n",
                               report.base_log_sra, report.base_accuracy, report.tuned_log_sra,
                               report.tuned_accuracy, report.correlation.r);
    }
  } catch (const JudgeAuthError& e) {
    std::cerr << "error: auth: " << e.what() << '\n';
    return kErrorExit;
  } catch (const ParseError& e) {
    std::cerr << "error: parse: " << e.what() << '\n';
    return kErrorExit;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: invalid-argument: " << e.what() << '\n';
    return kErrorExit;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << '\n';
    return kErrorExit;
  }
  return 0;
}
