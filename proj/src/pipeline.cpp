#include "sra/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <set>

#include "text_util.hpp"

namespace sra {

std::vector<std::string> strategy_phrases(const Strategy& s) {
  const std::string_view d = s.description;
  const auto at = d.find("Examples:");
  if (at == std::string_view::npos) return {};
  std::string_view rest = detail::trim(d.substr(at + 9));
  // Quotes are 'text' 'text' ...; apostrophes inside a quote are never
  // followed by a space and another quote.
  std::vector<std::string> out;
  if (rest.size() < 2 || rest.front() != '\'') return out;
  rest.remove_prefix(1);
  while (!rest.empty()) {
    auto end = rest.find("' '");
    if (end == std::string_view::npos) {
      auto last = rest.rfind('\'');
      if (last == std::string_view::npos) last = rest.size();
      out.emplace_back(detail::trim(rest.substr(0, last)));
      break;
    }
    out.emplace_back(detail::trim(rest.substr(0, end)));
    rest.remove_prefix(end + 3);
  }
  std::erase_if(out, [](const std::string& p) { return p.empty(); });
  return out;
}

namespace {

constexpr std::array kOpeners{"I feel", "Lately I have been", "Honestly I am", "I think I am", "Right now I am",
                              "These days I am", "I keep feeling", "To be honest I am"};
constexpr std::array kTroubles{"so stressed about my exams",
                               "lonely since I moved to a new city",
                               "worried about losing my job",
                               "tired of arguing with my partner",
                               "anxious about my health",
                               "sad since my dog passed away",
                               "overwhelmed by all the bills",
                               "stuck in a job I do not like",
                               "nervous about talking to my family",
                               "hurt after my friend ignored me"};
constexpr std::array kFollowups{"I do not know what to do.", "It is hard to sleep.", "Nobody seems to notice.",
                                "It has been going on for weeks.", "I just want it to stop.", "Thanks for listening."};
constexpr std::array kAcknowledgements{"I see.", "Okay.", "I am listening.", "Go on.", "Tell me more.",
                                       "I understand.", "Thank you for telling me."};
constexpr std::array kTopics{"exam stress", "loneliness after a move", "job insecurity", "relationship conflict",
                             "health anxiety", "grief over a pet", "money worries", "an unfulfilling job",
                             "family tension", "a friendship falling apart"};

template <typename Arr>
const char* pick(const Arr& a, Rng& rng) {
  return a[std::uniform_int_distribution<std::size_t>(0, a.size() - 1)(rng)];
}

std::string seeker_utterance(Rng& rng, double followup_prob = 0.5) {
  std::string s = std::string(pick(kOpeners, rng)) + " " + pick(kTroubles, rng) + ".";
  if (std::bernoulli_distribution(followup_prob)(rng)) s += std::string(" ") + pick(kFollowups, rng);
  return s;
}

}  // namespace

std::vector<Conversation> synthesize_corpus(const StrategyCatalog& catalog, const SynthConfig& cfg) {
  if (cfg.min_turns < 2 || cfg.min_turns > cfg.max_turns) throw InvalidArgument("synthesize_corpus: bad turn bounds");
  std::vector<std::vector<std::string>> banks;
  for (const auto& s : catalog.strategies()) banks.push_back(strategy_phrases(s));
  Rng rng(derive_seed(cfg.seed, "synth"));
  std::vector<Conversation> out;
  for (std::size_t i = 0; i < cfg.conversations; ++i) {
    Conversation c;
    c.id = fmt::format("synth-{:05d}", i);
    const std::size_t topic = std::uniform_int_distribution<std::size_t>(0, kTopics.size() - 1)(rng);
    c.situation = std::string("The seeker is dealing with ") + kTopics[topic] + ".";
    const std::size_t n = std::uniform_int_distribution<std::size_t>(cfg.min_turns, cfg.max_turns)(rng);
    for (std::size_t t = 0; t < n; ++t) {
      if (t % 2 == 0) {
        c.turns.push_back({Speaker::seeker, seeker_utterance(rng, cfg.followup_prob), std::nullopt});
      } else if (!cfg.strategy_history) {
        c.turns.push_back({Speaker::supporter, pick(kAcknowledgements, rng), std::nullopt});
      } else {
        const std::size_t k = std::uniform_int_distribution<std::size_t>(0, banks.size() - 1)(rng);
        const auto& bank = banks[k];
        const auto& phrase = bank[std::uniform_int_distribution<std::size_t>(0, bank.size() - 1)(rng)];
        c.turns.push_back({Speaker::supporter, phrase, catalog.strategies()[k].id});
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

AssembledPrompt job_prompt(const Conversation& c, const ExtensionJob& job, const StrategyCatalog& catalog,
                           const TemplateText& text) {
  const auto prefix = prefix_turns(c, job.prefix_len);
  return assemble(prefix, c.situation, catalog.at(job.strategy), parse_template_id(job.template_id), text);
}

std::string example_id(const ExtensionJob& job) {
  return fmt::format("{}:{}:{}", job.conv_id, job.prefix_len, job.strategy);
}

TokenizedPrompt left_pad(TokenizedPrompt p, std::size_t length) {
  if (p.length() >= length) return p;
  const std::size_t n = length - p.length();
  p.ids.insert(p.ids.begin(), n, special::pad);
  p.strategy_span.begin += n;
  p.strategy_span.end += n;
  return p;
}

ExtensionOutput run_extension_job(const Weights& w, const Vocab& vocab, const StrategyCatalog& catalog,
                                  const TemplateText& text, const Conversation& c, const ExtensionJob& job,
                                  GenerationConfig gen, const std::string& model_tag, std::size_t pad_to) {
  const auto tp = left_pad(tokenize_prompt(job_prompt(c, job, catalog, text), vocab), pad_to);
  gen.seed = job.seed;
  auto g = generate(w, tp.ids, gen);
  ExtensionOutput out;
  out.example.job = job;
  out.example.model_tag = model_tag;
  const auto raw = vocab.decode(g.tokens);
  const auto cleaned = postprocess_response(raw, catalog);
  out.accepted = cleaned.has_value();
  out.example.response = cleaned.value_or(raw);
  out.response_tokens = std::move(g.tokens);
  if (!out.response_tokens.empty()) {
    const auto r = compute_sra(g.prompt_trace, tp.strategy_span);
    SraRecord rec;
    rec.example_id = example_id(job);
    rec.template_id = job.template_id;
    rec.model_tag = model_tag;
    rec.turn = job.prefix_len;
    rec.sra = r.sra;
    rec.log_sra = r.log_sra;
    rec.layers = w.config.layers;
    rec.heads = w.config.heads;
    rec.response_len = out.response_tokens.size();
    rec.prompt_len = tp.length();
    rec.span_begin = tp.strategy_span.begin;
    rec.span_end = tp.strategy_span.end;
    out.sra = rec;
  }
  return out;
}

ExperimentConfig::ExperimentConfig() {
  pretrain.batch_size = 4;
  pretrain.epochs = 3;
  pretrain.learning_rate = 3e-3;
  pretrain.schedule = LrSchedule::cosine;
  pretrain.warmup_steps = 20;
  pretrain.seed = 1;
  finetune.batch_size = 4;
  finetune.epochs = 10;
  finetune.learning_rate = 2e-2;
  finetune.schedule = LrSchedule::cosine;
  finetune.seed = 2;
  adapter.rank = 8;
  adapter.alpha = 16.0;
  adapter.seed = 3;
  generation.max_new_tokens = 32;
}

namespace {

struct Log {
  const LogFn& fn;
  template <typename... Args>
  void operator()(fmt::format_string<Args...> f, Args&&... args) const {
    const auto s = fmt::format(f, std::forward<Args>(args)...);
    if (fn) fn(s);
  }
};

std::vector<TokenId> with_eos(std::vector<TokenId> ids) {
  ids.push_back(special::eos);
  return ids;
}

}  // namespace

ExperimentReport run_directional_experiment(const StrategyCatalog& catalog, const TemplateText& text,
                                            const ExperimentConfig& cfg, const LogFn& log_fn) {
  Log log{log_fn};
  const auto& strategies = catalog.strategies();
  std::vector<std::vector<std::string>> banks;
  for (const auto& s : strategies) {
    banks.push_back(strategy_phrases(s));
    if (banks.back().empty()) throw Error("strategy " + s.id + " has no example phrases");
  }

  SynthConfig sc;
  sc.conversations = cfg.train_conversations + cfg.eval_conversations;
  sc.min_turns = sc.max_turns = cfg.dialog_turns;
  sc.followup_prob = 0.0;
  sc.strategy_history = false;
  sc.seed = derive_seed(cfg.seed, "corpus");
  const auto corpus = synthesize_corpus(catalog, sc);
  const auto split = split_dataset(corpus, {cfg.train_conversations, cfg.eval_conversations, 0}, cfg.seed);
  std::map<std::string, const Conversation*> by_id;
  for (const auto& c : corpus) by_id[c.id] = &c;
  auto subset = [&](const std::vector<std::string>& ids) {
    std::vector<Conversation> out;
    for (const auto& id : ids) out.push_back(*by_id.at(id));
    return out;
  };
  const auto train_convs = subset(split.train);
  const auto eval_convs = subset(split.test);

  auto jobs_for = [&](const std::vector<Conversation>& convs, const std::string& tmpl, std::size_t reps,
                      std::string_view stream) {
    JobConfig jc;
    jc.strategy_prob = 0.3;
    jc.min_turn = cfg.min_turn;
    jc.max_turn = cfg.max_turn;
    jc.repetitions = reps;
    jc.template_id = tmpl;
    jc.seed = derive_seed(cfg.seed, stream);
    return build_extension_jobs(convs, catalog, jc);
  };
  const auto train_std = jobs_for(train_convs, "standard", 2, "jobs:train:standard");
  const auto train_c1 = jobs_for(train_convs, "c1_hf", 2, "jobs:train:c1_hf");
  const auto eval_std = jobs_for(eval_convs, "standard", 2, "jobs:eval:standard");
  const auto eval_c1 = jobs_for(eval_convs, "c1_hf", 2, "jobs:eval:c1_hf");

  // Vocabulary over everything the model will read or write.
  std::string vocab_text;
  for (const auto& jobs : {&train_std, &train_c1})
    for (const auto& j : *jobs) vocab_text += job_prompt(*by_id.at(j.conv_id), j, catalog, text).text + "\n";
  for (const auto& bank : banks)
    for (const auto& p : bank) vocab_text += " " + p + "\n";
  const auto vocab = Vocab::train(vocab_text, cfg.vocab_size);
  log("vocab: {} tokens", vocab.size());

  std::size_t pad_to = 0;
  if (cfg.align_prompts) {
    for (const auto* jobs : {&train_std, &train_c1, &eval_std, &eval_c1})
      for (const auto& j : *jobs)
        pad_to = std::max(pad_to, tokenize_prompt(job_prompt(*by_id.at(j.conv_id), j, catalog, text), vocab).length());
    log("prompts padded to {} tokens", pad_to);
  }

  ModelConfig mc = cfg.model;
  mc.vocab = vocab.size();
  Rng rng(derive_seed(cfg.seed, "responses"));
  auto random_phrase = [&](std::size_t k) {
    const auto& bank = banks[k];
    return bank[std::uniform_int_distribution<std::size_t>(0, bank.size() - 1)(rng)];
  };
  auto encode_job = [&](const ExtensionJob& j, const std::string& response) {
    const auto tp = left_pad(tokenize_prompt(job_prompt(*by_id.at(j.conv_id), j, catalog, text), vocab), pad_to);
    if (tp.length() + cfg.generation.max_new_tokens > mc.max_len) throw Error("experiment prompt too long for the model context");
    return TrainExample{tp.ids, with_eos(vocab.encode(" " + response))};
  };

  // Base: responses ignore the prompted strategy.
  std::vector<TrainExample> base_data;
  std::uniform_int_distribution<std::size_t> any(0, strategies.size() - 1);
  for (const auto& jobs : {&train_std, &train_c1})
    for (const auto& j : *jobs) {
      auto ex = encode_job(j, random_phrase(any(rng)));
      if (cfg.pretrain_full_sequence) {
        ex.prompt.insert(ex.prompt.end(), ex.response.begin(), ex.response.end());
        ex.response.assign(ex.prompt.begin() + 1, ex.prompt.end());
        ex.prompt.resize(1);
      }
      base_data.push_back(std::move(ex));
    }
  auto base = Weights::random(mc, derive_seed(cfg.seed, "init"));
  ExperimentReport report;
  report.pretrain = train_full(base, base_data, cfg.pretrain,
                               [&](std::size_t e, double l) { log("pretrain epoch {} loss {:.4f}", e, l); });

  // Adaptation: c1_hf prompts, responses follow the prompted strategy.
  std::vector<TrainExample> tune_data;
  for (const auto& j : train_c1) tune_data.push_back(encode_job(j, random_phrase(catalog.index_of(j.strategy))));
  auto adapters = AdapterSet::init(mc, cfg.adapter);
  std::vector<std::pair<std::string, Weights>> models;
  models.emplace_back("base", base);
  report.finetune = finetune(base, adapters, tune_data, cfg.finetune, [&](std::size_t e, double l) {
    log("finetune epoch {} loss {:.4f}", e, l);
    if (e < cfg.finetune.epochs &&
        std::find(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end(), e) != cfg.checkpoint_epochs.end()) {
      models.emplace_back(fmt::format("tuned-e{}", e), apply_adapters(base, adapters));
    }
  });
  models.emplace_back("tuned", apply_adapters(base, adapters));

  // Strategy classifier on bank phrases padded with seeker-style filler.
  std::vector<std::string> cls_texts;
  std::vector<std::size_t> cls_labels;
  Rng crng(derive_seed(cfg.seed, "classifier-data"));
  for (std::size_t k = 0; k < strategies.size(); ++k) {
    for (std::size_t i = 0; i < cfg.classifier_examples_per_class; ++i) {
      const auto& bank = banks[k];
      std::string t = bank[i % bank.size()];
      if (std::bernoulli_distribution(0.5)(crng)) t += " " + seeker_utterance(crng);
      cls_texts.push_back(std::move(t));
      cls_labels.push_back(k);
    }
  }
  std::vector<std::string> class_ids;
  for (const auto& s : strategies) class_ids.push_back(s.id);
  ClassifierTrainConfig ccfg;
  ccfg.seed = derive_seed(cfg.seed, "classifier");
  const auto cls = train_text_classifier(cls_texts, cls_labels, class_ids, default_stop_words(), ccfg);
  report.classifier_test_accuracy = cls.test_accuracy;
  log("classifier test accuracy {:.3f}", cls.test_accuracy);

  // Evaluation on held-out conversations.
  std::map<std::string, std::pair<double, double>> totals;  // tag -> (sum log-SRA, hits)
  std::map<std::string, std::size_t> counts;
  for (const std::string tmpl : {"standard", "c1_hf"}) {
    const auto& jobs = tmpl == "standard" ? eval_std : eval_c1;
    for (const auto& [tag, w] : models) {
      for (const auto& j : jobs) {
        const auto out = run_extension_job(w, vocab, catalog, text, *by_id.at(j.conv_id), j, cfg.generation, tag, pad_to);
        if (!out.sra) {
          ++report.empty_generations;
          continue;
        }
        const auto pred = predict(cls.model, out.example.response);
        auto rec = make_adherence_record(example_id(j), j.strategy, pred.strategy, j.prefix_len, out.sra->log_sra,
                                         tmpl, tag);
        totals[tag].first += rec.log_sra;
        totals[tag].second += rec.correct ? 1.0 : 0.0;
        ++counts[tag];
        report.records.push_back(std::move(rec));
      }
    }
  }
  if (counts["base"] == 0 || counts["tuned"] == 0) throw Error("experiment produced no scored generations");
  const auto mean = [&](const std::string& tag, bool acc) {
    const auto& t = totals[tag];
    return (acc ? t.second : t.first) / static_cast<double>(counts[tag]);
  };
  report.base_log_sra = mean("base", false);
  report.tuned_log_sra = mean("tuned", false);
  report.base_accuracy = mean("base", true);
  report.tuned_accuracy = mean("tuned", true);
  report.correlation = correlate_sra_accuracy(report.records, AdherenceGrouping::template_and_model);
  log("base: log-SRA {:.4f} accuracy {:.3f} | tuned: log-SRA {:.4f} accuracy {:.3f} | r = {:.3f}",
      report.base_log_sra, report.base_accuracy, report.tuned_log_sra, report.tuned_accuracy, report.correlation.r);
  return report;
}

}  // namespace sra
