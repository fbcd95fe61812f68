#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sra/adaptation.hpp"
#include "sra/classifier.hpp"
#include "sra/corpus.hpp"
#include "sra/evaluation.hpp"
#include "sra/prompt.hpp"
#include "sra/sra_metric.hpp"
#include "sra/transformer.hpp"

namespace sra {

/// Example utterances quoted in a strategy description.
std::vector<std::string> strategy_phrases(const Strategy& s);

struct SynthConfig {
  std::size_t conversations = 200;
  std::size_t min_turns = 8;
  std::size_t max_turns = 30;
  double followup_prob = 0.5;  // chance a seeker turn gets a second sentence
  // Supporter turns quote a random strategy (labelled) when true, otherwise
  // they are short unlabelled acknowledgements.
  bool strategy_history = true;
  std::uint64_t seed = 0;
};

/// Seeker-first alternating dialogues built from templated banks.
std::vector<Conversation> synthesize_corpus(const StrategyCatalog& catalog, const SynthConfig& cfg);

AssembledPrompt job_prompt(const Conversation& c, const ExtensionJob& job, const StrategyCatalog& catalog,
                           const TemplateText& text);

std::string example_id(const ExtensionJob& job);

struct ExtensionOutput {
  ExtendedExample example;  // response before post-processing when rejected
  bool accepted = false;    // false when post-processing left nothing
  std::vector<TokenId> response_tokens;
  std::optional<SraRecord> sra;  // absent for an empty generation
};

/// Prepends pad tokens up to `length` and shifts the strategy span. No-op when
/// the prompt is already at least that long.
TokenizedPrompt left_pad(TokenizedPrompt p, std::size_t length);

/// Generates one strategy-conditioned continuation and scores its SRA.
/// Prompts are left-padded to `pad_to` tokens.
ExtensionOutput run_extension_job(const Weights& w, const Vocab& vocab, const StrategyCatalog& catalog,
                                  const TemplateText& text, const Conversation& c, const ExtensionJob& job,
                                  GenerationConfig gen, const std::string& model_tag, std::size_t pad_to = 0);

struct ExperimentConfig {
  std::size_t train_conversations = 160;
  std::size_t eval_conversations = 60;
  std::size_t min_turn = 5;
  std::size_t max_turn = 7;
  std::size_t dialog_turns = 8;
  std::size_t vocab_size = 1000;
  ModelConfig model{32, 2, 2, 1000, 384};
  TrainConfig pretrain;
  TrainConfig finetune;
  AdapterConfig adapter;
  GenerationConfig generation;
  std::size_t classifier_examples_per_class = 60;
  // Left-pad every prompt to the longest one so responses start at one
  // position; the small model does not learn local attention otherwise.
  bool align_prompts = true;
  // Base pretraining scores every token (prompt included) so prompt tokens
  // get useful embeddings; adaptation always masks the prompt.
  bool pretrain_full_sequence = true;
  // Intermediate adapter snapshots evaluated alongside base and final.
  std::vector<std::size_t> checkpoint_epochs{1, 2, 3, 5, 7};
  std::uint64_t seed = 0;

  ExperimentConfig();
};

struct ExperimentReport {
  std::vector<AdherenceRecord> records;
  SraAccuracyCorrelation correlation;  // grouped by checkpoint and template
  double base_log_sra = 0.0;
  double tuned_log_sra = 0.0;
  double base_accuracy = 0.0;
  double tuned_accuracy = 0.0;
  double classifier_test_accuracy = 0.0;
  std::size_t empty_generations = 0;
  TrainReport pretrain;
  TrainReport finetune;
};

using LogFn = std::function<void(const std::string&)>;

/// Desk-scale adherence experiment: pretrain a small base model on responses
/// drawn from an unrelated strategy, adapt it on c1_hf prompts with matching
/// responses, then compare base, intermediate checkpoints and the final
/// adapter on held-out prompts under the standard and c1_hf templates.
ExperimentReport run_directional_experiment(const StrategyCatalog& catalog, const TemplateText& text,
                                            const ExperimentConfig& cfg, const LogFn& log = {});

}  // namespace sra
