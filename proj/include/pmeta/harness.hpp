#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pmeta/episodes.hpp"
#include "pmeta/meta_opt.hpp"
#include "pmeta/model.hpp"

namespace pmeta {

enum class InitMode { Random, Pretrain, Meta };

const char* init_mode_name(InitMode m);
InitMode init_mode_from_name(const std::string& name);

// Complete description of one run: data, splits, episode geometry, model,
// optimization, and evaluation budgets. The config file maps onto this 1:1.
struct RunConfig {
    // data
    GeneratorSpec gen;
    std::string jsonl_path;        // when nonempty, load instead of generating
    std::uint64_t data_seed = 1;

    // splits (label counts per side)
    std::size_t train_labels = 6;
    std::size_t val_labels = 5;
    std::size_t test_labels = 5;
    std::uint64_t split_seed = 2;

    // episode geometry
    int way = 5;
    int shot = 1;
    int query = 0;  // 0 -> 5*shot, capped by availability

    // training protocol
    int episodes_per_epoch = 20;
    int meta_batch = 4;
    int max_epochs = 30;
    int patience = 10;
    int val_episodes = 100;
    int val_adapt_steps = 0;  // 0 -> inner.steps

    // test protocol
    int test_episodes = 200;
    int test_adapt_epochs = 15;
    int test_batch = 16;
    double test_lr = 0.0;  // <=0 -> inner.lr

    // model
    BackboneSpec model;
    int soft_tokens = 4;
    std::string template_text;  // "" -> default all-soft template
    bool wide_answer_sets = true;  // synthetic corpora: answers = name + topic words

    // optimization
    InnerLoopConfig inner;
    MetaUpdateConfig meta;
    OuterOptimizer::Config outer;
    double mslb_anneal = 0.0;  // 1 = fully last-step-only by the final epoch
    bool lr_schedule = false;  // linear warmup + linear decay
    double warmup_frac = 0.1;

    // pretraining (backbone production and pretrain-init)
    int pretrain_epochs = 8;
    int pretrain_batch = 16;

    // run
    InitMode init = InitMode::Meta;
    std::uint64_t seed = 0;
    std::string out_dir;
    ParallelMode parallel = ParallelMode::OpenMp;

    int effective_query() const;
    void validate() const;
};

struct EpochRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_acc = 0.0;
    double lr_scale = 1.0;
};

// Everything a run reports. Curves are per-adaptation-step means over test
// episodes, entry 0 being the unadapted model.
struct RunMetrics {
    std::vector<EpochRow> epochs;
    int best_epoch = -1;
    double best_val_acc = 0.0;

    std::vector<double> test_episode_acc;
    std::vector<double> test_episode_loss;
    double test_acc_mean = 0.0;
    double test_acc_std = 0.0;
    std::vector<double> curve_loss;
    std::vector<double> curve_acc;
};

// Owns the corpus, splits, model and verbalizer for one configuration and
// runs the meta-train / meta-test / pretrain protocols on top of them.
class Harness {
public:
    explicit Harness(RunConfig cfg);

    const RunConfig& config() const { return cfg_; }
    const Corpus& corpus() const { return corpus_; }
    const SplitSpec& splits() const { return splits_; }
    const PromptModel& model() const { return model_; }
    const Verbalizer& verbalizer() const { return verbalizer_; }

    // Backbone from the model seed, prompt partition redrawn from `seed`.
    ParamSet random_init(std::uint64_t seed) const;

    // Pooled supervised prompt tuning on the train split (no meta objective).
    // Zero epochs returns `start` unchanged.
    ParamSet pretrain_init(const ParamSet& start, bool train_backbone, bool train_prompt,
                           int epochs) const;

    // Episodic meta-training with early stopping on validation accuracy.
    // Returns the best-validation snapshot.
    std::pair<ParamSet, RunMetrics> meta_train(const ParamSet& init) const;

    // Per-episode cloning + support adaptation + query evaluation over the
    // fixed test stream; fills the test half of RunMetrics.
    RunMetrics meta_test(const ParamSet& params) const;

    // Mean query accuracy after a fixed-budget adaptation on each episode.
    double evaluate_episodes(const ParamSet& params, std::span<const Episode> episodes,
                             int adapt_steps) const;

    std::vector<Episode> test_stream() const;

    TaskFns episode_fns(const Episode& episode) const;

private:
    std::vector<Example> pooled_train_examples(std::vector<int>* label_map_out) const;
    InnerLoopConfig test_adapt_config(std::size_t support_size) const;

    RunConfig cfg_;
    Corpus corpus_;
    SplitSpec splits_;
    PromptTemplate template_;
    PromptModel model_;
    Verbalizer verbalizer_;
    std::uint64_t train_stream_seed_;
    std::uint64_t val_stream_seed_;
    std::uint64_t test_stream_seed_;
    std::uint64_t init_stream_seed_;
};

// ---- experiment suite -------------------------------------------------------

struct SuiteConfig {
    RunConfig base;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::vector<std::string> templates;  // >= 3 for the disturbance study
    bool init_ablation = true;
    bool template_study = true;
    bool algo_comparison = true;
    std::vector<std::pair<int, int>> settings;  // (way, shot); default {base.way, base.shot}
};

struct SuiteReport {
    struct InitRow {
        std::uint64_t seed = 0;
        double random_acc = 0.0;
        double pretrain_acc = 0.0;
        double meta_acc = 0.0;
    };
    std::vector<InitRow> init_rows;
    double mean_random = 0.0, mean_pretrain = 0.0, mean_meta = 0.0;
    // Mean adaptation curves over seeds and episodes, step-indexed.
    std::vector<double> curve_random_loss, curve_meta_loss;
    std::vector<double> curve_random_acc, curve_meta_acc;

    // One row per init mode, one column per (way, shot) setting.
    struct TemplateRow {
        std::string init_mode;
        std::vector<double> mean_acc;  // per setting
        std::vector<double> std_acc;   // std across templates, per setting
    };
    std::vector<TemplateRow> template_rows;
    std::vector<std::string> setting_names;

    // Mean accuracy per algorithm over seeds.
    std::vector<std::pair<std::string, double>> algo_acc;
};

// Paired studies on shared episode streams: initialization ablation,
// template-perturbation stds, and the four-algorithm comparison.
SuiteReport run_experiment_suite(const SuiteConfig& cfg);

}  // namespace pmeta
