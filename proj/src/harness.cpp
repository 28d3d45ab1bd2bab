#include "pmeta/harness.hpp"

#include <algorithm>
#include <cmath>

namespace pmeta {

namespace {

// Stream-separation constants for deriving independent seed spaces.
constexpr std::uint64_t kTrainStream = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kValStream = 0xC2B2AE3D27D4EB4FULL;
constexpr std::uint64_t kTestStream = 0x165667B19E3779F9ULL;
constexpr std::uint64_t kInitStream = 0x27D4EB2F165667C5ULL;

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

const char* init_mode_name(InitMode m) {
    switch (m) {
        case InitMode::Random: return "random";
        case InitMode::Pretrain: return "pretrain";
        default: return "meta";
    }
}

InitMode init_mode_from_name(const std::string& name) {
    if (name == "random") return InitMode::Random;
    if (name == "pretrain") return InitMode::Pretrain;
    if (name == "meta") return InitMode::Meta;
    throw ContractError("unknown init mode '" + name + "'");
}

int RunConfig::effective_query() const {
    if (query > 0) return query;
    const int avail = gen.examples_per_label - shot;
    return std::max(1, std::min(5 * shot, avail));
}

void RunConfig::validate() const {
    if (patience < 1) throw ContractError("config: patience must be >= 1");
    if (test_adapt_epochs < 1) throw ContractError("config: test_adapt_epochs must be >= 1");
    if (max_epochs < 1) throw ContractError("config: max_epochs must be >= 1");
    if (episodes_per_epoch < 1 || meta_batch < 1)
        throw ContractError("config: episode counts must be >= 1");
    if (way < 1 || shot < 1) throw ContractError("config: way/shot must be >= 1");
    if (soft_tokens < 0) throw ContractError("config: soft_tokens must be >= 0");
    inner.validate();
    meta.validate(inner.steps);
}

namespace {

PromptTemplate build_template(const RunConfig& cfg, const Vocab& vocab) {
    if (!cfg.template_text.empty()) return PromptTemplate::parse(cfg.template_text, vocab);
    std::string text = "[CLS] {x}";
    if (cfg.soft_tokens > 0) text += " {soft:" + std::to_string(cfg.soft_tokens) + "}";
    text += " [MASK] [SEP]";
    return PromptTemplate::parse(text, vocab);
}

Corpus build_corpus(const RunConfig& cfg) {
    if (!cfg.jsonl_path.empty()) return load_jsonl(cfg.jsonl_path);
    return generate_synthetic_corpus(cfg.gen, cfg.data_seed);
}

}  // namespace

Harness::Harness(RunConfig cfg)
    : cfg_(std::move(cfg)),
      corpus_(build_corpus(cfg_)),
      splits_(make_splits_by_count(corpus_, cfg_.train_labels, cfg_.val_labels, cfg_.test_labels,
                                   cfg_.split_seed)),
      template_(build_template(cfg_, corpus_.vocab)),
      model_(cfg_.model, template_, corpus_.vocab),
      verbalizer_(cfg_.wide_answer_sets && cfg_.jsonl_path.empty()
                      ? synthetic_verbalizer(corpus_, cfg_.gen)
                      : verbalizer_from_label_names(corpus_)),
      train_stream_seed_(cfg_.seed ^ kTrainStream),
      val_stream_seed_(cfg_.seed ^ kValStream),
      test_stream_seed_(cfg_.seed ^ kTestStream),
      init_stream_seed_(cfg_.seed ^ kInitStream) {
    cfg_.validate();
}

TaskFns Harness::episode_fns(const Episode& episode) const {
    return model_.task_fns(verbalizer_.restricted(episode.palette, corpus_.vocab));
}

ParamSet Harness::random_init(std::uint64_t seed) const {
    ParamSet params = model_.init_params();
    Rng rng(seed ^ init_stream_seed_);
    model_.randomize_prompt(params, rng);
    return params;
}

std::vector<Example> Harness::pooled_train_examples(std::vector<int>* label_map_out) const {
    std::vector<int> to_local(corpus_.num_labels(), -1);
    for (std::size_t i = 0; i < splits_.train_labels.size(); ++i)
        to_local[static_cast<std::size_t>(splits_.train_labels[i])] = static_cast<int>(i);
    std::vector<Example> pooled;
    for (const Example& ex : corpus_.examples) {
        const int local = to_local[static_cast<std::size_t>(ex.label)];
        if (local < 0) continue;
        Example copy = ex;
        copy.label = local;
        pooled.push_back(std::move(copy));
    }
    if (label_map_out) *label_map_out = std::move(to_local);
    return pooled;
}

ParamSet Harness::pretrain_init(const ParamSet& start, bool train_backbone, bool train_prompt,
                                int epochs) const {
    if (epochs <= 0) return start;

    ParamSet params = start;
    params.set_trainable(Partition::Backbone, train_backbone);
    params.set_trainable(Partition::Prompt, train_prompt);

    std::vector<Example> pooled = pooled_train_examples(nullptr);
    if (pooled.empty()) throw CapacityError("pretrain: train split holds no examples");
    Verbalizer train_verb = verbalizer_.restricted(splits_.train_labels, corpus_.vocab);
    TaskFns fns = model_.task_fns(train_verb);

    OuterOptimizer opt(cfg_.outer, params);
    Rng rng(init_stream_seed_ ^ 0x5057ULL);
    const std::size_t batch = std::max(1, cfg_.pretrain_batch);

    std::vector<std::size_t> order(pooled.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t begin = 0; begin < order.size(); begin += batch) {
            const std::size_t end = std::min(order.size(), begin + batch);
            std::vector<Example> minibatch;
            minibatch.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) minibatch.push_back(pooled[order[i]]);

            ad::Tape tape;
            ParamVars pv = bind(tape, params);
            ad::Var loss = fns.loss(tape, pv, minibatch);
            ad::GradientMap grads = tape.backward(loss);
            ad::Tensor flat({params.flat_size()});
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (!params.entry_trainable(i) || !grads.contains(pv.vars[i])) continue;
                const ad::Tensor& g = grads.at(pv.vars[i]);
                for (std::size_t k = 0; k < g.numel(); ++k) flat[params.offset(i) + k] = g[k];
            }
            opt.apply(params, flat);
        }
    }
    params.set_trainable(Partition::Backbone, start.trainable(Partition::Backbone));
    params.set_trainable(Partition::Prompt, start.trainable(Partition::Prompt));
    return params;
}

double Harness::evaluate_episodes(const ParamSet& params, std::span<const Episode> episodes,
                                  int adapt_steps) const {
    if (episodes.empty()) throw ContractError("evaluate: no episodes");
    std::vector<double> acc(episodes.size(), 0.0);
    std::vector<std::exception_ptr> errors(episodes.size());

    auto run_one = [&](std::size_t i) {
        try {
            const Episode& ep = episodes[i];
            const TaskFns fns = episode_fns(ep);
            if (adapt_steps <= 0) {
                acc[i] = fns.accuracy(params, ep.query);
                return;
            }
            InnerLoopConfig cfg = cfg_.inner;
            cfg.steps = adapt_steps;
            AdaptationTrace trace = adapt(params, fns, ep.support, {}, cfg);
            acc[i] = fns.accuracy(trace.adapted, ep.query);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };

    if (cfg_.parallel == ParallelMode::OpenMp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(episodes.size()); ++i)
            run_one(static_cast<std::size_t>(i));
    } else {
        for (std::size_t i = 0; i < episodes.size(); ++i) run_one(i);
    }
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        if (!errors[i]) continue;
        try {
            std::rethrow_exception(errors[i]);
        } catch (const Error& e) {
            throw Error("evaluate: episode " + std::to_string(i) + ": " + e.what());
        }
    }
    return mean_of(acc);
}

std::pair<ParamSet, RunMetrics> Harness::meta_train(const ParamSet& init) const {
    RunMetrics metrics;
    ParamSet params = init;
    OuterOptimizer opt(cfg_.outer, params);

    const std::vector<Episode> val_stream =
        sample_episode_stream(corpus_, Split::Val, splits_, cfg_.way, cfg_.shot,
                              cfg_.effective_query(), val_stream_seed_, cfg_.val_episodes);
    const int val_steps = cfg_.val_adapt_steps > 0 ? cfg_.val_adapt_steps : cfg_.inner.steps;

    const int steps_per_epoch =
        (cfg_.episodes_per_epoch + cfg_.meta_batch - 1) / cfg_.meta_batch;
    const double total_steps = static_cast<double>(cfg_.max_epochs) * steps_per_epoch;
    const double warmup = std::max(1.0, cfg_.warmup_frac * total_steps);

    ParamSet best = params;
    double best_val = -1.0;
    int since_improve = 0;
    int outer_steps_done = 0;

    for (int epoch = 0; epoch < cfg_.max_epochs; ++epoch) {
        Rng epoch_rng = Rng::derive(train_stream_seed_, static_cast<std::uint64_t>(epoch));
        std::vector<Episode> episodes;
        episodes.reserve(static_cast<std::size_t>(cfg_.episodes_per_epoch));
        for (int i = 0; i < cfg_.episodes_per_epoch; ++i)
            episodes.push_back(sample_episode(corpus_, Split::Train, splits_, cfg_.way, cfg_.shot,
                                              cfg_.effective_query(), epoch_rng));

        MetaUpdateConfig meta = cfg_.meta;
        if (meta.algo == MetaAlgo::Mslb) {
            const double progress =
                cfg_.max_epochs > 1 ? static_cast<double>(epoch) / (cfg_.max_epochs - 1) : 0.0;
            meta.mslb_weights = mslb_uniform_weights(cfg_.inner.steps, cfg_.mslb_anneal * progress);
        }

        double epoch_loss = 0.0;
        int batches = 0;
        double last_scale = 1.0;
        auto fns_for = [this](const Episode& ep) { return episode_fns(ep); };
        for (int begin = 0; begin < cfg_.episodes_per_epoch; begin += cfg_.meta_batch) {
            const int end = std::min(cfg_.episodes_per_epoch, begin + cfg_.meta_batch);
            double scale = 1.0;
            if (cfg_.lr_schedule) {
                const double s = static_cast<double>(outer_steps_done);
                scale = s < warmup ? (s + 1.0) / warmup
                                   : std::max(0.0, (total_steps - s) / (total_steps - warmup));
            }
            last_scale = scale;
            OuterStepResult r = outer_step(
                params, std::span<const Episode>(episodes.data() + begin,
                                                 static_cast<std::size_t>(end - begin)),
                fns_for, cfg_.inner, meta, opt, scale, cfg_.parallel);
            epoch_loss += r.mean_query_loss;
            ++batches;
            ++outer_steps_done;
        }

        const double val_acc = evaluate_episodes(params, val_stream, val_steps);
        metrics.epochs.push_back(
            {epoch, batches ? epoch_loss / batches : 0.0, val_acc, last_scale});

        if (val_acc > best_val) {
            best_val = val_acc;
            best = params;
            metrics.best_epoch = epoch;
            since_improve = 0;
        } else {
            ++since_improve;
            if (since_improve >= cfg_.patience) break;
        }
    }
    metrics.best_val_acc = best_val;
    return {std::move(best), std::move(metrics)};
}

InnerLoopConfig Harness::test_adapt_config(std::size_t support_size) const {
    InnerLoopConfig cfg = cfg_.inner;
    cfg.batch_size = cfg_.test_batch;
    const std::size_t batch = cfg_.test_batch > 0 ? static_cast<std::size_t>(cfg_.test_batch)
                                                  : support_size;
    const std::size_t per_epoch = (support_size + batch - 1) / batch;
    cfg.steps = cfg_.test_adapt_epochs * static_cast<int>(std::max<std::size_t>(1, per_epoch));
    if (cfg_.test_lr > 0.0) cfg.lr = cfg_.test_lr;
    return cfg;
}

std::vector<Episode> Harness::test_stream() const {
    return sample_episode_stream(corpus_, Split::Test, splits_, cfg_.way, cfg_.shot,
                                 cfg_.effective_query(), test_stream_seed_, cfg_.test_episodes);
}

RunMetrics Harness::meta_test(const ParamSet& params) const {
    const std::vector<Episode> episodes = test_stream();
    if (episodes.empty()) throw ContractError("meta_test: no test episodes configured");

    RunMetrics metrics;
    metrics.test_episode_acc.resize(episodes.size());
    metrics.test_episode_loss.resize(episodes.size());
    std::vector<std::vector<double>> loss_curves(episodes.size());
    std::vector<std::vector<double>> acc_curves(episodes.size());
    std::vector<std::exception_ptr> errors(episodes.size());

    auto run_one = [&](std::size_t i) {
        try {
            const Episode& ep = episodes[i];
            const TaskFns fns = episode_fns(ep);
            AdaptOptions opts;
            opts.record_query_curve = true;
            const InnerLoopConfig cfg = test_adapt_config(ep.support.size());
            AdaptationTrace trace = adapt(params, fns, ep.support, ep.query, cfg, opts);
            loss_curves[i] = std::move(trace.query_loss);
            acc_curves[i] = std::move(trace.query_acc);
            metrics.test_episode_acc[i] = acc_curves[i].back();
            metrics.test_episode_loss[i] = loss_curves[i].back();
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };

    if (cfg_.parallel == ParallelMode::OpenMp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(episodes.size()); ++i)
            run_one(static_cast<std::size_t>(i));
    } else {
        for (std::size_t i = 0; i < episodes.size(); ++i) run_one(i);
    }
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        if (!errors[i]) continue;
        try {
            std::rethrow_exception(errors[i]);
        } catch (const Error& e) {
            throw Error("meta_test: episode " + std::to_string(i) + ": " + e.what());
        }
    }

    // Fixed-order reduction of the per-episode curves.
    const std::size_t curve_len = loss_curves[0].size();
    metrics.curve_loss.assign(curve_len, 0.0);
    metrics.curve_acc.assign(curve_len, 0.0);
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        if (loss_curves[i].size() != curve_len)
            throw ContractError("meta_test: inconsistent curve lengths across episodes");
        for (std::size_t s = 0; s < curve_len; ++s) {
            metrics.curve_loss[s] += loss_curves[i][s];
            metrics.curve_acc[s] += acc_curves[i][s];
        }
    }
    for (std::size_t s = 0; s < curve_len; ++s) {
        metrics.curve_loss[s] /= static_cast<double>(episodes.size());
        metrics.curve_acc[s] /= static_cast<double>(episodes.size());
    }
    metrics.test_acc_mean = mean_of(metrics.test_episode_acc);
    metrics.test_acc_std = std_of(metrics.test_episode_acc, metrics.test_acc_mean);
    return metrics;
}

// ---- experiment suite -------------------------------------------------------

namespace {

struct ArmResult {
    double acc = 0.0;
    std::vector<double> curve_loss, curve_acc;
};

// Frozen-backbone arms: the shared pretrained backbone with a per-seed random
// prompt, optionally prompt-pretrained or meta-trained before testing.
ArmResult run_arm(const Harness& harness, const ParamSet& backbone_params, std::uint64_t seed,
                  InitMode mode, int pretrain_epochs) {
    ParamSet params = backbone_params;
    params.set_trainable(Partition::Backbone, false);
    Rng rng(seed ^ 0xA5A5A5A5ULL);
    harness.model().randomize_prompt(params, rng);

    switch (mode) {
        case InitMode::Random:
            break;
        case InitMode::Pretrain:
            params = harness.pretrain_init(params, false, true, pretrain_epochs);
            break;
        case InitMode::Meta: {
            auto [best, metrics] = harness.meta_train(params);
            params = std::move(best);
            break;
        }
    }
    RunMetrics m = harness.meta_test(params);
    return {m.test_acc_mean, m.curve_loss, m.curve_acc};
}

void accumulate_curve(std::vector<double>& into, const std::vector<double>& curve) {
    if (into.empty()) into.assign(curve.size(), 0.0);
    for (std::size_t i = 0; i < curve.size(); ++i) into[i] += curve[i];
}

void scale_curve(std::vector<double>& curve, double factor) {
    for (double& x : curve) x *= factor;
}

}  // namespace

SuiteReport run_experiment_suite(const SuiteConfig& cfg) {
    if (cfg.seeds.empty()) throw ContractError("suite: at least one seed required");
    SuiteReport report;

    std::vector<std::pair<int, int>> settings = cfg.settings;
    if (settings.empty()) settings = {{cfg.base.way, cfg.base.shot}};
    for (const auto& [way, shot] : settings)
        report.setting_names.push_back(std::to_string(way) + "w" + std::to_string(shot) + "s");

    // Per-seed shared backbone: supervised pretraining of the full model on
    // the pooled source split, reused by every arm with that seed.
    auto make_backbone = [&](const RunConfig& rc, std::uint64_t seed) {
        Harness h(rc);
        ParamSet params = h.random_init(seed);
        return h.pretrain_init(params, true, true, rc.pretrain_epochs);
    };

    if (cfg.init_ablation) {
        std::vector<double> random_accs, pretrain_accs, meta_accs;
        for (std::uint64_t seed : cfg.seeds) {
            RunConfig rc = cfg.base;
            rc.seed = seed;
            rc.inner.train_backbone = false;
            Harness harness(rc);
            ParamSet backbone = make_backbone(rc, seed);

            ArmResult random_arm = run_arm(harness, backbone, seed, InitMode::Random,
                                           rc.pretrain_epochs);
            ArmResult pretrain_arm = run_arm(harness, backbone, seed, InitMode::Pretrain,
                                             rc.pretrain_epochs);
            ArmResult meta_arm = run_arm(harness, backbone, seed, InitMode::Meta,
                                         rc.pretrain_epochs);

            report.init_rows.push_back({seed, random_arm.acc, pretrain_arm.acc, meta_arm.acc});
            random_accs.push_back(random_arm.acc);
            pretrain_accs.push_back(pretrain_arm.acc);
            meta_accs.push_back(meta_arm.acc);
            accumulate_curve(report.curve_random_loss, random_arm.curve_loss);
            accumulate_curve(report.curve_random_acc, random_arm.curve_acc);
            accumulate_curve(report.curve_meta_loss, meta_arm.curve_loss);
            accumulate_curve(report.curve_meta_acc, meta_arm.curve_acc);
        }
        const double inv = 1.0 / static_cast<double>(cfg.seeds.size());
        scale_curve(report.curve_random_loss, inv);
        scale_curve(report.curve_random_acc, inv);
        scale_curve(report.curve_meta_loss, inv);
        scale_curve(report.curve_meta_acc, inv);
        report.mean_random = mean_of(random_accs);
        report.mean_pretrain = mean_of(pretrain_accs);
        report.mean_meta = mean_of(meta_accs);
    }

    if (cfg.template_study) {
        std::vector<std::string> templates = cfg.templates;
        if (templates.size() < 3)
            throw ContractError("suite: the template study needs at least 3 templates");
        for (InitMode mode : {InitMode::Random, InitMode::Meta}) {
            SuiteReport::TemplateRow row;
            row.init_mode = init_mode_name(mode);
            for (const auto& [way, shot] : settings) {
                std::vector<double> per_template;
                for (const std::string& tmpl : templates) {
                    std::vector<double> per_seed;
                    for (std::uint64_t seed : cfg.seeds) {
                        RunConfig rc = cfg.base;
                        rc.seed = seed;
                        rc.way = way;
                        rc.shot = shot;
                        rc.template_text = tmpl;
                        rc.inner.train_backbone = false;
                        Harness harness(rc);
                        ParamSet backbone = make_backbone(rc, seed);
                        per_seed.push_back(
                            run_arm(harness, backbone, seed, mode, rc.pretrain_epochs).acc);
                    }
                    per_template.push_back(mean_of(per_seed));
                }
                const double mean = mean_of(per_template);
                row.mean_acc.push_back(mean);
                row.std_acc.push_back(std_of(per_template, mean));
            }
            report.template_rows.push_back(std::move(row));
        }
    }

    if (cfg.algo_comparison) {
        for (MetaAlgo algo : {MetaAlgo::Mslb, MetaAlgo::Maml, MetaAlgo::Fomaml, MetaAlgo::Reptile}) {
            std::vector<double> per_seed;
            for (std::uint64_t seed : cfg.seeds) {
                RunConfig rc = cfg.base;
                rc.seed = seed;
                rc.meta.algo = algo;
                if (algo == MetaAlgo::Mslb)
                    rc.meta.mslb_weights = mslb_uniform_weights(rc.inner.steps);
                rc.inner.train_backbone = false;
                Harness harness(rc);
                ParamSet backbone = make_backbone(rc, seed);
                per_seed.push_back(
                    run_arm(harness, backbone, seed, InitMode::Meta, rc.pretrain_epochs).acc);
            }
            report.algo_acc.push_back({meta_algo_name(algo), mean_of(per_seed)});
        }
    }

    return report;
}

}  // namespace pmeta
