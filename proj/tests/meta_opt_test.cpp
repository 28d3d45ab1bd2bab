#include <doctest.h>

#include <cmath>

#include "pmeta/gradcheck.hpp"
#include "pmeta/meta_opt.hpp"
#include "test_support.hpp"

using namespace pmeta;
using testsup::ScalarOracle;
using testsup::scalar_batch;
using testsup::scalar_params;
using testsup::scalar_quadratic_fns;

namespace {

InnerLoopConfig scalar_inner(int steps, double lr) {
    InnerLoopConfig cfg;
    cfg.steps = steps;
    cfg.lr = lr;
    return cfg;
}

Episode scalar_episode(int support_target, int query_target) {
    Episode ep;
    ep.way = 1;
    ep.shot = 1;
    ep.query_per_class = 1;
    ep.support = scalar_batch(support_target);
    ep.query = scalar_batch(query_target);
    ep.palette = {0};
    return ep;
}

}  // namespace

TEST_CASE("zero inner rate leaves parameters exactly unchanged") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet p = scalar_params(0.37);
    auto support = scalar_batch(1);
    AdaptationTrace trace = adapt(p, fns, support, {}, scalar_inner(3, 0.0));
    CHECK(trace.adapted["phi"].item() == 0.37);
    CHECK(trace.support_loss.size() == 3);
}

TEST_CASE("one quadratic step from zero with lr 0.1 lands on 0.2") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet p = scalar_params(0.0);
    AdaptationTrace trace = adapt(p, fns, scalar_batch(1), {}, scalar_inner(1, 0.1));
    CHECK(trace.adapted["phi"].item() == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("support losses are non-increasing on a convex quadratic") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet p = scalar_params(-1.5);
    AdaptationTrace trace = adapt(p, fns, scalar_batch(1), {}, scalar_inner(8, 0.2));
    for (std::size_t k = 1; k < trace.support_loss.size(); ++k)
        CHECK(trace.support_loss[k] <= trace.support_loss[k - 1] + 1e-12);
}

TEST_CASE("adaptation records step-0 query curves when asked") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet p = scalar_params(0.0);
    AdaptOptions opts;
    opts.record_query_curve = true;
    AdaptationTrace trace = adapt(p, fns, scalar_batch(1), scalar_batch(-1),
                                  scalar_inner(4, 0.1), opts);
    CHECK(trace.query_loss.size() == 5);  // steps + 1
    CHECK(trace.query_loss[0] == doctest::Approx(1.0));  // (0 - (-1))^2
}

TEST_CASE("MAML meta-gradient reproduces the worked scalar example: 1.92") {
    // L_s=(phi-1)^2, L_q=(phi+1)^2, phi0=0, alpha=0.1, k=1:
    // adapted phi' = 0.2, meta-grad = 2(0.2+1)(1-2*0.1) = 1.92
    TaskFns fns = scalar_quadratic_fns();
    ParamSet p = scalar_params(0.0);
    Episode ep = scalar_episode(1, -1);
    MetaGradStats stats;
    ad::Tensor g = meta_gradient_maml(p, fns, ep.support, ep.query, scalar_inner(1, 0.1), &stats);
    CHECK(g[0] == doctest::Approx(1.92).epsilon(1e-12));
    CHECK(stats.query_loss == doctest::Approx(1.44).epsilon(1e-12));  // (0.2+1)^2
}

TEST_CASE("FOMAML drops the curvature factor: 2.4 on the scalar example") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet p = scalar_params(0.0);
    Episode ep = scalar_episode(1, -1);
    ad::Tensor g = meta_gradient_fomaml(p, fns, ep.support, ep.query, scalar_inner(1, 0.1));
    CHECK(g[0] == doctest::Approx(2.4).epsilon(1e-12));
}

TEST_CASE("alpha=0 collapses MAML to the plain query gradient and to FOMAML") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet p = scalar_params(0.4);
    Episode ep = scalar_episode(1, -1);
    const InnerLoopConfig cfg = scalar_inner(2, 0.0);
    ad::Tensor maml = meta_gradient_maml(p, fns, ep.support, ep.query, cfg);
    ad::Tensor fo = meta_gradient_fomaml(p, fns, ep.support, ep.query, cfg);
    CHECK(maml[0] == 2.0 * (0.4 + 1.0));  // d/dphi (phi+1)^2 at 0.4
    CHECK(maml[0] == fo[0]);
}

TEST_CASE("all four algorithms match their closed forms to 1e-10 on the quadratic family") {
    TaskFns fns = scalar_quadratic_fns();
    const ScalarOracle oracle{2.0, -3.0, 0.07};
    const double phi0 = 0.45;
    Episode ep = scalar_episode(2, -3);
    for (int k : {1, 2, 3, 5}) {
        ParamSet p = scalar_params(phi0);
        const InnerLoopConfig cfg = scalar_inner(k, oracle.alpha);
        CAPTURE(k);
        CHECK(meta_gradient_maml(p, fns, ep.support, ep.query, cfg)[0] ==
              doctest::Approx(oracle.maml_grad(phi0, k)).epsilon(1e-10));
        CHECK(meta_gradient_fomaml(p, fns, ep.support, ep.query, cfg)[0] ==
              doctest::Approx(oracle.fomaml_grad(phi0, k)).epsilon(1e-10));
        const std::vector<double> w = mslb_uniform_weights(k);
        CHECK(meta_gradient_mslb(p, fns, ep.support, ep.query, cfg, w)[0] ==
              doctest::Approx(oracle.mslb_grad(phi0, w)).epsilon(1e-10));
        ParamSet rep = reptile_update(p, fns, ep.support, ep.query, cfg, 0.5);
        CHECK(rep["phi"].item() ==
              doctest::Approx(oracle.reptile(phi0, k, 0.5)).epsilon(1e-10));
    }
}

TEST_CASE("FOMAML-MAML difference equals the curvature term exactly on quadratics") {
    // meta = g_q*(1-2a)^k, fo = g_q; difference = g_q*(1-(1-2a)^k).
    TaskFns fns = scalar_quadratic_fns();
    const double alpha = 0.09;
    const int k = 2;
    ParamSet p = scalar_params(-0.2);
    Episode ep = scalar_episode(1, -1);
    const InnerLoopConfig cfg = scalar_inner(k, alpha);
    const ScalarOracle oracle{1.0, -1.0, alpha};
    ad::Tensor maml = meta_gradient_maml(p, fns, ep.support, ep.query, cfg);
    ad::Tensor fo = meta_gradient_fomaml(p, fns, ep.support, ep.query, cfg);
    const double gq = oracle.fomaml_grad(-0.2, k);
    CHECK(std::abs(fo[0] - maml[0]) ==
          doctest::Approx(std::abs(gq) * std::abs(1.0 - std::pow(1.0 - 2.0 * alpha, k)))
              .epsilon(1e-12));
}

TEST_CASE("MSLB with last-step-only weights is exactly MAML") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet p = scalar_params(0.3);
    Episode ep = scalar_episode(1, -1);
    const InnerLoopConfig cfg = scalar_inner(3, 0.08);
    std::vector<double> w{0.0, 0.0, 1.0};
    ad::Tensor mslb = meta_gradient_mslb(p, fns, ep.support, ep.query, cfg, w);
    ad::Tensor maml = meta_gradient_maml(p, fns, ep.support, ep.query, cfg);
    CHECK(mslb[0] == maml[0]);  // bit-identical
}

TEST_CASE("MSLB weight-count mismatch is a contract error") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet p = scalar_params(0.0);
    Episode ep = scalar_episode(1, -1);
    std::vector<double> w{0.5, 0.5};
    CHECK_THROWS_AS(
        meta_gradient_mslb(p, fns, ep.support, ep.query, scalar_inner(3, 0.1), w),
        ContractError);
}

TEST_CASE("an identically zero query loss yields a zero MSLB gradient") {
    TaskFns fns;
    fns.loss = [](ad::Tape& tape, const ParamVars& pv, Batch batch) {
        // support loss is the quadratic; query batches are empty-token
        // sentinels with label 99 mapping to a zero loss
        if (!batch.empty() && batch[0].label == 99)
            return ad::mul_scalar(ad::sum(ad::mul(pv.at("phi"), pv.at("phi"))), 0.0);
        ad::Var d = ad::sub(pv.at("phi"), tape.constant(ad::Tensor::scalar(batch[0].label)));
        return ad::mul(d, d);
    };
    ParamSet p = scalar_params(0.7);
    auto support = scalar_batch(1);
    auto query = scalar_batch(99);
    std::vector<double> w = mslb_uniform_weights(2);
    ad::Tensor g = meta_gradient_mslb(p, fns, support, query, scalar_inner(2, 0.1), w);
    CHECK(g[0] == 0.0);
}

TEST_CASE("reptile moves to the adapted parameters when eps is 1") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet p = scalar_params(0.0);
    AdaptationTrace ref = adapt(p, fns, scalar_batch(1), {}, scalar_inner(4, 0.1));
    ParamSet rep = reptile_update(p, fns, scalar_batch(1), {}, scalar_inner(4, 0.1), 1.0);
    CHECK(rep["phi"].item() == ref.adapted["phi"].item());
}

TEST_CASE("one-step reptile direction is the support gradient direction") {
    // After one step, adapted-initial = -alpha * grad_s, so the reptile move
    // is proportional to the plain SGD step.
    TaskFns fns = scalar_quadratic_fns();
    const double phi0 = 0.8, alpha = 0.05, eps = 0.35;
    ParamSet p = scalar_params(phi0);
    ParamSet rep = reptile_update(p, fns, scalar_batch(1), {}, scalar_inner(1, alpha), eps);
    const double support_grad = 2.0 * (phi0 - 1.0);
    CHECK(rep["phi"].item() - phi0 ==
          doctest::Approx(-eps * alpha * support_grad).epsilon(1e-14));
}

TEST_CASE("MAML matches finite differences of the unrolled objective on tiny prompt models") {
    // The adapted-query objective as a function of the initial parameters,
    // differentiated numerically; k up to 3, model under 500 parameters.
    testsup::TinyModel tm = testsup::TinyModel::make(2, 5, 3);
    ParamSet params = tm.model.init_params();
    std::size_t prompt_param_count = 0;
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params.entry(i).partition == Partition::Prompt)
            prompt_param_count += params.entry(i).value.numel();
    CHECK(prompt_param_count < 500);

    TaskFns fns = tm.model.task_fns(tm.verb);
    auto batch = testsup::tiny_batch(tm.vocab);
    std::vector<Example> support{batch[0], batch[1]};
    std::vector<Example> query{batch[2], batch[1]};

    for (int k : {1, 2, 3}) {
        InnerLoopConfig cfg;
        cfg.steps = k;
        cfg.lr = 0.2;
        cfg.train_backbone = false;

        ad::Tensor analytic = meta_gradient_maml(params, fns, support, query, cfg);

        // Independent oracle: central differences of adapt-then-query-loss
        // as a function of the initial parameters. Frozen-partition entries
        // stay zero on both routes.
        const double h = 1e-5;
        const ad::Tensor base = params.flatten();
        ad::Tensor numeric({params.flat_size()});
        auto objective_at = [&](std::size_t flat_index, double delta) {
            ad::Tensor shifted = base;
            shifted[flat_index] += delta;
            ParamSet q = params;
            q.load_flat(shifted);
            AdaptationTrace tr = adapt(q, fns, support, {}, cfg);
            return tm.model.eval_loss(tr.adapted, query, tm.verb);
        };
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params.entry(i).partition != Partition::Prompt) continue;
            for (std::size_t c = 0; c < params.entry(i).value.numel(); ++c) {
                const std::size_t off = params.offset(i) + c;
                numeric[off] = (objective_at(off, h) - objective_at(off, -h)) / (2.0 * h);
            }
        }
        CAPTURE(k);
        CHECK(ad::normwise_rel_diff(analytic, numeric) < 1e-4);
    }
}

TEST_CASE("meta gradients of the frozen partition are identically zero") {
    testsup::TinyModel tm = testsup::TinyModel::make(2);
    ParamSet params = tm.model.init_params();
    TaskFns fns = tm.model.task_fns(tm.verb);
    auto batch = testsup::tiny_batch(tm.vocab);
    std::vector<Example> support{batch[0], batch[1]};
    std::vector<Example> query{batch[2]};

    InnerLoopConfig cfg;
    cfg.steps = 2;
    cfg.lr = 0.1;
    cfg.train_backbone = false;

    for (auto grad : {meta_gradient_maml(params, fns, support, query, cfg),
                      meta_gradient_fomaml(params, fns, support, query, cfg)}) {
        double backbone_norm = 0.0, prompt_norm = 0.0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const bool backbone = params.entry(i).partition == Partition::Backbone;
            for (std::size_t k2 = 0; k2 < params.entry(i).value.numel(); ++k2) {
                const double g = grad[params.offset(i) + k2];
                (backbone ? backbone_norm : prompt_norm) += g * g;
            }
        }
        CHECK(backbone_norm == 0.0);
        CHECK(prompt_norm > 0.0);
    }
}

TEST_CASE("retained graph grows with inner steps for MAML but not FOMAML") {
    testsup::TinyModel tm = testsup::TinyModel::make(2);
    ParamSet params = tm.model.init_params();
    TaskFns fns = tm.model.task_fns(tm.verb);
    auto batch = testsup::tiny_batch(tm.vocab);
    std::vector<Example> support{batch[0], batch[1]};
    std::vector<Example> query{batch[2]};

    std::vector<std::size_t> maml_retained, fomaml_retained;
    for (int k = 1; k <= 5; ++k) {
        InnerLoopConfig cfg;
        cfg.steps = k;
        cfg.lr = 0.05;
        MetaGradStats ms, fs;
        (void)meta_gradient_maml(params, fns, support, query, cfg, &ms);
        (void)meta_gradient_fomaml(params, fns, support, query, cfg, &fs);
        maml_retained.push_back(ms.retained_nodes);
        fomaml_retained.push_back(fs.retained_nodes);
    }
    // MAML: at least linear growth (equal positive increments here).
    const auto inc = maml_retained[1] - maml_retained[0];
    CHECK(inc > 0);
    for (std::size_t i = 1; i < maml_retained.size(); ++i)
        CHECK(maml_retained[i] - maml_retained[i - 1] >= inc);
    // FOMAML: constant in k.
    for (std::size_t i = 1; i < fomaml_retained.size(); ++i)
        CHECK(fomaml_retained[i] == fomaml_retained[0]);
}

TEST_CASE("MAML k=1 agrees with the hvp route: g_q - alpha * H * g_q") {
    testsup::TinyModel tm = testsup::TinyModel::make(2);
    ParamSet params = tm.model.init_params();
    params.set_trainable(Partition::Backbone, false);
    TaskFns fns = tm.model.task_fns(tm.verb);
    auto batch = testsup::tiny_batch(tm.vocab);
    std::vector<Example> support{batch[0], batch[1]};
    std::vector<Example> query{batch[2]};

    InnerLoopConfig cfg;
    cfg.steps = 1;
    cfg.lr = 0.15;
    cfg.train_backbone = false;

    ad::Tensor meta = meta_gradient_maml(params, fns, support, query, cfg);

    // Second route: adapted params, query gradient there, then pull back
    // through (I - alpha H_s) via a Hessian-vector product at the start.
    AdaptationTrace tr = adapt(params, fns, support, {}, cfg);
    ParamLossFn qloss = [&](ad::Tape& t, const ParamVars& pv) {
        return fns.loss(t, pv, query);
    };
    ParamLossFn sloss = [&](ad::Tape& t, const ParamVars& pv) {
        return fns.loss(t, pv, support);
    };
    // Restrict to the adapted block: only prompt components move in the
    // inner step, so the pull-back is (I - alpha * H_prompt,prompt).
    auto zero_frozen = [&](ad::Tensor& t) {
        for (std::size_t i = 0; i < params.size(); ++i)
            if (!params.entry_trainable(i))
                for (std::size_t k = 0; k < params.entry(i).value.numel(); ++k)
                    t[params.offset(i) + k] = 0.0;
    };
    ad::Tensor gq = flat_gradient(qloss, tr.adapted);
    zero_frozen(gq);
    ad::Tensor hv = hvp(sloss, params, gq);
    ad::Tensor expected({params.flat_size()});
    for (std::size_t i = 0; i < expected.numel(); ++i) expected[i] = gq[i] - cfg.lr * hv[i];
    zero_frozen(expected);
    CHECK(ad::normwise_rel_diff(meta, expected) < 1e-10);
}

TEST_CASE("outer step with plain SGD applies exactly -beta times the meta gradient") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet params = scalar_params(0.0);
    Episode ep = scalar_episode(1, -1);
    const InnerLoopConfig inner = scalar_inner(1, 0.1);
    MetaUpdateConfig meta;
    meta.algo = MetaAlgo::Maml;

    OuterOptimizer::Config oc;
    oc.kind = OuterOptimizer::Kind::Sgd;
    oc.lr_backbone = 0.5;
    oc.lr_prompt = 0.5;
    OuterOptimizer opt(oc, params);

    std::vector<Episode> batch{ep};
    auto fns_for = [&](const Episode&) { return fns; };
    outer_step(params, batch, fns_for, inner, meta, opt);
    CHECK(params["phi"].item() == doctest::Approx(0.0 - 0.5 * 1.92).epsilon(1e-12));
}

TEST_CASE("duplicating an episode in the batch does not change the update") {
    TaskFns fns = scalar_quadratic_fns();
    Episode ep = scalar_episode(1, -1);
    const InnerLoopConfig inner = scalar_inner(1, 0.1);
    MetaUpdateConfig meta;
    meta.algo = MetaAlgo::Maml;
    OuterOptimizer::Config oc;
    oc.kind = OuterOptimizer::Kind::Sgd;
    oc.lr_backbone = oc.lr_prompt = 0.3;
    auto fns_for = [&](const Episode&) { return fns; };

    ParamSet once = scalar_params(0.1);
    OuterOptimizer opt1(oc, once);
    std::vector<Episode> batch1{ep};
    outer_step(once, batch1, fns_for, inner, meta, opt1);

    ParamSet twice = scalar_params(0.1);
    OuterOptimizer opt2(oc, twice);
    std::vector<Episode> batch2{ep, ep};
    outer_step(twice, batch2, fns_for, inner, meta, opt2);

    CHECK(once["phi"].item() == twice["phi"].item());
}

TEST_CASE("two-episode batches average their meta gradients") {
    TaskFns fns = scalar_quadratic_fns();
    const InnerLoopConfig inner = scalar_inner(1, 0.1);
    const double beta = 0.25;
    Episode e1 = scalar_episode(1, -1);
    Episode e2 = scalar_episode(-1, 2);
    const ScalarOracle o1{1, -1, 0.1}, o2{-1, 2, 0.1};
    const double phi0 = 0.6;
    const double g1 = o1.maml_grad(phi0, 1), g2 = o2.maml_grad(phi0, 1);

    ParamSet params = scalar_params(phi0);
    OuterOptimizer::Config oc;
    oc.kind = OuterOptimizer::Kind::Sgd;
    oc.lr_backbone = oc.lr_prompt = beta;
    OuterOptimizer opt(oc, params);
    std::vector<Episode> batch{e1, e2};
    auto fns_for = [&](const Episode&) { return fns; };
    outer_step(params, batch, fns_for, inner, MetaUpdateConfig{}, opt);
    CHECK(params["phi"].item() ==
          doctest::Approx(phi0 - beta * 0.5 * (g1 + g2)).epsilon(1e-12));
}

TEST_CASE("serial and OpenMP outer steps produce bit-identical parameters") {
    testsup::TinyModel tm = testsup::TinyModel::make(2);
    ParamSet a = tm.model.init_params();
    ParamSet b = a;
    auto batch = testsup::tiny_batch(tm.vocab);
    Episode ep1, ep2, ep3;
    for (Episode* ep : {&ep1, &ep2, &ep3}) {
        ep->way = 2;
        ep->shot = 1;
        ep->query_per_class = 1;
        ep->palette = {0, 1};
    }
    ep1.support = {batch[0]};
    ep1.query = {batch[1]};
    ep2.support = {batch[1]};
    ep2.query = {batch[2]};
    ep3.support = {batch[2]};
    ep3.query = {batch[0]};
    std::vector<Episode> episodes{ep1, ep2, ep3};

    InnerLoopConfig inner;
    inner.steps = 2;
    inner.lr = 0.05;
    MetaUpdateConfig meta;
    meta.algo = MetaAlgo::Maml;
    auto fns_for = [&](const Episode&) { return tm.model.task_fns(tm.verb); };

    OuterOptimizer::Config oc;
    oc.kind = OuterOptimizer::Kind::AdamW;
    OuterOptimizer opt_a(oc, a), opt_b(oc, b);
    outer_step(a, episodes, fns_for, inner, meta, opt_a, 1.0, ParallelMode::Serial);
    outer_step(b, episodes, fns_for, inner, meta, opt_b, 1.0, ParallelMode::OpenMp);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.entry(i).value == b.entry(i).value);
}

TEST_CASE("episode errors surface with their batch index") {
    TaskFns fns = scalar_quadratic_fns();
    ParamSet params = scalar_params(0.0);
    Episode good = scalar_episode(1, -1);
    Episode bad = scalar_episode(1, -1);
    bad.query.clear();  // meta gradient demands a query set
    MetaUpdateConfig meta;
    OuterOptimizer::Config oc;
    oc.kind = OuterOptimizer::Kind::Sgd;
    OuterOptimizer opt(oc, params);
    std::vector<Episode> batch{good, bad};
    auto fns_for = [&](const Episode&) { return fns; };
    try {
        outer_step(params, batch, fns_for, scalar_inner(1, 0.1), meta, opt);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("episode 1") != std::string::npos);
    }
}
