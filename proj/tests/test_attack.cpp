#include "flipfl/attack.hpp"
#include "flipfl/errors.hpp"
#include "flipfl/experiment.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace flipfl;
using namespace flipfl::testing;
using attack::AttackConfig;

namespace {

Tensor tensor_of(std::initializer_list<Real> v) {
    return Tensor({static_cast<Index>(v.size())}, v);
}

std::vector<Index> masked_indices(const Tensor& mask) {
    std::vector<Index> out;
    for (Index i = 0; i < mask.size(); ++i)
        if (mask[i] != 0.0) out.push_back(i);
    return out;
}

fl::ClientData attacker_data(std::uint64_t seed, int per_class = 12) {
    return {0, tiny_blobs(per_class, seed), true};
}

fl::RoundConfig round_cfg(std::uint64_t seed) {
    fl::RoundConfig c;
    c.seed = seed;
    c.local_steps = 4;
    c.batch_size = 8;
    c.local_lr = 0.05;
    return c;
}

AttackConfig attack_off() {
    AttackConfig c;
    c.lambda = 0.0;
    c.alpha = 0.0;
    c.trigger_iters = 0;
    c.enable_flip = false;
    c.enable_trigger_opt = false;
    return c;
}

}  // namespace

TEST(Importance, DirectionalFormula) {
    nn::ModelParams cur = scalar_model((Vector(2) << 2, -1).finished());
    nn::ModelParams prev = scalar_model((Vector(2) << 1, -0.5).finished());
    auto s = attack::importance_scores(cur, prev, attack::Criterion::directional);
    EXPECT_EQ(s[0], Tensor({1, 2}, {2.0, 0.5}));

    auto shrink = attack::importance_scores(scalar_model(Vector::Constant(1, 0.5)), scalar_model(Vector::Constant(1, 1.0)),
                                            attack::Criterion::directional);
    EXPECT_EQ(shrink[0][0], -0.25);
}

TEST(Importance, DirectionlessIsAbsoluteValue) {
    Rng rng(1);
    auto arch = small_conv_arch();
    auto a = random_model(arch, rng), b = random_model(arch, rng);
    auto d = attack::importance_scores(a, b, attack::Criterion::directional);
    auto u = attack::importance_scores(a, b, attack::Criterion::directionless);
    for (std::size_t j = 0; j < d.size(); ++j) EXPECT_EQ(u[j].data(), d[j].data().cwiseAbs());
    EXPECT_THROW(attack::importance_scores(a, scalar_model(Vector::Ones(3)), attack::Criterion::directional),
                 DimensionError);
    EXPECT_EQ(attack::criterion_from_string("directionless"), attack::Criterion::directionless);
    EXPECT_THROW(attack::criterion_from_string("sideways"), ConfigError);
}

TEST(Candidates, HandExamples) {
    auto m = attack::select_candidates(tensor_of({5, -1, 3, 0}), 0.25);
    EXPECT_EQ(masked_indices(m), (std::vector<Index>{1}));
    auto tie = attack::select_candidates(tensor_of({2, 2, 2, 2}), 0.5);
    EXPECT_EQ(masked_indices(tie), (std::vector<Index>{0, 1}));
    EXPECT_EQ(attack::candidate_count(1000, 0.001), 1);
    EXPECT_EQ(attack::candidate_count(10, 0.001), 1);
    EXPECT_EQ(attack::candidate_count(10, 0.25), 3);
    EXPECT_EQ(attack::candidate_count(10, 1.0), 10);
    EXPECT_THROW(attack::select_candidates(tensor_of({1, 2}), 0.0), ConfigError);
}

TEST(Candidates, MatchSortOracle) {
    Rng rng(2);
    std::uniform_int_distribution<int> coarse(-3, 3);
    for (int trial = 0; trial < 200; ++trial) {
        Index n = 1 + trial % 37;
        Tensor scores(Shape{n});
        // Coarse values force plenty of ties.
        for (Index i = 0; i < n; ++i) scores[i] = trial % 2 ? coarse(rng) : std::uniform_real_distribution<Real>(-1, 1)(rng);
        Real s = 0.05 + 0.9 * (trial % 10) / 10.0;
        std::vector<Index> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return scores[a] < scores[b]; });
        order.resize(static_cast<std::size_t>(attack::candidate_count(n, s)));
        std::sort(order.begin(), order.end());
        EXPECT_EQ(masked_indices(attack::select_candidates(scores, s)), order);
    }
}

TEST(Candidates, CardinalityPerLayerStableAcrossCriteria) {
    Rng rng(3);
    auto arch = small_conv_arch();
    auto a = random_model(arch, rng), b = random_model(arch, rng);
    for (auto c : {attack::Criterion::directional, attack::Criterion::directionless}) {
        auto masks = attack::select_candidates(attack::importance_scores(a, b, c), arch, 0.1, 0.02);
        for (std::size_t j = 0; j < arch.size(); ++j) {
            Real s = arch[j].kind == nn::LayerKind::conv2d ? 0.1 : 0.02;
            EXPECT_EQ(static_cast<Index>(masked_indices(masks[j]).size()),
                      attack::candidate_count(a.layers[j].weight.size(), s));
        }
    }
}

TEST(Flip, SignAlgebra) {
    auto out = attack::flip_first_layer(tensor_of({2, -3}), tensor_of({1, 1}), tensor_of({-1, 1}));
    EXPECT_EQ(out, tensor_of({-2, 3}));
    auto w = tensor_of({1.5, -2, 0.25});
    EXPECT_EQ(attack::flip_first_layer(w, tensor_of({0, 0, 0}), tensor_of({-1, 1, -1})), w);
    EXPECT_EQ(attack::flip_subsequent_layer(w, tensor_of({1, 1, 1}), tensor_of({0.1, 4, 2})), tensor_of({1.5, 2, 0.25}));
    // A zero sign leaves the weight alone.
    EXPECT_EQ(attack::focused_flip(w, tensor_of({1, 1, 1}), tensor_of({0, 0, -1})), tensor_of({1.5, -2, -0.25}));
}

TEST(Flip, MagnitudeAndMaskProperty) {
    Rng rng(4);
    std::bernoulli_distribution coin(0.3);
    for (int trial = 0; trial < 200; ++trial) {
        Index n = 1 + trial % 50;
        Tensor w = random_tensor({n}, rng, -2, 2), src = random_tensor({n}, rng), mask(Shape{n});
        for (Index i = 0; i < n; ++i) mask[i] = coin(rng) ? 1.0 : 0.0;
        Tensor out = attack::focused_flip(w, mask, src);
        EXPECT_EQ(out.data().cwiseAbs(), w.data().cwiseAbs());
        for (Index i = 0; i < n; ++i) EXPECT_EQ(out[i], mask[i] != 0.0 ? sign_of(src[i]) * std::abs(w[i]) : w[i]);
    }
    EXPECT_THROW(attack::focused_flip(tensor_of({1, 2}), tensor_of({1}), tensor_of({1, 1})), DimensionError);
}

TEST(ActivationDifference, EmptyTriggerGivesZero) {
    Rng rng(5);
    auto arch = small_conv_arch();
    auto m = random_model(arch, rng);
    auto trig = data::Trigger::corner_square({1, 5, 5}, 2, 0);
    trig.mask.data().setZero();
    RowMatrix x = uniform_rows(4, 25, rng);
    for (std::size_t j = 0; j < arch.size(); ++j)
        EXPECT_TRUE(attack::activation_difference(m, arch, j, x, trig).isZero(0.0));
}

TEST(ActivationDifference, IdentityPropagation) {
    nn::Architecture arch{nn::LayerSpec::dense(4, 4), nn::LayerSpec::dense(4, 2, nn::Activation::identity)};
    nn::ModelParams m;
    m.layers.push_back({Tensor({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}), Tensor::filled({4}, 0.0)});
    m.layers.push_back({Tensor::filled({2, 4}, 0.5), Tensor::filled({2}, 0.0)});
    // 1 x 2 x 2 image; the trigger sets pixel 3 to 1 where the input is 0.
    data::Trigger trig = data::Trigger::square_at({1, 2, 2}, 1, 1, 1, 0, 1.0);
    RowMatrix x(1, 4);
    x << 0.2, 0.3, 0.4, 0.0;
    Vector d = attack::activation_difference(m, arch, 0, x, trig);
    EXPECT_EQ(d, (Vector(4) << 0, 0, 0, 1).finished());
}

TEST(ActivationDifference, MatchesDoubleForward) {
    Rng rng(6);
    auto arch = small_conv_arch();
    auto trig = data::Trigger::corner_square({1, 5, 5}, 2, 0, 0.9);
    for (int t = 0; t < 10; ++t) {
        auto m = random_model(arch, rng);
        RowMatrix x = uniform_rows(5, 25, rng);
        auto a = nn::forward_with_trace(m, arch, x);
        auto b = nn::forward_with_trace(m, arch, data::triggered_copy(x, trig));
        for (std::size_t j = 0; j < arch.size(); ++j) {
            Vector want = (b.trace.layers[j].post - a.trace.layers[j].post).colwise().mean().transpose();
            EXPECT_LE((attack::activation_difference(m, arch, j, x, trig) - want).cwiseAbs().maxCoeff(), 1e-14);
        }
    }
}

TEST(SignSource, ConvUsesResizedPatchPerFilter) {
    auto spec = nn::LayerSpec::conv2d(1, 6, 6, 2, 3, 3);
    data::Trigger trig;
    trig.pattern = Tensor::filled({1, 6, 6}, 0.0);
    trig.mask = Tensor::filled({6, 6}, 0.0);
    // 2 x 2 patch at (0, 0) with values 1, 0 / 0.5, 1
    trig.mask[0] = trig.mask[1] = trig.mask[6] = trig.mask[7] = 1.0;
    trig.pattern[0] = 1.0;
    trig.pattern[6] = 0.5;
    trig.pattern[7] = 1.0;
    Tensor src = attack::first_layer_sign_source(spec, trig, RowMatrix(0, 36));
    ASSERT_EQ(src.shape(), spec.weight_shape());
    Tensor per_filter = data::resize_trigger(trig.patch(), 3, 3);
    for (Index f = 0; f < 2; ++f)
        for (Index i = 0; i < 9; ++i) EXPECT_EQ(src[f * 9 + i], per_filter[i]);
}

TEST(SignSource, DensePathZeroOutsideTrigger) {
    // MLP: the sign source is the mean input delta, which vanishes off the trigger.
    Rng rng(7);
    auto spec = nn::LayerSpec::dense(16, 5);
    auto trig = data::Trigger::square_at({1, 4, 4}, 1, 1, 2, 0, 1.0);
    RowMatrix x = uniform_rows(6, 16, rng, 0.0, 0.9);
    Tensor src = attack::first_layer_sign_source(spec, trig, x);
    Tensor w = random_tensor(spec.weight_shape(), rng);
    Tensor out = attack::flip_first_layer(w, Tensor::filled(spec.weight_shape(), 1.0), src);
    for (Index o = 0; o < 5; ++o)
        for (Index i = 0; i < 16; ++i) {
            Index k = o * 16 + i;
            if (trig.mask[i] == 0.0) {
                EXPECT_EQ(src[k], 0.0);
                EXPECT_EQ(out[k], w[k]);
            } else {
                EXPECT_GT(src[k], 0.0);
                EXPECT_EQ(out[k], std::abs(w[k]));
            }
        }
}

TEST(SignSource, FirstLayerActivationMonotonicity) {
    // With every weight masked and the sign source aligned with x' - x, each
    // unit's pre-activation can only grow under the trigger.
    Rng rng(8);
    for (int t = 0; t < 50; ++t) {
        for (auto spec : {nn::LayerSpec::dense(16, 6), nn::LayerSpec::conv2d(1, 4, 4, 3, 2, 2)}) {
            nn::LayerParams p{random_tensor(spec.weight_shape(), rng), random_tensor(spec.bias_shape(), rng)};
            auto trig = spec.kind == nn::LayerKind::dense ? data::Trigger::square_at({1, 4, 4}, 0, 2, 2, 0, 1.0)
                                                          : data::Trigger::square_at({1, 4, 4}, 2, 2, 2, 0, 1.0);
            RowMatrix x = uniform_rows(4, 16, rng, 0.0, 0.99);
            Tensor mask = Tensor::filled(spec.weight_shape(), 1.0);
            p.weight = attack::flip_first_layer(p.weight, mask, attack::first_layer_sign_source(spec, trig, x));
            RowMatrix xt = data::triggered_copy(x, trig);
            RowMatrix diff = nn::activate(nn::layer_forward(p, spec, xt), spec.activation) -
                             nn::activate(nn::layer_forward(p, spec, x), spec.activation);
            EXPECT_GE(diff.minCoeff(), -1e-12);
        }
    }
}

TEST(ExpandToWeight, DenseBroadcastAndConvResize) {
    auto dense = nn::LayerSpec::dense(3, 2);
    Vector d(3);
    d << 1, -2, 0;
    EXPECT_EQ(attack::expand_to_weight(dense, d), Tensor({2, 3}, {1, -2, 0, 1, -2, 0}));
    auto conv = nn::LayerSpec::conv2d(2, 4, 4, 3, 2, 2);
    Vector m(32);
    for (Index i = 0; i < 32; ++i) m[i] = static_cast<Real>(i);
    Tensor w = attack::expand_to_weight(conv, m);
    ASSERT_EQ(w.shape(), conv.weight_shape());
    // channel c, kernel (u, v) <- map (c, 2u, 2v)
    for (Index f = 0; f < 3; ++f)
        for (Index c = 0; c < 2; ++c)
            for (Index u = 0; u < 2; ++u)
                for (Index v = 0; v < 2; ++v)
                    EXPECT_EQ(w[((f * 2 + c) * 2 + u) * 2 + v], m[(c * 4 + 2 * u) * 4 + 2 * v]);
    EXPECT_THROW(attack::expand_to_weight(dense, Vector::Zero(4)), DimensionError);
}

TEST(TriggerLoss, GradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        for (auto spec : {nn::LayerSpec::conv2d(1, 5, 5, 3, 3, 3), nn::LayerSpec::dense(25, 7)}) {
            nn::LayerParams p{random_tensor(spec.weight_shape(), rng), random_tensor(spec.bias_shape(), rng, -0.1, 0.1)};
            auto trig = data::Trigger::corner_square({1, 5, 5}, 3, 0, 0.5);
            trig.pattern.data() = uniform_rows(1, 25, rng, 0.1, 0.9).row(0).transpose();
            RowMatrix x = uniform_rows(4, 25, rng);
            auto an = attack::trigger_loss_and_grad(p, spec, x, trig);
            const Real eps = 1e-6;
            for (Index i = 0; i < 25; ++i) {
                if (trig.mask[i] == 0.0) {
                    EXPECT_EQ(an.grad[i], 0.0);
                    continue;
                }
                auto tp = trig, tm = trig;
                tp.pattern[i] += eps;
                tm.pattern[i] -= eps;
                Real num = (attack::trigger_loss_and_grad(p, spec, x, tp).value -
                            attack::trigger_loss_and_grad(p, spec, x, tm).value) / (2 * eps);
                Real denom = std::max({std::abs(num), std::abs(an.grad[i]), 1e-6});
                EXPECT_LT(std::abs(num - an.grad[i]) / denom, 1e-4) << "seed " << seed << " pixel " << i;
            }
            // Loss value is the batch mean of squared activation differences.
            RowMatrix d = nn::activate(nn::layer_forward(p, spec, x), spec.activation) -
                          nn::activate(nn::layer_forward(p, spec, data::triggered_copy(x, trig)), spec.activation);
            EXPECT_NEAR(an.value, d.squaredNorm() / 4.0, 1e-12);
        }
    }
}

TEST(TriggerOpt, ZeroIterationsKeepTrigger) {
    Rng rng(9);
    auto arch = small_conv_arch();
    auto m = random_model(arch, rng);
    auto client = attacker_data(9);
    auto init = data::Trigger::corner_square({1, 5, 5}, 2, 0, 0.6);
    Tensor mask = attack::select_candidates(random_tensor(arch[0].weight_shape(), rng), 0.3);
    AttackConfig cfg;
    cfg.trigger_iters = 0;
    Rng r1(1);
    auto res = attack::optimize_trigger(m.layers[0], arch[0], mask, init, client.data, cfg, r1);
    EXPECT_EQ(res.trigger.pattern, init.pattern);
    EXPECT_TRUE(res.losses.empty());
}

TEST(TriggerOpt, ZeroStepKeepsTriggerButFlips) {
    Rng rng(10);
    auto arch = small_conv_arch();
    auto m = random_model(arch, rng);
    auto client = attacker_data(10);
    auto init = data::Trigger::corner_square({1, 5, 5}, 2, 0, 1.0);
    Tensor mask = Tensor::filled(arch[0].weight_shape(), 1.0);
    AttackConfig cfg;
    cfg.trigger_lr = 0.0;
    Rng r1(1);
    auto res = attack::optimize_trigger(m.layers[0], arch[0], mask, init, client.data, cfg, r1);
    EXPECT_EQ(res.trigger.pattern, init.pattern);
    Tensor once = attack::flip_first_layer(m.layers[0].weight, mask,
                                           attack::first_layer_sign_source(arch[0], init, RowMatrix(0, 25)));
    EXPECT_EQ(res.first.weight, once);
    EXPECT_EQ(res.first.bias, m.layers[0].bias);
    EXPECT_EQ(res.losses.size(), 10u);
}

TEST(TriggerOpt, AscentIncreasesLossOnMostSeeds) {
    int improved = 0;
    const int runs = 20;
    for (int seed = 0; seed < runs; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        auto arch = small_conv_arch();
        auto m = random_model(arch, rng);
        auto client = attacker_data(static_cast<std::uint64_t>(seed) + 100);
        auto init = data::Trigger::corner_square({1, 5, 5}, 3, 0, 0.5);
        Tensor mask = attack::select_candidates(random_tensor(arch[0].weight_shape(), rng), 0.2);
        AttackConfig cfg;
        Rng r1(static_cast<std::uint64_t>(seed));
        auto res = attack::optimize_trigger(m.layers[0], arch[0], mask, init, client.data, cfg, r1);
        RowMatrix all = client.data.rows();
        Real before = attack::trigger_loss_and_grad(res.first, arch[0], all, init).value;
        Real after = attack::trigger_loss_and_grad(res.first, arch[0], all, res.trigger).value;
        improved += after >= before;
        EXPECT_GE(res.trigger.pattern.data().minCoeff(), 0.0);
        EXPECT_LE(res.trigger.pattern.data().maxCoeff(), 1.0);
    }
    EXPECT_GE(improved, 18);
}

TEST(TriggerOpt, NonFiniteGradientNamesIteration) {
    Rng rng(11);
    auto arch = small_conv_arch();
    auto m = random_model(arch, rng);
    m.layers[0].weight[0] = std::numeric_limits<Real>::quiet_NaN();
    auto client = attacker_data(11);
    auto init = data::Trigger::corner_square({1, 5, 5}, 2, 0, 1.0);
    Tensor mask = Tensor::filled(arch[0].weight_shape(), 0.0);
    AttackConfig cfg;
    Rng r1(1);
    try {
        attack::optimize_trigger(m.layers[0], arch[0], mask, init, client.data, cfg, r1);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos);
    }
}

TEST(F3ba, AttackOffEqualsBenignTrainingBitwise) {
    auto arch = small_conv_arch();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        auto global = random_model(arch, rng), previous = random_model(arch, rng);
        auto client = attacker_data(seed);
        auto rc = round_cfg(seed);
        auto trig = data::Trigger::corner_square({1, 5, 5}, 2, 0);
        auto atk = attack::f3ba_update(global, &previous, client, arch, rc, attack_off(), trig, 3);
        auto benign = fl::local_train_benign(global, arch, client, rc, 3);
        EXPECT_EQ(atk.update.submission.proposed, benign.submission.proposed);
        EXPECT_EQ(atk.update.submission.num_samples, benign.submission.num_samples);
    }
}

TEST(F3ba, MinimalFlipTouchesOneWeightPerLayer) {
    auto arch = small_conv_arch();
    Rng rng(12);
    auto global = random_model(arch, rng), previous = random_model(arch, rng);
    auto cfg = attack_off();
    cfg.enable_flip = true;
    cfg.s_conv = cfg.s_dense = 1e-9;
    auto r = attack::f3ba_update(global, &previous, attacker_data(12), arch, round_cfg(12), cfg,
                                 data::Trigger::corner_square({1, 5, 5}, 2, 0), 1);
    for (std::size_t j = 0; j < arch.size(); ++j) {
        EXPECT_EQ(masked_indices(r.masks[j]).size(), 1u);
        Index changed = (r.flipped.layers[j].weight.data().array() != global.layers[j].weight.data().array()).count();
        EXPECT_LE(changed, 1);
        EXPECT_EQ(r.flipped.layers[j].bias, global.layers[j].bias);
    }
}

TEST(F3ba, DeterministicAcrossAttackerInstances) {
    auto arch = small_conv_arch();
    Rng rng(13);
    auto global = random_model(arch, rng);
    auto client = attacker_data(13);
    auto trig = data::Trigger::corner_square({1, 5, 5}, 2, 0);
    attack::FocusedFlipAttacker a(AttackConfig{}, trig), b(AttackConfig{}, trig);
    auto ua = a.propose(2, global, client, arch, round_cfg(13));
    auto ub = b.propose(2, global, client, arch, round_cfg(13));
    EXPECT_EQ(ua.submission.proposed, ub.submission.proposed);
    EXPECT_TRUE(ua.is_malicious);
    EXPECT_EQ(a.trigger_log().size(), 1u);
    EXPECT_EQ(a.trigger_log()[0].trigger.pattern, b.trigger_log()[0].trigger.pattern);
}

TEST(F3ba, AttackerRemembersItsLastGlobal) {
    auto arch = small_conv_arch();
    Rng rng(14);
    auto g1 = random_model(arch, rng), g2 = random_model(arch, rng);
    auto client = attacker_data(14);
    auto trig = data::Trigger::corner_square({1, 5, 5}, 2, 0);
    AttackConfig cfg;
    cfg.enable_trigger_opt = false;
    attack::FocusedFlipAttacker adv(cfg, trig);
    adv.propose(0, g1, client, arch, round_cfg(14));
    auto second = adv.propose(5, g2, client, arch, round_cfg(14));
    auto direct = attack::f3ba_update(g2, &g1, client, arch, round_cfg(14), cfg, trig, 5);
    EXPECT_EQ(second.submission.proposed, direct.update.submission.proposed);
}

TEST(F3ba, DeskPipelineRaisesTargetLogit) {
    exp::ExperimentConfig cfg;
    auto fed = exp::build_federation(cfg);
    Rng rng = make_stream(cfg.seed, StreamPurpose::model_init);
    auto global = nn::init_model(fed.arch, rng);
    // A few benign FedAvg rounds so the attack starts from a trained model.
    fl::GlobalState s;
    s.current = s.previous = global;
    fl::FedAvgAggregator agg;
    for (int r = 0; r < 5; ++r) s = fl::run_round(s, fed, nullptr, agg);

    auto trig = exp::build_trigger(cfg);
    AttackConfig acfg;
    auto res = attack::f3ba_update(s.current, &s.previous, fed.clients[0], fed.arch, fed.round, acfg, trig, 5);
    RowMatrix xt = data::triggered_copy(fed.test_set.rows(), res.trigger);
    Real before = nn::forward(s.current, fed.arch, xt).col(trig.target_label).mean();
    Real after = nn::forward(res.update.submission.proposed, fed.arch, xt).col(trig.target_label).mean();
    EXPECT_GT(after, before);
}

TEST(Baseline, RescaleScalesUpdateExactly) {
    auto arch = small_conv_arch();
    Rng rng(15);
    auto global = random_model(arch, rng);
    auto client = attacker_data(15);
    auto trig = data::Trigger::corner_square({1, 5, 5}, 2, 0);
    AttackConfig cfg;
    cfg.enable_flip = cfg.enable_trigger_opt = false;
    auto one = attack::baseline_rescale_update(global, client, arch, round_cfg(15), cfg, trig, 1);
    cfg.gamma = 10.0;
    auto ten = attack::baseline_rescale_update(global, client, arch, round_cfg(15), cfg, trig, 1);
    Vector u1 = nn::flatten(one.submission.proposed) - nn::flatten(global);
    Vector u10 = nn::flatten(ten.submission.proposed) - nn::flatten(global);
    EXPECT_NEAR(u10.norm() / u1.norm(), 10.0, 1e-9);
    EXPECT_LE((u10 - 10.0 * u1).cwiseAbs().maxCoeff(), 1e-12);

    // gamma = 1 is plain composite training: same as the attack path with flips off.
    cfg.gamma = 1.0;
    auto plain = attack::f3ba_update(global, nullptr, client, arch, round_cfg(15), cfg, trig, 1);
    EXPECT_EQ(plain.update.submission.proposed, one.submission.proposed);
    cfg.gamma = 0.5;
    EXPECT_THROW(attack::baseline_rescale_update(global, client, arch, round_cfg(15), cfg, trig, 1), ConfigError);
}
