#include "flipfl/attack.hpp"
#include "flipfl/errors.hpp"
#include "flipfl/federation.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

using namespace flipfl;
using namespace flipfl::testing;

namespace {

fl::Federation small_federation(int num_clients, int num_malicious, std::uint64_t seed) {
    auto pool = tiny_blobs(40, seed);
    std::vector<Index> test_idx, train_idx;
    for (Index i = 0; i < pool.size(); ++i) (i < 30 ? test_idx : train_idx).push_back(i);
    auto train = data::subset(pool, train_idx);
    fl::Federation fed;
    fed.arch = small_conv_arch();
    fed.test_set = data::subset(pool, test_idx);
    fed.server_data = fed.test_set;
    fed.default_trigger = data::Trigger::corner_square(pool.dims, 2, 0);
    auto part = data::dirichlet_partition(train, num_clients, 1.0, seed);
    for (int c = 0; c < num_clients; ++c)
        fed.clients.push_back({c, data::subset(train, part.assignments[static_cast<std::size_t>(c)]), c < num_malicious});
    fed.round.clients_per_round = 3;
    fed.round.local_steps = 3;
    fed.round.batch_size = 4;
    fed.round.seed = seed;
    return fed;
}

fl::GlobalState initial_state(const fl::Federation& fed, std::uint64_t seed) {
    Rng rng = make_stream(seed, StreamPurpose::model_init);
    fl::GlobalState s;
    s.current = nn::init_model(fed.arch, rng);
    s.previous = s.current;
    return s;
}

/// Records what the server sees and returns plain FedAvg.
class SpyAggregator : public fl::FedAvgAggregator {
public:
    std::vector<std::vector<int>> seen_ids;
    fl::AggregationResult aggregate(fl::AggregationContext& ctx, std::span<const fl::SubmittedUpdate> updates) override {
        std::vector<int> ids;
        for (const auto& u : updates) ids.push_back(u.client_id);
        seen_ids.push_back(ids);
        return fl::FedAvgAggregator::aggregate(ctx, updates);
    }
};

class ThrowingAggregator : public fl::FedAvgAggregator {
public:
    std::string name() const override { return "broken"; }
    fl::AggregationResult aggregate(fl::AggregationContext&, std::span<const fl::SubmittedUpdate>) override {
        throw PreconditionError("not enough updates");
    }
};

class ConstantPredictor : public fl::FedAvgAggregator {
public:
    explicit ConstantPredictor(int label) : label_(label) {}
    std::vector<int> predict(const nn::ModelParams&, const nn::Architecture&, const RowMatrix& x,
                             Rng&) const override {
        return std::vector<int>(static_cast<std::size_t>(x.rows()), label_);
    }

private:
    int label_;
};

}  // namespace

TEST(LocalTraining, ZeroLearningRateKeepsModel) {
    auto fed = small_federation(4, 0, 1);
    auto s = initial_state(fed, 1);
    fed.round.local_lr = 0.0;
    auto u = fl::local_train_benign(s.current, fed.arch, fed.clients[0], fed.round, 0);
    EXPECT_EQ(u.submission.proposed, s.current);
    EXPECT_EQ(u.submission.client_id, 0);
    EXPECT_EQ(u.submission.num_samples, fed.clients[0].data.size());
}

TEST(LocalTraining, SingleStepSingleSampleClosedForm) {
    auto fed = small_federation(4, 0, 2);
    auto s = initial_state(fed, 2);
    fl::ClientData one{9, data::subset(fed.clients[1].data, std::vector<Index>{0}), false};
    fed.round.local_steps = 1;
    fed.round.local_lr = 0.1;
    auto u = fl::local_train_benign(s.current, fed.arch, one, fed.round, 3);
    RowMatrix x = one.data.rows();
    auto g = nn::loss_and_grad(s.current, fed.arch, x, one.data.ys, nn::LossSpec::cross_entropy());
    EXPECT_EQ(u.submission.proposed, nn::sgd_step(s.current, g.grads, 0.1));
}

TEST(LocalTraining, DeterministicAndDescending) {
    auto fed = small_federation(4, 0, 3);
    auto s = initial_state(fed, 3);
    fed.round.local_lr = 0.01;
    fed.round.local_steps = 5;
    const auto& client = fed.clients[2];
    auto a = fl::local_train_benign(s.current, fed.arch, client, fed.round, 4);
    auto b = fl::local_train_benign(s.current, fed.arch, client, fed.round, 4);
    EXPECT_EQ(a.submission.proposed, b.submission.proposed);
    auto c = fl::local_train_benign(s.current, fed.arch, client, fed.round, 5);
    EXPECT_NE(a.submission.proposed, c.submission.proposed);

    // Replay the batch order and check the loss on the visited batches drops.
    Rng rng = fl::local_training_stream(fed.round.seed, 4, client.id);
    auto batches = fl::local_batches(client.data.size(), 5, fed.round.batch_size, rng);
    auto total_loss = [&](const nn::ModelParams& m) {
        Real sum = 0;
        for (const auto& b : batches)
            sum += nn::loss_value(m, fed.arch, data::gather_rows(client.data, b), data::gather_labels(client.data, b),
                                  nn::LossSpec::cross_entropy());
        return sum;
    };
    EXPECT_LE(total_loss(a.submission.proposed), total_loss(s.current));
}

TEST(LocalBatches, EpochCoverage) {
    Rng rng(5);
    auto batches = fl::local_batches(10, 6, 4, rng);
    ASSERT_EQ(batches.size(), 6u);
    std::vector<Index> first_epoch;
    for (const auto& b : batches) {
        EXPECT_EQ(b.size(), 4u);
        first_epoch.insert(first_epoch.end(), b.begin(), b.end());
    }
    std::set<Index> distinct(first_epoch.begin(), first_epoch.begin() + 10);
    EXPECT_EQ(distinct.size(), 10u);
    Rng small(6);
    for (const auto& b : fl::local_batches(3, 2, 16, small)) EXPECT_EQ(b.size(), 3u);
}

TEST(FedAvg, SingleClientAndCancellation) {
    Rng rng(7);
    auto arch = small_mlp_arch();
    auto g = random_model(arch, rng);
    auto p = random_model(arch, rng);
    std::vector<fl::SubmittedUpdate> one{submission(0, 5, p)};
    EXPECT_LE((nn::flatten(fl::fedavg_aggregate(g, one)) - nn::flatten(p)).cwiseAbs().maxCoeff(), 1e-15);

    auto u = random_model(arch, rng);
    std::vector<fl::SubmittedUpdate> pair{submission(0, 3, g + u), submission(1, 3, g - u)};
    EXPECT_LE((nn::flatten(fl::fedavg_aggregate(g, pair)) - nn::flatten(g)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(FedAvg, WeightedMeanOracle) {
    Rng rng(8);
    auto arch = small_mlp_arch();
    auto g = random_model(arch, rng);
    std::vector<nn::ModelParams> ps{random_model(arch, rng), random_model(arch, rng), random_model(arch, rng)};
    std::vector<fl::SubmittedUpdate> ups;
    for (int i = 0; i < 3; ++i) ups.push_back(submission(i, i + 1, ps[static_cast<std::size_t>(i)]));
    Vector want = nn::flatten(g);
    for (int i = 0; i < 3; ++i) want += (i + 1) * (nn::flatten(ps[static_cast<std::size_t>(i)]) - nn::flatten(g)) / 6.0;
    EXPECT_LE((nn::flatten(fl::fedavg_aggregate(g, ups)) - want).cwiseAbs().maxCoeff(), 1e-12);

    // Literal divisor over all clients damps the step by 6 / 60.
    Vector literal = nn::flatten(g) + (want - nn::flatten(g)) * (6.0 / 60.0);
    EXPECT_LE((nn::flatten(fl::fedavg_aggregate(g, ups, fl::FedAvgDivisor::total, 60)) - literal).cwiseAbs().maxCoeff(),
              1e-12);
}

TEST(FedAvg, ConvexityProperty) {
    Rng rng(9);
    auto arch = small_mlp_arch();
    for (int trial = 0; trial < 50; ++trial) {
        auto g = random_model(arch, rng);
        std::vector<fl::SubmittedUpdate> ups;
        std::uniform_int_distribution<int> n(1, 50);
        for (int i = 0; i < 5; ++i) ups.push_back(submission(i, n(rng), random_model(arch, rng)));
        Vector out = nn::flatten(fl::fedavg_aggregate(g, ups));
        Vector lo = nn::flatten(g), hi = lo;
        for (const auto& u : ups) {
            lo = lo.cwiseMin(nn::flatten(u.proposed));
            hi = hi.cwiseMax(nn::flatten(u.proposed));
        }
        EXPECT_TRUE(((out.array() >= lo.array() - 1e-12) && (out.array() <= hi.array() + 1e-12)).all());
    }
}

TEST(FedAvg, ZeroSamplesRejected) {
    Rng rng(10);
    auto arch = small_mlp_arch();
    auto g = random_model(arch, rng);
    std::vector<fl::SubmittedUpdate> ups{submission(0, 0, g)};
    EXPECT_THROW(fl::fedavg_aggregate(g, ups), ConfigError);
    EXPECT_THROW(fl::fedavg_aggregate(g, std::span<const fl::SubmittedUpdate>{}), ConfigError);
}

TEST(Sampling, DistinctAndGuaranteed) {
    std::vector<int> bad{0, 1, 2, 3};
    Rng rng(11);
    for (int t = 0; t < 100; ++t) {
        auto s = fl::sample_clients(20, 10, bad, true, rng);
        std::set<int> d(s.begin(), s.end());
        EXPECT_EQ(d.size(), 10u);
        EXPECT_TRUE(std::any_of(s.begin(), s.end(), [](int id) { return id < 4; }));
    }
    auto all = fl::sample_clients(20, 20, bad, false, rng);
    EXPECT_EQ(std::set<int>(all.begin(), all.end()).size(), 20u);
}

TEST(Sampling, MaliciousParticipationFraction) {
    std::vector<int> bad{0, 1, 2, 3};
    Index malicious = 0, total = 0;
    for (int round = 0; round < 200; ++round) {
        Rng rng = make_stream(1, StreamPurpose::client_sampling, {static_cast<std::uint64_t>(round)});
        for (int id : fl::sample_clients(20, 10, bad, false, rng)) {
            malicious += id < 4;
            ++total;
        }
    }
    EXPECT_NEAR(static_cast<Real>(malicious) / total, 0.2, 0.03);
}

TEST(Evaluation, ConstantTargetPredictorHasFullAsr) {
    auto fed = small_federation(4, 0, 12);
    auto s = initial_state(fed, 12);
    ConstantPredictor pred(0);
    Rng rng(1);
    EXPECT_EQ(fl::evaluate_asr(s.current, fed.arch, fed.test_set, fed.default_trigger, pred, rng), 1.0);
}

TEST(Evaluation, AsrUndefinedWithoutNonTargetSamples) {
    auto fed = small_federation(4, 0, 13);
    auto s = initial_state(fed, 13);
    std::vector<Index> zeros;
    for (Index i = 0; i < fed.test_set.size(); ++i)
        if (fed.test_set.ys[static_cast<std::size_t>(i)] == 0) zeros.push_back(i);
    auto only_target = data::subset(fed.test_set, zeros);
    fl::FedAvgAggregator agg;
    Rng rng(1);
    EXPECT_THROW(fl::evaluate_asr(s.current, fed.arch, only_target, fed.default_trigger, agg, rng), ConfigError);
}

TEST(Evaluation, UntrainedModelIsNearChance) {
    auto test = data::gen_blobs_dataset(4, 100, {1, 10, 10}, 0.5, 3);
    nn::Architecture arch{nn::LayerSpec::conv2d(1, 10, 10, 4, 3, 3), nn::LayerSpec::dense(256, 32),
                          nn::LayerSpec::dense(32, 4, nn::Activation::identity)};
    fl::FedAvgAggregator agg;
    Real sum = 0;
    const int seeds = 30;
    for (int seed = 0; seed < seeds; ++seed) {
        Rng rng = make_stream(static_cast<std::uint64_t>(seed), StreamPurpose::model_init);
        auto m = nn::init_model(arch, rng);
        sum += fl::evaluate_acc(m, arch, test, agg, rng);
    }
    EXPECT_NEAR(sum / seeds, 0.25, 0.05);
}

TEST(Round, NoAttackerSampledEqualsPlainRound) {
    auto fed = small_federation(6, 1, 14);
    fed.default_trigger = data::Trigger::corner_square(fed.test_set.dims, 2, 0);
    auto s0 = initial_state(fed, 14);
    // Find a round whose sample excludes the malicious client 0.
    int round = 0;
    for (;; ++round) {
        Rng r = make_stream(fed.round.seed, StreamPurpose::client_sampling, {static_cast<std::uint64_t>(round)});
        std::vector<int> bad{0};
        auto s = fl::sample_clients(6, 3, bad, false, r);
        if (std::find(s.begin(), s.end(), 0) == s.end()) break;
    }
    s0.round = round;
    attack::FocusedFlipAttacker adv(attack::AttackConfig{}, fed.default_trigger);
    fl::FedAvgAggregator a1, a2;
    auto with = fl::run_round(s0, fed, &adv, a1);
    auto without = fl::run_round(s0, fed, nullptr, a2);
    EXPECT_EQ(with.current, without.current);
    EXPECT_EQ(with.history.back().acc, without.history.back().acc);
    EXPECT_EQ(with.history.back().asr, without.history.back().asr);
    EXPECT_EQ(with.history.back().malicious_sampled, 0);
}

TEST(Round, FullParticipationAndStateUpdate) {
    auto fed = small_federation(5, 1, 15);
    fed.round.clients_per_round = 5;
    auto s0 = initial_state(fed, 15);
    SpyAggregator spy;
    auto s1 = fl::run_round(s0, fed, nullptr, spy);
    EXPECT_EQ(spy.seen_ids.at(0), (std::vector<int>{0, 1, 2, 3, 4}));
    EXPECT_EQ(s1.round, 1);
    EXPECT_EQ(s1.previous, s0.current);
    ASSERT_EQ(s1.history.size(), 1u);
    EXPECT_EQ(s1.history[0].round, 1);
    EXPECT_EQ(s1.history[0].malicious_sampled, 1);
    auto s2 = fl::run_round(s1, fed, nullptr, spy);
    EXPECT_EQ(s2.previous, s1.current);
    EXPECT_EQ(s2.history.size(), 2u);
}

TEST(Round, DeterministicHistory) {
    auto fed = small_federation(6, 2, 16);
    auto run = [&] {
        auto s = initial_state(fed, 16);
        attack::FocusedFlipAttacker adv(attack::AttackConfig{}, fed.default_trigger);
        fl::FedAvgAggregator agg;
        for (int r = 0; r < 4; ++r) s = fl::run_round(s, fed, &adv, agg);
        return s;
    };
    auto a = run(), b = run();
    EXPECT_EQ(a.current, b.current);
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        EXPECT_EQ(a.history[i].acc, b.history[i].acc);
        EXPECT_EQ(a.history[i].asr, b.history[i].asr);
        EXPECT_EQ(a.history[i].sampled, b.history[i].sampled);
    }
}

TEST(Round, AggregatorFailureCarriesRoundContext) {
    auto fed = small_federation(4, 0, 17);
    auto s0 = initial_state(fed, 17);
    s0.round = 6;
    ThrowingAggregator agg;
    try {
        fl::run_round(s0, fed, nullptr, agg);
        FAIL() << "expected an exception";
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("round 7"), std::string::npos) << msg;
        EXPECT_NE(msg.find("not enough updates"), std::string::npos) << msg;
    }
}

// Defenses receive SubmittedUpdate, which carries no ground-truth tag.
template <class T>
concept HasMaliciousTag = requires(T t) { t.is_malicious; };
static_assert(!HasMaliciousTag<fl::SubmittedUpdate>);
static_assert(HasMaliciousTag<fl::ClientUpdate>);

TEST(Blindness, DefenseSourcesNeverReadTheTag) {
    for (const char* file : {"robust.cpp", "refine.cpp"}) {
        std::ifstream in(std::string(FLIPFL_SOURCE_DIR) + "/src/" + file);
        ASSERT_TRUE(in) << file;
        std::stringstream ss;
        ss << in.rdbuf();
        EXPECT_EQ(ss.str().find("is_malicious"), std::string::npos) << file;
        EXPECT_EQ(ss.str().find(".malicious"), std::string::npos) << file;
    }
}
