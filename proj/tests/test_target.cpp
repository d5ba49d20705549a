#include <gtest/gtest.h>

#include <cmath>

#include "bvip/data.hpp"
#include "bvip/image.hpp"
#include "bvip/target.hpp"

using namespace bvip;

namespace {

const ImageShape kShape{1, 2, 2};

LinearSoftmaxModel trained_toy(std::uint64_t seed = 0) {
    // class = index of the brightest of four pixels
    Rng rng(seed);
    Matrix x(200, 4);
    std::vector<int> y(200);
    for (std::size_t n = 0; n < 200; ++n) {
        for (std::size_t j = 0; j < 4; ++j) x(n, j) = rng.uniform();
        y[n] = int(argmax(x.row(n)));
    }
    TargetTrainConfig tc;
    tc.epochs = 50;
    tc.seed = seed;
    return train_target(x, y, 4, tc);
}

ImageBatch random_batch(std::size_t n, Rng& rng) {
    ImageBatch b(kShape, n);
    for (auto& v : b.data) v = rng.uniform();
    return b;
}

}  // namespace

TEST(CeLoss, UniformLogitsGiveLogClasses) {
    Matrix z(3, 10);
    EXPECT_NEAR(ce_loss(z, std::vector<int>{0, 4, 9}), std::log(10.0), 1e-15);
}

TEST(CeLoss, TwoClassExample) {
    Matrix z(1, 2);
    z(0, 0) = 1.0;
    EXPECT_NEAR(ce_loss(z, std::vector<int>{0}), 0.313262, 1e-6);
    EXPECT_NEAR(ce_loss(z, std::vector<int>{0}), std::log1p(std::exp(-1.0)), 1e-15);
}

TEST(CeLoss, StableForLargeLogits) {
    Matrix z(1, 3);
    z(0, 0) = 1000.0;
    z(0, 1) = -1000.0;
    EXPECT_NEAR(ce_loss(z, std::vector<int>{0}), 0.0, 1e-12);
    EXPECT_NEAR(ce_loss(z, std::vector<int>{1}), 2000.0, 1e-9);
    EXPECT_THROW(ce_loss(z, std::vector<int>{3}), ConfigError);
}

TEST(LinearModel, LogitsMatchNaiveProduct) {
    const auto m = trained_toy();
    const auto snap = m.snapshot();
    Rng rng(1);
    const auto b = random_batch(5, rng);
    const Matrix z = m.logits(b);
    for (std::size_t n = 0; n < 5; ++n)
        for (std::size_t c = 0; c < 4; ++c) {
            double ref = snap.bias[c];
            for (std::size_t j = 0; j < 4; ++j) ref += snap.weights(c, j) * b.image(n)[j];
            EXPECT_NEAR(z(n, c), ref, 1e-12);
        }
}

TEST(LinearModel, TrainingLearnsToyTaskAndFreezes) {
    auto m = trained_toy();
    EXPECT_TRUE(m.frozen());
    const auto h = BlackBoxHandle::from_model(m, kShape);
    Rng rng(2);
    const auto b = random_batch(500, rng);
    std::vector<int> y;
    for (std::size_t n = 0; n < b.count; ++n) y.push_back(int(argmax(b.image(n))));
    EXPECT_GT(accuracy(h, b, y), 0.85);
    Matrix x(1, 4);
    EXPECT_THROW(train_target(m, x, std::vector<int>{0}, TargetTrainConfig{}), Error);
}

TEST(LinearModel, RestoreRoundTripKeepsChecksum) {
    const auto m = trained_toy(3);
    const auto r = LinearSoftmaxModel::restore(m.snapshot());
    EXPECT_EQ(r.checksum(), m.checksum());
    EXPECT_TRUE(r.frozen());
    EXPECT_NE(trained_toy(4).checksum(), m.checksum());
}

TEST(LinearModel, RejectsDegenerateShapes) {
    EXPECT_THROW(LinearSoftmaxModel(4, 1), ConfigError);
    EXPECT_THROW(LinearSoftmaxModel(0, 3), ConfigError);
}

TEST(Handle, RequiresFrozenModelAndMatchingShape) {
    LinearSoftmaxModel raw(4, 2);
    EXPECT_THROW(BlackBoxHandle::from_model(raw, kShape), Error);
    const auto m = trained_toy();
    EXPECT_THROW(BlackBoxHandle::from_model(m, ImageShape{1, 3, 3}), ShapeError);
    const auto h = BlackBoxHandle::from_model(m, kShape);
    EXPECT_THROW(h.query(ImageBatch(ImageShape{1, 4, 1}, 1)), ShapeError);
    EXPECT_THROW(h.query(ImageBatch(kShape, 0)), ShapeError);
}

TEST(Handle, LedgerCountsPerBatchAndPerImage) {
    const auto m = trained_toy();
    Rng rng(3);
    const auto b = random_batch(7, rng);
    const auto per_batch = BlackBoxHandle::from_model(m, kShape, QueryCounting::PerBatch, 0.5);
    per_batch.query(b);
    per_batch.query(b, QueryPhase::Evaluation);
    per_batch.query(b, QueryPhase::Evaluation);
    EXPECT_EQ(per_batch.ledger().estimation(), 1u);
    EXPECT_EQ(per_batch.ledger().evaluation(), 2u);
    EXPECT_DOUBLE_EQ(per_batch.ledger().cost(), 1.5);

    const auto per_image = BlackBoxHandle::from_model(m, kShape, QueryCounting::PerImage, 0.0);
    per_image.query(b);
    EXPECT_EQ(per_image.ledger().estimation(), 7u);
    EXPECT_EQ(per_image.ledger().total(), 7u);
}

TEST(Handle, QueriesNeverChangeTheModel) {
    const auto m = trained_toy();
    const auto before = m.checksum();
    const auto h = BlackBoxHandle::from_model(m, kShape);
    Rng rng(4);
    for (int t = 0; t < 20; ++t) h.query(random_batch(3, rng));
    EXPECT_EQ(m.checksum(), before);
}

TEST(Accuracy, BatchesAreEvaluationQueries) {
    const auto m = trained_toy();
    const auto h = BlackBoxHandle::from_model(m, kShape);
    Rng rng(5);
    const auto b = random_batch(10, rng);
    std::vector<int> y(10, 0);
    accuracy(h, b, y, nullptr, 4);
    EXPECT_EQ(h.ledger().evaluation(), 3u);
    EXPECT_EQ(h.ledger().estimation(), 0u);
}

TEST(Accuracy, CountCorrectUsesFirstMaximum) {
    Matrix z(2, 3);
    z(0, 1) = 1.0;
    z(1, 0) = 2.0;
    z(1, 2) = 2.0;
    EXPECT_EQ(count_correct(z, std::vector<int>{1, 0}), 2u);
}

TEST(QueryCounting, Parse) {
    EXPECT_EQ(parse_query_counting("per_image"), QueryCounting::PerImage);
    EXPECT_EQ(parse_query_counting(to_string(QueryCounting::PerBatch)), QueryCounting::PerBatch);
    EXPECT_THROW(parse_query_counting("both"), ConfigError);
}
