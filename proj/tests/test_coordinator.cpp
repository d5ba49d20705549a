#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <sstream>

#include "bvip/coordinator.hpp"
#include "bvip/decoder.hpp"
#include "bvip/pca.hpp"

using namespace bvip;

namespace {

// ---------------------------------------------------------------------------
// Straightforward reference decoder: per-pixel loops, no fused steps.

using Maps = std::vector<std::vector<std::vector<std::vector<double>>>>;  // n, c, y, x

Maps to_maps(const FeatureMaps& f) {
    Maps m(f.batch, std::vector<std::vector<std::vector<double>>>(
                        f.channels, std::vector<std::vector<double>>(f.height, std::vector<double>(f.width))));
    for (std::size_t n = 0; n < f.batch; ++n)
        for (std::size_t c = 0; c < f.channels; ++c)
            for (std::size_t y = 0; y < f.height; ++y)
                for (std::size_t x = 0; x < f.width; ++x) m[n][c][y][x] = f.channel(n, c)[y * f.width + x];
    return m;
}

double ref_gelu(double x) { return x * 0.5 * std::erfc(-x / std::sqrt(2.0)); }

void ref_norm(Maps& m, DecoderBlock& blk, NormMode mode, double momentum, double eps) {
    const std::size_t N = m.size(), C = m[0].size(), H = m[0][0].size(), W = m[0][0][0].size();
    for (std::size_t c = 0; c < C; ++c) {
        double mean = blk.running_mean[c], var = blk.running_var[c];
        if (mode == NormMode::Train) {
            double s = 0.0;
            for (auto& img : m)
                for (auto& row : img[c])
                    for (double v : row) s += v;
            const double cnt = double(N * H * W);
            mean = s / cnt;
            double ss = 0.0;
            for (auto& img : m)
                for (auto& row : img[c])
                    for (double v : row) ss += (v - mean) * (v - mean);
            var = ss / cnt;
            blk.running_mean[c] = (1 - momentum) * blk.running_mean[c] + momentum * mean;
            blk.running_var[c] = (1 - momentum) * blk.running_var[c] + momentum * ss / (cnt - 1);
        }
        for (auto& img : m)
            for (auto& row : img[c])
                for (double& v : row) v = ref_gelu(blk.norm_scale[c] * (v - mean) / std::sqrt(var + eps) + blk.norm_shift[c]);
    }
}

double at_padded(const std::vector<std::vector<double>>& p, long y, long x) {
    if (y < 0 || x < 0 || y >= long(p.size()) || x >= long(p[0].size())) return 0.0;
    return p[std::size_t(y)][std::size_t(x)];
}

std::vector<std::vector<double>> ref_conv(const std::vector<std::vector<double>>& p, const double* k) {
    auto out = p;
    for (long y = 0; y < long(p.size()); ++y)
        for (long x = 0; x < long(p[0].size()); ++x) {
            double s = 0.0;
            for (long dy = -1; dy <= 1; ++dy)
                for (long dx = -1; dx <= 1; ++dx) s += k[(dy + 1) * 3 + (dx + 1)] * at_padded(p, y + dy, x + dx);
            out[std::size_t(y)][std::size_t(x)] = s;
        }
    return out;
}

Maps ref_forward(const FeatureMaps& input, DecoderParams& params, NormMode mode) {
    const auto& cfg = params.config;
    Maps m = to_maps(input);
    for (std::size_t b = 0; b < kDecoderBlocks; ++b) {
        auto& blk = params.blocks[b];
        ref_norm(m, blk, mode, cfg.norm_momentum, cfg.norm_eps);
        const std::size_t in = cfg.in_channels(b), out = cfg.widths[b];
        Maps next(m.size());
        for (std::size_t n = 0; n < m.size(); ++n) {
            std::vector<std::vector<std::vector<double>>> planes;
            for (std::size_t c = 0; c < in; ++c) {
                auto p = m[n][c];
                if (b + 1 < kDecoderBlocks) {
                    std::vector<std::vector<double>> up(2 * p.size(), std::vector<double>(2 * p[0].size()));
                    for (std::size_t y = 0; y < up.size(); ++y)
                        for (std::size_t x = 0; x < up[0].size(); ++x) up[y][x] = p[y / 2][x / 2];
                    planes.push_back(ref_conv(up, &blk.depthwise[c * 9]));
                } else {
                    planes.push_back(p);
                }
            }
            const std::size_t H = planes[0].size(), W = planes[0][0].size();
            for (std::size_t o = 0; o < out; ++o) {
                std::vector<std::vector<double>> acc(H, std::vector<double>(W, blk.bias[o]));
                for (std::size_t c = 0; c < in; ++c) {
                    const auto term = b + 1 < kDecoderBlocks ? planes[c] : ref_conv(planes[c], &blk.pointwise[(o * in + c) * 9]);
                    const double w = b + 1 < kDecoderBlocks ? blk.pointwise[o * in + c] : 1.0;
                    for (std::size_t y = 0; y < H; ++y)
                        for (std::size_t x = 0; x < W; ++x) acc[y][x] += w * term[y][x];
                }
                next[n].push_back(acc);
            }
        }
        m = std::move(next);
    }
    Maps resized(m.size());
    for (std::size_t n = 0; n < m.size(); ++n)
        for (auto& p : m[n]) {
            std::vector<std::vector<double>> r(cfg.out_height, std::vector<double>(cfg.out_width));
            for (std::size_t y = 0; y < cfg.out_height; ++y)
                for (std::size_t x = 0; x < cfg.out_width; ++x)
                    r[y][x] = p[y * p.size() / cfg.out_height][x * p[0].size() / cfg.out_width];
            resized[n].push_back(r);
        }
    return resized;
}

FeatureMaps random_latent(const LatentShape& ls, std::size_t n, std::uint64_t seed) {
    FeatureMaps f(n, ls.channels, ls.height, ls.width);
    Rng rng(seed);
    for (auto& v : f.data) v = rng.normal();
    return f;
}

DecoderParams randomized_params(const DecoderConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    DecoderParams p = DecoderParams::initialize(cfg, rng);
    for (auto& b : p.blocks) {
        for (auto& v : b.norm_scale) v = rng.uniform(0.5, 1.5);
        for (auto& v : b.norm_shift) v = rng.uniform(-0.5, 0.5);
        for (auto& v : b.bias) v = rng.uniform(-0.2, 0.2);
    }
    return p;
}

std::size_t hand_count(std::size_t latent_c, const std::array<std::size_t, 5>& w) {
    std::size_t n = 0, in = latent_c;
    for (std::size_t b = 0; b < 5; ++b) {
        const std::size_t out = w[b];
        n += 2 * in;                                          // norm scale and shift
        n += b < 4 ? 9 * in + in * out + out : 9 * in * out + out;  // kernels and bias
        in = out;
    }
    return n;
}

}  // namespace

TEST(Decoder, LearnableCountMatchesHandArithmetic) {
    DecoderConfig c = se_decoder_defaults(56, 56);
    // 34 + 3·64 + 119
    EXPECT_EQ(decoder_learnable_count(c), 345u);
    EXPECT_EQ(DecoderParams::zeros(c).learnable_count(), 345u);
    for (const auto& w : {std::array<std::size_t, 5>{8, 8, 8, 8, 3}, std::array<std::size_t, 5>{5, 7, 2, 9, 3}}) {
        c.widths = w;
        c.latent = {3, 2, 2};
        EXPECT_EQ(decoder_learnable_count(c), hand_count(3, w));
        EXPECT_EQ(DecoderParams::zeros(c).learnable_count(), hand_count(3, w));
    }
}

TEST(Decoder, MatchesReferenceImplementation) {
    DecoderConfig cfg;
    cfg.latent = {2, 3, 3};
    cfg.widths = {3, 4, 2, 3, 3};
    cfg.out_height = 50;
    cfg.out_width = 37;
    for (const NormMode mode : {NormMode::Train, NormMode::Inference}) {
        DecoderParams a = randomized_params(cfg, 5), b = randomized_params(cfg, 5);
        const FeatureMaps x = random_latent(cfg.latent, 3, 6);
        const FeatureMaps y = decoder_forward(x, a, mode);
        const Maps ref = ref_forward(x, b, mode);
        ASSERT_EQ(y.height, 50u);
        ASSERT_EQ(y.width, 37u);
        ASSERT_EQ(y.channels, 3u);
        double worst = 0.0;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t i = 0; i < 50; ++i)
                    for (std::size_t j = 0; j < 37; ++j)
                        worst = std::max(worst, std::abs(y.channel(n, c)[i * 37 + j] - ref[n][c][i][j]));
        EXPECT_LT(worst, 1e-12);
        for (std::size_t k = 0; k < kDecoderBlocks; ++k)
            for (std::size_t c = 0; c < a.blocks[k].running_var.size(); ++c) {
                EXPECT_NEAR(a.blocks[k].running_mean[c], b.blocks[k].running_mean[c], 1e-12);
                EXPECT_NEAR(a.blocks[k].running_var[c], b.blocks[k].running_var[c], 1e-12);
            }
    }
}

TEST(Decoder, InferenceLeavesRunningStatsAlone) {
    const DecoderConfig cfg = se_decoder_defaults(12, 12);
    DecoderParams p = randomized_params(cfg, 1);
    const DecoderParams before = p;
    decoder_forward(random_latent(cfg.latent, 2, 2), p, NormMode::Inference);
    for (std::size_t b = 0; b < kDecoderBlocks; ++b) {
        EXPECT_EQ(p.blocks[b].running_mean, before.blocks[b].running_mean);
        EXPECT_EQ(p.blocks[b].running_var, before.blocks[b].running_var);
    }
    decoder_forward(random_latent(cfg.latent, 2, 2), p, NormMode::Train);
    EXPECT_NE(p.blocks[0].running_mean, before.blocks[0].running_mean);
}

TEST(Decoder, ZeroParametersGiveZeroPrompt) {
    const DecoderConfig cfg = se_decoder_defaults(20, 20);
    DecoderParams p = DecoderParams::zeros(cfg);
    const FeatureMaps y = decoder_forward(random_latent(cfg.latent, 2, 3), p, NormMode::Train);
    for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(Decoder, RejectsWrongLatent) {
    const DecoderConfig cfg = se_decoder_defaults(8, 8);
    DecoderParams p = DecoderParams::zeros(cfg);
    EXPECT_THROW(decoder_forward(FeatureMaps(1, 2, 4, 4), p, NormMode::Train), ShapeError);
    DecoderConfig bad = cfg;
    bad.widths[4] = 2;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Decoder, GeluKnownValues) {
    EXPECT_EQ(gelu(0.0), 0.0);
    EXPECT_NEAR(gelu(1.0), 0.8413447460685429, 1e-15);
    EXPECT_NEAR(gelu(-1.0), -0.15865525393145707, 1e-15);
}

// Fixed-seed decoder output, recorded once and compared on every build.
TEST(Decoder, GoldenOutput) {
    std::ifstream in(std::string(BVIP_TEST_DATA_DIR) + "/decoder_golden.txt");
    ASSERT_TRUE(in) << "missing golden file";
    DecoderConfig cfg = se_decoder_defaults(56, 56);
    Rng rng(2024);
    DecoderParams p = DecoderParams::initialize(cfg, rng);
    const FeatureMaps x = random_latent(cfg.latent, 2, 7);
    const FeatureMaps train = decoder_forward(x, p, NormMode::Train);
    const FeatureMaps infer = decoder_forward(x, p, NormMode::Inference);

    std::string line;
    std::size_t checked = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string which;
        std::size_t idx;
        double v;
        ss >> which >> idx >> v;
        const FeatureMaps& src = which == "train" ? train : infer;
        ASSERT_LT(idx, src.data.size());
        EXPECT_NEAR(src.data[idx], v, 1e-12 * std::max(1.0, std::abs(v))) << which << " " << idx;
        ++checked;
    }
    EXPECT_GT(checked, 1000u);
}

// ---------------------------------------------------------------------------
// Coordinator

TEST(Coordinator, FlattenUnflattenIsBijective) {
    const DecoderConfig cfg = se_decoder_defaults(16, 16);
    Rng rng(3);
    auto enc = std::make_shared<FrozenRandomEncoder>(3 * 16 * 16, 10, 1);
    Coordinator c(enc, Composition::Concat, DecoderParams::initialize(cfg, rng));
    EXPECT_EQ(c.learnable_count(), decoder_learnable_count(cfg) + 8);
    Vec phi(c.learnable_count());
    for (auto& v : phi) v = rng.normal();
    c.unflatten(phi);
    EXPECT_EQ(c.flatten(), phi);
    Coordinator d = c;
    d.unflatten(c.flatten());
    EXPECT_EQ(d.flatten(), c.flatten());
    EXPECT_THROW(c.unflatten(Vec(3)), ShapeError);
}

TEST(Coordinator, CompositionRules) {
    const DecoderConfig cfg = se_decoder_defaults(8, 8);
    Rng rng(0);
    const std::size_t d = 3 * 8 * 8;
    EXPECT_THROW(Coordinator(std::make_shared<FrozenRandomEncoder>(d, 17, 0), Composition::Sum,
                             DecoderParams::zeros(cfg)),
                 ShapeError);
    EXPECT_THROW(Coordinator(std::make_shared<FrozenRandomEncoder>(d, 18, 0), Composition::Concat,
                             DecoderParams::zeros(cfg)),
                 ShapeError);

    ImageBatch imgs(ImageShape{3, 8, 8}, 2);
    for (auto& v : imgs.data) v = rng.uniform();

    Coordinator sum(std::make_shared<FrozenRandomEncoder>(d, 18, 4), Composition::Sum, DecoderParams::zeros(cfg));
    Vec phi = sum.flatten();
    for (std::size_t j = 0; j < 18; ++j) phi[phi.size() - 18 + j] = 0.1 * double(j);
    sum.unflatten(phi);
    const Matrix f = sum.encode_all(imgs);
    const std::vector<std::size_t> rows{1, 0};
    const FeatureMaps lat = sum.latent(f, rows);
    for (std::size_t j = 0; j < 18; ++j) {
        EXPECT_EQ(lat.item(0)[j], f(1, j) + 0.1 * double(j));
        EXPECT_EQ(lat.item(1)[j], f(0, j) + 0.1 * double(j));
    }

    Coordinator cat(std::make_shared<FrozenRandomEncoder>(d, 5, 4), Composition::Concat, DecoderParams::zeros(cfg));
    Vec psi = cat.flatten();
    psi.back() = 7.0;
    cat.unflatten(psi);
    const Matrix g = cat.encode_all(imgs);
    const FeatureMaps lat2 = cat.latent(g, rows);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(lat2.item(0)[j], g(1, j));
    EXPECT_EQ(lat2.item(0)[17], 7.0);
    EXPECT_EQ(lat2.item(0)[5], 0.0);
}

TEST(Coordinator, FrozenEncoderIsFixedAndBounded) {
    FrozenRandomEncoder a(50, 8, 3), b(50, 8, 3), c(50, 8, 4);
    Vec x(50, 0.3);
    EXPECT_EQ(a.encode(x), b.encode(x));
    EXPECT_NE(a.encode(x), c.encode(x));
    for (double v : a.encode(x)) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Coordinator, ParameterCountOrdering) {
    const DecoderConfig se = se_decoder_defaults(224, 224);
    const DecoderConfig bv = blackvip_decoder_defaults(224, 224);
    EXPECT_EQ(bv.latent.size(), kBlackVipFeatureDim + kBlackVipTriggerDim);
    const std::size_t se_count = decoder_learnable_count(se) + se.latent.size();
    const std::size_t bv_count = decoder_learnable_count(bv) + kBlackVipTriggerDim;
    const std::size_t frame_count = FramePrompt::parameter_count(ImageShape{3, 224, 224}, 30);
    EXPECT_LT(se_count, bv_count);
    EXPECT_LT(bv_count, frame_count);
    EXPECT_GT(bv_count, 8000u);
    EXPECT_LT(bv_count, 10000u);
    EXPECT_LT(se_count, 1000u);
}

TEST(PromptImage, ClipsToRange) {
    PromptConfig pc;
    pc.epsilon = 0.5;
    const Vec out = prompt_image(Vec{0.2, 0.9, 0.1}, Vec{0.4, 1.0, -1.0}, pc);
    EXPECT_DOUBLE_EQ(out[0], 0.4);
    EXPECT_EQ(out[1], 1.0);
    EXPECT_EQ(out[2], 0.0);
}

// ---------------------------------------------------------------------------
// Frame prompt

TEST(Frame, ParameterCount) {
    EXPECT_EQ(FramePrompt::parameter_count(ImageShape{3, 224, 224}, 30), 69840u);
    EXPECT_EQ(FramePrompt(ImageShape{3, 224, 224}, 30).learnable_count(), 69840u);
    EXPECT_EQ(FramePrompt(ImageShape{3, 56, 56}, 7).learnable_count(), 3u * (56 * 56 - 42 * 42));
    EXPECT_THROW(FramePrompt(ImageShape{3, 10, 10}, 5), ConfigError);
    EXPECT_THROW(FramePrompt(ImageShape{3, 10, 10}, 0), ConfigError);
}

TEST(Frame, InteriorUntouched) {
    const ImageShape s{3, 12, 12};
    FramePrompt f(s, 2);
    Vec phi(f.learnable_count());
    Rng rng(1);
    for (auto& v : phi) v = rng.uniform(-0.3, 0.3);
    f.unflatten(phi);
    EXPECT_EQ(f.flatten(), phi);
    Vec x(s.size());
    for (auto& v : x) v = rng.uniform(0.3, 0.7);
    PromptConfig pc;
    const Vec y = f.apply(x, pc);
    const Vec p = f.prompt();
    std::size_t band = 0;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 12; ++i)
            for (std::size_t j = 0; j < 12; ++j) {
                const std::size_t k = (c * 12 + i) * 12 + j;
                if (f.in_band(i, j)) {
                    ++band;
                    EXPECT_DOUBLE_EQ(y[k], x[k] + p[k]);
                } else {
                    EXPECT_EQ(p[k], 0.0);
                    EXPECT_EQ(y[k], x[k]);
                }
            }
    EXPECT_EQ(band, f.learnable_count());
}

// ---------------------------------------------------------------------------
// PCA against a dense SVD of the centered data

namespace {

void check_pca_against_svd(const Matrix& x, std::size_t k) {
    const PcaProjection p = pca_fit(x, k);
    Eigen::MatrixXd e(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) e(Eigen::Index(i), Eigen::Index(j)) = x(i, j);
    const Eigen::RowVectorXd mean = e.colwise().mean();
    e.rowwise() -= mean;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(e, Eigen::ComputeThinV);
    const Eigen::VectorXd sv = svd.singularValues();
    const double denom = double(x.rows - 1);

    for (std::size_t j = 0; j < x.cols; ++j) EXPECT_NEAR(p.mean[j], mean(Eigen::Index(j)), 1e-12);
    for (std::size_t r = 0; r < k; ++r) {
        const double ev = sv(Eigen::Index(r)) * sv(Eigen::Index(r)) / denom;
        EXPECT_NEAR(p.explained_variance[r], ev, 1e-6 * ev) << "component " << r;
        Eigen::VectorXd v = svd.matrixV().col(Eigen::Index(r));
        Eigen::Index arg;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        for (std::size_t j = 0; j < x.cols; ++j) EXPECT_NEAR(p.components(r, j), v(Eigen::Index(j)), 1e-7);
        for (std::size_t q = 0; q < k; ++q)
            EXPECT_NEAR(dot(p.components.row(r), p.components.row(q)), r == q ? 1.0 : 0.0, 1e-8);
    }
}

}  // namespace

TEST(Pca, MatchesSvdWhenWide) {
    // n < d: the Gram path
    Rng rng(8);
    Matrix x(40, 300);
    Vec scales(300);
    for (std::size_t j = 0; j < 300; ++j) scales[j] = 1.0 + 3.0 * std::exp(-double(j) / 20.0);
    for (std::size_t i = 0; i < 40; ++i)
        for (std::size_t j = 0; j < 300; ++j) x(i, j) = scales[j] * rng.normal() + 0.1 * double(j % 7);
    check_pca_against_svd(x, 12);
}

TEST(Pca, MatchesSvdWhenTall) {
    Rng rng(9);
    Matrix x(200, 15);
    for (std::size_t i = 0; i < 200; ++i)
        for (std::size_t j = 0; j < 15; ++j) x(i, j) = (1.0 + double(j)) * rng.normal();
    check_pca_against_svd(x, 6);
}

TEST(Pca, ProjectReconstructAndRankCompletion) {
    Rng rng(10);
    Matrix x(30, 20);
    // rank-2 data
    for (std::size_t i = 0; i < 30; ++i) {
        const double a = rng.normal(), b = rng.normal();
        for (std::size_t j = 0; j < 20; ++j) x(i, j) = a * std::sin(double(j)) + b * std::cos(0.3 * double(j)) + 0.5;
    }
    const PcaProjection p = pca_fit(x, 5);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t q = 0; q < 5; ++q)
            EXPECT_NEAR(dot(p.components.row(r), p.components.row(q)), r == q ? 1.0 : 0.0, 1e-8);
    const Vec back = pca_reconstruct(p, pca_project(p, x.row(3)));
    for (std::size_t j = 0; j < 20; ++j) EXPECT_NEAR(back[j], x(3, j), 1e-9);
    EXPECT_THROW(pca_fit(x, 30), ShapeError);
    EXPECT_THROW(pca_fit(Matrix(5, 4, 1.0), 2), Error);
}

TEST(Pca, EncoderOutputsProjection) {
    Rng rng(11);
    Matrix x(20, 12);
    for (auto& v : x.data) v = rng.normal();
    PcaEncoder enc(pca_fit(x, 4));
    EXPECT_EQ(enc.output_dim(), 4u);
    EXPECT_EQ(enc.encode(x.row(0)), pca_project(enc.projection(), x.row(0)));
}
