#include <catch_amalgamated.hpp>

#include "modalflow/losses.hpp"
#include "modalflow/transformer.hpp"

#include <filesystem>
#include <fstream>

using namespace modalflow;

namespace {

std::string tmp_dir() {
    std::filesystem::path p = MODALFLOW_TEST_TMP;
    p /= "losses";
    std::filesystem::create_directories(p);
    return p.string();
}

Mat random_mat(Rng& rng, int r, int c) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); i++) m.data()[i] = float(rng.normal());
    return m;
}

}  // namespace

TEST_CASE("drop mask keeps rgb always and droppables half the time", "[losses]") {
    auto reg = default_registry();
    Rng rng(77);
    int counts[4] = {0, 0, 0, 0};
    const int trials = 10000;
    for (int i = 0; i < trials; i++) {
        auto mask = sample_drop_mask(reg, rng);
        REQUIRE(mask.keep.size() == 4);
        for (int m = 0; m < 4; m++)
            if (mask.keep[size_t(m)]) counts[m]++;
    }
    CHECK(counts[0] == trials);  // rgb is not droppable
    for (int m = 1; m < 4; m++) {
        double freq = double(counts[m]) / trials;
        CHECK(freq == Catch::Approx(0.5).margin(0.02));
    }
}

TEST_CASE("drop mask draws are deterministic given the rng state", "[losses]") {
    auto reg = default_registry();
    Rng a(123), b(123);
    for (int i = 0; i < 50; i++) {
        auto ma = sample_drop_mask(reg, a);
        auto mb = sample_drop_mask(reg, b);
        REQUIRE(ma.keep == mb.keep);
    }
    auto full = all_keep_mask(reg);
    CHECK(full.all_kept());
}

TEST_CASE("velocity loss sums per-modality mean squared errors", "[losses]") {
    TapeF tape;
    // residual of 1 everywhere -> mse 1; residual of 2 -> mse 4
    auto p0 = tape.constant(Mat::Ones(3, 4));
    auto t0 = tape.constant(Mat::Zero(3, 4));
    auto p1 = tape.constant(Mat::Constant(3, 2, 2.f));
    auto t1 = tape.constant(Mat::Zero(3, 2));
    DropMask mask;
    mask.keep = {true, true};
    auto res = velocity_loss(tape, {p0, p1}, {t0, t1}, mask);
    CHECK(tape.val(res.total)(0, 0) == Catch::Approx(5.0).epsilon(1e-6));
    CHECK(res.per_modality[0] == Catch::Approx(1.0).epsilon(1e-6));
    CHECK(res.per_modality[1] == Catch::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("dropped modalities contribute nothing", "[losses]") {
    TapeF tape;
    auto p0 = tape.constant(Mat::Ones(2, 3));
    auto t0 = tape.constant(Mat::Zero(2, 3));
    auto p1 = tape.constant(Mat::Constant(2, 3, 100.f));  // huge error, masked out
    auto t1 = tape.constant(Mat::Zero(2, 3));
    DropMask mask;
    mask.keep = {true, false};
    auto res = velocity_loss(tape, {p0, p1}, {t0, t1}, mask);
    CHECK(tape.val(res.total)(0, 0) == Catch::Approx(1.0).epsilon(1e-6));
    CHECK(res.per_modality[1] == 0.f);

    DropMask none;
    none.keep = {false, false};
    auto empty = velocity_loss(tape, {p0, p1}, {t0, t1}, none);
    CHECK(tape.val(empty.total)(0, 0) == 0.f);
}

TEST_CASE("dropped modality heads receive exactly zero gradient", "[losses]") {
    TapeF tape;
    Rng rng(5);
    auto w0 = tape.param(random_mat(rng, 3, 3));
    auto w1 = tape.param(random_mat(rng, 3, 3));
    auto x = tape.constant(random_mat(rng, 4, 3));
    auto p0 = tape.matmul(x, w0);
    auto p1 = tape.matmul(x, w1);
    auto t0 = tape.constant(Mat::Zero(4, 3));
    auto t1 = tape.constant(Mat::Zero(4, 3));
    DropMask mask;
    mask.keep = {true, false};
    auto res = velocity_loss(tape, {p0, p1}, {t0, t1}, mask);
    tape.backward(res.total);
    CHECK(tape.grad_touched(w0));
    CHECK_FALSE(tape.grad_touched(w1));
}

TEST_CASE("velocity loss validates shapes", "[losses]") {
    TapeF tape;
    auto a = tape.constant(Mat::Ones(2, 2));
    DropMask mask;
    mask.keep = {true, true};
    CHECK_THROWS_AS(velocity_loss(tape, {a}, {a, a}, mask), ValidationError);
    DropMask empty;
    CHECK_THROWS_AS(velocity_loss(tape, {}, {}, empty), ValidationError);
}

TEST_CASE("alignment loss hits hand values", "[losses]") {
    TapeF tape;
    Mat f(2, 2);
    f << 1, 0, 0, 1;

    SECTION("identical directions give -1") {
        auto p = tape.constant(Mat(2.f * f));
        auto t = tape.constant(f);
        auto l = alignment_loss(tape, p, t);
        CHECK(tape.val(l)(0, 0) == Catch::Approx(-1.0).epsilon(1e-6));
    }
    SECTION("orthogonal directions give 0") {
        Mat g(2, 2);
        g << 0, 1, 1, 0;
        auto l = alignment_loss(tape, tape.constant(f), tape.constant(g));
        CHECK(tape.val(l)(0, 0) == Catch::Approx(0.0).margin(1e-6));
    }
    SECTION("half aligned half anti-aligned gives 0") {
        Mat g(2, 2);
        g << 1, 0, 0, -1;
        auto l = alignment_loss(tape, tape.constant(f), tape.constant(g));
        CHECK(tape.val(l)(0, 0) == Catch::Approx(0.0).margin(1e-6));
    }
}

TEST_CASE("alignment loss stays within [-1, 1]", "[losses]") {
    Rng rng(42);
    for (int trial = 0; trial < 20; trial++) {
        TapeF tape;
        auto p = tape.constant(random_mat(rng, 16, 8));
        auto t = tape.constant(random_mat(rng, 16, 8));
        float v = tape.val(alignment_loss(tape, p, t))(0, 0);
        CHECK(v >= -1.f - 1e-6f);
        CHECK(v <= 1.f + 1e-6f);
    }
}

TEST_CASE("total loss combines terms with lambda", "[losses]") {
    TapeF tape;
    auto lv = tape.constant(Mat::Constant(1, 1, 2.0f));
    auto lr = tape.constant(Mat::Constant(1, 1, -0.8f));
    auto total = total_loss(tape, lv, lr, 0.5f);
    CHECK(tape.val(total)(0, 0) == Catch::Approx(1.6).epsilon(1e-6));

    // lambda 0 short-circuits to the velocity term itself
    CHECK(total_loss(tape, lv, lr, 0.f) == lv);
    CHECK_THROWS_AS(total_loss(tape, lv, lr, -0.1f), ValidationError);
}

TEST_CASE("random conv features are frozen and reproducible", "[losses]") {
    RandomConvFeatures a(8, 4, 6, 99);
    RandomConvFeatures b(8, 4, 6, 99);
    RandomConvFeatures c(8, 4, 6, 100);
    Plane rgb(8, 8, 3);
    Rng rng(3);
    for (auto& v : rgb.data) v = float(rng.uniform());

    Mat fa = a.features(rgb, 0);
    Mat fb = b.features(rgb, 0);
    Mat fc = c.features(rgb, 0);
    REQUIRE(fa.rows() == 4);
    REQUIRE(fa.cols() == 6);
    CHECK(std::memcmp(fa.data(), fb.data(), sizeof(float) * size_t(fa.size())) == 0);
    CHECK((fa - fc).cwiseAbs().maxCoeff() > 1e-4f);
    CHECK(fa.cwiseAbs().maxCoeff() < 1.f);  // tanh range
}

TEST_CASE("random conv features are patch-local", "[losses]") {
    RandomConvFeatures enc(8, 4, 6, 7);
    Plane rgb(8, 8, 3, 0.5f);
    Mat base = enc.features(rgb, 0);
    // pixel (1,1) is interior to patch (0,0): its 3x3 neighborhood stays inside
    rgb.at(1, 1, 0) = 1.f;
    Mat bumped = enc.features(rgb, 0);
    CHECK((base.row(0) - bumped.row(0)).cwiseAbs().maxCoeff() > 1e-6f);
    for (int r = 1; r < 4; r++)
        CHECK((base.row(r) - bumped.row(r)).cwiseAbs().maxCoeff() == 0.f);
}

TEST_CASE("random conv features validate input shape", "[losses]") {
    RandomConvFeatures enc(8, 4, 6, 7);
    Plane bad(4, 4, 3);
    CHECK_THROWS_AS(enc.features(bad, 0), ValidationError);
    CHECK_THROWS_AS(RandomConvFeatures(8, 3, 6, 7), ValidationError);
}

TEST_CASE("feature files round trip bit-exactly", "[losses]") {
    std::string dir = tmp_dir();
    Rng rng(11);
    Mat feats = random_mat(rng, 4, 6);
    std::string path = dir + "/7.mmft";
    write_feature_file(path, 7, feats);

    FeatureRecord rec = read_feature_file(path);
    CHECK(rec.sample_id == 7);
    REQUIRE(rec.feats.rows() == feats.rows());
    REQUIRE(rec.feats.cols() == feats.cols());
    CHECK(std::memcmp(rec.feats.data(), feats.data(), sizeof(float) * size_t(feats.size())) == 0);

    FileFeatures provider(dir, 2, 6);
    Mat via = provider.features(Plane{}, 7);
    CHECK(std::memcmp(via.data(), feats.data(), sizeof(float) * size_t(feats.size())) == 0);
    CHECK_THROWS_AS(FileFeatures(dir, 3, 6).features(Plane{}, 7), FormatError);
    CHECK_THROWS_AS(provider.features(Plane{}, 12345), FormatError);
}

TEST_CASE("feature files reject corruption", "[losses]") {
    std::string dir = tmp_dir();
    std::string path = dir + "/bad.mmft";
    {
        std::ofstream os(path, std::ios::binary);
        os.write("XXXX", 4);
        uint32_t n = 2, f = 2, id = 0;
        os.write(reinterpret_cast<const char*>(&n), 4);
        os.write(reinterpret_cast<const char*>(&f), 4);
        os.write(reinterpret_cast<const char*>(&id), 4);
    }
    CHECK_THROWS_AS(read_feature_file(path), FormatError);

    std::string trunc = dir + "/trunc.mmft";
    {
        Mat feats = Mat::Ones(4, 4);
        write_feature_file(trunc, 1, feats);
        std::filesystem::resize_file(trunc, 20);
    }
    CHECK_THROWS_AS(read_feature_file(trunc), FormatError);
}
