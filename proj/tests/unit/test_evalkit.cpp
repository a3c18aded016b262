#include <doctest.h>
#include <torch/torch.h>

#include <cmath>
#include <random>
#include <sstream>

#include "helpers.hpp"
#include "msgnet/errors.hpp"
#include "msgnet/evalkit.hpp"
#include "msgnet/tensors.hpp"

using namespace msgnet;
using namespace msgnet::evalkit;
using shapeworld::LayoutMap;

namespace {

// Straight per-class counting, no confusion matrix.
double oracle_macro_f1(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
    double sum = 0;
    int used = 0;
    for (int c = 1; c < classes; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            tp += pred[i] == c && truth[i] == c;
            fp += pred[i] == c && truth[i] != c;
            fn += pred[i] != c && truth[i] == c;
        }
        if (tp + fp + fn == 0) {
            continue;
        }
        sum += 2 * tp / (2 * tp + fp + fn);
        ++used;
    }
    return used == 0 ? 0.0 : sum / used;
}

SegmenterConfig tiny_segmenter() { return testing::small_config().segmenter; }

}  // namespace

TEST_SUITE("evalkit") {

TEST_CASE("macro F1 agrees with a counting oracle") {
    std::mt19937 rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        const int classes = 2 + trial % 12;
        const int n = 5 + trial;
        std::uniform_int_distribution<int> pick(0, classes - 1);
        std::vector<int> p(n), t(n);
        for (int i = 0; i < n; ++i) {
            p[i] = pick(rng);
            t[i] = trial % 3 == 0 ? p[i] : pick(rng);
        }
        const auto tp = torch::tensor(std::vector<std::int64_t>(p.begin(), p.end()));
        const auto tt = torch::tensor(std::vector<std::int64_t>(t.begin(), t.end()));
        CHECK(macro_f1(tp, tt, classes) == doctest::Approx(oracle_macro_f1(p, t, classes)).epsilon(1e-12));
    }
}

TEST_CASE("F1 and accuracy examples") {
    const auto a = torch::tensor({0, 1, 1, 2}, torch::kLong);
    CHECK(macro_f1(a, a) == 1.0);
    CHECK(pixel_accuracy(a, a) == 1.0);
    CHECK(macro_f1(torch::zeros({4}, torch::kLong), torch::zeros({4}, torch::kLong)) == 0.0);
    const auto truth = torch::tensor({1, 1, 2, 2}, torch::kLong);
    const auto pred = torch::tensor({1, 2, 2, 2}, torch::kLong);
    // class 1: tp 1, fn 1 -> 2/3; class 2: tp 2, fp 1 -> 4/5
    CHECK(macro_f1(pred, truth) == doctest::Approx((2.0 / 3.0 + 0.8) / 2.0));
    CHECK(pixel_accuracy(pred, truth) == 0.75);
    const auto cm = confusion_matrix(pred, truth, 3);
    CHECK(cm[1][2].item<std::int64_t>() == 1);
    CHECK(cm[2][2].item<std::int64_t>() == 2);
    CHECK_THROWS_AS(confusion_matrix(pred, truth.slice(0, 0, 3), 3), ShapeError);
    CHECK_THROWS_AS(confusion_matrix(pred, truth, 2), ValidationError);
}

TEST_CASE("violation rate") {
    std::vector<LayoutMap> layouts;
    auto good = LayoutMap::filled(32, 32, 0);
    good.at(16, 16) = 3;
    layouts.push_back(good);
    layouts.push_back(LayoutMap::filled(32, 32, 0));
    auto corner = good;
    corner.at(31, 0) = 1;
    layouts.push_back(corner);
    layouts.push_back(good);
    CHECK(violation_rate(layouts) == 0.5);
    CHECK(violation_rate({good}) == 0.0);
    CHECK_THROWS_AS(violation_rate({}), ValidationError);
}

TEST_CASE("Jensen-Shannon examples") {
    CHECK(js_divergence({1, 2, 3}, {2, 4, 6}) == doctest::Approx(0.0));
    CHECK(js_divergence({1, 0}, {0, 1}) == doctest::Approx(std::log(2.0)));
    // closed form for p = (1/2, 1/2), q = (1, 0)
    const double m0 = 0.75, m1 = 0.25;
    const double expected = 0.5 * (0.5 * std::log(0.5 / m0) + 0.5 * std::log(0.5 / m1)) + 0.5 * std::log(1.0 / m0);
    CHECK(js_divergence({1, 1}, {1, 0}) == doctest::Approx(expected));
    CHECK(js_divergence({1, 1}, {1, 0}) == doctest::Approx(js_divergence({1, 0}, {1, 1})));
    CHECK_THROWS_AS(js_divergence({1}, {1, 2}), ShapeError);
    CHECK_THROWS_AS(js_divergence({0, 0}, {1, 2}), ValidationError);
    CHECK_THROWS_AS(js_divergence({-1, 2}, {1, 2}), ValidationError);
}

TEST_CASE("layout divergence examples") {
    DataConfig cfg;
    const auto a = shapeworld::generate_dataset(cfg, 32, 1, 5000);
    const auto b = shapeworld::generate_dataset(cfg, 32, 2, 5000);
    const auto self = layout_divergence(a.layouts, a.layouts);
    CHECK(self.class_frequency == doctest::Approx(0.0));
    CHECK(self.object_count == doctest::Approx(0.0));
    const auto two = layout_divergence(a.layouts, b.layouts);
    CHECK(two.class_frequency < 0.01);
    CHECK(two.object_count < 0.01);

    const std::vector<LayoutMap> ones(3, LayoutMap::filled(4, 4, 1));
    const std::vector<LayoutMap> twos(3, LayoutMap::filled(4, 4, 2));
    CHECK(layout_divergence(ones, twos).class_frequency == doctest::Approx(std::log(2.0)));
    CHECK(layout_divergence(ones, twos).object_count == doctest::Approx(0.0));
    CHECK_THROWS_AS(layout_divergence({}, ones), ValidationError);
}

TEST_CASE("segmenter overfits a single pair") {
    auto cfg = tiny_segmenter();
    cfg.base_channels = 8;
    cfg.iterations = 300;
    cfg.batch_size = 1;
    cfg.learning_rate = 5e-3;
    DataConfig data;
    const auto ds = shapeworld::generate_dataset(data, 32, 3, 1);
    auto model = train_segmenter(ds, cfg, 1);
    const auto acc = pixel_accuracy(predict(model, ds), tensors::from_layouts(ds.layouts));
    CHECK(acc > 0.99);

    const auto ck = segmenter_checkpoint(model, testing::small_config(), 1);
    auto back = load_segmenter(ck);
    CHECK(torch::equal(predict(model, ds), predict(back, ds)));
    CHECK_THROWS_AS(train_segmenter(shapeworld::Dataset{}, cfg, 1), ValidationError);
}

TEST_CASE("segmenter training is deterministic per seed") {
    DataConfig data;
    const auto ds = shapeworld::generate_dataset(data, 32, 4, 6);
    auto a = train_segmenter(ds, tiny_segmenter(), 9);
    auto b = train_segmenter(ds, tiny_segmenter(), 9);
    CHECK(torch::equal(predict(a, ds), predict(b, ds)));
    CHECK(predict(a, ds).sizes() == torch::IntArrayRef({6, 32, 32}));
}

TEST_CASE("protocol identities") {
    DataConfig data;
    const auto train = shapeworld::generate_dataset(data, 32, 5, 6);
    const auto val = shapeworld::generate_dataset(data, 32, 6, 4);
    const auto cfg = tiny_segmenter();

    const auto same = f1_protocol(train, train, val, cfg, {1, 2});
    CHECK(same.rows.size() == 6);
    CHECK(same.generated_only.mean == same.baseline.mean);
    CHECK(same.generated_only.stddev == same.baseline.stddev);

    const auto none = f1_protocol(train, shapeworld::Dataset{}, val, cfg, {1, 2, 3});
    CHECK(none.augmented.mean == none.baseline.mean);
    CHECK(std::isnan(none.generated_only.mean));
    CHECK(none.rows.size() == 6);

    // sample standard deviation (n - 1)
    double mean = 0;
    for (const auto& r : none.rows) {
        mean += r.regime == Regime::baseline ? r.f1 / 3.0 : 0.0;
    }
    double ss = 0;
    for (const auto& r : none.rows) {
        ss += r.regime == Regime::baseline ? (r.f1 - mean) * (r.f1 - mean) : 0.0;
    }
    CHECK(none.baseline.stddev == doctest::Approx(std::sqrt(ss / 2.0)));

    std::ostringstream report;
    write_report(report, Report{none});
    CHECK(report.str().find("baseline") != std::string::npos);
    std::ostringstream csv;
    write_csv(csv, Report{none});
    CHECK(csv.str().rfind("regime,seed,f1,violation_rate,class_divergence,count_divergence\n", 0) == 0);
}

TEST_CASE("protocol rejects foreign classes and empty validation") {
    DataConfig data;
    const auto train = shapeworld::generate_dataset(data, 32, 7, 4);
    auto foreign = train;
    for (auto& l : foreign.layouts) {
        for (auto& v : l.labels) {
            v = v == 0 ? 0 : 12;
        }
    }
    auto narrow = train;
    for (auto& l : narrow.layouts) {
        for (auto& v : l.labels) {
            v = v == 0 ? 0 : 1;
        }
    }
    CHECK_THROWS_AS(f1_protocol(narrow, foreign, train, tiny_segmenter(), {1}), ValidationError);
    CHECK_THROWS_AS(f1_protocol(train, train, shapeworld::Dataset{}, tiny_segmenter(), {1}), ValidationError);
}

}  // TEST_SUITE
