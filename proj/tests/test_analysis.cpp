#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "analysis.hpp"
#include "testutil.hpp"
#include "text_embed.hpp"

using namespace duap;

namespace {

std::vector<int> range_vec(int lo, int hi) {  // [lo, hi]
    std::vector<int> v;
    for (int l = lo; l <= hi; ++l) v.push_back(l);
    return v;
}

CapturedInternals values_only(std::initializer_list<Mat> mats) {
    CapturedInternals ci;
    for (const Mat& m : mats) ci.values[0].push_back(m);
    return ci;
}

}  // namespace

TEST_CASE("segment_layers tripartition") {
    CHECK(segment_layers(24, Segment::Early).layers == range_vec(0, 7));
    CHECK(segment_layers(24, Segment::Middle).layers == range_vec(8, 15));
    CHECK(segment_layers(24, Segment::Late).layers == range_vec(16, 23));
    CHECK(segment_layers(24, Segment::All).layers == range_vec(0, 23));

    CHECK(segment_layers(39, Segment::Early).layers == range_vec(0, 12));
    CHECK(segment_layers(39, Segment::Middle).layers == range_vec(13, 25));
    CHECK(segment_layers(39, Segment::Late).layers == range_vec(26, 38));

    CHECK(segment_layers(6, Segment::All).layers == range_vec(0, 5));

    SUBCASE("remainder goes to the late segment") {
        CHECK(segment_layers(7, Segment::Early).layers == range_vec(0, 1));
        CHECK(segment_layers(7, Segment::Middle).layers == range_vec(2, 3));
        CHECK(segment_layers(7, Segment::Late).layers == range_vec(4, 6));
        // segments always partition [0, n)
        for (int n : {3, 4, 5, 7, 8, 10, 24, 39}) {
            std::vector<int> all;
            for (Segment s : {Segment::Early, Segment::Middle, Segment::Late}) {
                auto part = segment_layers(n, s).layers;
                all.insert(all.end(), part.begin(), part.end());
            }
            CHECK(all == range_vec(0, n - 1));
        }
    }

    SUBCASE("empty segments are range errors") {
        CHECK_THROWS_AS(segment_layers(2, Segment::Early), Error);
        CHECK_THROWS_AS(segment_layers(2, Segment::Middle), Error);
        CHECK_NOTHROW(segment_layers(2, Segment::Late));
    }
}

TEST_CASE("window_selection") {
    CHECK(window_selection(24, 13, 4).layers == range_vec(13, 16));  // 1-indexed 14-17
    CHECK(window_selection(39, 13, 15).layers == range_vec(13, 27)); // 1-indexed 14-28
    CHECK(window_selection(8, 5, 1).layers == std::vector<int>{5});

    CHECK_THROWS_AS(window_selection(24, 21, 4), Error);
    CHECK_THROWS_AS(window_selection(24, -1, 4), Error);
    CHECK_THROWS_AS(window_selection(24, 3, 0), Error);

    SUBCASE("shifted windows cover the stated range") {
        const int n = 24, size = 4, stride = 2;
        std::set<int> covered;
        for (int start = 0; start + size <= n; start += stride) {
            for (int l : window_selection(n, start, size).layers) covered.insert(l);
        }
        CHECK(static_cast<int>(covered.size()) == n);
        CHECK(*covered.begin() == 0);
        CHECK(*covered.rbegin() == n - 1);
    }

    SUBCASE("selections are contiguous and sorted") {
        for (int start : {0, 3, 11}) {
            auto sel = window_selection(24, start, 5);
            for (std::size_t i = 1; i < sel.layers.size(); ++i) {
                CHECK(sel.layers[i] == sel.layers[i - 1] + 1);
            }
        }
    }
}

TEST_CASE("token_uniformity") {
    Mat identical(3, 4);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 4; ++c) identical(r, c) = 1.0 + c;
    }
    CHECK(token_uniformity_image(identical) == 1.0);

    Mat orthogonal(2, 2);
    orthogonal(0, 0) = 1.0;
    orthogonal(1, 1) = 1.0;
    CHECK(token_uniformity_image(orthogonal) == 0.0);

    SUBCASE("permutation invariance") {
        Rng rng(5);
        Mat m(5, 8);
        for (auto& v : m.d) v = rng.normal();
        double base = token_uniformity_image(m);
        Mat shuffled(5, 8);
        std::vector<int> perm = {3, 0, 4, 1, 2};
        for (int r = 0; r < 5; ++r) {
            for (int c = 0; c < 8; ++c) shuffled(r, c) = m(perm[r], c);
        }
        CHECK(token_uniformity_image(shuffled) == doctest::Approx(base).epsilon(1e-12));
    }

    SUBCASE("invariant to uniform positive scaling") {
        Rng rng(6);
        Mat m(4, 6);
        for (auto& v : m.d) v = rng.normal();
        double base = token_uniformity_image(m);
        Mat scaled = m;
        for (auto& v : scaled.d) v *= 7.25;
        CHECK(token_uniformity_image(scaled) == doctest::Approx(base).epsilon(1e-12));
    }

    SUBCASE("errors") {
        Mat one(1, 4);
        CHECK_THROWS_AS(token_uniformity_image(one), Error);
        CapturedInternals ci = values_only({identical});
        CHECK_THROWS_AS(token_uniformity(ci, 3), Error);  // layer absent
        CHECK(token_uniformity(ci, 0) == 1.0);
    }
}

TEST_CASE("value_heatmap") {
    Mat constant(4, 3);
    for (auto& v : constant.d) v = 0.75;
    CapturedInternals ci = values_only({constant});

    HeatmapData h = value_heatmap(ci, 0);
    CHECK(h.matrix.rows == 4);
    CHECK(h.matrix.cols == 3);
    CHECK(h.min == 0.75);
    CHECK(h.max == 0.75);
    CHECK(h.matrix == constant);

    CHECK_THROWS_AS(value_heatmap(ci, 1), Error);
    CHECK_THROWS_AS(value_heatmap(ci, 0, 5), Error);

    SUBCASE("shape matches the encoder capture") {
        const EncoderWeights& w = testutil::toy_weights();
        Rng rng(8);
        ImageBatch batch;
        batch.items.push_back(testutil::make_toy_image(0, rng));
        ForwardOutput out = forward(w, batch, {1}, CaptureWhat::Values);
        HeatmapData live = value_heatmap(out.internals, 1);
        CHECK(live.matrix.rows == w.config.num_tokens());
        CHECK(live.matrix.cols == w.config.embed_dim);
        CHECK(live.min <= live.max);
    }
}

TEST_CASE("segment grid is exactly the 9 configurations") {
    auto grid = segment_grid(24);
    REQUIRE(grid.size() == 9);
    std::set<std::string> names;
    int attention = 0, values = 0, both = 0;
    for (const auto& v : grid) {
        CHECK(names.insert(v.name).second);  // no duplicates
        REQUIRE(v.selection.has_value());
        switch (v.selection->target) {
            case AttackTarget::Attention: ++attention; break;
            case AttackTarget::Values: ++values; break;
            case AttackTarget::Both: ++both; break;
        }
    }
    CHECK(attention == 4);
    CHECK(values == 4);
    CHECK(both == 1);
    CHECK(names.count("both/middle") == 1);
    CHECK(names.count("values/middle") == 1);
    CHECK(names.count("attention/all") == 1);
}

TEST_CASE("run_sweep") {
    const EncoderWeights& w = testutil::toy_weights();
    std::vector<ImageTensor> train = testutil::make_toy_images(8, 501);

    EvalProtocol protocol;
    LabeledDataset eval_ds = testutil::make_toy_labeled(8, 601);
    protocol.head = train_surrogate_head(w, eval_ds, 2000, 0.5);
    protocol.candidate_labels = protocol.head.class_names;
    for (std::size_t i = 0; i < eval_ds.items.size(); ++i) {
        protocol.eval_images.push_back(eval_ds.items[i].image);
        protocol.eval_ids.push_back("img" + std::to_string(i));
        protocol.eval_labels.push_back(eval_ds.items[i].label);
    }
    protocol.embedder = default_text_embedder();

    SweepSpec spec;
    spec.variable = SweepVariable::Loss;
    spec.base.selection.layers = {0, 1};
    spec.base.epsilon = 16.0 / 255.0;
    spec.base.learning_rate = 2.0 / 255.0;
    spec.base.batch_size = 8;
    spec.base.epochs = 1;
    spec.base.seed = 11;
    spec.protocol = protocol;
    for (const char* name : {"std", "mse", "cossim"}) {
        SweepValue v;
        v.name = name;
        v.loss = loss_kind_from_name(name);
        spec.values.push_back(v);
    }

    SweepResult serial = run_sweep(w, train, spec, 1);
    REQUIRE(serial.rows.size() == 3);
    for (const auto& row : serial.rows) {
        CHECK(row.ok);
        CHECK(row.iterations == 1);
        CHECK(row.report.histogram.total() == 8);
    }

    SUBCASE("identical spec and seed give identical numerics") {
        SweepResult again = run_sweep(w, train, spec, 1);
        for (std::size_t i = 0; i < serial.rows.size(); ++i) {
            CHECK(serial.rows[i].final_objective == again.rows[i].final_objective);
            CHECK(serial.rows[i].uap.delta == again.rows[i].uap.delta);
            CHECK(serial.rows[i].report.mean_similarity == again.rows[i].report.mean_similarity);
        }
    }

    SUBCASE("concurrent execution preserves order and numerics") {
        SweepResult threaded = run_sweep(w, train, spec, 3);
        for (std::size_t i = 0; i < serial.rows.size(); ++i) {
            CHECK(serial.rows[i].value == threaded.rows[i].value);
            CHECK(serial.rows[i].uap.delta == threaded.rows[i].uap.delta);
        }
    }

    SUBCASE("row failures are recorded and the sweep continues") {
        SweepSpec broken = spec;
        LayerSelection bad;
        bad.layers = {97};  // outside the toy encoder
        broken.values[1].selection = bad;
        SweepResult result = run_sweep(w, train, broken, 1);
        REQUIRE(result.rows.size() == 3);
        CHECK(result.rows[0].ok);
        CHECK_FALSE(result.rows[1].ok);
        CHECK_FALSE(result.rows[1].error.empty());
        CHECK(result.rows[2].ok);
    }

    SUBCASE("fewer than 2 values is a grid error") {
        SweepSpec tiny = spec;
        tiny.values.resize(1);
        CHECK_THROWS_AS(run_sweep(w, train, tiny, 1), Error);
    }
}
