#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include "attack.hpp"
#include "duap.h"
#include "eval.hpp"
#include "image_io.hpp"
#include "testutil.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) {
        path = fs::temp_directory_path() / ("duap_capi_" + name);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

const char* kToyEncoderJson =
    R"({"image_resolution":16,"patch_size":4,"num_layers":2,"num_heads":4,"embed_dim":16,"mlp_ratio":2.0})";

void write_labeled_dataset(const fs::path& dir, int count, std::uint64_t seed) {
    duap::Rng rng(seed);
    std::ofstream csv(dir / "labels.csv");
    csv << "file,label\n";
    for (int i = 0; i < count; ++i) {
        int cls = i % 4;
        char name[32];
        std::snprintf(name, sizeof name, "img%03d.dimg", i);
        duap::write_dimg(testutil::make_toy_image(cls, rng), (dir / name).string());
        csv << "\"" << name << "\",\"" << testutil::toy_class_names()[cls] << "\"\n";
    }
}

}  // namespace

TEST_CASE("status names and last error") {
    CHECK(std::string(duap_status_name(DUAP_OK)) == "OK");
    CHECK(std::string(duap_status_name(DUAP_E_DATA)) == "E_DATA");
    CHECK(std::string(duap_status_name(DUAP_E_SHAPE)) == "E_SHAPE");
    CHECK(std::string(duap_status_name(DUAP_E_GRID)) == "E_GRID");
    CHECK(duap_version() != nullptr);

    duap_encoder* enc = nullptr;
    CHECK(duap_encoder_load("/nonexistent/weights.duw", &enc) == DUAP_E_FORMAT);
    CHECK(std::string(duap_last_error()).size() > 0);

    CHECK(duap_encoder_load(nullptr, &enc) == DUAP_E_CONTRACT);
    CHECK(duap_cmd_train(nullptr, nullptr) == DUAP_E_CONTRACT);
}

TEST_CASE("default train config carries the reference recipe") {
    char* cfg = nullptr;
    REQUIRE(duap_default_train_config(&cfg) == DUAP_OK);
    json j = json::parse(cfg);
    duap_string_free(cfg);
    CHECK(j["attack"]["epsilon"].get<double>() == 16.0 / 255.0);
    CHECK(j["attack"]["learning_rate"].get<double>() == 1.0 / 255.0);
    CHECK(j["attack"]["epochs"].get<int>() == 3);
    CHECK(j["attack"]["batch_size"].get<int>() == 8);
    CHECK(j["attack"]["loss"].get<std::string>() == "cossim");
    CHECK(j["attack"]["target"].get<std::string>() == "values");
}

TEST_CASE("encoder handles") {
    TempDir dir("encoder");
    duap_encoder* enc = nullptr;
    REQUIRE(duap_encoder_build(kToyEncoderJson, 7, &enc) == DUAP_OK);

    char* cfg = nullptr;
    REQUIRE(duap_encoder_config_json(enc, &cfg) == DUAP_OK);
    json j = json::parse(cfg);
    duap_string_free(cfg);
    CHECK(j["num_layers"] == 2);
    CHECK(j["embed_dim"] == 16);

    fs::path w1 = dir.path / "a.duw";
    fs::path w2 = dir.path / "b.duw";
    REQUIRE(duap_encoder_save(enc, w1.string().c_str()) == DUAP_OK);

    duap_encoder* enc2 = nullptr;
    REQUIRE(duap_encoder_build(kToyEncoderJson, 7, &enc2) == DUAP_OK);
    REQUIRE(duap_encoder_save(enc2, w2.string().c_str()) == DUAP_OK);
    CHECK(slurp(w1) == slurp(w2));  // deterministic build
    duap_encoder_free(enc2);

    duap_encoder* loaded = nullptr;
    REQUIRE(duap_encoder_load(w1.string().c_str(), &loaded) == DUAP_OK);

    SUBCASE("embedding through the C surface") {
        duap::Rng rng(5);
        duap::write_dimg(testutil::make_toy_image(0, rng), (dir.path / "img.dimg").string());
        std::vector<double> emb(16, 0.0);
        REQUIRE(duap_encoder_embed_image(loaded, (dir.path / "img.dimg").string().c_str(),
                                         emb.data(), emb.size()) == DUAP_OK);
        double norm = 0.0;
        for (double v : emb) norm += v * v;
        CHECK(norm > 0.0);

        CHECK(duap_encoder_embed_image(loaded, (dir.path / "img.dimg").string().c_str(),
                                       emb.data(), 3) == DUAP_E_SHAPE);
    }

    CHECK(duap_encoder_build("{\"embed_dim\":17,\"num_heads\":4}", 1, &enc2) == DUAP_E_CONFIG);
    duap_encoder_free(loaded);
    duap_encoder_free(enc);
}

TEST_CASE("uap handles") {
    TempDir dir("uap");
    duap::Perturbation p;
    p.epsilon = 16.0 / 255.0;
    p.seed = 99;
    duap::Rng rng(7);
    p.delta = testutil::random_delta_in_ball(3, 16, 16, p.epsilon, rng);
    for (auto& v : p.delta.d) v = static_cast<double>(static_cast<float>(v));
    fs::path path = dir.path / "a.duap";
    duap::save_uap(p, path.string());

    duap_uap* uap = nullptr;
    REQUIRE(duap_uap_load(path.string().c_str(), &uap) == DUAP_OK);

    char* info = nullptr;
    REQUIRE(duap_uap_info_json(uap, &info) == DUAP_OK);
    json j = json::parse(info);
    duap_string_free(info);
    CHECK(j["channels"] == 3);
    CHECK(j["seed"] == 99);
    CHECK(j["max_abs_delta"].get<double>() <= j["epsilon"].get<double>());

    fs::path re = dir.path / "b.duap";
    REQUIRE(duap_uap_save(uap, re.string().c_str()) == DUAP_OK);
    CHECK(slurp(path) == slurp(re));

    fs::path png = dir.path / "a.png";
    REQUIRE(duap_uap_render_png(uap, png.string().c_str()) == DUAP_OK);
    duap::ImageTensor render = duap::read_png(png.string());
    CHECK(render.channels == 3);
    CHECK(render.width == 16);
    duap_uap_free(uap);
}

TEST_CASE("train and eval through the command API") {
    TempDir data("cmd_data");
    write_labeled_dataset(data.path, 12, 1234);
    TempDir out("cmd_out");

    json cfg{{"encoder", json{{"build", json{{"seed", 7}, {"config", json::parse(kToyEncoderJson)}}}}},
             {"attack", json{{"layers", "1-2"}, {"epochs", 1}, {"seed", 3}}},
             {"data", json{{"train_dir", data.path.string()}}},
             {"out_dir", (out.path / "train").string()}};
    REQUIRE(duap_cmd_train(cfg.dump().c_str(), nullptr) == DUAP_OK);
    CHECK(fs::exists(out.path / "train/uap.duap"));
    CHECK(fs::exists(out.path / "train/uap.png"));
    CHECK(fs::exists(out.path / "train/train_log.csv"));
    CHECK(fs::exists(out.path / "train/run_meta.json"));
    CHECK(fs::exists(out.path / "train/encoder.duw"));

    json meta = json::parse(slurp(out.path / "train/run_meta.json"));
    CHECK(meta["data_hash"].get<std::string>().size() == 16);
    CHECK(meta["config"]["attack"]["epsilon"].get<double>() == 16.0 / 255.0);
    CHECK(meta["config"]["attack"]["learning_rate"].get<double>() == 1.0 / 255.0);

    SUBCASE("zero-delta eval: ASR 0 and top-1 equals clean accuracy") {
        duap::Perturbation zero;
        zero.epsilon = 16.0 / 255.0;
        zero.delta = duap::ImageTensor(3, 16, 16);
        fs::path zpath = out.path / "zero.duap";
        duap::save_uap(zero, zpath.string());

        json ecfg{{"encoder", json{{"path", (out.path / "train/encoder.duw").string()}}},
                  {"uap", zpath.string()},
                  {"data", json{{"eval_dir", data.path.string()},
                                {"labels", (data.path / "labels.csv").string()}}},
                  {"out_dir", (out.path / "eval").string()}};
        REQUIRE(duap_cmd_eval(ecfg.dump().c_str(), nullptr) == DUAP_OK);
        json report = json::parse(slurp(out.path / "eval/eval_report.json"));
        CHECK(report["asr"]["0.9"].get<double>() == 0.0);
        CHECK(report["asr"]["0.8"].get<double>() == 0.0);
        CHECK(report["mean_similarity"].get<double>() == 1.0);

        // clean accuracy from the emitted responses
        duap::ResponseSet responses =
            duap::read_response_csv((out.path / "eval/responses.csv").string());
        int correct = 0;
        for (const auto& item : responses.items) {
            CHECK(item.clean == item.adv);  // zero delta
            if (item.clean == item.label) ++correct;
        }
        double clean_acc = static_cast<double>(correct) / responses.items.size();
        CHECK(report["topk"]["1"].get<double>() == doctest::Approx(clean_acc));
        CHECK(report["histogram"]["counts"].size() == 50);
    }

    SUBCASE("dimension mismatch is E_SHAPE") {
        duap::Perturbation wrong;
        wrong.epsilon = 0.1;
        wrong.delta = duap::ImageTensor(3, 8, 8);
        fs::path wpath = out.path / "wrong.duap";
        duap::save_uap(wrong, wpath.string());
        json ecfg{{"encoder", json{{"path", (out.path / "train/encoder.duw").string()}}},
                  {"uap", wpath.string()},
                  {"data", json{{"eval_dir", data.path.string()},
                                {"labels", (data.path / "labels.csv").string()}}},
                  {"out_dir", (out.path / "eval2").string()}};
        CHECK(duap_cmd_eval(ecfg.dump().c_str(), nullptr) == DUAP_E_SHAPE);
    }

    SUBCASE("missing train dir is E_DATA") {
        json bad = cfg;
        bad["data"]["train_dir"] = (data.path / "nope").string();
        bad["out_dir"] = (out.path / "bad").string();
        CHECK(duap_cmd_train(bad.dump().c_str(), nullptr) == DUAP_E_DATA);
    }

    SUBCASE("invalid JSON is E_CONFIG") {
        CHECK(duap_cmd_train("{not json", nullptr) == DUAP_E_CONFIG);
    }

    SUBCASE("out_dir override wins") {
        json cfg2 = cfg;
        cfg2["attack"]["epochs"] = 1;
        fs::path other = out.path / "override";
        REQUIRE(duap_cmd_train(cfg2.dump().c_str(), other.string().c_str()) == DUAP_OK);
        CHECK(fs::exists(other / "uap.duap"));
    }

    SUBCASE("inspect dumps headers") {
        char* js = nullptr;
        REQUIRE(duap_cmd_inspect((out.path / "train/uap.duap").string().c_str(), &js) == DUAP_OK);
        json uj = json::parse(js);
        duap_string_free(js);
        CHECK(uj["type"] == "uap");
        CHECK(uj["epsilon"].get<double>() > 0.0);

        REQUIRE(duap_cmd_inspect((out.path / "train/encoder.duw").string().c_str(), &js) ==
                DUAP_OK);
        json wj = json::parse(js);
        duap_string_free(js);
        CHECK(wj["type"] == "weights");
        CHECK(wj["config"]["num_layers"] == 2);

        REQUIRE(duap_cmd_inspect((data.path / "img000.dimg").string().c_str(), &js) == DUAP_OK);
        json dj = json::parse(js);
        duap_string_free(js);
        CHECK(dj["type"] == "image");
    }

    SUBCASE("external responses bypass the surrogate") {
        fs::path csv = out.path / "ext.csv";
        {
            duap::ResponseSet rs;
            rs.items.push_back({"1", "a goldfish", "random noise", "goldfish"});
            rs.items.push_back({"2", "a tabby cat", "a tabby cat", "tabby cat"});
            duap::write_response_csv(rs, csv.string());
        }
        json ecfg{{"responses", csv.string()}, {"out_dir", (out.path / "ext").string()}};
        REQUIRE(duap_cmd_eval(ecfg.dump().c_str(), nullptr) == DUAP_OK);
        json report = json::parse(slurp(out.path / "ext/eval_report.json"));
        CHECK(report["mean_similarity"].get<double>() < 1.0);
        CHECK(report["asr"].contains("0.9"));  // classification defaults
        CHECK(report["asr"].contains("0.8"));

        // captioning scores against clean responses as pseudo ground truth
        json ccfg{{"responses", csv.string()},
                  {"task", "captioning"},
                  {"out_dir", (out.path / "cap").string()}};
        REQUIRE(duap_cmd_eval(ccfg.dump().c_str(), nullptr) == DUAP_OK);
        json cap = json::parse(slurp(out.path / "cap/eval_report.json"));
        CHECK(cap["asr"].contains("0.7"));  // captioning defaults
        CHECK(cap["asr"].contains("0.6"));
        duap::ResponseSet cap_rs =
            duap::read_response_csv((out.path / "cap/responses.csv").string());
        for (const auto& item : cap_rs.items) CHECK(item.label == item.clean);
    }
}

TEST_CASE("visualize through the command API") {
    TempDir dir("vis");
    duap::Rng rng(3);
    duap::write_dimg(testutil::make_toy_image(2, rng), (dir.path / "img.dimg").string());

    duap_encoder* enc = nullptr;
    REQUIRE(duap_encoder_build(kToyEncoderJson, 7, &enc) == DUAP_OK);
    REQUIRE(duap_encoder_save(enc, (dir.path / "enc.duw").string().c_str()) == DUAP_OK);
    duap_encoder_free(enc);

    duap::Perturbation zero;
    zero.epsilon = 16.0 / 255.0;
    zero.delta = duap::ImageTensor(3, 16, 16);
    duap::save_uap(zero, (dir.path / "zero.duap").string());

    json cfg{{"encoder", json{{"path", (dir.path / "enc.duw").string()}}},
             {"uap", (dir.path / "zero.duap").string()},
             {"image", (dir.path / "img.dimg").string()},
             {"layers", "1-2"},
             {"out_dir", (dir.path / "out").string()}};
    REQUIRE(duap_cmd_visualize(cfg.dump().c_str(), nullptr) == DUAP_OK);

    for (int l : {1, 2}) {
        fs::path clean = dir.path / ("out/layer_" + std::to_string(l) + "_clean.png");
        fs::path adv = dir.path / ("out/layer_" + std::to_string(l) + "_adv.png");
        CHECK(fs::exists(clean));
        CHECK(fs::exists(adv));
        CHECK(slurp(clean) == slurp(adv));  // zero delta: identical renders
        json side = json::parse(slurp(dir.path / ("out/layer_" + std::to_string(l) + "_clean.json")));
        CHECK(side["layer"] == l);
        CHECK(side["tokens"] == 17);
        CHECK(side["min"].get<double>() <= side["max"].get<double>());
    }
    CHECK(fs::exists(dir.path / "out/uap.png"));
    json uni = json::parse(slurp(dir.path / "out/uniformity.json"));
    CHECK(uni.contains("1"));
    CHECK(uni.contains("2"));
    CHECK(uni["1"]["delta"].get<double>() == 0.0);

    SUBCASE("out-of-range layer is E_LAYER") {
        json bad = cfg;
        bad["layers"] = "3-4";
        bad["out_dir"] = (dir.path / "bad").string();
        CHECK(duap_cmd_visualize(bad.dump().c_str(), nullptr) == DUAP_E_LAYER);
    }
}
