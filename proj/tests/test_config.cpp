#include "fitcls/config.hpp"
#include "fitcls/error.hpp"

#include "tmpdir.hpp"

#include <doctest.h>

using namespace fitcls;
using testing::TempDir;
using nlohmann::json;

TEST_CASE("defaults") {
    auto cfg = config_from_json(json::object());
    CHECK(cfg.split.ratios.test_frac == 0.20);
    CHECK(cfg.split.ratios.val_frac_of_train == 0.05);
    CHECK(cfg.linear.lr == 1e-3);
    CHECK(cfg.lm.dims.emb == 256);
    CHECK(cfg.lm.min_freq == 2);
    CHECK(cfg.lm.max_vocab == 8000);
    CHECK(cfg.lm.train.lr == 0.02);
    CHECK(cfg.lm.finetune_lr == 0.02);
    CHECK(cfg.finetune.plan.epochs == 8);
    CHECK(cfg.finetune.plan.decay == 2.6);
    CHECK(cfg.finetune.plan.cut_frac == 0.1);
    CHECK(cfg.finetune.plan.ratio == 32.0);
    CHECK(cfg.finetune.head_hidden == 50);
    CHECK(cfg.finetune.max_tokens == 400);
    CHECK(cfg.features.embedding_dim == 100);
}

TEST_CASE("unknown keys are rejected at every level") {
    CHECK_THROWS_AS(config_from_json(json{{"bogus", 1}}), InputError);
    for (const char* section : {"dataset", "split", "features", "linear", "lm", "finetune"}) {
        CAPTURE(section);
        CHECK_NOTHROW(config_from_json(json{{section, json::object()}}));
        try {
            config_from_json(json{{section, json{{"bogus", 1}}}});
            FAIL("accepted an unknown key");
        } catch (const InputError& e) {
            CHECK(std::string(e.what()).find(std::string(section) + ".bogus") != std::string::npos);
        }
    }
    CHECK_THROWS_AS(config_from_json(json{{"lm", json{{"emb", "wide"}}}}), InputError);
    CHECK_THROWS_AS(config_from_json(json{{"linear", 3}}), InputError);
    CHECK_THROWS_AS(config_from_json(json::array()), InputError);
}

TEST_CASE("round trip and hash") {
    auto cfg = config_from_json(json::object());
    cfg.lm.dims.hidden = 24;
    cfg.finetune.plan.seed = 9;
    cfg.features.embedding_path = "glove.txt";
    auto back = config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(config_hash(cfg) != config_hash(Config{}));
    CHECK(config_hash(cfg).size() == 16);

    TempDir dir;
    dir.write("c.json", R"({"lm": {"hidden": 24, "emb": 24}, "finetune": {"epochs": 3}})");
    auto loaded = load_config(dir / "c.json");
    CHECK(loaded.lm.dims.hidden == 24);
    CHECK(loaded.finetune.plan.epochs == 3);
    CHECK(loaded.finetune.plan.lr == 0.02);
    dir.write("bad.json", "{ not json");
    CHECK_THROWS_AS(load_config(dir / "bad.json"), InputError);
    CHECK_THROWS_AS(load_config(dir / "absent.json"), InputError);
}
