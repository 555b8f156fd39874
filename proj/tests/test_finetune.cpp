#include "fitcls/error.hpp"
#include "fitcls/finetune.hpp"
#include "fitcls/pipeline.hpp"

#include "gradcheck.hpp"
#include "synthetic_config.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace fitcls;
using ag::Tape;
using ag::Tensor;

namespace {

bool same_values(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!std::ranges::equal(a[i].data(), b[i].data())) return false;
    return true;
}

std::vector<Tensor> lm_params(const UlmfitClassifier& m) {
    std::vector<Tensor> out;
    auto groups = m.layer_groups();
    for (std::size_t g = 1; g < groups.size(); ++g) out.insert(out.end(), groups[g].begin(), groups[g].end());
    return out;
}

struct SmallSetup {
    SplitDataset data;
    UlmfitClassifier init;
    std::vector<LabeledDoc> train;
    std::vector<LabeledDoc> val;
};

SmallSetup small_setup(std::uint64_t seed) {
    SmallSetup s;
    s.data = split(generate_synthetic_corpus(300, seed), seed);
    s.init.vocab = make_vocabulary(s.data.train, {2, 8000});
    LmDims d;
    d.vocab = s.init.vocab.size();
    d.emb = d.hidden = 8;
    s.init.lm = LanguageModel(d, seed);
    s.init.head = ClassifierHead::create(8, 10, 0.1, seed);
    s.train = encode_labeled(s.data.train, s.init.vocab, 400);
    s.val = encode_labeled(s.data.validation, s.init.vocab, 400);
    return s;
}

// The validated synthetic pipeline, trained once for the tests below.
const UlmfitRun& trained_run() {
    static const UlmfitRun run = [] {
        auto cfg = testing::synthetic_config(0);
        auto data = split(generate_synthetic_corpus(testing::kSyntheticReviews, 0), 0);
        return train_ulmfit(data, cfg);
    }();
    return run;
}

}  // namespace

TEST_CASE("slanted triangular schedule examples") {
    SlantedTriangularSchedule s{0.02, 0.1, 32.0, 100};
    CHECK(s.cut() == 10);
    CHECK(schedule_lr(s, 0) == doctest::Approx(0.000625).epsilon(1e-14));
    CHECK(schedule_lr(s, 10) == 0.02);
    CHECK(schedule_lr(s, 100) == doctest::Approx(0.000625).epsilon(1e-14));
    CHECK(schedule_lr(s, 5) == doctest::Approx(0.02 * (1 + 0.5 * 31) / 32).epsilon(1e-14));
    CHECK(schedule_lr(s, 55) == doctest::Approx(0.02 * (1 + 0.5 * 31) / 32).epsilon(1e-14));
    CHECK_THROWS_AS(schedule_lr(s, 101), InputError);
    SlantedTriangularSchedule bad{0.02, 1.5, 32.0, 100};
    CHECK_THROWS_AS(schedule_lr(bad, 0), InputError);
}

TEST_CASE("slanted triangular schedule shape") {
    Pcg32 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        SlantedTriangularSchedule s{0.001 + rng.uniform(), 0.05 + 0.9 * rng.uniform(), 2.0 + 60.0 * rng.uniform(),
                                    20 + rng.below(500)};
        const std::size_t cut = s.cut();
        const double floor = s.lr_max / s.ratio;
        CHECK(schedule_lr(s, cut) == s.lr_max);
        CHECK(schedule_lr(s, s.total_steps) == doctest::Approx(floor).epsilon(1e-12));
        const double max_step = (s.lr_max - floor) / static_cast<double>(std::min(cut, s.total_steps - cut)) + 1e-15;
        for (std::size_t t = 1; t <= s.total_steps; ++t) {
            const double a = schedule_lr(s, t - 1), b = schedule_lr(s, t);
            if (t <= cut) CHECK(b > a);
            else CHECK(b < a);
            CHECK(std::abs(b - a) <= max_step * (1 + 1e-9));
            CHECK(b <= s.lr_max);
        }
    }
}

TEST_CASE("discriminative learning rates") {
    auto r = layer_lrs({0.01, 2.6}, 3);
    REQUIRE(r.size() == 3);
    CHECK(r[0] == 0.01);
    CHECK(r[1] == doctest::Approx(0.0038462).epsilon(1e-4));
    CHECK(r[2] == doctest::Approx(0.0014793).epsilon(1e-4));
    CHECK(layer_lrs({0.02, 2.6}, 1) == std::vector<double>{0.02});
    auto five = layer_lrs({0.02, 2.6}, 5);
    for (std::size_t i = 1; i < five.size(); ++i) CHECK(five[i] == five[i - 1] / 2.6);
    CHECK(five[3] / five[1] == doctest::Approx(1 / (2.6 * 2.6)).epsilon(1e-15));
    CHECK_THROWS_AS(layer_lrs({0.02, 2.6}, 0), InputError);
}

TEST_CASE("gradual unfreezing") {
    UnfreezeSchedule u{4};
    CHECK(u.trainable_groups(1) == std::vector<std::size_t>{0});
    CHECK(u.trainable_groups(2) == std::vector<std::size_t>{0, 1});
    for (std::size_t e = 1; e < 10; ++e) {
        auto a = u.trainable_groups(e), b = u.trainable_groups(e + 1);
        CHECK(std::includes(b.begin(), b.end(), a.begin(), a.end()));
    }
    CHECK(u.trainable_count(4) == 4);
    CHECK(u.trainable_count(9) == 4);
    CHECK_THROWS_AS(u.trainable_count(0), InputError);
}

TEST_CASE("classifier input encoding") {
    Vocabulary v = Vocabulary::build(std::vector<std::vector<std::string>>{{"a", "b", "c"}}, 1);
    auto ids = encode_for_classifier("a b c a b", v, 3);
    CHECK(ids == std::vector<int>{v.index("a"), v.index("b"), Vocabulary::kEos});
    CHECK(encode_for_classifier("", v, 400) == std::vector<int>{Vocabulary::kEos});
    CHECK(encode_for_classifier("zzz", v, 400) == std::vector<int>{Vocabulary::kUnk, Vocabulary::kEos});
}

TEST_CASE("classifier gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        UlmfitClassifier m;
        m.vocab = Vocabulary::build(std::vector<std::vector<std::string>>{{"x", "y", "z"}}, 1);
        LmDims d;
        d.vocab = m.vocab.size();
        d.emb = d.hidden = 3;
        m.lm = LanguageModel(d, seed);
        m.head = ClassifierHead::create(3, 4, 0.2, seed);
        std::vector<std::vector<int>> docs{{4, 5, 3}, {6, 3}, {5, 4, 6, 4, 3}, {3}};
        std::vector<int> labels{0, 1, 2, 1};
        auto loss = [&](Tape& tape) {
            DropoutStreams ds(seed, "clf/test", d.layers);
            Pcg32 head_rng(seed);
            return tape.softmax_cross_entropy(classifier_logits(tape, m, docs, &ds, &head_rng), labels);
        };
        std::vector<Tensor> params;
        for (const auto& g : m.layer_groups()) params.insert(params.end(), g.begin(), g.end());
        CHECK(testing::max_grad_error(loss, params) < 1e-4);
    }
}

TEST_CASE("classifier head") {
    auto h = ClassifierHead::create(6, 50, 0.1, 3);
    CHECK(h.input_width() == 18);
    CHECK(h.w2.shape() == std::vector<std::size_t>{3, 50});
    CHECK(h.parameters().size() == 4);
    CHECK(h.named_parameters().size() == 6);
    Tape tape(false);
    CHECK_THROWS_AS(h.forward(tape, Tensor::zeros({2, 17}), nullptr), ShapeError);
}

TEST_CASE("first epoch trains only the head") {
    auto s = small_setup(1);
    FineTunePlan plan;
    plan.epochs = 3;
    plan.patience = 3;
    plan.batch_size = 16;
    std::vector<std::vector<Tensor>> after;
    auto r = train_classifier(s.init, s.train, s.val, plan, [&](std::size_t, const UlmfitClassifier& m) {
        std::vector<Tensor> snap;
        for (const auto& g : m.layer_groups())
            for (const auto& p : g) snap.push_back(p.detach());
        after.push_back(snap);
    });
    REQUIRE(after.size() == 3);
    auto init_groups = s.init.layer_groups();
    std::vector<std::size_t> sizes;
    for (const auto& g : init_groups) sizes.push_back(g.size());

    // Flattened group offsets.
    auto group_slice = [&](const std::vector<Tensor>& flat, std::size_t g) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < g; ++i) off += sizes[i];
        return std::vector<Tensor>(flat.begin() + static_cast<std::ptrdiff_t>(off),
                                   flat.begin() + static_cast<std::ptrdiff_t>(off + sizes[g]));
    };
    for (std::size_t epoch = 1; epoch <= 3; ++epoch) {
        for (std::size_t g = 0; g < init_groups.size(); ++g) {
            const bool frozen = g >= epoch;
            CHECK(same_values(group_slice(after[epoch - 1], g), init_groups[g]) == frozen);
        }
    }
    CHECK(r.trace[0].trainable_groups == 1);
    CHECK(r.trace[2].trainable_groups == 3);
}

TEST_CASE("zero classifier epochs and mismatched heads") {
    auto s = small_setup(2);
    FineTunePlan plan;
    plan.epochs = 0;
    auto r = train_classifier(s.init, s.train, s.val, plan);
    CHECK(r.trace.empty());
    CHECK(same_values(lm_params(r.model), lm_params(s.init)));
    CHECK(same_values(r.model.head.parameters(), s.init.head.parameters()));

    auto bad = s.init.clone();
    bad.head = ClassifierHead::create(9, 10, 0.1, 0);
    plan.epochs = 1;
    CHECK_THROWS_AS(train_classifier(bad, s.train, s.val, plan), ShapeError);
    CHECK_THROWS_AS(train_classifier(s.init, {}, s.val, plan), InputError);
}

TEST_CASE("early stopping keeps the best validation snapshot") {
    auto s = small_setup(3);
    FineTunePlan plan;
    plan.epochs = 6;
    plan.patience = 6;
    plan.batch_size = 16;
    plan.lr = 0.05;
    auto r = train_classifier(s.init, s.train, s.val, plan);
    REQUIRE(r.trace.size() == 6);
    std::size_t best = 0;
    for (std::size_t i = 1; i < r.trace.size(); ++i)
        if (r.trace[i].val_loss < r.trace[best].val_loss) best = i;
    CHECK(r.best_epoch == r.trace[best].epoch);
    CHECK(mean_loss(r.model, s.val) == doctest::Approx(r.trace[best].val_loss).epsilon(1e-12));

    plan.patience = 1;
    auto short_run = train_classifier(s.init, s.train, s.val, plan);
    for (std::size_t i = 1; i + 1 < short_run.trace.size(); ++i)
        CHECK(short_run.trace[i].val_loss < short_run.trace[i - 1].val_loss);
}

TEST_CASE("LM fine-tuning") {
    auto data = split(generate_synthetic_corpus(300, 5), 5);
    auto vocab = make_vocabulary(data.train, {2, 8000});
    auto ts = token_stream(data.train, vocab), vs = token_stream(data.validation, vocab);
    LmDims d;
    d.vocab = vocab.size();
    d.emb = d.hidden = 16;
    LmTrainConfig pc;
    pc.epochs = 1;
    pc.bptt = 20;
    pc.batch_size = 8;
    pc.lr = 0.01;
    auto pre = pretrain_lm(d, ts, vs, pc);

    LmFineTuneConfig fc;
    fc.train = pc;
    fc.train.epochs = 0;
    auto same = finetune_lm(pre.model, ts, vs, fc);
    CHECK(same_values(same.model.parameters(), pre.model.parameters()));

    fc.train.epochs = 3;
    fc.train.lr = 0.02;
    auto tuned = finetune_lm(pre.model, ts, vs, fc);
    CHECK(perplexity(tuned.model, vs, 8, 20) < perplexity(pre.model, vs, 8, 20));
    CHECK(tuned.trace.front().val_perplexity == doctest::Approx(perplexity(pre.model, vs, 8, 20)).epsilon(1e-12));
}

TEST_CASE("trained classifier on the synthetic corpus") {
    const auto& run = trained_run();
    const auto& model = run.pipeline.model;
    auto data = split(generate_synthetic_corpus(testing::kSyntheticReviews, 0), 0);

    std::size_t correct = 0;
    for (const auto& r : data.test) correct += classify(model, r.text).label == r.label;
    CHECK(static_cast<double>(correct) / static_cast<double>(data.test.size()) >= 0.98);
    CHECK(run.finetuned_val_perplexity < run.pretrained_val_perplexity);

    auto c = classify(model, "this dress runs small , could barely zip it up .");
    CHECK(c.label == FitLabel::Small);
    CHECK(c.probabilities[code(FitLabel::Small)] > 0.9);

    for (const auto& text : {std::string("true to size"), std::string(""), std::string("nothing relevant here")}) {
        auto a = classify(model, text);
        auto b = classify(model, text);
        CHECK(a.label == b.label);
        CHECK(a.probabilities == b.probabilities);
        CHECK(a.probabilities[0] + a.probabilities[1] + a.probabilities[2] == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(a.label == argmax_label(std::vector<double>(a.probabilities.begin(), a.probabilities.end())));
    }

    auto docs = std::vector<std::vector<int>>{encode_for_classifier(data.test[0].text, model.vocab, 400),
                                              encode_for_classifier(data.test[1].text, model.vocab, 400)};
    auto batch = classify_batch(model, docs);
    CHECK(batch[0].probabilities[0] == doctest::Approx(classify(model, data.test[0].text).probabilities[0]).epsilon(1e-12));
}
