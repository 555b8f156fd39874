#include "fitcls/finetune.hpp"

#include "fitcls/error.hpp"
#include "fitcls/optim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fitcls {

using ag::Tape;
using ag::Tensor;

// ---------------------------------------------------------------------------
// Schedules

void SlantedTriangularSchedule::validate() const {
    if (!(cut_frac > 0.0 && cut_frac < 1.0)) throw InputError("STLR: cut_frac must lie in (0, 1)");
    if (!(ratio > 1.0)) throw InputError("STLR: ratio must be > 1");
    if (!(lr_max > 0.0)) throw InputError("STLR: lr_max must be > 0");
    if (total_steps < 1) throw InputError("STLR: total_steps must be >= 1");
}

std::size_t SlantedTriangularSchedule::cut() const {
    return static_cast<std::size_t>(std::floor(cut_frac * static_cast<double>(total_steps)));
}

double schedule_lr(const SlantedTriangularSchedule& sched, std::size_t t) {
    sched.validate();
    if (t > sched.total_steps) {
        throw InputError("STLR: step " + std::to_string(t) + " beyond total " + std::to_string(sched.total_steps));
    }
    const std::size_t cut = sched.cut();
    if (t == cut) return sched.lr_max;
    double p = 0.0;
    if (t < cut) {
        p = static_cast<double>(t) / static_cast<double>(cut);
    } else {
        p = 1.0 - static_cast<double>(t - cut) / static_cast<double>(sched.total_steps - cut);
    }
    return sched.lr_max * (1.0 + p * (sched.ratio - 1.0)) / sched.ratio;
}

std::vector<double> layer_lrs(const DiscriminativeLrPlan& plan, std::size_t n_layers) {
    if (n_layers < 1) throw InputError("layer_lrs: need at least one layer");
    if (!(plan.decay > 0.0)) throw InputError("layer_lrs: decay must be > 0");
    std::vector<double> out{plan.base_lr};
    for (std::size_t l = 1; l < n_layers; ++l) out.push_back(out.back() / plan.decay);
    return out;
}

std::size_t UnfreezeSchedule::trainable_count(std::size_t epoch) const {
    if (epoch < 1) throw InputError("unfreeze schedule epochs are 1-based");
    return std::min(epoch, n_groups);
}

std::vector<std::size_t> UnfreezeSchedule::trainable_groups(std::size_t epoch) const {
    std::vector<std::size_t> out(trainable_count(epoch));
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
}

// ---------------------------------------------------------------------------
// Head and model

ClassifierHead ClassifierHead::create(std::size_t lm_hidden, std::size_t hidden, double dropout, std::uint64_t seed) {
    if (lm_hidden == 0 || hidden == 0) throw InputError("classifier head sizes must be positive");
    Pcg32 rng = Pcg32::named(seed, "head/init");
    auto uniform = [&](ag::Shape shape, double bound) {
        Tensor t = Tensor::zeros(std::move(shape), true);
        for (double& v : t.data()) v = rng.uniform(-bound, bound);
        return t;
    };
    ClassifierHead h;
    const std::size_t in = 3 * lm_hidden;
    h.norm_mean = Tensor::zeros({in});
    h.norm_var = Tensor::from({in}, std::vector<double>(in, 1.0));
    h.w1 = uniform({hidden, in}, 1.0 / std::sqrt(static_cast<double>(in)));
    h.b1 = Tensor::zeros({hidden}, true);
    h.w2 = uniform({kNumLabels, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)));
    h.b2 = Tensor::zeros({kNumLabels}, true);
    h.dropout = dropout;
    return h;
}

std::vector<NamedTensor> ClassifierHead::named_parameters() const {
    return {{"head.norm_mean", norm_mean}, {"head.norm_var", norm_var}, {"head.w1", w1},
            {"head.b1", b1},               {"head.w2", w2},             {"head.b2", b2}};
}

ClassifierHead ClassifierHead::clone() const {
    auto copy = [](const Tensor& t) {
        Tensor c = t.detach();
        c.set_requires_grad(true);
        return c;
    };
    ClassifierHead h;
    h.norm_mean = norm_mean.detach();
    h.norm_var = norm_var.detach();
    h.w1 = copy(w1);
    h.b1 = copy(b1);
    h.w2 = copy(w2);
    h.b2 = copy(b2);
    h.dropout = dropout;
    return h;
}

Tensor ClassifierHead::forward(Tape& tape, const Tensor& pooled, Pcg32* rng) const {
    if (pooled.cols() != input_width()) {
        throw ShapeError("classifier head expects width " + std::to_string(input_width()) + ", got " +
                         std::to_string(pooled.cols()));
    }
    Tensor normed = tape.batch_norm(pooled, norm_mean, norm_var, rng != nullptr);
    Tensor hidden = tape.relu(tape.add(tape.matmul(normed, w1, true), b1));
    if (rng) hidden = tape.dropout(hidden, dropout, *rng, true);
    return tape.add(tape.matmul(hidden, w2, true), b2);
}

UlmfitClassifier UlmfitClassifier::clone() const {
    UlmfitClassifier c;
    c.vocab = vocab;
    c.lm = lm.clone();
    c.head = head.clone();
    c.max_tokens = max_tokens;
    return c;
}

std::vector<std::vector<Tensor>> UlmfitClassifier::layer_groups() const {
    std::vector<std::vector<Tensor>> groups = {head.parameters()};
    for (auto& g : lm.layer_groups(false)) groups.push_back(std::move(g));
    return groups;
}

std::vector<int> encode_for_classifier(std::string_view text, const Vocabulary& vocab, std::size_t max_tokens) {
    if (max_tokens < 1) throw InputError("max_tokens must be >= 1");
    auto tokens = tokenize(text);
    if (tokens.size() > max_tokens - 1) tokens.resize(max_tokens - 1);
    auto ids = vocab.encode(tokens);
    ids.push_back(Vocabulary::kEos);
    return ids;
}

std::vector<LabeledDoc> encode_labeled(std::span<const Review> reviews, const Vocabulary& vocab,
                                       std::size_t max_tokens) {
    std::vector<LabeledDoc> out;
    out.reserve(reviews.size());
    for (const auto& r : reviews) out.push_back({encode_for_classifier(r.text, vocab, max_tokens), r.label});
    return out;
}

Tensor classifier_logits(Tape& tape, const UlmfitClassifier& model, std::span<const std::vector<int>> docs,
                         DropoutStreams* lm_dropout, Pcg32* head_rng) {
    if (docs.empty()) throw InputError("classifier: empty batch");
    std::size_t max_len = 0;
    std::vector<std::size_t> lengths;
    for (const auto& d : docs) {
        if (d.empty()) throw InputError("classifier: empty document (expected at least EOS)");
        max_len = std::max(max_len, d.size());
        lengths.push_back(d.size());
    }
    TokenBatch batch{docs.size(), max_len, std::vector<int>(docs.size() * max_len, Vocabulary::kPad)};
    for (std::size_t b = 0; b < docs.size(); ++b) {
        std::copy(docs[b].begin(), docs[b].end(), batch.ids.begin() + static_cast<std::ptrdiff_t>(b * max_len));
    }
    auto enc = model.lm.encode(tape, batch, model.lm.zero_state(docs.size()), lm_dropout);
    std::vector<Tensor> pooled = {tape.last_over_time(enc.outputs, lengths),
                                  tape.mean_over_time(enc.outputs, lengths),
                                  tape.max_over_time(enc.outputs, lengths)};
    return model.head.forward(tape, tape.concat(pooled, 1), head_rng);
}

// ---------------------------------------------------------------------------
// LM fine-tuning

LmTrainResult finetune_lm(const LanguageModel& pretrained, std::span<const int> train_stream,
                          std::span<const int> val_stream, const LmFineTuneConfig& cfg) {
    cfg.train.validate();
    LmTrainResult result;
    result.model = pretrained.clone();
    const std::size_t batch = std::max<std::size_t>(1, std::min(cfg.train.batch_size, train_stream.size() / 2));
    const std::size_t per_epoch = lm_windows_per_epoch(train_stream.size(), batch, cfg.train.bptt);
    SlantedTriangularSchedule sched{cfg.train.lr, cfg.cut_frac, cfg.ratio,
                                    std::max<std::size_t>(1, per_epoch * cfg.train.epochs)};
    if (cfg.train.epochs > 0) sched.validate();
    auto groups = result.model.layer_groups(true);
    const double decay = cfg.decay;
    const std::size_t n_groups = groups.size();
    auto report = train_lm(result.model, train_stream, val_stream, cfg.train, groups, [=](std::size_t step) {
        const double top = schedule_lr(sched, std::min(step, sched.total_steps));
        return layer_lrs(DiscriminativeLrPlan{top, decay}, n_groups);
    });
    result.trace = std::move(report.trace);
    result.best_epoch = report.best_epoch;
    return result;
}

// ---------------------------------------------------------------------------
// Classifier training

void FineTunePlan::validate() const {
    SlantedTriangularSchedule{lr, cut_frac, ratio, 1}.validate();
    if (batch_size < 1) throw InputError("fine-tune plan: batch_size must be >= 1");
    if (patience < 1) throw InputError("fine-tune plan: patience must be >= 1");
    if (!(decay > 0.0)) throw InputError("fine-tune plan: decay must be > 0");
    if (!(clip_norm > 0.0)) throw InputError("fine-tune plan: clip_norm must be > 0");
}

std::string trace_jsonl(std::span<const ClassifierEpoch> trace) {
    std::string out;
    for (const auto& e : trace) {
        nlohmann::json j = {{"epoch", e.epoch},
                            {"trainable_groups", e.trainable_groups},
                            {"train_loss", e.train_loss},
                            {"val_loss", e.val_loss},
                            {"val_acc", e.val_acc}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

namespace {

std::vector<std::vector<int>> docs_of(std::span<const LabeledDoc> docs, std::span<const std::size_t> idx) {
    std::vector<std::vector<int>> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(docs[i].ids);
    return out;
}

}  // namespace

double mean_loss(const UlmfitClassifier& model, std::span<const LabeledDoc> docs, std::size_t batch_size) {
    if (docs.empty()) throw InputError("mean_loss on an empty set");
    double total = 0.0;
    for (std::size_t start = 0; start < docs.size(); start += batch_size) {
        const std::size_t end = std::min(docs.size(), start + batch_size);
        std::vector<std::vector<int>> ids;
        std::vector<int> labels;
        for (std::size_t i = start; i < end; ++i) {
            ids.push_back(docs[i].ids);
            labels.push_back(code(docs[i].label));
        }
        Tape tape(false);
        Tensor logits = classifier_logits(tape, model, ids, nullptr, nullptr);
        total += tape.softmax_cross_entropy(logits, labels).item() * static_cast<double>(end - start);
    }
    return total / static_cast<double>(docs.size());
}

std::vector<Classification> classify_batch(const UlmfitClassifier& model, std::span<const std::vector<int>> docs,
                                           std::size_t batch_size) {
    std::vector<Classification> out;
    out.reserve(docs.size());
    for (std::size_t start = 0; start < docs.size(); start += batch_size) {
        const std::size_t end = std::min(docs.size(), start + batch_size);
        Tape tape(false);
        Tensor logits = classifier_logits(tape, model, docs.subspan(start, end - start), nullptr, nullptr);
        auto z = logits.data();
        for (std::size_t r = 0; r < end - start; ++r) {
            auto row = z.subspan(r * kNumLabels, kNumLabels);
            Classification c;
            c.probabilities = softmax(row);
            c.label = argmax_label(c.probabilities);
            out.push_back(c);
        }
    }
    return out;
}

Classification classify(const UlmfitClassifier& model, std::string_view text) {
    std::vector<std::vector<int>> docs = {encode_for_classifier(text, model.vocab, model.max_tokens)};
    return classify_batch(model, docs).front();
}

ClassifierTrainResult train_classifier(const UlmfitClassifier& init, std::span<const LabeledDoc> train,
                                       std::span<const LabeledDoc> val, const FineTunePlan& plan,
                                       const std::function<void(std::size_t, const UlmfitClassifier&)>& on_epoch) {
    plan.validate();
    if (train.empty() || val.empty()) throw InputError("classifier training needs train and validation data");
    if (init.head.input_width() != 3 * init.lm.dims().hidden) {
        throw ShapeError("classifier head width " + std::to_string(init.head.input_width()) +
                         " does not match 3 x LM hidden " + std::to_string(init.lm.dims().hidden));
    }

    ClassifierTrainResult result;
    UlmfitClassifier model = init.clone();
    result.model = model.clone();
    auto groups = model.layer_groups();
    if (groups.size() != model.lm.layers().size() + 2) {
        throw InputError("fine-tune plan: layer groups do not match the model");
    }
    UnfreezeSchedule unfreeze{groups.size()};
    if (plan.epochs == 0) return result;

    const std::size_t batches = (train.size() + plan.batch_size - 1) / plan.batch_size;
    SlantedTriangularSchedule sched{plan.lr, plan.cut_frac, plan.ratio, batches * plan.epochs};
    Optimizer opt(plan.optimizer);
    DropoutStreams lm_dropout(plan.seed, "clf", model.lm.layers().size());
    Pcg32 head_rng = Pcg32::named(plan.seed, "clf/head_dropout");
    Pcg32 shuffle_rng = Pcg32::named(plan.seed, "clf/shuffle");

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<Tensor> all_params;
    for (const auto& g : groups) all_params.insert(all_params.end(), g.begin(), g.end());

    double best = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    std::size_t step = 0;

    for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
        const std::size_t n_trainable = unfreeze.trainable_count(epoch);
        std::vector<Tensor> trainable;
        for (std::size_t g = 0; g < groups.size(); ++g) {
            for (auto& p : groups[g]) {
                p.set_requires_grad(g < n_trainable);
                if (g < n_trainable) trainable.push_back(p);
            }
        }

        shuffle_rng.shuffle(std::span(order));
        double loss_sum = 0.0;
        try {
            for (std::size_t start = 0; start < order.size(); start += plan.batch_size) {
                const std::size_t end = std::min(order.size(), start + plan.batch_size);
                auto idx = std::span<const std::size_t>(order).subspan(start, end - start);
                auto ids = docs_of(train, idx);
                std::vector<int> labels;
                for (auto i : idx) labels.push_back(code(train[i].label));

                zero_grads(trainable);
                Tape tape;
                Tensor logits = classifier_logits(tape, model, ids, &lm_dropout, &head_rng);
                Tensor loss = tape.softmax_cross_entropy(logits, labels);
                tape.backward(loss);
                clip_grad_norm(trainable, plan.clip_norm);

                const double top = schedule_lr(sched, std::min(step, sched.total_steps));
                const auto rates = layer_lrs(DiscriminativeLrPlan{top, plan.decay}, groups.size());
                for (std::size_t g = 0; g < n_trainable; ++g) opt.step(groups[g], rates[g]);
                loss_sum += loss.item() * static_cast<double>(end - start);
                ++step;
            }
        } catch (const NumericError& e) {
            for (auto& p : all_params) p.set_requires_grad(true);
            throw DivergenceError(std::string("classifier training diverged in epoch ") + std::to_string(epoch) + ": " +
                                      e.what(),
                                  trace_jsonl(result.trace));
        }

        ClassifierEpoch rec;
        rec.epoch = epoch;
        rec.trainable_groups = n_trainable;
        rec.train_loss = loss_sum / static_cast<double>(train.size());
        rec.val_loss = mean_loss(model, val);
        std::vector<std::vector<int>> val_ids;
        for (const auto& d : val) val_ids.push_back(d.ids);
        auto preds = classify_batch(model, val_ids);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < val.size(); ++i) correct += preds[i].label == val[i].label;
        rec.val_acc = static_cast<double>(correct) / static_cast<double>(val.size());
        result.trace.push_back(rec);
        if (on_epoch) on_epoch(epoch, model);

        if (!std::isfinite(rec.val_loss)) {
            for (auto& p : all_params) p.set_requires_grad(true);
            throw DivergenceError("classifier validation loss is not finite", trace_jsonl(result.trace));
        }
        if (rec.val_loss < best) {
            best = rec.val_loss;
            result.model = model.clone();
            result.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= plan.patience) {
            break;
        }
    }
    for (auto& p : all_params) {
        p.set_requires_grad(true);
        p.clear_grad();
    }
    return result;
}

}  // namespace fitcls
