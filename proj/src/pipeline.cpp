#include "fitcls/pipeline.hpp"

#include "fitcls/error.hpp"

#include <algorithm>

namespace fitcls {

using nlohmann::json;

Vocabulary make_vocabulary(std::span<const Review> train, const VocabSpec& spec) {
    return build_vocabulary(train, spec.min_freq, spec.max_size == 0 ? Vocabulary::kUnlimited : spec.max_size);
}

namespace {

std::vector<int> encode_text(std::string_view text, const Vocabulary& vocab) {
    const auto tokens = tokenize(text);
    return vocab.encode(tokens);
}

json vocab_json(const Vocabulary& v, const VocabSpec& spec) {
    return {{"tokens", v.tokens()},
            {"frequencies", v.frequencies()},
            {"min_freq", spec.min_freq},
            {"max_size", spec.max_size}};
}

Vocabulary vocab_from_json(const json& j) {
    return Vocabulary::from_tokens(j.at("tokens").get<std::vector<std::string>>(),
                                   j.at("frequencies").get<std::vector<std::size_t>>());
}

void expect_kind(const Checkpoint& c, std::string_view kind) {
    if (c.kind != kind) {
        throw ArtifactError("checkpoint holds a '" + c.kind + "' model, expected '" + std::string(kind) + "'");
    }
}

// Wraps header lookups so a missing or mistyped field reads as a structural error.
template <typename F>
auto structured(const char* what, F&& f) {
    try {
        return f();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointStructureError(std::string(what) + ": " + e.what());
    }
}

Vocabulary checked_vocab(const Checkpoint& c) {
    Vocabulary v = structured("checkpoint vocabulary", [&] { return vocab_from_json(c.meta.at("vocab")); });
    if (v.hash() != c.vocab_hash) throw CheckpointStructureError("stored vocabulary does not match its hash");
    return v;
}

void add_linear(Checkpoint& c, const LinearClassifier& clf) {
    c.add("classifier.weight", {kNumLabels, clf.dim()}, clf.weights());
    c.add("classifier.bias", {kNumLabels}, std::vector<double>(clf.bias().begin(), clf.bias().end()));
}

LinearClassifier read_linear(const Checkpoint& c, FeatureKind kind) {
    const auto& w = c.array("classifier.weight");
    const auto& b = c.array("classifier.bias");
    if (w.shape.size() != 2 || w.shape[0] != kNumLabels || b.data.size() != kNumLabels) {
        throw CheckpointStructureError("array 'classifier.weight': expected shape (3, D)");
    }
    Logits bias{};
    std::copy(b.data.begin(), b.data.end(), bias.begin());
    return LinearClassifier(w.shape[1], kind, w.data, bias);
}

json dims_json(const LmDims& d) {
    return {{"vocab", d.vocab},
            {"emb", d.emb},
            {"hidden", d.hidden},
            {"layers", d.layers},
            {"dropout_emb", d.dropout_emb},
            {"dropout_hidden", d.dropout_hidden},
            {"dropout_out", d.dropout_out},
            {"weight_drop", d.weight_drop},
            {"tie_weights", d.tie_weights}};
}

LmDims dims_from_json(const json& j) {
    LmDims d;
    d.vocab = j.at("vocab").get<std::size_t>();
    d.emb = j.at("emb").get<std::size_t>();
    d.hidden = j.at("hidden").get<std::size_t>();
    d.layers = j.at("layers").get<std::size_t>();
    d.dropout_emb = j.at("dropout_emb").get<double>();
    d.dropout_hidden = j.at("dropout_hidden").get<double>();
    d.dropout_out = j.at("dropout_out").get<double>();
    d.weight_drop = j.at("weight_drop").get<double>();
    d.tie_weights = j.at("tie_weights").get<bool>();
    return d;
}

void add_tensors(Checkpoint& c, const std::vector<NamedTensor>& named, const std::string& prefix) {
    for (const auto& [name, t] : named) {
        const auto values = t.data();
        c.add(prefix + name, t.shape(), std::vector<double>(values.begin(), values.end()));
    }
}

void read_tensors(const Checkpoint& c, const std::vector<NamedTensor>& named, const std::string& prefix) {
    for (auto [name, t] : named) {
        const auto& a = c.array(prefix + name);
        if (a.shape != t.shape()) {
            throw CheckpointStructureError("array '" + prefix + name + "' has shape " + ag::shape_string(a.shape) +
                                           ", model expects " + ag::shape_string(t.shape()));
        }
        std::copy(a.data.begin(), a.data.end(), t.data().begin());
    }
}

LanguageModel read_lm(const Checkpoint& c, const std::string& prefix) {
    const LmDims dims = structured("checkpoint LM dims", [&] { return dims_from_json(c.meta.at("lm_dims")); });
    LanguageModel lm(dims, 0);
    read_tensors(c, lm.named_parameters(), prefix);
    return lm;
}

LabeledFeatures tfidf_features(std::span<const Review> reviews, const TfidfPipeline& p) {
    LabeledFeatures out;
    for (const auto& r : reviews) {
        out.x.push_back(p.features(r.text));
        out.y.push_back(r.label);
    }
    return out;
}

LabeledFeatures dense_features(std::span<const Review> reviews, const EmbedMeanPipeline& p) {
    LabeledFeatures out;
    for (const auto& r : reviews) {
        out.x.push_back(to_sparse(p.features(r.text)));
        out.y.push_back(r.label);
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pipelines

SparseVector TfidfPipeline::features(std::string_view text) const {
    return tfidf.transform(encode_text(text, vocab));
}

FitLabel TfidfPipeline::predict(std::string_view text) const {
    return classifier.predict_label(features(text));
}

std::vector<double> EmbedMeanPipeline::features(std::string_view text) const {
    return mean_pool(encode_text(text, vocab), table);
}

FitLabel EmbedMeanPipeline::predict(std::string_view text) const {
    return classifier.predict_label(std::span<const double>(features(text)));
}

// ---------------------------------------------------------------------------
// Checkpoint conversion

Checkpoint to_checkpoint(const TfidfPipeline& p, const json& config) {
    Checkpoint c;
    c.kind = kKindTfidf;
    c.vocab_hash = p.vocab.hash();
    c.config = config;
    c.meta = {{"vocab", vocab_json(p.vocab, p.vocab_spec)},
              {"doc_count", p.tfidf.doc_count()},
              {"sublinear_tf", p.tfidf.options().sublinear_tf},
              {"max_df", p.tfidf.options().max_df}};
    std::vector<double> df(p.tfidf.df().begin(), p.tfidf.df().end());
    const std::size_t n = df.size();
    c.add("tfidf.df", {n}, std::move(df));
    c.add("tfidf.idf", {p.tfidf.dim()}, p.tfidf.idf());
    add_linear(c, p.classifier);
    return c;
}

Checkpoint to_checkpoint(const EmbedMeanPipeline& p, const json& config) {
    Checkpoint c;
    c.kind = kKindEmbedMean;
    c.vocab_hash = p.vocab.hash();
    c.config = config;
    c.meta = {{"vocab", vocab_json(p.vocab, p.vocab_spec)}, {"coverage", p.table.coverage()}};
    c.add("embedding", {p.table.rows(), p.table.dim()}, p.table.data());
    add_linear(c, p.classifier);
    return c;
}

Checkpoint to_checkpoint(const LmArtifact& a, const json& config) {
    Checkpoint c;
    c.kind = kKindLm;
    c.vocab_hash = a.vocab.hash();
    c.config = config;
    c.meta = {{"vocab", vocab_json(a.vocab, a.vocab_spec)}, {"lm_dims", dims_json(a.lm.dims())}};
    add_tensors(c, a.lm.named_parameters(), "");
    return c;
}

Checkpoint to_checkpoint(const UlmfitPipeline& p, const json& config) {
    Checkpoint c;
    c.kind = kKindUlmfit;
    c.vocab_hash = p.model.vocab.hash();
    c.config = config;
    c.meta = {{"vocab", vocab_json(p.model.vocab, p.vocab_spec)},
              {"lm_dims", dims_json(p.model.lm.dims())},
              {"head_dropout", p.model.head.dropout},
              {"max_tokens", p.model.max_tokens}};
    add_tensors(c, p.model.lm.named_parameters(), "lm.");
    add_tensors(c, p.model.head.named_parameters(), "");
    return c;
}

VocabSpec vocab_spec_of(const Checkpoint& c) {
    return structured("checkpoint vocabulary settings", [&] {
        const auto& v = c.meta.at("vocab");
        return VocabSpec{v.at("min_freq").get<std::size_t>(), v.at("max_size").get<std::size_t>()};
    });
}

TfidfPipeline tfidf_from_checkpoint(const Checkpoint& c) {
    expect_kind(c, kKindTfidf);
    TfidfPipeline p;
    p.vocab = checked_vocab(c);
    p.vocab_spec = vocab_spec_of(c);
    TfidfOptions opts;
    const std::size_t docs = structured("tfidf settings", [&] {
        opts.sublinear_tf = c.meta.at("sublinear_tf").get<bool>();
        opts.max_df = c.meta.at("max_df").get<double>();
        return c.meta.at("doc_count").get<std::size_t>();
    });
    const auto& df_arr = c.array("tfidf.df");
    std::vector<std::size_t> df;
    for (double v : df_arr.data) df.push_back(static_cast<std::size_t>(v));
    p.tfidf = TfidfModel::from_stats(docs, std::move(df), opts);
    if (p.tfidf.idf() != c.array("tfidf.idf").data) {
        throw CheckpointStructureError("array 'tfidf.idf' disagrees with the stored document frequencies");
    }
    p.classifier = read_linear(c, FeatureKind::Tfidf);
    if (p.classifier.dim() != p.tfidf.dim() || p.tfidf.dim() != p.vocab.size()) {
        throw CheckpointStructureError("array 'classifier.weight' width differs from the vocabulary size");
    }
    return p;
}

EmbedMeanPipeline embed_mean_from_checkpoint(const Checkpoint& c) {
    expect_kind(c, kKindEmbedMean);
    EmbedMeanPipeline p;
    p.vocab = checked_vocab(c);
    p.vocab_spec = vocab_spec_of(c);
    const auto& e = c.array("embedding");
    if (e.shape.size() != 2 || e.shape[0] != p.vocab.size()) {
        throw CheckpointStructureError("array 'embedding' rows differ from the vocabulary size");
    }
    const double coverage = structured("embedding coverage", [&] { return c.meta.at("coverage").get<double>(); });
    p.table = EmbeddingTable(e.shape[0], e.shape[1], e.data, coverage);
    p.classifier = read_linear(c, FeatureKind::MeanEmbedding);
    if (p.classifier.dim() != p.table.dim()) {
        throw CheckpointStructureError("array 'classifier.weight' width differs from the embedding dimension");
    }
    return p;
}

LmArtifact lm_from_checkpoint(const Checkpoint& c) {
    expect_kind(c, kKindLm);
    LmArtifact a;
    a.vocab = checked_vocab(c);
    a.vocab_spec = vocab_spec_of(c);
    a.lm = read_lm(c, "");
    if (a.lm.vocab_size() != a.vocab.size()) throw CheckpointStructureError("LM vocabulary size mismatch");
    return a;
}

UlmfitPipeline ulmfit_from_checkpoint(const Checkpoint& c) {
    expect_kind(c, kKindUlmfit);
    UlmfitPipeline p;
    p.model.vocab = checked_vocab(c);
    p.vocab_spec = vocab_spec_of(c);
    p.model.lm = read_lm(c, "lm.");
    if (p.model.lm.vocab_size() != p.model.vocab.size()) throw CheckpointStructureError("LM vocabulary size mismatch");
    const auto& w1 = c.array("head.w1");
    if (w1.shape.size() != 2) throw CheckpointStructureError("array 'head.w1' must be 2-D");
    structured("classifier settings", [&] {
        p.model.max_tokens = c.meta.at("max_tokens").get<std::size_t>();
        p.model.head = ClassifierHead::create(p.model.lm.dims().hidden, w1.shape[0],
                                              c.meta.at("head_dropout").get<double>(), 0);
        return 0;
    });
    read_tensors(c, p.model.head.named_parameters(), "");
    return p;
}

std::uint64_t data_vocab_hash(const Checkpoint& c, std::span<const Review> train) {
    return make_vocabulary(train, vocab_spec_of(c)).hash();
}

BatchPredictFn predictor(const Checkpoint& c) {
    if (c.kind == kKindTfidf) {
        auto p = std::make_shared<TfidfPipeline>(tfidf_from_checkpoint(c));
        return [p](std::span<const Review> docs) {
            std::vector<FitLabel> out;
            for (const auto& r : docs) out.push_back(p->predict(r.text));
            return out;
        };
    }
    if (c.kind == kKindEmbedMean) {
        auto p = std::make_shared<EmbedMeanPipeline>(embed_mean_from_checkpoint(c));
        return [p](std::span<const Review> docs) {
            std::vector<FitLabel> out;
            for (const auto& r : docs) out.push_back(p->predict(r.text));
            return out;
        };
    }
    if (c.kind == kKindUlmfit) {
        auto p = std::make_shared<UlmfitPipeline>(ulmfit_from_checkpoint(c));
        return [p](std::span<const Review> docs) {
            std::vector<std::vector<int>> ids;
            for (const auto& r : docs) ids.push_back(encode_for_classifier(r.text, p->model.vocab, p->model.max_tokens));
            std::vector<FitLabel> out;
            for (const auto& cl : classify_batch(p->model, ids)) out.push_back(cl.label);
            return out;
        };
    }
    throw ArtifactError("checkpoint kind '" + c.kind + "' is not a classifier");
}

// ---------------------------------------------------------------------------
// Training flows

TfidfRun train_tfidf(const SplitDataset& data, const Config& cfg) {
    TfidfRun run;
    auto& p = run.pipeline;
    p.vocab_spec = {cfg.features.min_freq, cfg.features.max_vocab};
    p.vocab = make_vocabulary(data.train, p.vocab_spec);
    std::vector<std::vector<int>> docs;
    for (const auto& r : data.train) docs.push_back(encode_text(r.text, p.vocab));
    p.tfidf = TfidfModel::fit(docs, p.vocab.size(), cfg.features.tfidf);
    auto result = train_linear(tfidf_features(data.train, p), tfidf_features(data.validation, p), p.vocab.size(),
                               FeatureKind::Tfidf, cfg.linear);
    p.classifier = std::move(result.model);
    run.trace = std::move(result.trace);
    run.best_epoch = result.best_epoch;
    return run;
}

EmbedMeanRun train_embed_mean(const SplitDataset& data, const Config& cfg) {
    EmbedMeanRun run;
    auto& p = run.pipeline;
    p.vocab_spec = {cfg.features.min_freq, cfg.features.max_vocab};
    p.vocab = make_vocabulary(data.train, p.vocab_spec);
    if (cfg.features.embedding_path.empty()) {
        p.table = random_embeddings(p.vocab, cfg.features.embedding_dim, cfg.linear.seed);
    } else {
        p.table = load_embeddings(cfg.features.embedding_path, p.vocab, cfg.features.embedding_dim);
    }
    auto result = train_linear(dense_features(data.train, p), dense_features(data.validation, p), p.table.dim(),
                               FeatureKind::MeanEmbedding, cfg.linear);
    p.classifier = std::move(result.model);
    run.trace = std::move(result.trace);
    run.best_epoch = result.best_epoch;
    return run;
}

UlmfitRun train_ulmfit(const SplitDataset& data, const Config& cfg, const UlmfitHooks& hooks) {
    auto report = [&](const std::string& stage, const std::string& line) {
        if (hooks.progress) hooks.progress(stage, line);
    };
    UlmfitRun run;
    if (hooks.resume_lm) {
        run.pretrained = *hooks.resume_lm;
        run.pretrained.lm = hooks.resume_lm->lm.clone();
    } else {
        run.pretrained.vocab_spec = {cfg.lm.min_freq, cfg.lm.max_vocab};
        run.pretrained.vocab = make_vocabulary(data.train, run.pretrained.vocab_spec);
    }
    const Vocabulary& vocab = run.pretrained.vocab;
    const auto train_stream = token_stream(data.train, vocab);
    const auto val_stream = token_stream(data.validation, vocab);

    if (!hooks.resume_lm) {
        LmDims dims = cfg.lm.dims;
        dims.vocab = vocab.size();
        auto pre = pretrain_lm(dims, train_stream, val_stream, cfg.lm.train);
        run.pretrained.lm = std::move(pre.model);
        run.pretrain_trace = std::move(pre.trace);
        report("pretrain", trace_jsonl(run.pretrain_trace));
    }
    run.pretrained_val_perplexity = perplexity(run.pretrained.lm, val_stream, cfg.lm.train.batch_size, cfg.lm.train.bptt);

    LmFineTuneConfig ft;
    ft.train = cfg.lm.train;
    ft.train.epochs = cfg.lm.finetune_epochs;
    ft.train.lr = cfg.lm.finetune_lr;
    ft.train.patience = cfg.lm.finetune_patience;
    ft.cut_frac = cfg.finetune.plan.cut_frac;
    ft.ratio = cfg.finetune.plan.ratio;
    ft.decay = cfg.finetune.plan.decay;
    auto tuned = finetune_lm(run.pretrained.lm, train_stream, val_stream, ft);
    run.finetuned = {std::move(tuned.model), vocab, run.pretrained.vocab_spec};
    run.finetune_trace = std::move(tuned.trace);
    run.finetuned_val_perplexity = perplexity(run.finetuned.lm, val_stream, cfg.lm.train.batch_size, cfg.lm.train.bptt);
    report("lm_finetune", trace_jsonl(run.finetune_trace));

    UlmfitClassifier init;
    init.vocab = vocab;
    init.lm = run.finetuned.lm.clone();
    init.head = ClassifierHead::create(init.lm.dims().hidden, cfg.finetune.head_hidden, cfg.finetune.head_dropout,
                                       cfg.finetune.plan.seed);
    init.max_tokens = cfg.finetune.max_tokens;
    const auto train_docs = encode_labeled(data.train, vocab, init.max_tokens);
    const auto val_docs = encode_labeled(data.validation, vocab, init.max_tokens);
    auto clf = train_classifier(init, train_docs, val_docs, cfg.finetune.plan);
    run.pipeline = {std::move(clf.model), run.pretrained.vocab_spec};
    run.classifier_trace = std::move(clf.trace);
    report("classifier", trace_jsonl(run.classifier_trace));
    return run;
}

}  // namespace fitcls
