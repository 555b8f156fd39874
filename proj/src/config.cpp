#include "fitcls/config.hpp"

#include "fitcls/error.hpp"
#include "fitcls/eval.hpp"
#include "fitcls/rng.hpp"

#include <fstream>
#include <set>

namespace fitcls {

namespace {

// Reads known keys from one JSON object and rejects the rest on finish().
class Section {
public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw InputError("config: '" + path_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception&) {
            throw InputError("config: '" + where(key) + "' has the wrong type");
        }
    }

    void optimizer(const char* key, OptimizerKind& out) {
        std::string name(to_string(out));
        get(key, name);
        out = parse_optimizer(name);
    }

    Section child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        static const nlohmann::json empty = nlohmann::json::object();
        return Section(it == j_.end() ? empty : *it, where(key));
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw InputError("config: unknown key '" + where(k.c_str()) + "'");
        }
    }

private:
    std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

Config config_from_json(const nlohmann::json& j) {
    Config c;
    Section root(j, "");

    Section ds = root.child("dataset");
    ds.get("path", c.dataset.path);
    ds.get("format", c.dataset.format);
    ds.finish();
    if (c.dataset.format != "synthetic") parse_format(c.dataset.format);

    Section sp = root.child("split");
    sp.get("seed", c.split.seed);
    sp.get("test_frac", c.split.ratios.test_frac);
    sp.get("val_frac", c.split.ratios.val_frac_of_train);
    sp.finish();

    Section fe = root.child("features");
    fe.get("min_freq", c.features.min_freq);
    fe.get("max_vocab", c.features.max_vocab);
    fe.get("sublinear_tf", c.features.tfidf.sublinear_tf);
    fe.get("max_df", c.features.tfidf.max_df);
    fe.get("embedding_path", c.features.embedding_path);
    fe.get("embedding_dim", c.features.embedding_dim);
    fe.finish();

    Section li = root.child("linear");
    li.get("lr", c.linear.lr);
    li.get("batch_size", c.linear.batch_size);
    li.get("max_epochs", c.linear.max_epochs);
    li.get("patience", c.linear.patience);
    li.get("l2", c.linear.l2);
    li.get("seed", c.linear.seed);
    li.optimizer("optimizer", c.linear.optimizer);
    li.finish();

    Section lm = root.child("lm");
    lm.get("emb", c.lm.dims.emb);
    lm.get("hidden", c.lm.dims.hidden);
    lm.get("layers", c.lm.dims.layers);
    lm.get("dropout_emb", c.lm.dims.dropout_emb);
    lm.get("dropout_hidden", c.lm.dims.dropout_hidden);
    lm.get("dropout_out", c.lm.dims.dropout_out);
    lm.get("weight_drop", c.lm.dims.weight_drop);
    lm.get("tie_weights", c.lm.dims.tie_weights);
    lm.get("lr", c.lm.train.lr);
    lm.get("batch_size", c.lm.train.batch_size);
    lm.get("epochs", c.lm.train.epochs);
    lm.get("bptt", c.lm.train.bptt);
    lm.get("clip_norm", c.lm.train.clip_norm);
    lm.get("seed", c.lm.train.seed);
    lm.get("patience", c.lm.train.patience);
    lm.optimizer("optimizer", c.lm.train.optimizer);
    lm.get("min_freq", c.lm.min_freq);
    lm.get("max_vocab", c.lm.max_vocab);
    lm.get("finetune_epochs", c.lm.finetune_epochs);
    lm.get("finetune_lr", c.lm.finetune_lr);
    lm.get("finetune_patience", c.lm.finetune_patience);
    lm.finish();

    Section ft = root.child("finetune");
    ft.get("lr", c.finetune.plan.lr);
    ft.get("cut_frac", c.finetune.plan.cut_frac);
    ft.get("ratio", c.finetune.plan.ratio);
    ft.get("decay", c.finetune.plan.decay);
    ft.get("epochs", c.finetune.plan.epochs);
    ft.get("batch_size", c.finetune.plan.batch_size);
    ft.get("patience", c.finetune.plan.patience);
    ft.get("clip_norm", c.finetune.plan.clip_norm);
    ft.get("seed", c.finetune.plan.seed);
    ft.optimizer("optimizer", c.finetune.plan.optimizer);
    ft.get("head_hidden", c.finetune.head_hidden);
    ft.get("head_dropout", c.finetune.head_dropout);
    ft.get("max_tokens", c.finetune.max_tokens);
    ft.finish();

    root.finish();
    return c;
}

nlohmann::json to_json(const Config& c) {
    return {
        {"dataset", {{"path", c.dataset.path}, {"format", c.dataset.format}}},
        {"split",
         {{"seed", c.split.seed},
          {"test_frac", c.split.ratios.test_frac},
          {"val_frac", c.split.ratios.val_frac_of_train}}},
        {"features",
         {{"min_freq", c.features.min_freq},
          {"max_vocab", c.features.max_vocab},
          {"sublinear_tf", c.features.tfidf.sublinear_tf},
          {"max_df", c.features.tfidf.max_df},
          {"embedding_path", c.features.embedding_path},
          {"embedding_dim", c.features.embedding_dim}}},
        {"linear",
         {{"lr", c.linear.lr},
          {"batch_size", c.linear.batch_size},
          {"max_epochs", c.linear.max_epochs},
          {"patience", c.linear.patience},
          {"l2", c.linear.l2},
          {"seed", c.linear.seed},
          {"optimizer", to_string(c.linear.optimizer)}}},
        {"lm",
         {{"emb", c.lm.dims.emb},
          {"hidden", c.lm.dims.hidden},
          {"layers", c.lm.dims.layers},
          {"dropout_emb", c.lm.dims.dropout_emb},
          {"dropout_hidden", c.lm.dims.dropout_hidden},
          {"dropout_out", c.lm.dims.dropout_out},
          {"weight_drop", c.lm.dims.weight_drop},
          {"tie_weights", c.lm.dims.tie_weights},
          {"lr", c.lm.train.lr},
          {"batch_size", c.lm.train.batch_size},
          {"epochs", c.lm.train.epochs},
          {"bptt", c.lm.train.bptt},
          {"clip_norm", c.lm.train.clip_norm},
          {"seed", c.lm.train.seed},
          {"patience", c.lm.train.patience},
          {"optimizer", to_string(c.lm.train.optimizer)},
          {"min_freq", c.lm.min_freq},
          {"max_vocab", c.lm.max_vocab},
          {"finetune_epochs", c.lm.finetune_epochs},
          {"finetune_lr", c.lm.finetune_lr},
          {"finetune_patience", c.lm.finetune_patience}}},
        {"finetune",
         {{"lr", c.finetune.plan.lr},
          {"cut_frac", c.finetune.plan.cut_frac},
          {"ratio", c.finetune.plan.ratio},
          {"decay", c.finetune.plan.decay},
          {"epochs", c.finetune.plan.epochs},
          {"batch_size", c.finetune.plan.batch_size},
          {"patience", c.finetune.plan.patience},
          {"clip_norm", c.finetune.plan.clip_norm},
          {"seed", c.finetune.plan.seed},
          {"optimizer", to_string(c.finetune.plan.optimizer)},
          {"head_hidden", c.finetune.head_hidden},
          {"head_dropout", c.finetune.head_dropout},
          {"max_tokens", c.finetune.max_tokens}}},
    };
}

Config load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

std::string config_hash(const Config& cfg) {
    return hex64(fnv1a64(to_json(cfg).dump()));
}

}  // namespace fitcls
