// fitcls: prepare data, train, evaluate and sample from fit classifiers.

#include "fitcls/checkpoint.hpp"
#include "fitcls/config.hpp"
#include "fitcls/corpus.hpp"
#include "fitcls/error.hpp"
#include "fitcls/eval.hpp"
#include "fitcls/langmodel.hpp"
#include "fitcls/pipeline.hpp"
#include "fitcls/rng.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace fitcls;
using nlohmann::json;

namespace {

std::optional<fs::path> data_root() {
    if (const char* env = std::getenv("FITCLS_DATA_DIR"); env && *env) return fs::path(env);
    return std::nullopt;
}

// Relative paths that do not exist are retried under FITCLS_DATA_DIR.
fs::path resolve(const std::string& p) {
    fs::path path(p);
    if (path.is_relative() && !fs::exists(path)) {
        if (auto root = data_root(); root && fs::exists(*root / path)) return *root / path;
    }
    return path;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write " + path.string());
    out << text;
}

std::string dataset_source(const fs::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in) return dir.filename().string();
    try {
        return json::parse(in).value("source", dir.filename().string());
    } catch (const json::exception&) {
        return dir.filename().string();
    }
}

std::span<const Review> pick_split(const SplitDataset& data, const std::string& name) {
    if (name == "test") return data.test;
    if (name == "val" || name == "validation") return data.validation;
    if (name == "train") return data.train;
    throw InputError("unknown split '" + name + "' (expected train, val or test)");
}

// ---------------------------------------------------------------------------

struct PrepareArgs {
    std::string input;
    std::string format = "modcloth";
    std::uint64_t seed = 0;
    std::string out;
    std::size_t n = 3000;
    double test_frac = 0.20;
    double val_frac = 0.05;
};

int run_prepare(const PrepareArgs& a) {
    std::vector<Review> reviews;
    std::string source;
    if (a.format == "synthetic") {
        reviews = generate_synthetic_corpus(a.n, a.seed);
        source = "synthetic";
    } else {
        if (a.input.empty()) throw InputError("prepare: --input is required for format " + a.format);
        const auto path = resolve(a.input);
        if (!fs::exists(path)) throw InputError("prepare: input file not found: " + path.string());
        auto loaded = load_reviews(path, parse_format(a.format));
        reviews = std::move(loaded.reviews);
        source = a.format;
        if (loaded.skipped) std::cerr << "skipped " << loaded.skipped << " records without label or text\n";
    }
    const auto stats = dataset_stats(reviews);
    const auto data = split(reviews, a.seed, SplitRatios{a.test_frac, a.val_frac});
    write_prepared(a.out, data, source);
    json out = {{"source", source},
                {"datapoints", stats.count},
                {"avg_tokens", stats.avg_tokens},
                {"vocab_size", stats.vocab_size},
                {"labels",
                 {{"fit", stats.label_histogram[0]},
                  {"small", stats.label_histogram[1]},
                  {"large", stats.label_histogram[2]}}},
                {"train", data.train.size()},
                {"val", data.validation.size()},
                {"test", data.test.size()}};
    std::cout << out.dump(2) << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string method;
    std::string config;
    std::string data;
    std::string out;
    std::optional<std::size_t> lm_epochs;
    std::optional<double> lr;
    std::optional<std::size_t> batch;
    std::optional<std::uint64_t> seed;
    std::string lm_ckpt;
    std::string embeddings;
};

fs::path data_dir(const std::string& flag) {
    if (!flag.empty()) return resolve(flag);
    if (auto root = data_root()) return *root;
    throw InputError("no data directory: pass --data or set FITCLS_DATA_DIR");
}

int run_train(const TrainArgs& a) {
    Config cfg = a.config.empty() ? Config{} : load_config(resolve(a.config));
    if (a.lm_epochs) cfg.lm.train.epochs = *a.lm_epochs;
    if (a.lr) {
        cfg.lm.train.lr = *a.lr;
        cfg.lm.finetune_lr = *a.lr;
        cfg.finetune.plan.lr = *a.lr;
    }
    if (a.batch) {
        cfg.lm.train.batch_size = *a.batch;
        cfg.finetune.plan.batch_size = *a.batch;
    }
    if (a.seed) {
        cfg.linear.seed = *a.seed;
        cfg.lm.train.seed = *a.seed;
        cfg.finetune.plan.seed = *a.seed;
    }
    if (!a.embeddings.empty()) cfg.features.embedding_path = a.embeddings;
    if (a.method == "embed-mean" && !cfg.features.embedding_path.empty()) {
        const auto p = resolve(cfg.features.embedding_path);
        if (!fs::exists(p)) throw InputError("embedding file not found: " + p.string());
        cfg.features.embedding_path = p.string();
    }

    const fs::path dir = data_dir(a.data);
    const SplitDataset data = read_prepared(dir);
    cfg.dataset.path = dir.string();
    cfg.dataset.format = dataset_source(dir);
    const json resolved = to_json(cfg);
    const fs::path ckpt_path(a.out);
    const fs::path trace_path = ckpt_path.string() + ".trace.jsonl";

    try {
        if (a.method == "tfidf") {
            auto run = train_tfidf(data, cfg);
            write_text(trace_path, trace_jsonl(run.trace));
            save_checkpoint(ckpt_path, to_checkpoint(run.pipeline, resolved));
            std::cerr << "best epoch " << run.best_epoch << '\n';
        } else if (a.method == "embed-mean") {
            auto run = train_embed_mean(data, cfg);
            write_text(trace_path, trace_jsonl(run.trace));
            save_checkpoint(ckpt_path, to_checkpoint(run.pipeline, resolved));
            std::cerr << "embedding coverage " << run.pipeline.table.coverage() << ", best epoch " << run.best_epoch
                      << '\n';
        } else if (a.method == "ulmfit") {
            UlmfitHooks hooks;
            if (!a.lm_ckpt.empty()) hooks.resume_lm = lm_from_checkpoint(load_checkpoint(resolve(a.lm_ckpt)));
            std::string trace;
            hooks.progress = [&](const std::string& stage, const std::string& lines) {
                std::istringstream in(lines);
                for (std::string line; std::getline(in, line);) {
                    auto j = json::parse(line);
                    j["stage"] = stage;
                    trace += j.dump() + "\n";
                }
                write_text(trace_path, trace);
                std::cerr << "stage " << stage << " done\n";
            };
            auto run = train_ulmfit(data, cfg, hooks);
            save_checkpoint(ckpt_path, to_checkpoint(run.pipeline, resolved));
            save_checkpoint(ckpt_path.string() + ".lm.ckpt", to_checkpoint(run.finetuned, resolved));
            if (a.lm_ckpt.empty()) {
                save_checkpoint(ckpt_path.string() + ".pretrained.lm.ckpt", to_checkpoint(run.pretrained, resolved));
            }
            std::cerr << "val perplexity pretrained " << run.pretrained_val_perplexity << ", fine-tuned "
                      << run.finetuned_val_perplexity << '\n';
        } else {
            throw InputError("unknown method '" + a.method + "' (expected tfidf, embed-mean or ulmfit)");
        }
    } catch (const DivergenceError& e) {
        write_text(trace_path, e.trace());
        throw DivergenceError(std::string(e.what()) + " (trace: " + trace_path.string() + ")", e.trace());
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt;
    std::string data;
    std::string split = "test";
    std::string out;
    bool majority = false;
};

int run_eval(const EvalArgs& a) {
    const fs::path dir = data_dir(a.data);
    const SplitDataset data = read_prepared(dir);
    const auto split_view = pick_split(data, a.split);
    EvalReport report;
    if (a.majority) {
        report = majority_baseline(labels_of(data.train), labels_of(split_view));
        report.dataset_id = dataset_source(dir);
        report.split_id = a.split;
        report.config = {{"method", "majority"}, {"split_seed", data.seed}};
        report.config_hash = hex64(fnv1a64(report.config.dump()));
        report.dataset_checksum = dataset_checksum(split_view);
        report.timestamp = utc_timestamp();
    } else {
        if (a.ckpt.empty()) throw InputError("eval: --ckpt is required unless --majority is given");
        const Checkpoint ckpt = load_checkpoint(resolve(a.ckpt));
        EvalContext ctx;
        ctx.dataset_id = dataset_source(dir);
        ctx.split_id = a.split;
        ctx.model_id = ckpt.kind;
        ctx.config = ckpt.config;
        ctx.model_vocab_hash = ckpt.vocab_hash;
        ctx.data_vocab_hash = data_vocab_hash(ckpt, data.train);
        report = evaluate_batch(predictor(ckpt), split_view, ctx);
    }
    const std::string text = to_json(report).dump(2) + "\n";
    if (a.out.empty()) {
        std::cout << text;
    } else {
        write_text(a.out, text);
        std::vector<EvalReport> one{report};
        std::cout << render_table(one);
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
    std::string ckpt;
    std::string seed_text;
    std::size_t length = 40;
    double temperature = 1.0;
    std::uint64_t rng_seed = 0;
};

int run_generate(const GenerateArgs& a) {
    const Checkpoint ckpt = load_checkpoint(resolve(a.ckpt));
    LanguageModel lm;
    Vocabulary vocab;
    if (ckpt.kind == kKindUlmfit) {
        auto p = ulmfit_from_checkpoint(ckpt);
        lm = std::move(p.model.lm);
        vocab = std::move(p.model.vocab);
    } else {
        auto art = lm_from_checkpoint(ckpt);
        lm = std::move(art.lm);
        vocab = std::move(art.vocab);
    }
    if (a.temperature < 0.0) throw InputError("generate: temperature must be >= 0");
    const auto words = tokenize(a.seed_text);
    GenerateOptions opts{a.length, a.temperature, a.rng_seed};
    const auto tokens = generate(lm, vocab, words, opts);
    std::string line;
    for (const auto& t : tokens) {
        if (!line.empty()) line += ' ';
        line += t;
    }
    std::cout << line << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Product-fit review classifiers: TF-IDF, mean embeddings and a fine-tuned LSTM language model"};
    app.require_subcommand(1);

    PrepareArgs prep;
    auto* p = app.add_subcommand("prepare", "Split a dataset into train/val/test and write statistics");
    p->add_option("--input", prep.input, "Dataset file (JSON lines)");
    p->add_option("--format", prep.format, "modcloth, rtr or synthetic")
        ->check(CLI::IsMember({"modcloth", "rtr", "synthetic"}));
    p->add_option("--seed", prep.seed, "Split seed");
    p->add_option("--out", prep.out, "Output directory")->required();
    p->add_option("--n", prep.n, "Synthetic corpus size");
    p->add_option("--test-frac", prep.test_frac, "Fraction held out for test");
    p->add_option("--val-frac", prep.val_frac, "Fraction of the remainder used for validation");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a classifier and write a checkpoint");
    t->add_option("--method", tr.method, "tfidf, embed-mean or ulmfit")->required();
    t->add_option("--config", tr.config, "JSON config file");
    t->add_option("--data", tr.data, "Prepared data directory (default: FITCLS_DATA_DIR)");
    t->add_option("--out", tr.out, "Checkpoint path")->required();
    t->add_option("--lm-epochs", tr.lm_epochs, "LM pretraining epochs (default 20)");
    t->add_option("--lr", tr.lr, "Peak learning rate for the LM stages and classifier (default 0.02)");
    t->add_option("--batch", tr.batch, "Batch size for the LM stages and classifier (default 32)");
    t->add_option("--seed", tr.seed, "Training seed");
    t->add_option("--lm-ckpt", tr.lm_ckpt, "Skip pretraining and start from this LM checkpoint");
    t->add_option("--embeddings", tr.embeddings, "Pretrained vectors for embed-mean");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a prepared split");
    e->add_option("--ckpt", ev.ckpt, "Classifier checkpoint");
    e->add_option("--data", ev.data, "Prepared data directory (default: FITCLS_DATA_DIR)");
    e->add_option("--split", ev.split, "train, val or test");
    e->add_option("--out", ev.out, "Report path (default: stdout)");
    e->add_flag("--majority", ev.majority, "Score the majority-class baseline instead of a checkpoint");

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Sample text from a language model checkpoint");
    g->add_option("--ckpt", gen.ckpt, "LM (or ULMFit classifier) checkpoint")->required();
    g->add_option("--seed-text", gen.seed_text, "Sentence start");
    g->add_option("--length", gen.length, "Maximum number of generated tokens");
    g->add_option("--temperature", gen.temperature, "Sampling temperature; 0 is greedy");
    g->add_option("--rng-seed", gen.rng_seed, "Sampling seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::InputError);
    }

    try {
        if (*p) return run_prepare(prep);
        if (*t) return run_train(tr);
        if (*e) return run_eval(ev);
        if (*g) return run_generate(gen);
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return static_cast<int>(err.exit_code());
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 1;
    }
    return 0;
}
