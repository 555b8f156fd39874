#include "fitcls/eval.hpp"

#include "fitcls/error.hpp"
#include "fitcls/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <iomanip>
#include <map>
#include <sstream>

namespace fitcls {

std::size_t ConfusionMatrix::total() const {
    std::size_t s = 0;
    for (const auto& row : counts) {
        for (auto v : row) s += v;
    }
    return s;
}

std::size_t ConfusionMatrix::trace() const {
    std::size_t s = 0;
    for (std::size_t c = 0; c < kNumLabels; ++c) s += counts[c][c];
    return s;
}

std::size_t ConfusionMatrix::row_sum(FitLabel gold) const {
    std::size_t s = 0;
    for (auto v : counts[code(gold)]) s += v;
    return s;
}

std::size_t ConfusionMatrix::col_sum(FitLabel pred) const {
    std::size_t s = 0;
    for (const auto& row : counts) s += row[code(pred)];
    return s;
}

namespace {

void check_pair(std::span<const FitLabel> preds, std::span<const FitLabel> golds) {
    if (preds.size() != golds.size()) {
        throw InputError("predictions (" + std::to_string(preds.size()) + ") and gold labels (" +
                         std::to_string(golds.size()) + ") differ in length");
    }
    if (golds.empty()) throw InputError("cannot score an empty prediction set");
}

}  // namespace

ConfusionMatrix confusion(std::span<const FitLabel> preds, std::span<const FitLabel> golds) {
    check_pair(preds, golds);
    ConfusionMatrix m;
    for (std::size_t i = 0; i < preds.size(); ++i) m.add(golds[i], preds[i]);
    return m;
}

double micro_f1(std::span<const FitLabel> preds, std::span<const FitLabel> golds) {
    check_pair(preds, golds);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == golds[i];
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

EvalReport make_report(std::span<const FitLabel> preds, std::span<const FitLabel> golds) {
    EvalReport r;
    r.confusion = confusion(preds, golds);
    r.n = preds.size();
    r.micro_f1 = static_cast<double>(r.confusion.trace()) / static_cast<double>(r.n);
    for (FitLabel c : kAllLabels) {
        auto& m = r.per_class[code(c)];
        const std::size_t tp = r.confusion.counts[code(c)][code(c)];
        const std::size_t predicted = r.confusion.col_sum(c);
        m.support = r.confusion.row_sum(c);
        m.precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        m.recall = m.support ? static_cast<double>(tp) / static_cast<double>(m.support) : 0.0;
    }
    return r;
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json per_class = nlohmann::json::object();
    for (FitLabel c : kAllLabels) {
        const auto& m = r.per_class[code(c)];
        per_class[std::string(to_string(c))] = {
            {"precision", m.precision}, {"recall", m.recall}, {"support", m.support}};
    }
    nlohmann::json conf = nlohmann::json::array();
    for (const auto& row : r.confusion.counts) conf.push_back(row);
    return {{"schema_version", kReportSchemaVersion},
            {"dataset_id", r.dataset_id},
            {"split_id", r.split_id},
            {"model_id", r.model_id},
            {"micro_f1", r.micro_f1},
            {"n", r.n},
            {"per_class", per_class},
            {"confusion", {{"labels", {"fit", "small", "large"}}, {"counts", conf}}},
            {"config_hash", r.config_hash},
            {"dataset_checksum", r.dataset_checksum},
            {"timestamp", r.timestamp},
            {"config", r.config}};
}

EvalReport report_from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
            throw ArtifactError("unsupported report schema version " + j.at("schema_version").dump());
        }
        EvalReport r;
        r.dataset_id = j.at("dataset_id").get<std::string>();
        r.split_id = j.at("split_id").get<std::string>();
        r.model_id = j.at("model_id").get<std::string>();
        r.micro_f1 = j.at("micro_f1").get<double>();
        r.n = j.at("n").get<std::size_t>();
        for (FitLabel c : kAllLabels) {
            const auto& m = j.at("per_class").at(std::string(to_string(c)));
            r.per_class[code(c)] = {m.at("precision").get<double>(), m.at("recall").get<double>(),
                                    m.at("support").get<std::size_t>()};
        }
        const auto& rows = j.at("confusion").at("counts");
        for (std::size_t g = 0; g < kNumLabels; ++g) {
            for (std::size_t p = 0; p < kNumLabels; ++p) r.confusion.counts[g][p] = rows.at(g).at(p).get<std::size_t>();
        }
        r.config_hash = j.at("config_hash").get<std::string>();
        r.dataset_checksum = j.at("dataset_checksum").get<std::string>();
        r.timestamp = j.at("timestamp").get<std::string>();
        r.config = j.value("config", nlohmann::json::object());
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("malformed evaluation report: ") + e.what());
    }
}

FitLabel majority_label(std::span<const FitLabel> train_labels) {
    if (train_labels.empty()) throw InputError("majority baseline needs at least one training label");
    LabelHistogram h{};
    for (auto l : train_labels) ++h[code(l)];
    return label_from_code(static_cast<int>(std::max_element(h.begin(), h.end()) - h.begin()));
}

EvalReport majority_baseline(std::span<const FitLabel> train_labels, std::span<const FitLabel> eval_labels) {
    const FitLabel m = majority_label(train_labels);
    std::vector<FitLabel> preds(eval_labels.size(), m);
    EvalReport r = make_report(preds, eval_labels);
    r.model_id = "majority:" + std::string(to_string(m));
    return r;
}

std::vector<FitLabel> labels_of(std::span<const Review> reviews) {
    std::vector<FitLabel> out;
    out.reserve(reviews.size());
    for (const auto& r : reviews) out.push_back(r.label);
    return out;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::string dataset_checksum(std::span<const Review> reviews) {
    std::uint64_t h = fnv1a64("");
    for (const auto& r : reviews) {
        h = fnv1a64(r.id, h);
        h = fnv1a64(std::string_view("\x1f", 1), h);
        h = fnv1a64(r.text, h);
        h = fnv1a64(std::string_view("\x1f", 1), h);
        h = fnv1a64(to_string(r.label), h);
        h = fnv1a64(std::string_view("\x1e", 1), h);
    }
    return hex64(h);
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

EvalReport evaluate(const PredictFn& predict, std::span<const Review> split, const EvalContext& ctx) {
    return evaluate_batch(
        [&](std::span<const Review> docs) {
            std::vector<FitLabel> preds;
            preds.reserve(docs.size());
            for (const auto& r : docs) preds.push_back(predict(r));
            return preds;
        },
        split, ctx);
}

EvalReport evaluate_batch(const BatchPredictFn& predict, std::span<const Review> split, const EvalContext& ctx) {
    if (ctx.model_vocab_hash != ctx.data_vocab_hash) {
        throw ArtifactError("vocabulary hash mismatch: model " + hex64(ctx.model_vocab_hash) + ", data " +
                            hex64(ctx.data_vocab_hash));
    }
    const std::vector<FitLabel> preds = predict(split);
    EvalReport report = make_report(preds, labels_of(split));
    report.dataset_id = ctx.dataset_id;
    report.split_id = ctx.split_id;
    report.model_id = ctx.model_id;
    report.config = ctx.config;
    report.config_hash = hex64(fnv1a64(ctx.config.dump()));
    report.dataset_checksum = dataset_checksum(split);
    report.timestamp = utc_timestamp();
    return report;
}

std::string render_table(std::span<const EvalReport> reports) {
    std::vector<std::string> models;
    std::vector<std::string> datasets;
    std::map<std::pair<std::string, std::string>, double> cell;
    for (const auto& r : reports) {
        if (std::find(models.begin(), models.end(), r.model_id) == models.end()) models.push_back(r.model_id);
        if (std::find(datasets.begin(), datasets.end(), r.dataset_id) == datasets.end()) {
            datasets.push_back(r.dataset_id);
        }
        cell[{r.model_id, r.dataset_id}] = r.micro_f1;
    }
    std::size_t w0 = std::string("Method").size();
    for (const auto& m : models) w0 = std::max(w0, m.size());
    std::vector<std::size_t> widths;
    for (const auto& d : datasets) widths.push_back(std::max<std::size_t>(d.size(), 6));

    std::ostringstream os;
    auto pad = [&](const std::string& s, std::size_t w) { os << s << std::string(w - s.size(), ' '); };
    pad("Method", w0);
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        os << " | ";
        pad(datasets[i], widths[i]);
    }
    os << '\n' << std::string(w0, '-');
    for (auto w : widths) os << "-+-" << std::string(w, '-');
    os << '\n';
    for (const auto& m : models) {
        pad(m, w0);
        for (std::size_t i = 0; i < datasets.size(); ++i) {
            os << " | ";
            auto it = cell.find({m, datasets[i]});
            std::string v = "-";
            if (it != cell.end()) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.4f", it->second);
                v = buf;
            }
            pad(v, widths[i]);
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace fitcls
