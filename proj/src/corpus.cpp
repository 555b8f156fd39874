#include "fitcls/corpus.hpp"

#include "fitcls/error.hpp"
#include "fitcls/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_set>

namespace fitcls {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
    constexpr std::string_view ws = " \t\r\n\v\f";
    auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

// Decodes one UTF-8 code point starting at `pos`; malformed bytes decode to U+FFFD.
char32_t decode_utf8(std::string_view s, std::size_t& pos) {
    auto byte = [&](std::size_t i) { return static_cast<unsigned char>(s[i]); };
    unsigned char c = byte(pos);
    if (c < 0x80) {
        ++pos;
        return c;
    }
    std::size_t len = 0;
    char32_t cp = 0;
    if ((c & 0xE0) == 0xC0) {
        len = 2;
        cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
        len = 3;
        cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
        len = 4;
        cp = c & 0x07;
    } else {
        ++pos;
        return 0xFFFD;
    }
    if (pos + len > s.size()) {
        ++pos;
        return 0xFFFD;
    }
    for (std::size_t i = 1; i < len; ++i) {
        unsigned char cc = byte(pos + i);
        if ((cc & 0xC0) != 0x80) {
            ++pos;
            return 0xFFFD;
        }
        cp = (cp << 6) | (cc & 0x3F);
    }
    pos += len;
    return cp;
}

void append_utf8(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

bool is_space(char32_t cp) {
    return cp == ' ' || (cp >= 0x09 && cp <= 0x0D) || cp == 0xA0 || (cp >= 0x2000 && cp <= 0x200B) ||
           cp == 0x2028 || cp == 0x2029 || cp == 0x3000 || cp == 0xFEFF;
}

bool is_word_char(char32_t cp) {
    if (cp < 0x80) {
        return (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z') || (cp >= '0' && cp <= '9');
    }
    // Latin-1 symbols, general punctuation and CJK punctuation are not word characters.
    if (cp >= 0xA1 && cp <= 0xBF) return false;
    if (cp == 0xD7 || cp == 0xF7) return false;
    if (cp >= 0x2010 && cp <= 0x206F) return false;
    if (cp >= 0x3001 && cp <= 0x303F) return false;
    return true;
}

char32_t to_lower(char32_t cp) {
    if (cp >= 'A' && cp <= 'Z') return cp + 32;
    if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 32;
    if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return cp + 32;
    if (cp >= 0x410 && cp <= 0x42F) return cp + 32;
    return cp;
}

std::optional<std::string> string_field(const json& record, const char* key) {
    auto it = record.find(key);
    if (it == record.end() || !it->is_string()) return std::nullopt;
    return it->get<std::string>();
}

json review_to_json(const Review& r) {
    return json{{"id", r.id}, {"text", r.text}, {"label", std::string(to_string(r.label))}};
}

json histogram_json(const LabelHistogram& h) {
    json out = json::object();
    for (FitLabel l : kAllLabels) out[std::string(to_string(l))] = h[code(l)];
    return out;
}

}  // namespace

FitLabel label_from_code(int c) {
    if (c < 0 || c >= static_cast<int>(kNumLabels)) {
        throw InputError("invalid label code " + std::to_string(c));
    }
    return static_cast<FitLabel>(c);
}

std::string_view to_string(FitLabel label) {
    switch (label) {
        case FitLabel::Fit: return "fit";
        case FitLabel::Small: return "small";
        case FitLabel::Large: return "large";
    }
    return "fit";
}

std::optional<FitLabel> parse_label(std::string_view text) {
    auto t = trim(text);
    if (t == "fit") return FitLabel::Fit;
    if (t == "small") return FitLabel::Small;
    if (t == "large") return FitLabel::Large;
    return std::nullopt;
}

DatasetFormat parse_format(std::string_view name) {
    if (name == "modcloth") return DatasetFormat::ModCloth;
    if (name == "rtr") return DatasetFormat::Rtr;
    throw InputError("unknown dataset format '" + std::string(name) + "' (expected modcloth or rtr)");
}

std::string_view to_string(DatasetFormat format) {
    return format == DatasetFormat::ModCloth ? "modcloth" : "rtr";
}

LoadResult load_reviews(const std::filesystem::path& path, DatasetFormat format,
                        const LoadOptions& options) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read dataset file " + path.string());

    LoadResult result;
    std::string line;
    std::size_t line_no = 0;
    const std::string prefix = std::string(to_string(format)) + ":";
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::parse_error& e) {
            throw InputError(path.string() + ":" + std::to_string(line_no) +
                             ": malformed JSON: " + e.what());
        }
        if (!record.is_object()) {
            throw InputError(path.string() + ":" + std::to_string(line_no) +
                             ": expected a JSON object");
        }
        auto fit = string_field(record, "fit");
        auto body = string_field(record, "review_text");
        std::optional<FitLabel> label = fit ? parse_label(*fit) : std::nullopt;
        if (!label || !body || trim(*body).empty()) {
            ++result.skipped;
            continue;
        }
        std::string text(trim(*body));
        if (options.prepend_summary) {
            if (auto summary = string_field(record, "review_summary")) {
                auto s = trim(*summary);
                if (!s.empty()) text = std::string(s) + " " + text;
            }
        }
        result.reviews.push_back(Review{prefix + std::to_string(line_no), std::move(text), *label});
    }
    if (in.bad()) throw InputError("I/O error while reading " + path.string());
    if (result.reviews.empty()) {
        throw InputError("dataset " + path.string() + " has no usable records (" +
                         std::to_string(result.skipped) + " skipped)");
    }
    return result;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            tokens.push_back(std::move(word));
            word.clear();
        }
    };
    std::size_t pos = 0;
    while (pos < text.size()) {
        char32_t cp = decode_utf8(text, pos);
        if (is_space(cp)) {
            flush();
        } else if (is_word_char(cp)) {
            append_utf8(word, to_lower(cp));
        } else if (cp < 0x20 || cp == 0x7F) {
            flush();  // stray control characters
        } else {
            flush();
            std::string punct;
            append_utf8(punct, cp);
            tokens.push_back(std::move(punct));
        }
    }
    flush();
    return tokens;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
    tokens_ = {"<unk>", "<pad>", "<bos>", "<eos>"};
    frequencies_.assign(kNumSpecials, 0);
    for (std::size_t i = 0; i < tokens_.size(); ++i) lookup_.emplace(tokens_[i], static_cast<int>(i));
}

Vocabulary Vocabulary::build(std::span<const std::vector<std::string>> docs, std::size_t min_freq,
                             std::size_t max_size) {
    if (min_freq < 1) throw InputError("min_freq must be >= 1");
    if (max_size <= kNumSpecials) throw InputError("max_size must exceed the 4 special tokens");

    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& doc : docs) {
        for (const auto& tok : doc) ++counts[tok];
    }
    Vocabulary base;
    std::vector<std::pair<std::string, std::size_t>> ranked;
    ranked.reserve(counts.size());
    for (auto& [tok, n] : counts) {
        if (n >= min_freq && !base.lookup_.contains(tok)) ranked.emplace_back(tok, n);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (ranked.empty()) throw InputError("no token reaches min_freq=" + std::to_string(min_freq));
    std::size_t keep = std::min(ranked.size(), max_size - kNumSpecials);

    std::vector<std::string> tokens = base.tokens_;
    std::vector<std::size_t> freqs = base.frequencies_;
    for (std::size_t i = 0; i < keep; ++i) {
        tokens.push_back(std::move(ranked[i].first));
        freqs.push_back(ranked[i].second);
    }
    return from_tokens(std::move(tokens), std::move(freqs));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens,
                                   std::vector<std::size_t> frequencies) {
    Vocabulary base;
    if (tokens.size() < kNumSpecials || tokens.size() != frequencies.size()) {
        throw InputError("vocabulary token and frequency lists are inconsistent");
    }
    for (std::size_t i = 0; i < kNumSpecials; ++i) {
        if (tokens[i] != base.tokens_[i]) throw InputError("vocabulary specials out of place");
    }
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    v.frequencies_ = std::move(frequencies);
    v.lookup_.clear();
    v.lookup_.reserve(v.tokens_.size());
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (!v.lookup_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
            throw InputError("duplicate vocabulary token '" + v.tokens_[i] + "'");
        }
    }
    return v;
}

int Vocabulary::index(std::string_view token) const {
    auto it = lookup_.find(std::string(token));
    return it == lookup_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
    return lookup_.contains(std::string(token));
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(index(t));
    return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(token(static_cast<std::size_t>(id)));
    return out;
}

std::uint64_t Vocabulary::hash() const {
    std::uint64_t h = fnv1a64("fitcls-vocab");
    for (const auto& t : tokens_) {
        h = fnv1a64(t, h);
        h = fnv1a64(std::string_view("\0", 1), h);
    }
    return h;
}

Vocabulary build_vocabulary(std::span<const Review> reviews, std::size_t min_freq,
                            std::size_t max_size) {
    std::vector<std::vector<std::string>> docs;
    docs.reserve(reviews.size());
    for (const auto& r : reviews) docs.push_back(tokenize(r.text));
    return Vocabulary::build(docs, min_freq, max_size);
}

// ---------------------------------------------------------------------------
// Splitting

SplitDataset split(std::span<const Review> reviews, std::uint64_t seed, const SplitRatios& ratios) {
    if (reviews.size() < kMinSplitSize) {
        throw InputError("need at least " + std::to_string(kMinSplitSize) + " reviews to split, got " +
                         std::to_string(reviews.size()));
    }
    if (!(ratios.test_frac > 0 && ratios.test_frac < 1) ||
        !(ratios.val_frac_of_train >= 0 && ratios.val_frac_of_train < 1)) {
        throw InputError("split ratios must lie in (0, 1)");
    }
    std::vector<std::size_t> order(reviews.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Pcg32 rng = Pcg32::named(seed, "corpus/split");
    rng.shuffle(std::span(order));

    const std::size_t n = reviews.size();
    const auto n_test = static_cast<std::size_t>(std::llround(ratios.test_frac * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(
        std::llround(ratios.val_frac_of_train * static_cast<double>(n - n_test)));

    SplitDataset out;
    out.seed = seed;
    out.ratios = ratios;
    for (std::size_t i = 0; i < n; ++i) {
        const Review& r = reviews[order[i]];
        if (i < n_test) {
            out.test.push_back(r);
        } else if (i < n_test + n_val) {
            out.validation.push_back(r);
        } else {
            out.train.push_back(r);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

struct Phrase {
    std::string_view lead;  // joins the phrase to the sentence
    std::string_view text;
};

const std::array<std::vector<Phrase>, kNumLabels>& phrase_table() {
    static const std::array<std::vector<Phrase>, kNumLabels> table = {{
        {{"it", "fits perfectly"}, {"it is", "true to size"}},
        {{"it", "runs small"}, {"it is", "too tight"}},
        {{"it is", "too big"}, {"it", "runs large"}},
    }};
    return table;
}

// Second sentence consistent with the label, so the label also matters for
// predicting later words.
const std::array<std::vector<std::string_view>, kNumLabels>& follow_up_table() {
    static const std::array<std::vector<std::string_view>, kNumLabels> table = {{
        {"i kept my usual size", "length was just right", "no need to exchange it"},
        {"could barely zip it up", "my arms felt squeezed", "had to return it for a bigger size"},
        {"sleeves hung past my wrists", "way too roomy in the hips", "sent it back for a smaller size"},
    }};
    return table;
}

constexpr std::array<std::string_view, 14> kOpeners = {
    "i ordered this dress for a wedding", "bought this for my sister",
    "the color is lovely",                "the fabric feels soft",
    "love the pattern on this one",       "got this on sale last week",
    "wore it to dinner with friends",     "the material is nice and thick",
    "shipping was quick",                 "this skirt is so cute",
    "i wanted a blouse for work",         "the print looks like the photo",
    "my daughter picked this out",        "ordered the navy one",
};

constexpr std::array<std::string_view, 14> kClosers = {
    "would recommend",           "will buy again",
    "great for summer",          "the pockets are a bonus",
    "very flattering color",     "i got lots of compliments",
    "the stitching is well made", "happy with the purchase",
    "the zipper works well",     "it washes nicely",
    "the lining is soft",        "perfect for the office",
    "love the buttons",          "arrived in two days",
};

std::string capitalize(std::string_view s) {
    std::string out(s);
    if (!out.empty() && out[0] >= 'a' && out[0] <= 'z') out[0] = static_cast<char>(out[0] - 32);
    return out;
}

}  // namespace

const std::array<std::vector<std::string>, kNumLabels>& synthetic_label_phrases() {
    static const auto phrases = [] {
        std::array<std::vector<std::string>, kNumLabels> out;
        for (std::size_t c = 0; c < kNumLabels; ++c) {
            for (const auto& p : phrase_table()[c]) out[c].emplace_back(p.text);
        }
        return out;
    }();
    return phrases;
}

std::vector<Review> generate_synthetic_corpus(std::size_t n, std::uint64_t seed) {
    if (n < 30) throw InputError("synthetic corpus needs n >= 30");
    Pcg32 rng = Pcg32::named(seed, "corpus/synthetic");

    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % kNumLabels);
    rng.shuffle(std::span(labels));

    std::vector<Review> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& choices = phrase_table()[static_cast<std::size_t>(labels[i])];
        const Phrase& p = choices[rng.below(choices.size())];
        std::string text = capitalize(kOpeners[rng.below(kOpeners.size())]);
        if (rng.uniform() < 0.5) {
            text += ", ";
            text += kOpeners[rng.below(kOpeners.size())];
        }
        text += ". ";
        text += capitalize(p.lead);
        text += " ";
        text += p.text;
        text += ". ";
        const auto& follow = follow_up_table()[static_cast<std::size_t>(labels[i])];
        text += capitalize(follow[rng.below(follow.size())]);
        text += ". ";
        text += capitalize(kClosers[rng.below(kClosers.size())]);
        text += rng.uniform() < 0.3 ? "!" : ".";
        out.push_back(Review{"synthetic:" + std::to_string(i + 1), std::move(text),
                             label_from_code(labels[i])});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Statistics and prepared splits

LabelHistogram label_histogram(std::span<const Review> reviews) {
    LabelHistogram h{};
    for (const auto& r : reviews) ++h[code(r.label)];
    return h;
}

DatasetStats dataset_stats(std::span<const Review> reviews) {
    if (reviews.empty()) throw InputError("dataset statistics need at least one review");
    DatasetStats s;
    s.count = reviews.size();
    std::unordered_set<std::string> distinct;
    std::size_t total_tokens = 0;
    for (const auto& r : reviews) {
        auto toks = tokenize(r.text);
        total_tokens += toks.size();
        for (auto& t : toks) distinct.insert(std::move(t));
    }
    s.avg_tokens = static_cast<double>(total_tokens) / static_cast<double>(s.count);
    s.vocab_size = distinct.size();
    s.label_histogram = label_histogram(reviews);
    return s;
}

void write_reviews_jsonl(const std::filesystem::path& path, std::span<const Review> reviews) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    for (const auto& r : reviews) out << review_to_json(r).dump() << '\n';
    if (!out) throw InputError("write failed for " + path.string());
}

std::vector<Review> read_reviews_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read " + path.string());
    std::vector<Review> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            json j = json::parse(line);
            auto label = parse_label(j.at("label").get<std::string>());
            if (!label) throw InputError("bad label");
            out.push_back(Review{j.at("id").get<std::string>(), j.at("text").get<std::string>(), *label});
        } catch (const std::exception& e) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void write_prepared(const std::filesystem::path& dir, const SplitDataset& data, std::string_view source) {
    std::filesystem::create_directories(dir);
    write_reviews_jsonl(dir / "train.jsonl", data.train);
    write_reviews_jsonl(dir / "val.jsonl", data.validation);
    write_reviews_jsonl(dir / "test.jsonl", data.test);

    std::vector<Review> all;
    all.reserve(data.train.size() + data.validation.size() + data.test.size());
    all.insert(all.end(), data.train.begin(), data.train.end());
    all.insert(all.end(), data.validation.begin(), data.validation.end());
    all.insert(all.end(), data.test.begin(), data.test.end());
    DatasetStats stats = dataset_stats(all);

    json meta = {
        {"schema_version", 1},
        {"source", std::string(source)},
        {"seed", data.seed},
        {"ratios", {{"test_frac", data.ratios.test_frac},
                    {"val_frac_of_train", data.ratios.val_frac_of_train}}},
        {"counts", {{"train", data.train.size()},
                    {"validation", data.validation.size()},
                    {"test", data.test.size()},
                    {"total", all.size()}}},
        {"stats", {{"datapoints", stats.count},
                   {"avg_tokens", stats.avg_tokens},
                   {"vocab_size", stats.vocab_size},
                   {"labels", histogram_json(stats.label_histogram)}}},
    };
    std::ofstream out(dir / "meta.json", std::ios::binary);
    out << meta.dump(2) << '\n';
    if (!out) throw InputError("cannot write " + (dir / "meta.json").string());
}

SplitDataset read_prepared(const std::filesystem::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in) throw InputError("prepared data directory " + dir.string() + " has no meta.json");
    json meta;
    try {
        meta = json::parse(in);
    } catch (const json::parse_error& e) {
        throw InputError("malformed meta.json in " + dir.string() + ": " + e.what());
    }
    SplitDataset out;
    out.seed = meta.at("seed").get<std::uint64_t>();
    out.ratios.test_frac = meta.at("ratios").at("test_frac").get<double>();
    out.ratios.val_frac_of_train = meta.at("ratios").at("val_frac_of_train").get<double>();
    out.train = read_reviews_jsonl(dir / "train.jsonl");
    out.validation = read_reviews_jsonl(dir / "val.jsonl");
    out.test = read_reviews_jsonl(dir / "test.jsonl");
    return out;
}

std::vector<int> token_stream(std::span<const Review> reviews, const Vocabulary& vocab) {
    std::vector<int> stream;
    for (const auto& r : reviews) {
        auto ids = vocab.encode(tokenize(r.text));
        stream.insert(stream.end(), ids.begin(), ids.end());
        stream.push_back(Vocabulary::kEos);
    }
    return stream;
}

}  // namespace fitcls
