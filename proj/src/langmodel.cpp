#include "fitcls/langmodel.hpp"

#include "fitcls/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace fitcls {

using ag::Tape;
using ag::Tensor;

void LmDims::validate() const {
    if (vocab <= Vocabulary::kNumSpecials) throw InputError("language model: vocabulary too small");
    if (emb == 0 || hidden == 0 || layers == 0) throw InputError("language model: sizes must be positive");
    for (double p : {dropout_emb, dropout_hidden, dropout_out, weight_drop}) {
        if (!(p >= 0.0 && p < 1.0)) throw InputError("language model: dropout rates must lie in [0, 1)");
    }
}

void LmTrainConfig::validate() const {
    if (!(lr > 0.0)) throw InputError("lm: lr must be > 0");
    if (batch_size < 1 || bptt < 1) throw InputError("lm: batch_size and bptt must be >= 1");
    if (!(clip_norm > 0.0)) throw InputError("lm: clip_norm must be > 0");
}

DropoutStreams::DropoutStreams(std::uint64_t seed, std::string_view scope, std::size_t layers)
    : embedding_(Pcg32::named(seed, std::string(scope) + "/embedding")),
      output_(Pcg32::named(seed, std::string(scope) + "/output")) {
    for (std::size_t l = 0; l < layers; ++l) {
        weight_drop_.push_back(Pcg32::named(seed, std::string(scope) + "/layer" + std::to_string(l) + "/weight_drop"));
        between_.push_back(Pcg32::named(seed, std::string(scope) + "/layer" + std::to_string(l) + "/between"));
    }
}

// ---------------------------------------------------------------------------
// Model

namespace {

Tensor uniform_tensor(ag::Shape shape, double bound, Pcg32& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

Tensor copy_param(const Tensor& t) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    return c;
}

}  // namespace

LanguageModel::LanguageModel(const LmDims& dims, std::uint64_t seed) : dims_(dims) {
    dims_.validate();
    Pcg32 rng = Pcg32::named(seed, "lm/init");
    embedding_ = uniform_tensor({dims_.vocab, dims_.emb}, 0.1, rng);
    std::size_t in = dims_.emb;
    for (std::size_t l = 0; l < dims_.layers; ++l) {
        const std::size_t h = dims_.hidden;
        const double bound = 1.0 / std::sqrt(static_cast<double>(h));
        LstmLayer layer;
        layer.input_size = in;
        layer.hidden_size = h;
        layer.w_ih = uniform_tensor({4 * h, in}, bound, rng);
        layer.w_hh = uniform_tensor({4 * h, h}, bound, rng);
        layer.bias = Tensor::zeros({4 * h}, true);
        auto b = layer.bias.data();
        std::fill(b.begin() + static_cast<std::ptrdiff_t>(h), b.begin() + static_cast<std::ptrdiff_t>(2 * h), 1.0);
        layers_.push_back(std::move(layer));
        in = h;
    }
    if (dims_.tie_weights && dims_.emb == dims_.hidden) {
        decoder_weight_ = embedding_;
    } else {
        decoder_weight_ = uniform_tensor({dims_.vocab, dims_.hidden}, 0.1, rng);
    }
    decoder_bias_ = Tensor::zeros({dims_.vocab}, true);
}

std::vector<Tensor> LanguageModel::parameters() const {
    std::vector<Tensor> out;
    for (const auto& np : named_parameters()) out.push_back(np.tensor);
    return out;
}

std::vector<NamedTensor> LanguageModel::named_parameters() const {
    std::vector<NamedTensor> out;
    out.push_back({"embedding", embedding_});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        out.push_back({p + "w_ih", layers_[l].w_ih});
        out.push_back({p + "w_hh", layers_[l].w_hh});
        out.push_back({p + "bias", layers_[l].bias});
    }
    if (!tied()) out.push_back({"decoder.weight", decoder_weight_});
    out.push_back({"decoder.bias", decoder_bias_});
    return out;
}

std::vector<std::vector<Tensor>> LanguageModel::layer_groups(bool include_decoder) const {
    std::vector<std::vector<Tensor>> groups;
    for (std::size_t l = layers_.size(); l-- > 0;) {
        std::vector<Tensor> g = {layers_[l].w_ih, layers_[l].w_hh, layers_[l].bias};
        if (include_decoder && l + 1 == layers_.size()) {
            if (!tied()) g.push_back(decoder_weight_);
            g.push_back(decoder_bias_);
        }
        groups.push_back(std::move(g));
    }
    groups.push_back({embedding_});
    return groups;
}

LanguageModel::State LanguageModel::zero_state(std::size_t batch) const {
    State s;
    for (const auto& layer : layers_) {
        s.h.push_back(Tensor::zeros({batch, layer.hidden_size}));
        s.c.push_back(Tensor::zeros({batch, layer.hidden_size}));
    }
    return s;
}

LanguageModel::State LanguageModel::detach(const State& s) {
    State out;
    for (const auto& t : s.h) out.h.push_back(t.detach());
    for (const auto& t : s.c) out.c.push_back(t.detach());
    return out;
}

LanguageModel::Encoded LanguageModel::encode(Tape& tape, const TokenBatch& batch, const State& state,
                                             DropoutStreams* dropout) const {
    if (batch.batch == 0 || batch.time == 0 || batch.ids.size() != batch.batch * batch.time) {
        throw ShapeError("lm encode: token batch is not rectangular");
    }
    if (state.h.size() != layers_.size() || state.c.size() != layers_.size()) {
        throw ShapeError("lm encode: state has the wrong number of layers");
    }
    for (int id : batch.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= dims_.vocab) {
            throw ShapeError("lm encode: token index " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(dims_.vocab));
        }
    }
    const bool training = dropout != nullptr;
    const std::size_t n_layers = layers_.size();

    std::vector<Tensor> w_hh(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        w_hh[l] = training ? tape.dropout(layers_[l].w_hh, dims_.weight_drop, dropout->weight_drop(l), true)
                           : layers_[l].w_hh;
    }

    Encoded out;
    std::vector<Tensor> h = state.h;
    std::vector<Tensor> c = state.c;
    std::vector<int> step_ids(batch.batch);
    for (std::size_t t = 0; t < batch.time; ++t) {
        for (std::size_t b = 0; b < batch.batch; ++b) step_ids[b] = batch.at(b, t);
        Tensor x = tape.embedding_lookup(embedding_, step_ids);
        if (training) x = tape.dropout(x, dims_.dropout_emb, dropout->embedding(), true);
        for (std::size_t l = 0; l < n_layers; ++l) {
            const std::size_t hs = layers_[l].hidden_size;
            Tensor hc = tape.lstm_cell(tape.matmul(x, layers_[l].w_ih, true), tape.matmul(h[l], w_hh[l], true),
                                       layers_[l].bias, c[l]);
            h[l] = tape.slice(hc, 0, hs);
            c[l] = tape.slice(hc, hs, 2 * hs);
            x = h[l];
            if (training && l + 1 < n_layers) x = tape.dropout(x, dims_.dropout_hidden, dropout->between(l), true);
        }
        out.outputs.push_back(x);
    }
    out.state = State{std::move(h), std::move(c)};
    return out;
}

Tensor LanguageModel::decode(Tape& tape, const Tensor& hidden) const {
    return tape.add(tape.matmul(hidden, decoder_weight_, true), decoder_bias_);
}

LanguageModel::Forward LanguageModel::forward(Tape& tape, const TokenBatch& batch, const State& state,
                                              DropoutStreams* dropout) const {
    Encoded enc = encode(tape, batch, state, dropout);
    Tensor stacked = tape.stack_time(enc.outputs);
    if (dropout) stacked = tape.dropout(stacked, dims_.dropout_out, dropout->output(), true);
    return Forward{decode(tape, stacked), std::move(enc.state)};
}

LanguageModel LanguageModel::clone() const {
    LanguageModel m;
    m.dims_ = dims_;
    m.embedding_ = copy_param(embedding_);
    for (const auto& layer : layers_) {
        LstmLayer c = layer;
        c.w_ih = copy_param(layer.w_ih);
        c.w_hh = copy_param(layer.w_hh);
        c.bias = copy_param(layer.bias);
        m.layers_.push_back(std::move(c));
    }
    m.decoder_weight_ = tied() ? m.embedding_ : copy_param(decoder_weight_);
    m.decoder_bias_ = copy_param(decoder_bias_);
    return m;
}

void LanguageModel::assign_values(const LanguageModel& other) {
    auto dst = named_parameters();
    auto src = other.named_parameters();
    if (dst.size() != src.size()) throw ShapeError("assign_values: models have different parameter sets");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].name != src[i].name || dst[i].tensor.shape() != src[i].tensor.shape()) {
            throw ShapeError("assign_values: parameter " + dst[i].name + " does not match");
        }
        auto s = src[i].tensor.data();
        std::copy(s.begin(), s.end(), dst[i].tensor.data().begin());
    }
}

// ---------------------------------------------------------------------------
// Streams and perplexity

std::string trace_jsonl(std::span<const LmEpoch> trace) {
    std::string out;
    for (const auto& e : trace) {
        nlohmann::json j = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_perplexity", e.val_perplexity}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

TokenBatch batchify(std::span<const int> stream, std::size_t batch) {
    if (batch == 0) throw InputError("batchify: batch must be >= 1");
    const std::size_t len = stream.size() / batch;
    if (len < 2) {
        throw InputError("token stream of " + std::to_string(stream.size()) + " tokens is too short for " +
                         std::to_string(batch) + " rows");
    }
    TokenBatch out{batch, len, {}};
    out.ids.assign(stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(batch * len));
    return out;
}

std::size_t lm_windows_per_epoch(std::size_t stream_len, std::size_t batch, std::size_t bptt) {
    const std::size_t len = stream_len / batch;
    if (len < 2) return 0;
    return (len - 1 + bptt - 1) / bptt;
}

namespace {

std::size_t fit_batch(std::size_t requested, std::size_t stream_len) {
    return std::max<std::size_t>(1, std::min(requested, stream_len / 2));
}

// Inputs are columns [start, start+len), targets are shifted by one.
std::pair<TokenBatch, std::vector<int>> window(const TokenBatch& data, std::size_t start, std::size_t len) {
    TokenBatch in{data.batch, len, std::vector<int>(data.batch * len)};
    std::vector<int> targets(data.batch * len);
    for (std::size_t b = 0; b < data.batch; ++b) {
        for (std::size_t t = 0; t < len; ++t) {
            in.ids[b * len + t] = data.at(b, start + t);
            targets[b * len + t] = data.at(b, start + t + 1);
        }
    }
    return {std::move(in), std::move(targets)};
}

}  // namespace

double perplexity(const LanguageModel& model, std::span<const int> stream, std::size_t batch, std::size_t bptt) {
    if (stream.size() < 2) throw InputError("perplexity needs a stream of at least two tokens");
    TokenBatch data = batchify(stream, fit_batch(batch, stream.size()));
    Tape tape(false);
    auto state = model.zero_state(data.batch);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start + 1 < data.time; start += bptt) {
        const std::size_t len = std::min(bptt, data.time - 1 - start);
        auto [in, targets] = window(data, start, len);
        auto fwd = model.forward(tape, in, state, nullptr);
        std::size_t n = 0;
        for (int t : targets) n += t != Vocabulary::kPad;
        total += tape.softmax_cross_entropy(fwd.logits, targets, Vocabulary::kPad).item() * static_cast<double>(n);
        count += n;
        state = std::move(fwd.state);
    }
    if (count == 0) throw InputError("perplexity: no scorable tokens");
    return std::exp(total / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Training

LmTrainReport train_lm(LanguageModel& model, std::span<const int> train_stream, std::span<const int> val_stream,
                       const LmTrainConfig& cfg, const std::vector<std::vector<Tensor>>& groups,
                       const GroupLrSchedule& lrs) {
    cfg.validate();
    if (train_stream.size() < 4) throw InputError("language model training needs a non-empty corpus");
    if (val_stream.size() < 2) throw InputError("language model training needs a validation stream");

    LmTrainReport report;
    double best = perplexity(model, val_stream, cfg.batch_size, cfg.bptt);
    report.trace.push_back({0, 0.0, best});
    if (cfg.epochs == 0) return report;

    TokenBatch data = batchify(train_stream, fit_batch(cfg.batch_size, train_stream.size()));
    std::vector<Tensor> all = model.parameters();
    std::vector<Tensor> trainable;
    for (const auto& g : groups) trainable.insert(trainable.end(), g.begin(), g.end());

    Optimizer opt(cfg.optimizer);
    DropoutStreams streams(cfg.seed, "lm", model.layers().size());
    LanguageModel best_model = model.clone();
    std::size_t since_best = 0;
    std::size_t step = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto state = model.zero_state(data.batch);
        double loss_sum = 0.0;
        std::size_t windows = 0;
        try {
            for (std::size_t start = 0; start + 1 < data.time; start += cfg.bptt) {
                const std::size_t len = std::min(cfg.bptt, data.time - 1 - start);
                auto [in, targets] = window(data, start, len);
                zero_grads(all);
                Tape tape;
                auto fwd = model.forward(tape, in, state, &streams);
                Tensor loss = tape.softmax_cross_entropy(fwd.logits, targets, Vocabulary::kPad);
                tape.backward(loss);
                clip_grad_norm(trainable, cfg.clip_norm);
                auto rates = lrs(step);
                if (rates.size() != groups.size()) throw InputError("lm: schedule returned the wrong number of rates");
                for (std::size_t g = 0; g < groups.size(); ++g) {
                    auto params = groups[g];
                    opt.step(params, rates[g]);
                }
                loss_sum += loss.item();
                ++windows;
                ++step;
                state = LanguageModel::detach(fwd.state);
            }
        } catch (const NumericError& e) {
            throw DivergenceError(std::string("language model training diverged in epoch ") + std::to_string(epoch) +
                                      ": " + e.what(),
                                  trace_jsonl(report.trace));
        }
        const double ppl = perplexity(model, val_stream, cfg.batch_size, cfg.bptt);
        report.trace.push_back({epoch, loss_sum / static_cast<double>(std::max<std::size_t>(1, windows)), ppl});
        if (!std::isfinite(ppl)) {
            throw DivergenceError("language model validation perplexity is not finite", trace_jsonl(report.trace));
        }
        if (ppl < best) {
            best = ppl;
            best_model = model.clone();
            report.best_epoch = epoch;
            since_best = 0;
        } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
            break;
        }
    }
    model.assign_values(best_model);
    for (auto& p : all) p.clear_grad();
    return report;
}

LmTrainResult pretrain_lm(const LmDims& dims, std::span<const int> train_stream, std::span<const int> val_stream,
                          const LmTrainConfig& cfg) {
    LmTrainResult result;
    result.model = LanguageModel(dims, cfg.seed);
    std::vector<std::vector<Tensor>> groups = {result.model.parameters()};
    const double lr = cfg.lr;
    auto report = train_lm(result.model, train_stream, val_stream, cfg, groups,
                           [lr](std::size_t) { return std::vector<double>{lr}; });
    result.trace = std::move(report.trace);
    result.best_epoch = report.best_epoch;
    return result;
}

// ---------------------------------------------------------------------------
// Generation

TextGenerator::TextGenerator(const LanguageModel& model) : model_(&model), state_(model.zero_state(1)) {}

void TextGenerator::feed(int token) {
    Tape tape(false);
    TokenBatch batch{1, 1, {token}};
    auto enc = model_->encode(tape, batch, state_, nullptr);
    Tensor logits = model_->decode(tape, enc.outputs.front());
    logits_.assign(logits.data().begin(), logits.data().end());
    state_ = std::move(enc.state);
}

std::vector<double> TextGenerator::next_distribution(double temperature) const {
    if (logits_.empty()) throw InputError("generator: no token fed yet");
    if (temperature < 0.0 || !std::isfinite(temperature)) throw InputError("temperature must be >= 0");
    std::vector<double> p(logits_.size(), 0.0);
    if (temperature == 0.0) {
        p[static_cast<std::size_t>(std::max_element(logits_.begin(), logits_.end()) - logits_.begin())] = 1.0;
        return p;
    }
    const double mx = *std::max_element(logits_.begin(), logits_.end());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp((logits_[i] - mx) / temperature);
        s += p[i];
    }
    for (double& v : p) v /= s;
    return p;
}

int TextGenerator::sample(double temperature, Pcg32& rng) const {
    if (logits_.empty()) throw InputError("generator: no token fed yet");
    auto allowed = [](std::size_t i) {
        return i != static_cast<std::size_t>(Vocabulary::kPad) && i != static_cast<std::size_t>(Vocabulary::kBos);
    };
    if (temperature == 0.0) {
        std::size_t best = Vocabulary::kUnk;
        for (std::size_t i = 0; i < logits_.size(); ++i) {
            if (allowed(i) && logits_[i] > logits_[best]) best = i;
        }
        return static_cast<int>(best);
    }
    std::vector<double> p = next_distribution(temperature);
    double mass = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (allowed(i)) mass += p[i];
    }
    double u = rng.uniform() * mass;
    std::size_t last = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!allowed(i)) continue;
        last = i;
        if (u < p[i]) return static_cast<int>(i);
        u -= p[i];
    }
    return static_cast<int>(last);
}

std::vector<std::string> generate(const LanguageModel& model, const Vocabulary& vocab,
                                  std::span<const std::string> seed_words, const GenerateOptions& options) {
    if (vocab.size() != model.vocab_size()) throw ArtifactError("generate: vocabulary does not match the model");
    if (options.temperature < 0.0) throw InputError("temperature must be >= 0");
    Pcg32 rng = Pcg32::named(options.rng_seed, "lm/generate");
    TextGenerator gen(model);
    gen.feed(Vocabulary::kEos);
    std::vector<std::string> out;
    for (const auto& w : seed_words) {
        gen.feed(vocab.index(w));
        out.push_back(w);
    }
    for (std::size_t k = 0; k < options.max_len; ++k) {
        int tok = gen.sample(options.temperature, rng);
        if (tok == Vocabulary::kEos) break;
        out.push_back(vocab.token(static_cast<std::size_t>(tok)));
        gen.feed(tok);
    }
    return out;
}

}  // namespace fitcls
