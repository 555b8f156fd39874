#pragma once

#include "fitcls/autograd.hpp"
#include "fitcls/corpus.hpp"
#include "fitcls/optim.hpp"
#include "fitcls/rng.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace fitcls {

struct LmDims {
    std::size_t vocab = 0;
    std::size_t emb = 256;
    std::size_t hidden = 256;
    std::size_t layers = 2;
    double dropout_emb = 0.1;     // on embedded inputs
    double dropout_hidden = 0.2;  // between LSTM layers
    double dropout_out = 0.2;     // on top-layer outputs, before the decoder
    double weight_drop = 0.2;     // on W_hh, one mask per forward call
    bool tie_weights = true;      // only honoured when emb == hidden

    void validate() const;
};

/// Gate order along the 4h axis: input, forget, cell, output.
struct LstmLayer {
    ag::Tensor w_ih;  // (4h, in)
    ag::Tensor w_hh;  // (4h, h)
    ag::Tensor bias;  // (4h)
    std::size_t input_size = 0;
    std::size_t hidden_size = 0;
};

/// Ids laid out row-major as (batch, time).
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t time = 0;
    std::vector<int> ids;

    int at(std::size_t b, std::size_t t) const { return ids[b * time + t]; }
};

/// Per-layer dropout streams for one training run. Absent streams mean eval mode.
class DropoutStreams {
public:
    DropoutStreams(std::uint64_t seed, std::string_view scope, std::size_t layers);
    Pcg32& embedding() { return embedding_; }
    Pcg32& weight_drop(std::size_t layer) { return weight_drop_.at(layer); }
    Pcg32& between(std::size_t layer) { return between_.at(layer); }
    Pcg32& output() { return output_; }

private:
    Pcg32 embedding_;
    std::vector<Pcg32> weight_drop_;
    std::vector<Pcg32> between_;
    Pcg32 output_;
};

struct NamedTensor {
    std::string name;
    ag::Tensor tensor;
};

class LanguageModel {
public:
    struct State {
        std::vector<ag::Tensor> h;  // per layer, (B, hidden)
        std::vector<ag::Tensor> c;
    };

    struct Encoded {
        std::vector<ag::Tensor> outputs;  // top layer, one (B, hidden) per step
        State state;
    };

    struct Forward {
        ag::Tensor logits;  // (B, T, V)
        State state;
    };

    LanguageModel() = default;
    LanguageModel(const LmDims& dims, std::uint64_t seed);

    const LmDims& dims() const { return dims_; }
    std::size_t vocab_size() const { return dims_.vocab; }
    bool tied() const { return decoder_weight_.same_storage(embedding_); }

    ag::Tensor& embedding() { return embedding_; }
    const ag::Tensor& embedding() const { return embedding_; }
    std::vector<LstmLayer>& layers() { return layers_; }
    const std::vector<LstmLayer>& layers() const { return layers_; }
    ag::Tensor& decoder_weight() { return decoder_weight_; }
    const ag::Tensor& decoder_weight() const { return decoder_weight_; }
    ag::Tensor& decoder_bias() { return decoder_bias_; }

    /// Every distinct parameter tensor (the tied decoder weight appears once).
    std::vector<ag::Tensor> parameters() const;
    /// Stable names used by checkpoints.
    std::vector<NamedTensor> named_parameters() const;
    /// Parameter groups from output to input: [top LSTM (+ decoder if
    /// include_decoder), ..., bottom LSTM, embedding].
    std::vector<std::vector<ag::Tensor>> layer_groups(bool include_decoder) const;

    State zero_state(std::size_t batch) const;
    static State detach(const State& s);

    /// Embedding + LSTM stack. `dropout` null means eval mode.
    Encoded encode(ag::Tape& tape, const TokenBatch& batch, const State& state, DropoutStreams* dropout) const;
    /// Decoder over stacked top-layer outputs.
    ag::Tensor decode(ag::Tape& tape, const ag::Tensor& hidden) const;
    Forward forward(ag::Tape& tape, const TokenBatch& batch, const State& state, DropoutStreams* dropout) const;

    /// Deep copy with its own storage (ties preserved).
    LanguageModel clone() const;
    /// Overwrites parameter values with those of a same-shaped model.
    void assign_values(const LanguageModel& other);

private:
    LmDims dims_;
    ag::Tensor embedding_;
    std::vector<LstmLayer> layers_;
    ag::Tensor decoder_weight_;
    ag::Tensor decoder_bias_;
};

struct LmTrainConfig {
    double lr = 0.02;
    std::size_t batch_size = 32;
    std::size_t epochs = 20;
    std::size_t bptt = 70;
    double clip_norm = 5.0;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::Adam;
    std::size_t patience = 0;  // 0 disables early stopping

    void validate() const;
};

struct LmEpoch {
    std::size_t epoch = 0;  // 0 = before training
    double train_loss = 0.0;
    double val_perplexity = 0.0;
};

struct LmTrainResult {
    LanguageModel model;
    std::vector<LmEpoch> trace;
    std::size_t best_epoch = 0;
};

std::string trace_jsonl(std::span<const LmEpoch> trace);

/// Splits a stream into `batch` contiguous rows of equal length (the tail is dropped).
TokenBatch batchify(std::span<const int> stream, std::size_t batch);

/// Number of BPTT windows for one pass over a batchified stream.
std::size_t lm_windows_per_epoch(std::size_t stream_len, std::size_t batch, std::size_t bptt);

/// exp(mean next-token NLL) over the stream in eval mode.
double perplexity(const LanguageModel& model, std::span<const int> stream, std::size_t batch = 32,
                  std::size_t bptt = 70);

/// Per-group learning rates for the step about to be taken.
using GroupLrSchedule = std::function<std::vector<double>(std::size_t step)>;

struct LmTrainReport {
    std::vector<LmEpoch> trace;
    std::size_t best_epoch = 0;
};

/// Truncated-BPTT training over an EOS-separated stream, in place. `groups`
/// must hold tensors of `model`; each step updates group g with lrs(step)[g].
/// Hidden state carries across windows within an epoch. On return the model
/// holds the best-validation snapshot (epoch 0 = the starting weights).
LmTrainReport train_lm(LanguageModel& model, std::span<const int> train_stream, std::span<const int> val_stream,
                       const LmTrainConfig& cfg, const std::vector<std::vector<ag::Tensor>>& groups,
                       const GroupLrSchedule& lrs);

/// Trains a fresh model with a constant learning rate cfg.lr on all parameters.
LmTrainResult pretrain_lm(const LmDims& dims, std::span<const int> train_stream, std::span<const int> val_stream,
                          const LmTrainConfig& cfg);

/// Steps an LSTM one token at a time for sampling.
class TextGenerator {
public:
    explicit TextGenerator(const LanguageModel& model);

    void feed(int token);
    /// softmax(logits / temperature) over the full vocabulary after the last
    /// fed token. temperature 0 yields a one-hot argmax.
    std::vector<double> next_distribution(double temperature) const;
    /// Draws from next_distribution with PAD and BOS excluded.
    int sample(double temperature, Pcg32& rng) const;
    const std::vector<double>& logits() const { return logits_; }

private:
    const LanguageModel* model_;
    LanguageModel::State state_;
    std::vector<double> logits_;
};

struct GenerateOptions {
    std::size_t max_len = 40;  // continuation tokens
    double temperature = 1.0;
    std::uint64_t rng_seed = 0;
};

/// Primes the model with EOS plus the seed words, then samples until EOS or
/// max_len new tokens. Returns seed words followed by the continuation.
std::vector<std::string> generate(const LanguageModel& model, const Vocabulary& vocab,
                                  std::span<const std::string> seed_words, const GenerateOptions& options);

}  // namespace fitcls
