#pragma once

#include "smf/corpus.hpp"
#include "smf/metrics.hpp"
#include "smf/model.hpp"

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace smf {

class LabelError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// -[y log g + (1-y) log(1-g)], g clamped to [1e-12, 1-1e-12]. `g` is a 1x1
/// probability, or the 1x2 class distribution whose second entry is g.
Tensor cross_entropy(const Tensor& g, int label);

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamConfig config;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::size_t step = 0;
};

/// One bias-corrected Adam step over every parameter that requires a
/// gradient. Throws ContractError if such a parameter has no gradient buffer.
void adam_update(std::span<Tensor> params, AdamState& state);

/// Rescales the gradients so their joint L2 norm is at most max_norm. Returns
/// the norm before clipping.
double clip_gradients(std::span<Tensor> params, double max_norm);

struct TrainConfig {
    std::size_t batch_size = 200;
    std::size_t max_epochs = 30;
    std::size_t patience = 3;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    double clip_norm = 0.0; // 0 disables clipping
    bool freeze_embeddings = false;
    AdamConfig adam;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0; // summed over every training instance
    double valid_r2_at_1 = 0.0;
    bool improved = false;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_valid_r2_at_1 = 0.0;
    bool stopped_early = false;
};

std::vector<Tensor> parameters(MatchingModel& model);

/// Probability of label 1 for every instance, in order.
std::vector<double> score_instances(const MatchingModel& model, const EncodedBatch& batch);

/// Validation R_2@1 over groups with exactly one positive.
double validation_r2_at_1(const MatchingModel& model, std::span<const Instance> instances, const EncodedBatch& batch);

/// Summed loss over the batch with gradients accumulated into the model's
/// parameters. Work is split into `workers` contiguous shards whose gradients
/// are added in shard order.
double accumulate_batch_gradients(MatchingModel& model, const EncodedBatch& batch, std::span<const std::size_t> rows,
                                  std::size_t workers);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam with per-epoch validation R_2@1 and early stopping. On
/// return `model` holds the parameters of the best validation epoch.
TrainResult train(MatchingModel& model, std::span<const Instance> training, std::span<const Instance> validation,
                  const Vocabulary& vocab, const TrainConfig& config, const EpochCallback& on_epoch = {});

std::string history_jsonl(const TrainResult& result);

} // namespace smf
