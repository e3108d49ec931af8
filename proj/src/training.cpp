#include "smf/training.hpp"

#include "smf/errors.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

namespace smf {

Tensor cross_entropy(const Tensor& g, int label) {
    if (label != 0 && label != 1) {
        throw LabelError(fmt::format("label must be 0 or 1, got {}", label));
    }
    if (g.size() == 2) {
        return binary_cross_entropy(element(g, 1), label);
    }
    return binary_cross_entropy(g, label);
}

void adam_update(std::span<Tensor> params, AdamState& state) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), 0.0);
            state.v.emplace_back(p.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw ContractError(fmt::format("adam_update: state tracks {} parameters, got {}", state.m.size(),
                                        params.size()));
    }
    const auto& c = state.config;
    ++state.step;
    const double correct1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double correct2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (!p.requires_grad()) {
            continue;
        }
        if (!p.has_grad()) {
            throw ContractError(fmt::format("adam_update: parameter {} has no gradient", i));
        }
        const auto g = p.grad();
        auto theta = p.mutable_data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < theta.size(); ++k) {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
            const double m_hat = m[k] / correct1;
            const double v_hat = v[k] / correct2;
            theta[k] -= c.lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
        }
    }
}

double clip_gradients(std::span<Tensor> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (p.has_grad()) {
            for (double g : p.grad()) {
                sq += g * g;
            }
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double factor = max_norm / norm;
        for (auto& p : params) {
            if (p.has_grad()) {
                for (double& g : p.mutable_grad()) {
                    g *= factor;
                }
            }
        }
    }
    return norm;
}

void TrainConfig::validate() const {
    if (batch_size == 0) {
        throw ConfigError("batch size must be at least 1");
    }
    if (patience == 0) {
        throw ConfigError("patience must be at least 1");
    }
    if (max_epochs == 0) {
        throw ConfigError("max epochs must be at least 1");
    }
    if (workers == 0) {
        throw ConfigError("workers must be at least 1");
    }
    if (adam.lr < 0.0 || adam.epsilon <= 0.0 || adam.beta1 < 0.0 || adam.beta1 >= 1.0 || adam.beta2 < 0.0 ||
        adam.beta2 >= 1.0) {
        throw ConfigError("invalid Adam settings");
    }
}

std::vector<Tensor> parameters(MatchingModel& model) {
    std::vector<Tensor> out;
    model.visit([&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
}

std::vector<double> score_instances(const MatchingModel& model, const EncodedBatch& batch) {
    std::vector<double> scores(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        scores[i] = model.score(batch.instance(i));
    }
    return scores;
}

double validation_r2_at_1(const MatchingModel& model, std::span<const Instance> instances, const EncodedBatch& batch) {
    const auto scores = score_instances(model, batch);
    const auto r = mean_recall_n_at_k(build_run(instances, scores), 2, 1);
    if (!r) {
        throw DataError("validation set has no group with one positive and at least two candidates");
    }
    return *r;
}

namespace {

double shard_loss(const MatchingModel& model, const EncodedBatch& batch, std::span<const std::size_t> rows) {
    double total = 0.0;
    for (std::size_t row : rows) {
        const EncodedInstance inst = batch.instance(row);
        // one graph per instance keeps memory flat; gradients of a sum add up
        const Tensor loss = cross_entropy(model.forward(inst), inst.label);
        backward(loss);
        total += loss.item();
    }
    return total;
}

} // namespace

double accumulate_batch_gradients(MatchingModel& model, const EncodedBatch& batch, std::span<const std::size_t> rows,
                                  std::size_t workers) {
    workers = std::max<std::size_t>(1, std::min(workers, rows.size()));
    if (workers == 1) {
        return shard_loss(model, batch, rows);
    }
    std::vector<MatchingModel> shadows;
    for (std::size_t w = 0; w < workers; ++w) {
        shadows.push_back(model.shadow());
    }
    std::vector<double> losses(workers, 0.0);
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    const std::size_t per = (rows.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = std::min(rows.size(), w * per);
        const std::size_t end = std::min(rows.size(), begin + per);
        threads.emplace_back([&, w, begin, end] {
            try {
                losses[w] = shard_loss(shadows[w], batch, rows.subspan(begin, end - begin));
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    auto params = parameters(model);
    double total = 0.0;
    for (std::size_t w = 0; w < workers; ++w) {
        total += losses[w];
        const auto shard = parameters(shadows[w]);
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!shard[i].has_grad()) {
                continue;
            }
            const auto src = shard[i].grad();
            auto dst = params[i].mutable_grad();
            for (std::size_t k = 0; k < dst.size(); ++k) {
                dst[k] += src[k];
            }
        }
    }
    return total;
}

TrainResult train(MatchingModel& model, std::span<const Instance> training, std::span<const Instance> validation,
                  const Vocabulary& vocab, const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (training.empty()) {
        throw DataError("training set is empty");
    }
    if (validation.empty()) {
        throw DataError("validation set is empty");
    }
    const EncodeOptions options = model.config().encode_options();
    const EncodedBatch train_batch = encode_batch(training, vocab, options);
    const EncodedBatch valid_batch = encode_batch(validation, vocab, options);

    auto params = parameters(model);
    if (config.freeze_embeddings) {
        model.embedding.weights.set_requires_grad(false);
    }
    AdamState adam{config.adam, {}, {}, 0};
    Rng rng(config.seed);

    std::vector<std::vector<double>> best(params.size());
    auto snapshot = [&] {
        for (std::size_t i = 0; i < params.size(); ++i) {
            best[i].assign(params[i].data().begin(), params[i].data().end());
        }
    };

    TrainResult result;
    std::size_t since_best = 0;
    std::vector<std::size_t> order(train_batch.size());
    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t n = std::min(config.batch_size, order.size() - start);
            for (auto& p : params) {
                // allocate as well as clear, so parameters a configuration leaves unused still carry a gradient
                std::fill(p.mutable_grad().begin(), p.mutable_grad().end(), 0.0);
            }
            epoch_loss += accumulate_batch_gradients(model, train_batch, std::span(order).subspan(start, n),
                                                     config.workers);
            if (config.clip_norm > 0.0) {
                clip_gradients(params, config.clip_norm);
            }
            adam_update(params, adam);
            if (!std::isfinite(epoch_loss)) {
                throw NumericError(fmt::format("training loss became non-finite in epoch {}", epoch));
            }
        }
        EpochRecord record{epoch, epoch_loss, validation_r2_at_1(model, validation, valid_batch), false};
        if (epoch == 1 || record.valid_r2_at_1 > result.best_valid_r2_at_1) {
            record.improved = true;
            result.best_epoch = epoch;
            result.best_valid_r2_at_1 = record.valid_r2_at_1;
            since_best = 0;
            snapshot();
        } else {
            ++since_best;
        }
        result.history.push_back(record);
        if (on_epoch) {
            on_epoch(record);
        }
        if (since_best >= config.patience) {
            result.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::copy(best[i].begin(), best[i].end(), params[i].mutable_data().begin());
    }
    if (config.freeze_embeddings) {
        model.embedding.weights.set_requires_grad(true);
    }
    return result;
}

std::string history_jsonl(const TrainResult& result) {
    std::string out;
    for (const auto& r : result.history) {
        nlohmann::json j = {{"epoch", r.epoch},
                            {"train_loss", r.train_loss},
                            {"valid_r2_at_1", r.valid_r2_at_1},
                            {"improved", r.improved}};
        out += j.dump() + "\n";
    }
    return out;
}

} // namespace smf
