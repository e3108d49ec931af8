#include "smf/model.hpp"

#include "smf/errors.hpp"

#include <fmt/format.h>

#include <numeric>

namespace smf {

std::string to_string(MatcherKind kind) { return kind == MatcherKind::scn ? "scn" : "san"; }

std::string to_string(HeadMode mode) {
    switch (mode) {
    case HeadMode::last:
        return "last";
    case HeadMode::static_average:
        return "static";
    case HeadMode::dynamic_average:
        return "dynamic";
    }
    return "?";
}

std::string to_string(Channels channels) {
    switch (channels) {
    case Channels::both:
        return "both";
    case Channels::words:
        return "words";
    case Channels::segments:
        return "segments";
    }
    return "?";
}

MatcherKind parse_matcher(const std::string& text) {
    if (text == "scn") {
        return MatcherKind::scn;
    }
    if (text == "san") {
        return MatcherKind::san;
    }
    throw ConfigError(fmt::format("unknown matcher '{}' (expected scn or san)", text));
}

HeadMode parse_head(const std::string& text) {
    if (text == "last") {
        return HeadMode::last;
    }
    if (text == "static") {
        return HeadMode::static_average;
    }
    if (text == "dynamic") {
        return HeadMode::dynamic_average;
    }
    throw ConfigError(fmt::format("unknown head '{}' (expected last, static or dynamic)", text));
}

Channels parse_channels(const std::string& text) {
    if (text == "both") {
        return Channels::both;
    }
    if (text == "words") {
        return Channels::words;
    }
    if (text == "segments") {
        return Channels::segments;
    }
    throw ConfigError(fmt::format("unknown channel setting '{}' (expected both, words or segments)", text));
}

std::optional<std::pair<std::size_t, std::size_t>> ModelConfig::scn_feature_size() const {
    std::size_t h = max_len;
    std::size_t w = max_len;
    for (std::size_t l = 0; l < conv_layers; ++l) {
        if (conv_window == 0 || pool_window == 0 || conv_window > h || conv_window > w) {
            return std::nullopt;
        }
        h = (h - conv_window + 1 + pool_window - 1) / pool_window;
        w = (w - conv_window + 1 + pool_window - 1) / pool_window;
    }
    return std::make_pair(h, w);
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) {
            throw ConfigError(fmt::format("{} must be positive", name));
        }
    };
    if (vocab_size < 2) {
        throw ConfigError("vocab_size must cover at least the pad and unk tokens");
    }
    positive(embed_dim, "embed_dim");
    positive(encoder_hidden, "encoder_hidden");
    positive(accumulator_hidden, "accumulator_hidden");
    positive(max_turns, "max_turns");
    positive(max_len, "max_len");
    if (matcher == MatcherKind::scn) {
        positive(scn_match_dim, "scn_match_dim");
        positive(conv_kernels, "conv_kernels");
        positive(conv_layers, "conv_layers");
        if (!scn_feature_size()) {
            throw ConfigError(fmt::format("conv window {} / pool window {} over {} layers do not fit max_len {}",
                                          conv_window, pool_window, conv_layers, max_len));
        }
    } else {
        positive(san_hidden, "san_hidden");
    }
}

// ---- matching primitives -------------------------------------------------------

Tensor word_similarity_matrix(const Tensor& u_emb, const Tensor& r_emb) {
    if (u_emb.cols() != r_emb.cols()) {
        throw ShapeError(fmt::format("word_similarity_matrix: embedding widths differ, {} vs {}",
                                     shape_str(u_emb.shape()), shape_str(r_emb.shape())));
    }
    return matmul(u_emb, transpose(r_emb));
}

Tensor segment_similarity_matrix(const Tensor& h_u, const Tensor& h_r, const Tensor& A) {
    if (A.dim() != 2 || A.rows() != h_u.cols() || A.cols() != h_r.cols()) {
        throw ShapeError(fmt::format("segment_similarity_matrix: A {} does not fit states {} and {}",
                                     shape_str(A.shape()), shape_str(h_u.shape()), shape_str(h_r.shape())));
    }
    return matmul(matmul(h_u, A), transpose(h_r));
}

ScnMatch scn_match(const Tensor& u_emb, const Tensor& h_u, const Tensor& r_emb, const Tensor& h_r,
                   const ScnParams& params, const ModelConfig& config) {
    ScnMatch out;
    std::vector<Tensor> channels;
    if (config.channels != Channels::segments) {
        out.word_similarity = word_similarity_matrix(u_emb, r_emb);
        channels.push_back(out.word_similarity);
    }
    if (config.channels != Channels::words) {
        out.segment_similarity = segment_similarity_matrix(h_u, h_r, params.A);
        channels.push_back(out.segment_similarity);
    }
    const std::size_t rows = channels.front().rows();
    const std::size_t cols = channels.front().cols();
    Tensor maps = reshape(concat_rows(channels), {channels.size(), rows, cols});
    for (const auto& layer : params.conv) {
        maps = conv2d(maps, layer.kernels, layer.bias);
        maps = maxpool2d(maps, config.pool_window, config.pool_window);
    }
    const Tensor flat = reshape(maps, {1, maps.size()});
    if (flat.cols() != params.W_c.rows()) {
        throw ShapeError(fmt::format("scn_match: {} pooled features but projection expects {}", flat.cols(),
                                     params.W_c.rows()));
    }
    out.vector = add(matmul(flat, params.W_c), params.b_c);
    return out;
}

namespace {

std::vector<bool> prefix_mask(std::size_t rows, std::size_t cols, std::size_t valid) {
    std::vector<bool> mask(rows * cols, false);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < std::min(valid, cols); ++j) {
            mask[i * cols + j] = true;
        }
    }
    return mask;
}

Interaction attend(const Tensor& u, const Tensor& r, std::size_t u_length, const Tensor& W, const Tensor& v,
                   const Tensor& b, const char* op) {
    if (u.cols() != r.cols() || W.dim() != 2 || W.rows() != u.cols() || W.cols() != r.cols()) {
        throw ShapeError(fmt::format("{}: attention map {} does not fit {} and {}", op, shape_str(W.shape()),
                                     shape_str(u.shape()), shape_str(r.shape())));
    }
    // scores[i][j] = u_j^T W r_i
    const Tensor scores = transpose(matmul(matmul(u, W), transpose(r)));
    const Tensor logits = additive_score(scores, b, v);
    Interaction out;
    out.attention = masked_softmax(logits, prefix_mask(r.rows(), u.rows(), u_length));
    out.rows = hadamard(matmul(out.attention, u), r);
    return out;
}

} // namespace

Interaction san_word_interaction(const Tensor& u_emb, const Tensor& r_emb, std::size_t u_length,
                                 const SanParams& params) {
    return attend(u_emb, r_emb, u_length, params.W_att1, params.v_att1, params.b_att1, "san_word_interaction");
}

Interaction san_segment_interaction(const Tensor& h_u, const Tensor& h_r, std::size_t u_length,
                                    const SanParams& params) {
    return attend(h_u, h_r, u_length, params.W_att2, params.v_att2, params.b_att2, "san_segment_interaction");
}

SanMatch san_match(const Tensor& u_emb, const Tensor& h_u, const Tensor& r_emb, const Tensor& h_r,
                   std::size_t u_length, std::size_t r_length, const SanParams& params, const ModelConfig& config) {
    SanMatch out;
    Tensor rows;
    if (config.channels != Channels::segments) {
        out.words = san_word_interaction(u_emb, r_emb, u_length, params);
        rows = out.words.rows;
    }
    if (config.channels != Channels::words) {
        out.segments = san_segment_interaction(h_u, h_r, u_length, params);
        rows = rows.defined() ? concat_cols(rows, out.segments.rows) : out.segments.rows;
    }
    if (r_length == 0) {
        out.vector = Tensor::zeros({1, params.aggregate.hidden()});
        return out;
    }
    const Tensor states = gru_forward(rows, params.aggregate);
    out.vector = slice_rows(states, r_length - 1, 1);
    return out;
}

Accumulation accumulate_matching(const std::vector<Tensor>& match_vectors, const AccumulatorParams& params) {
    if (match_vectors.empty()) {
        throw ContractError("accumulate_matching: at least one matching vector is required");
    }
    GruTrace trace;
    Accumulation out;
    out.states = gru_forward(concat_rows(match_vectors), params.gru, {}, &trace);
    auto mean = [](const Tensor& t) {
        const auto d = t.data();
        return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    };
    for (std::size_t i = 0; i < trace.update_gates.size(); ++i) {
        out.update_gate_mean.push_back(mean(trace.update_gates[i]));
        out.reset_gate_mean.push_back(mean(trace.reset_gates[i]));
    }
    return out;
}

Tensor predict(const Tensor& states, std::size_t first_slot, const Tensor& last_utterance_state,
               const PredictionHead& head, std::vector<double>* turn_weights) {
    const std::size_t n = states.rows();
    if (n == 0) {
        throw ContractError("predict: no accumulator states");
    }
    if (!head.W_out.defined() || !head.b_out.defined()) {
        throw ConfigError("predict: output map is missing");
    }
    Tensor pooled;
    switch (head.mode) {
    case HeadMode::last:
        pooled = slice_rows(states, n - 1, 1);
        if (turn_weights) {
            turn_weights->assign(n, 0.0);
            turn_weights->back() = 1.0;
        }
        break;
    case HeadMode::static_average: {
        if (!head.position_weights.defined()) {
            throw ConfigError("predict: static head requires position weights");
        }
        if (first_slot + n > head.position_weights.cols()) {
            throw ShapeError(fmt::format("predict: slots [{}, {}) exceed {} position weights", first_slot,
                                         first_slot + n, head.position_weights.cols()));
        }
        const Tensor w = slice_cols(head.position_weights, first_slot, n);
        pooled = matmul(w, states);
        if (turn_weights) {
            turn_weights->assign(w.data().begin(), w.data().end());
        }
        break;
    }
    case HeadMode::dynamic_average: {
        if (!head.t_s.defined() || !head.W_d1.defined() || !head.W_d2.defined() || !head.b_d1.defined()) {
            throw ConfigError("predict: dynamic head parameters are missing");
        }
        if (!last_utterance_state.defined()) {
            throw ConfigError("predict: dynamic head requires the final utterance state");
        }
        const Tensor context = add(matmul(last_utterance_state, head.W_d1), head.b_d1);
        const Tensor hidden = tanh(add_row(matmul(states, head.W_d2), context));
        const Tensor alpha = softmax_rows(transpose(matmul(hidden, head.t_s)));
        pooled = matmul(alpha, states);
        if (turn_weights) {
            turn_weights->assign(alpha.data().begin(), alpha.data().end());
        }
        break;
    }
    }
    return softmax_rows(add(matmul(pooled, head.W_out), head.b_out));
}

// ---- MatchingModel ---------------------------------------------------------------

namespace {

Tensor uniform(Shape shape, Rng& rng, double scale) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    fill_uniform(t, rng, scale);
    return t;
}

} // namespace

MatchingModel MatchingModel::create(const ModelConfig& config, Rng& rng) {
    config.validate();
    const double s = config.init_scale;
    const std::size_t d = config.embed_dim;
    const std::size_t m = config.encoder_hidden;
    const std::size_t q = config.accumulator_hidden;

    MatchingModel model;
    model.config_ = config;
    model.embedding = EmbeddingTable::random(config.vocab_size, d, rng, s);
    model.encoder = GruParams::random(d, m, rng, s, config.gru_bias);

    if (config.matcher == MatcherKind::scn) {
        model.scn.A = uniform({m, m}, rng, s);
        std::size_t in_channels = config.channels == Channels::both ? 2 : 1;
        for (std::size_t l = 0; l < config.conv_layers; ++l) {
            ConvLayer layer;
            layer.kernels = uniform({config.conv_kernels, in_channels, config.conv_window, config.conv_window}, rng, s);
            layer.bias = Tensor::zeros({1, config.conv_kernels}, true);
            model.scn.conv.push_back(std::move(layer));
            in_channels = config.conv_kernels;
        }
        const auto [fh, fw] = *config.scn_feature_size();
        model.scn.W_c = uniform({config.conv_kernels * fh * fw, config.scn_match_dim}, rng, s);
        model.scn.b_c = Tensor::zeros({1, config.scn_match_dim}, true);
    } else {
        model.san.W_att1 = uniform({d, d}, rng, s);
        model.san.v_att1 = uniform({1, d}, rng, s);
        model.san.b_att1 = Tensor::zeros({1, d}, true);
        model.san.W_att2 = uniform({m, m}, rng, s);
        model.san.v_att2 = uniform({1, m}, rng, s);
        model.san.b_att2 = Tensor::zeros({1, m}, true);
        const std::size_t width = config.channels == Channels::both ? d + m : config.channels == Channels::words ? d : m;
        model.san.aggregate = GruParams::random(width, config.san_hidden, rng, s, config.gru_bias);
    }

    model.accumulator.gru = GruParams::random(config.match_dim(), q, rng, s, config.gru_bias);

    model.head.mode = config.head;
    model.head.W_out = uniform({q, 2}, rng, s);
    model.head.b_out = Tensor::zeros({1, 2}, true);
    if (config.head == HeadMode::static_average) {
        // equal weights to start; small random ones of mixed sign cancel each other out
        model.head.position_weights = Tensor::full({1, config.max_turns}, 1.0, true);
    } else if (config.head == HeadMode::dynamic_average) {
        model.head.t_s = uniform({q, 1}, rng, s);
        model.head.W_d1 = uniform({m, q}, rng, s);
        model.head.W_d2 = uniform({q, q}, rng, s);
        model.head.b_d1 = Tensor::zeros({1, q}, true);
    }
    return model;
}

bool MatchingModel::needs_segments() const {
    return config_.channels != Channels::words || config_.head == HeadMode::dynamic_average;
}

MatchingModel::Encoded MatchingModel::encode_sequence(std::span<const int> ids, std::size_t length) const {
    Encoded e;
    e.length = length;
    // SCN needs fixed max_len x max_len similarity grids, so pads are encoded too;
    // SAN masks pads and only touches real positions.
    const auto used = config_.matcher == MatcherKind::scn ? ids : ids.first(length);
    e.emb = embed(used, embedding);
    if (needs_segments()) {
        e.states = gru_forward(e.emb, encoder);
    }
    return e;
}

Tensor MatchingModel::match(const Encoded& u, const Encoded& r, TurnTrace* turn) const {
    if (config_.matcher == MatcherKind::scn) {
        ScnMatch m = scn_match(u.emb, u.states, r.emb, r.states, scn, config_);
        if (turn) {
            turn->word_grid = m.word_similarity.defined() ? m.word_similarity.detach() : Tensor{};
            turn->segment_grid = m.segment_similarity.defined() ? m.segment_similarity.detach() : Tensor{};
        }
        return m.vector;
    }
    SanMatch m = san_match(u.emb, u.states, r.emb, r.states, u.length, r.length, san, config_);
    if (turn) {
        turn->word_grid = m.words.attention.defined() ? m.words.attention.detach() : Tensor{};
        turn->segment_grid = m.segments.attention.defined() ? m.segments.attention.detach() : Tensor{};
    }
    return m.vector;
}

Tensor MatchingModel::forward(const EncodedInstance& instance, MatchTrace* trace) const {
    if (instance.max_turns != config_.max_turns || instance.max_len != config_.max_len) {
        throw ShapeError(fmt::format("instance encoded as {}x{} but model expects {}x{}", instance.max_turns,
                                     instance.max_len, config_.max_turns, config_.max_len));
    }
    if (instance.turns == 0) {
        throw ContractError("forward: instance has no real turns");
    }
    const Encoded response = encode_sequence(instance.response, instance.response_length);
    if (trace) {
        *trace = MatchTrace{};
        trace->matcher = config_.matcher;
    }
    std::vector<Tensor> vectors;
    Encoded last;
    for (std::size_t slot = instance.first_real_slot(); slot < instance.max_turns; ++slot) {
        Encoded u = encode_sequence(instance.utterance(slot), instance.utterance_length(slot));
        TurnTrace* turn = nullptr;
        if (trace) {
            trace->turns.push_back({slot, {}, {}, u.length, response.length});
            turn = &trace->turns.back();
        }
        vectors.push_back(match(u, response, turn));
        last = std::move(u);
    }
    Accumulation acc = accumulate_matching(vectors, accumulator);
    Tensor last_state;
    if (config_.head == HeadMode::dynamic_average) {
        last_state = last.length > 0 ? slice_rows(last.states, last.length - 1, 1)
                                     : Tensor::zeros({1, config_.encoder_hidden});
    }
    if (trace) {
        trace->update_gate_mean = acc.update_gate_mean;
        trace->reset_gate_mean = acc.reset_gate_mean;
    }
    return predict(acc.states, instance.first_real_slot(), last_state, head, trace ? &trace->turn_weights : nullptr);
}

double MatchingModel::score(const EncodedInstance& instance, MatchTrace* trace) const {
    NoGradGuard no_grad;
    return forward(instance, trace)[1];
}

Tensor MatchingModel::match_vector(std::span<const int> utterance, std::span<const int> response,
                                   MatchTrace* trace) const {
    const std::size_t L = config_.max_len;
    auto pad = [L](std::span<const int> ids) {
        const auto kept = ids.subspan(ids.size() - std::min(L, ids.size()));
        std::vector<int> out(L, kPadId);
        std::copy(kept.begin(), kept.end(), out.begin());
        return std::make_pair(out, kept.size());
    };
    const auto [u_ids, u_len] = pad(utterance);
    const auto [r_ids, r_len] = pad(response);
    const Encoded u = encode_sequence(u_ids, u_len);
    const Encoded r = encode_sequence(r_ids, r_len);
    TurnTrace turn{0, {}, {}, u_len, r_len};
    Tensor v = match(u, r, trace ? &turn : nullptr);
    if (trace) {
        *trace = MatchTrace{};
        trace->matcher = config_.matcher;
        trace->turns.push_back(std::move(turn));
    }
    return v;
}

MatchingModel MatchingModel::shadow() const {
    MatchingModel copy = *this;
    copy.visit([](const std::string&, Tensor& t) { t = t.shadow(); });
    return copy;
}

std::size_t MatchingModel::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

} // namespace smf
