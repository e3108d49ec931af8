#pragma once

#include "smf/corpus.hpp"
#include "smf/layers.hpp"
#include "smf/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace smf {

enum class MatcherKind { scn, san };
enum class HeadMode { last, static_average, dynamic_average };
/// Which similarity levels feed the matcher: words (M1 / T1), segments (M2 / T2) or both.
enum class Channels { both, words, segments };

std::string to_string(MatcherKind kind);
std::string to_string(HeadMode mode);
std::string to_string(Channels channels);
MatcherKind parse_matcher(const std::string& text);
HeadMode parse_head(const std::string& text);
Channels parse_channels(const std::string& text);

struct ModelConfig {
    MatcherKind matcher = MatcherKind::scn;
    HeadMode head = HeadMode::last;
    Channels channels = Channels::both;
    bool single_turn = false;

    std::size_t vocab_size = 0;
    std::size_t embed_dim = 200;         // d
    std::size_t encoder_hidden = 200;    // m
    std::size_t scn_match_dim = 50;      // width of the SCN matching vector
    std::size_t conv_kernels = 8;
    std::size_t conv_window = 3;
    std::size_t pool_window = 3;
    std::size_t conv_layers = 1;
    std::size_t san_hidden = 400;        // aggregation GRU width = SAN matching vector width
    std::size_t accumulator_hidden = 50; // q
    std::size_t max_turns = 10;
    std::size_t max_len = 50;
    bool gru_bias = false;
    double init_scale = 0.1;

    std::size_t match_dim() const { return matcher == MatcherKind::scn ? scn_match_dim : san_hidden; }
    /// Spatial size of the last SCN feature maps, or nullopt if a window does not fit.
    std::optional<std::pair<std::size_t, std::size_t>> scn_feature_size() const;
    EncodeOptions encode_options() const { return {max_turns, max_len, single_turn}; }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// ---- parameters -----------------------------------------------------------------

struct ConvLayer {
    Tensor kernels; // F x C x window x window
    Tensor bias;    // 1 x F
};

struct ScnParams {
    Tensor A;                    // m x m bilinear map for segment similarity
    std::vector<ConvLayer> conv; // alternating with max pooling
    Tensor W_c;                  // flattened feature maps x q_v
    Tensor b_c;                  // 1 x q_v
};

struct SanParams {
    Tensor W_att1, v_att1, b_att1; // d x d, 1 x d, 1 x d
    Tensor W_att2, v_att2, b_att2; // m x m, 1 x m, 1 x m
    GruParams aggregate;           // over interaction rows, hidden = san_hidden
};

struct AccumulatorParams {
    GruParams gru; // input = matching-vector width, hidden = q
};

struct PredictionHead {
    HeadMode mode = HeadMode::last;
    Tensor W_out; // q x 2
    Tensor b_out; // 1 x 2
    Tensor position_weights;    // static: 1 x max_turns, indexed by context slot
    Tensor t_s, W_d1, W_d2, b_d1; // dynamic: q x 1, m x q, q x q, 1 x q
};

// ---- traces --------------------------------------------------------------------

struct TurnTrace {
    std::size_t slot = 0;
    Tensor word_grid;    // SCN: M1 (n_u x n_r); SAN: A1 (n_r x n_u)
    Tensor segment_grid; // SCN: M2; SAN: A2. Undefined when the channel is ablated.
    std::size_t utterance_length = 0;
    std::size_t response_length = 0;
};

struct MatchTrace {
    MatcherKind matcher = MatcherKind::scn;
    std::vector<TurnTrace> turns;
    std::vector<double> update_gate_mean; // per real turn
    std::vector<double> reset_gate_mean;
    std::vector<double> turn_weights;     // dynamic alpha, static w, or one-hot for last
};

// ---- matching operations ---------------------------------------------------------

/// M1[i][j] = e_u_i . e_r_j
Tensor word_similarity_matrix(const Tensor& u_emb, const Tensor& r_emb);
/// M2[i][j] = h_u_i^T A h_r_j
Tensor segment_similarity_matrix(const Tensor& h_u, const Tensor& h_r, const Tensor& A);

struct ScnMatch {
    Tensor vector; // 1 x q_v
    Tensor word_similarity;
    Tensor segment_similarity;
};

/// Convolution + pooling over the selected similarity channels, then the
/// linear projection to the matching vector.
ScnMatch scn_match(const Tensor& u_emb, const Tensor& h_u, const Tensor& r_emb, const Tensor& h_r,
                   const ScnParams& params, const ModelConfig& config);

struct Interaction {
    Tensor rows;      // n_r x width
    Tensor attention; // n_r x n_u, rows sum to 1 over unmasked utterance positions
};

/// Utterance positions >= u_length are masked out of the attention.
Interaction san_word_interaction(const Tensor& u_emb, const Tensor& r_emb, std::size_t u_length,
                                 const SanParams& params);
Interaction san_segment_interaction(const Tensor& h_u, const Tensor& h_r, std::size_t u_length,
                                    const SanParams& params);

struct SanMatch {
    Tensor vector; // 1 x san_hidden
    Interaction words;
    Interaction segments;
};

SanMatch san_match(const Tensor& u_emb, const Tensor& h_u, const Tensor& r_emb, const Tensor& h_r,
                   std::size_t u_length, std::size_t r_length, const SanParams& params, const ModelConfig& config);

struct Accumulation {
    Tensor states; // n x q
    std::vector<double> update_gate_mean;
    std::vector<double> reset_gate_mean;
};

Accumulation accumulate_matching(const std::vector<Tensor>& match_vectors, const AccumulatorParams& params);

/// 1 x 2 class probabilities. `states` holds the accumulator states of the
/// real turns, which occupy context slots [first_slot, first_slot + n).
/// `last_utterance_state` is required by the dynamic head only.
Tensor predict(const Tensor& states, std::size_t first_slot, const Tensor& last_utterance_state,
               const PredictionHead& head, std::vector<double>* turn_weights = nullptr);

// ---- the full model ------------------------------------------------------------

class MatchingModel {
public:
    static MatchingModel create(const ModelConfig& config, Rng& rng);

    const ModelConfig& config() const { return config_; }

    /// Differentiable forward pass; returns 1 x 2 class probabilities.
    Tensor forward(const EncodedInstance& instance, MatchTrace* trace = nullptr) const;
    /// Probability that the response is appropriate, without recording a graph.
    double score(const EncodedInstance& instance, MatchTrace* trace = nullptr) const;

    /// Matching vector for a single (utterance, response) token pair; both
    /// sequences are padded or truncated to max_len.
    Tensor match_vector(std::span<const int> utterance, std::span<const int> response,
                        MatchTrace* trace = nullptr) const;

    /// Visits every parameter tensor in a fixed order with a stable name.
    template <typename F>
    void visit(F&& fn);
    template <typename F>
    void visit(F&& fn) const {
        const_cast<MatchingModel*>(this)->visit([&](const std::string& name, Tensor& t) { fn(name, std::as_const(t)); });
    }

    /// Copy whose parameters share values but accumulate gradients separately.
    MatchingModel shadow() const;
    std::size_t parameter_count() const;

    EmbeddingTable embedding;
    GruParams encoder;
    ScnParams scn;
    SanParams san;
    AccumulatorParams accumulator;
    PredictionHead head;

private:
    struct Encoded {
        Tensor emb;
        Tensor states;
        std::size_t length = 0;
    };
    Encoded encode_sequence(std::span<const int> ids, std::size_t length) const;
    bool needs_segments() const;
    Tensor match(const Encoded& u, const Encoded& r, TurnTrace* turn) const;

    ModelConfig config_;
};

template <typename F>
void MatchingModel::visit(F&& fn) {
    fn(std::string("embedding"), embedding.weights);
    encoder.visit("encoder", fn);
    if (config_.matcher == MatcherKind::scn) {
        fn(std::string("scn.A"), scn.A);
        for (std::size_t l = 0; l < scn.conv.size(); ++l) {
            fn("scn.conv" + std::to_string(l) + ".kernels", scn.conv[l].kernels);
            fn("scn.conv" + std::to_string(l) + ".bias", scn.conv[l].bias);
        }
        fn(std::string("scn.W_c"), scn.W_c);
        fn(std::string("scn.b_c"), scn.b_c);
    } else {
        fn(std::string("san.W_att1"), san.W_att1);
        fn(std::string("san.v_att1"), san.v_att1);
        fn(std::string("san.b_att1"), san.b_att1);
        fn(std::string("san.W_att2"), san.W_att2);
        fn(std::string("san.v_att2"), san.v_att2);
        fn(std::string("san.b_att2"), san.b_att2);
        san.aggregate.visit("san.aggregate", fn);
    }
    accumulator.gru.visit("accumulator", fn);
    fn(std::string("head.W_out"), head.W_out);
    fn(std::string("head.b_out"), head.b_out);
    if (head.mode == HeadMode::static_average) {
        fn(std::string("head.position_weights"), head.position_weights);
    } else if (head.mode == HeadMode::dynamic_average) {
        fn(std::string("head.t_s"), head.t_s);
        fn(std::string("head.W_d1"), head.W_d1);
        fn(std::string("head.W_d2"), head.W_d2);
        fn(std::string("head.b_d1"), head.b_d1);
    }
}

} // namespace smf
