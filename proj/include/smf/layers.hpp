#pragma once

#include "smf/tensor.hpp"

#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace smf {

using Rng = std::mt19937_64;

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;

class VocabularyError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Fills `t` with values drawn uniformly from [-scale, scale].
void fill_uniform(Tensor& t, Rng& rng, double scale);

struct EmbeddingTable {
    Tensor weights; // vocab_size x d; row pad_id is all zeros
    int pad_id = kPadId;

    std::size_t vocab_size() const { return weights.rows(); }
    std::size_t dim() const { return weights.cols(); }

    static EmbeddingTable random(std::size_t vocab_size, std::size_t dim, Rng& rng, double scale = 0.1);
};

/// Row i is the embedding of ids[i]; pad ids map to zero rows.
Tensor embed(std::span<const int> ids, const EmbeddingTable& table);

/// GRU weights in row-vector convention: h_t = f(x_t W + h_{t-1} U).
/// Biases stay undefined unless explicitly requested.
struct GruParams {
    Tensor W_z, W_r, W_h; // input_dim x hidden
    Tensor U_z, U_r, U_h; // hidden x hidden
    Tensor b_z, b_r, b_h; // 1 x hidden, optional

    std::size_t input_dim() const { return W_z.rows(); }
    std::size_t hidden() const { return W_z.cols(); }
    bool has_bias() const { return b_z.defined(); }

    static GruParams random(std::size_t input_dim, std::size_t hidden, Rng& rng, double scale = 0.1,
                            bool with_bias = false);

    template <typename F>
    void visit(const std::string& prefix, F&& fn) {
        fn(prefix + ".W_z", W_z);
        fn(prefix + ".W_r", W_r);
        fn(prefix + ".W_h", W_h);
        fn(prefix + ".U_z", U_z);
        fn(prefix + ".U_r", U_r);
        fn(prefix + ".U_h", U_h);
        if (has_bias()) {
            fn(prefix + ".b_z", b_z);
            fn(prefix + ".b_r", b_r);
            fn(prefix + ".b_h", b_h);
        }
    }
};

/// Per-step gate activations, each 1 x hidden.
struct GruTrace {
    std::vector<Tensor> update_gates;
    std::vector<Tensor> reset_gates;
};

/// Runs the recurrence over the rows of `inputs` (seq_len x input_dim) and
/// returns every hidden state (seq_len x hidden). h0 defaults to zeros.
Tensor gru_forward(const Tensor& inputs, const GruParams& params, const Tensor& h0 = {}, GruTrace* trace = nullptr);

} // namespace smf
