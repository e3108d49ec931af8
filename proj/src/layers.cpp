#include "smf/layers.hpp"

#include <fmt/format.h>

namespace smf {

void fill_uniform(Tensor& t, Rng& rng, double scale) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    for (double& x : t.mutable_data()) {
        x = dist(rng);
    }
}

EmbeddingTable EmbeddingTable::random(std::size_t vocab_size, std::size_t dim, Rng& rng, double scale) {
    EmbeddingTable table;
    table.weights = Tensor::zeros({vocab_size, dim}, true);
    fill_uniform(table.weights, rng, scale);
    if (vocab_size > static_cast<std::size_t>(table.pad_id)) {
        auto row = table.weights.mutable_data().subspan(static_cast<std::size_t>(table.pad_id) * dim, dim);
        std::fill(row.begin(), row.end(), 0.0);
    }
    return table;
}

Tensor embed(std::span<const int> ids, const EmbeddingTable& table) {
    for (const int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= table.vocab_size()) {
            throw VocabularyError(fmt::format("token id {} outside vocabulary of {}", id, table.vocab_size()));
        }
    }
    return gather_rows(table.weights, ids, table.pad_id);
}

GruParams GruParams::random(std::size_t input_dim, std::size_t hidden, Rng& rng, double scale, bool with_bias) {
    GruParams p;
    for (Tensor* w : {&p.W_z, &p.W_r, &p.W_h}) {
        *w = Tensor::zeros({input_dim, hidden}, true);
        fill_uniform(*w, rng, scale);
    }
    for (Tensor* u : {&p.U_z, &p.U_r, &p.U_h}) {
        *u = Tensor::zeros({hidden, hidden}, true);
        fill_uniform(*u, rng, scale);
    }
    if (with_bias) {
        p.b_z = Tensor::zeros({1, hidden}, true);
        p.b_r = Tensor::zeros({1, hidden}, true);
        p.b_h = Tensor::zeros({1, hidden}, true);
    }
    return p;
}

Tensor gru_forward(const Tensor& inputs, const GruParams& params, const Tensor& h0, GruTrace* trace) {
    const std::size_t d = params.input_dim();
    const std::size_t m = params.hidden();
    if (inputs.dim() != 2 || inputs.cols() != d) {
        throw ShapeError(fmt::format("gru_forward: inputs {} do not match input width {}", shape_str(inputs.shape()), d));
    }
    for (const Tensor* u : {&params.U_z, &params.U_r, &params.U_h}) {
        if (u->rows() != m || u->cols() != m) {
            throw ShapeError(fmt::format("gru_forward: recurrent map {} is not {}x{}", shape_str(u->shape()), m, m));
        }
    }
    for (const Tensor* w : {&params.W_r, &params.W_h}) {
        if (w->rows() != d || w->cols() != m) {
            throw ShapeError(fmt::format("gru_forward: input map {} is not {}x{}", shape_str(w->shape()), d, m));
        }
    }
    Tensor h = h0.defined() ? h0 : Tensor::zeros({1, m});
    if (h.size() != m) {
        throw ShapeError(fmt::format("gru_forward: initial state {} is not width {}", shape_str(h.shape()), m));
    }
    const std::size_t steps = inputs.rows();
    if (steps == 0) {
        return Tensor::zeros({0, m});
    }

    Tensor xz = matmul(inputs, params.W_z);
    Tensor xr = matmul(inputs, params.W_r);
    Tensor xh = matmul(inputs, params.W_h);
    if (params.has_bias()) {
        xz = add_row(xz, params.b_z);
        xr = add_row(xr, params.b_r);
        xh = add_row(xh, params.b_h);
    }

    std::vector<Tensor> states;
    states.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
        const Tensor z = sigmoid(add(slice_rows(xz, t, 1), matmul(h, params.U_z)));
        const Tensor r = sigmoid(add(slice_rows(xr, t, 1), matmul(h, params.U_r)));
        const Tensor candidate = tanh(add(slice_rows(xh, t, 1), matmul(hadamard(r, h), params.U_h)));
        // z * candidate + (1 - z) * h
        h = add(h, hadamard(z, sub(candidate, h)));
        states.push_back(h);
        if (trace) {
            trace->update_gates.push_back(z);
            trace->reset_gates.push_back(r);
        }
    }
    return concat_rows(states);
}

} // namespace smf
