#include "smf/grad_suite.hpp"

#include "smf/layers.hpp"
#include "smf/model.hpp"
#include "smf/training.hpp"

#include <fmt/format.h>

#include <functional>

namespace smf {

namespace {

struct OpCase {
    std::string name;
    std::vector<Shape> shapes;
    // builds a scalar from the inputs; `w` holds fixed weights for a random projection
    std::function<Tensor(const std::vector<Tensor>&)> fn;
};

Tensor random_tensor(const Shape& shape, Rng& rng, bool grad) {
    Tensor t = Tensor::zeros(shape, grad);
    fill_uniform(t, rng, 1.0);
    return t;
}

// Weighted sum with weights fixed per call site, so the upstream gradient is
// not uniform and errors in individual coordinates are visible.
Tensor project(const Tensor& t) {
    std::vector<double> w(t.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = 0.3 + 0.7 * static_cast<double>((i * 7 + 3) % 11) / 10.0;
    }
    return sum(hadamard(t, Tensor(t.shape(), std::move(w))));
}

std::vector<OpCase> op_cases() {
    std::vector<OpCase> cases;
    auto unary = [&](std::string name, Shape s, std::function<Tensor(const Tensor&)> f) {
        cases.push_back({std::move(name), {std::move(s)}, [f](const std::vector<Tensor>& x) { return project(f(x[0])); }});
    };
    auto binary = [&](std::string name, Shape a, Shape b, std::function<Tensor(const Tensor&, const Tensor&)> f) {
        cases.push_back({std::move(name), {std::move(a), std::move(b)},
                         [f](const std::vector<Tensor>& x) { return project(f(x[0], x[1])); }});
    };
    binary("matmul", {2, 3}, {3, 4}, [](const Tensor& a, const Tensor& b) { return matmul(a, b); });
    binary("add", {2, 3}, {2, 3}, [](const Tensor& a, const Tensor& b) { return add(a, b); });
    binary("sub", {2, 3}, {2, 3}, [](const Tensor& a, const Tensor& b) { return sub(a, b); });
    binary("hadamard", {2, 3}, {2, 3}, [](const Tensor& a, const Tensor& b) { return hadamard(a, b); });
    unary("scale", {2, 3}, [](const Tensor& a) { return scale(a, -1.7); });
    binary("add_row", {3, 4}, {1, 4}, [](const Tensor& a, const Tensor& b) { return add_row(a, b); });
    unary("sigmoid", {2, 3}, [](const Tensor& a) { return sigmoid(a); });
    unary("tanh", {2, 3}, [](const Tensor& a) { return tanh(a); });
    unary("relu", {2, 3}, [](const Tensor& a) { return relu(a); });
    unary("masked_softmax", {3, 4}, [](const Tensor& a) {
        const std::vector<bool> mask = {true, true, false, true, false, false, false, false, true, true, true, true};
        return masked_softmax(a, mask);
    });
    unary("softmax_rows", {2, 4}, [](const Tensor& a) { return softmax_rows(a); });
    cases.push_back({"conv2d", {{2, 5, 5}, {3, 2, 2, 2}, {1, 3}},
                     [](const std::vector<Tensor>& x) { return project(conv2d(x[0], x[1], x[2])); }});
    unary("maxpool2d", {2, 5, 5}, [](const Tensor& a) { return maxpool2d(a, 2, 2); });
    unary("sum", {2, 3}, [](const Tensor& a) { return scale(sum(a), 0.5); });
    unary("transpose", {2, 3}, [](const Tensor& a) { return transpose(a); });
    unary("reshape", {2, 6}, [](const Tensor& a) { return reshape(a, {3, 4}); });
    unary("slice_rows", {4, 3}, [](const Tensor& a) { return slice_rows(a, 1, 2); });
    unary("slice_cols", {3, 4}, [](const Tensor& a) { return slice_cols(a, 1, 2); });
    binary("concat_cols", {2, 3}, {2, 2}, [](const Tensor& a, const Tensor& b) { return concat_cols(a, b); });
    binary("concat_rows", {2, 3}, {1, 3}, [](const Tensor& a, const Tensor& b) { return concat_rows({a, b, a}); });
    unary("element", {2, 3}, [](const Tensor& a) { return element(a, 4); });
    unary("gather_rows", {5, 3}, [](const Tensor& a) {
        static const int ids[] = {2, 0, 4, 2, 1};
        return gather_rows(a, ids, 0);
    });
    cases.push_back({"additive_score", {{3, 4}, {1, 5}, {1, 5}},
                     [](const std::vector<Tensor>& x) { return project(additive_score(x[0], x[1], x[2])); }});
    unary("binary_cross_entropy", {1, 1}, [](const Tensor& a) {
        const Tensor p = sigmoid(a);
        return add(binary_cross_entropy(p, 1), scale(binary_cross_entropy(p, 0), 0.5));
    });
    cases.push_back({"gru", {{5, 3}, {3, 4}, {3, 4}, {3, 4}, {4, 4}, {4, 4}, {4, 4}},
                     [](const std::vector<Tensor>& x) {
                         GruParams p{x[1], x[2], x[3], x[4], x[5], x[6], {}, {}, {}};
                         return project(gru_forward(x[0], p));
                     }});
    cases.push_back({"gru_bias_h0",
                     {{4, 2}, {2, 3}, {2, 3}, {2, 3}, {3, 3}, {3, 3}, {3, 3}, {1, 3}, {1, 3}, {1, 3}, {1, 3}},
                     [](const std::vector<Tensor>& x) {
                         GruParams p{x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8], x[9]};
                         return project(gru_forward(x[0], p, x[10]));
                     }});
    return cases;
}

struct MicroCase {
    std::string name;
    ModelConfig config;
};

std::vector<MicroCase> micro_cases() {
    ModelConfig base;
    base.vocab_size = 10;
    base.embed_dim = 4;
    base.encoder_hidden = 4;
    base.scn_match_dim = 3;
    base.conv_kernels = 2;
    base.conv_window = 2;
    base.pool_window = 2;
    base.san_hidden = 3;
    base.accumulator_hidden = 3;
    base.max_turns = 2;
    base.max_len = 5;
    base.init_scale = 1.0;
    std::vector<MicroCase> out;
    for (auto matcher : {MatcherKind::scn, MatcherKind::san}) {
        for (auto head : {HeadMode::last, HeadMode::static_average, HeadMode::dynamic_average}) {
            ModelConfig c = base;
            c.matcher = matcher;
            c.head = head;
            out.push_back({fmt::format("model.{}.{}", to_string(matcher), to_string(head)), c});
        }
        for (auto ch : {Channels::words, Channels::segments}) {
            ModelConfig c = base;
            c.matcher = matcher;
            c.channels = ch;
            out.push_back({fmt::format("model.{}.{}-only", to_string(matcher), to_string(ch)), c});
        }
    }
    return out;
}

Instance random_instance(Rng& rng, std::size_t turns, std::size_t max_len, std::size_t vocab, int label) {
    std::uniform_int_distribution<std::size_t> len(1, max_len);
    std::uniform_int_distribution<std::size_t> tok(2, vocab - 1);
    auto seq = [&] {
        TokenSeq s(len(rng));
        for (auto& t : s) {
            t = fmt::format("w{}", tok(rng));
        }
        return s;
    };
    Instance inst;
    inst.label = label;
    for (std::size_t k = 0; k < turns; ++k) {
        inst.utterances.push_back(seq());
    }
    inst.response = seq();
    return inst;
}

void record(GradSuiteEntry& entry, const GradCheckResult& r, double tolerance) {
    ++entry.points;
    entry.checked += r.checked;
    entry.skipped_kinks += r.skipped_kinks;
    if (entry.points == 1 || r.max_relative_error > entry.worst.max_relative_error) {
        entry.worst = r;
    }
    entry.passed = entry.worst.max_relative_error < tolerance;
}

} // namespace

std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options) {
    std::vector<GradSuiteEntry> entries;
    Rng rng(options.seed);
    for (const auto& op : op_cases()) {
        GradSuiteEntry entry;
        entry.name = op.name;
        for (std::size_t p = 0; p < options.points; ++p) {
            std::vector<Tensor> inputs;
            for (const auto& s : op.shapes) {
                inputs.push_back(random_tensor(s, rng, true));
            }
            record(entry, grad_check(op.fn, inputs, options.epsilon), options.tolerance);
        }
        entries.push_back(entry);
    }
    if (!options.include_models) {
        return entries;
    }

    Vocabulary vocab;
    for (int i = 2; i < 10; ++i) {
        vocab.add(fmt::format("w{}", i));
    }
    for (const auto& mc : micro_cases()) {
        GradSuiteEntry entry;
        entry.name = mc.name;
        MatchingModel model = MatchingModel::create(mc.config, rng);
        std::vector<Tensor> params = parameters(model);
        // zero biases would put every all-pad conv cell exactly on the ReLU kink
        for (auto& p : params) {
            fill_uniform(p, rng, mc.config.init_scale);
        }
        for (std::size_t p = 0; p < options.model_points; ++p) {
            const Instance inst = random_instance(rng, 2, mc.config.max_len, mc.config.vocab_size, static_cast<int>(p % 2));
            const EncodedBatch batch = encode_batch(std::span(&inst, 1), vocab, mc.config.encode_options());
            const EncodedInstance enc = batch.instance(0);
            const auto fn = [&](const std::vector<Tensor>&) { return cross_entropy(model.forward(enc), enc.label); };
            record(entry, grad_check(fn, params, options.model_epsilon, Stencil::five_point), options.tolerance);
        }
        entries.push_back(entry);
    }
    return entries;
}

std::string format_gradient_suite(const std::vector<GradSuiteEntry>& entries) {
    std::string out;
    std::size_t failed = 0;
    for (const auto& e : entries) {
        out += fmt::format("{:<28} points {:>4}  coords {:>6}  kinks {:>3}  worst relative error {:.3e}  {}\n", e.name,
                           e.points, e.checked, e.skipped_kinks, e.worst.max_relative_error,
                           e.passed ? "PASS" : "FAIL");
        if (!e.passed) {
            ++failed;
            out += fmt::format("    input {} index {}: analytic {:.10g} numeric {:.10g}\n", e.worst.worst_input,
                               e.worst.worst_index, e.worst.analytic, e.worst.numeric);
        }
    }
    out += failed == 0 ? fmt::format("all {} checks passed\n", entries.size())
                       : fmt::format("{} of {} checks failed\n", failed, entries.size());
    return out;
}

} // namespace smf
