#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedunlearn/error.hpp"
#include "fedunlearn/params.hpp"
#include "fedunlearn/rng.hpp"

namespace fedunlearn::nn {

/// Row-major dense matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline constexpr double kProbClamp = 1e-12;

/// A mini-batch. Training needs at least one of the two target kinds.
struct Batch {
    Matrix inputs;
    std::optional<std::vector<int>> hard_labels;
    std::optional<Matrix> soft_labels;

    std::size_t size() const { return inputs.rows; }
};

/// Pre-activations and activations kept for backpropagation.
struct ForwardCache {
    ShapeManifest shapes;
    double temperature = 1.0;
    std::vector<Matrix> inputs;          // input to each layer
    std::vector<Matrix> pre_activations; // z = a W + b per layer; the last one is the logits

    const Matrix& logits() const { return pre_activations.back(); }
};

struct ForwardResult {
    Matrix probabilities;
    ForwardCache cache;
};

enum class LossKind { Hard, Distill, Mixed };

/// Selects the training objective. Hard uses probabilities at `temperature`;
/// Mixed is (1 - hard_weight) * distill + hard_weight * hard, with the hard
/// term always evaluated at temperature 1.
struct LossSpec {
    LossKind kind = LossKind::Hard;
    double temperature = 1.0;
    double hard_weight = 0.0;
};

// ---------------------------------------------------------------------------

/// Builds the layer manifest for a dense architecture [in, h1, ..., out].
inline ShapeManifest dense_manifest(std::span<const std::size_t> arch) {
    if (arch.size() < 2) throw ConfigurationError("architecture needs at least an input and an output size");
    ShapeManifest shapes;
    for (std::size_t i = 0; i + 1 < arch.size(); ++i) {
        if (arch[i] == 0 || arch[i + 1] == 0) throw ConfigurationError("layer sizes must be >= 1");
        shapes.push_back({arch[i], arch[i + 1], true});
    }
    return shapes;
}

/// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
inline ParameterVector init_model(std::span<const std::size_t> arch, std::uint64_t seed) {
    ParameterVector model(dense_manifest(arch));
    Rng rng(seed);
    std::size_t off = 0;
    for (const auto& layer : model.shapes()) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(layer.rows));
        for (std::size_t i = 0; i < layer.rows * layer.cols; ++i) model[off + i] = rng.uniform(-bound, bound);
        off += layer.size();
    }
    return model;
}

inline ParameterVector init_model(std::initializer_list<std::size_t> arch, std::uint64_t seed) {
    return init_model(std::span<const std::size_t>(arch.begin(), arch.size()), seed);
}

inline std::vector<double> softmax_t(std::span<const double> logits, double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw DomainError("temperature must be a positive finite number");
    }
    if (logits.empty()) throw ShapeError("softmax of an empty vector");
    double max_logit = -std::numeric_limits<double>::infinity();
    for (double z : logits) {
        if (!std::isfinite(z)) throw NumericError("non-finite logit");
        max_logit = std::max(max_logit, z);
    }
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp((logits[i] - max_logit) / temperature);
        sum += out[i];
    }
    for (double& p : out) p /= sum;
    return out;
}

inline Matrix softmax_rows(const Matrix& logits, double temperature) {
    Matrix out(logits.rows, logits.cols);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        const auto p = softmax_t(logits.row(r), temperature);
        std::copy(p.begin(), p.end(), out.row(r).begin());
    }
    return out;
}

namespace detail {

// out = in * W + b for the layer stored at `params[off...]`.
inline Matrix affine(const Matrix& in, const LayerShape& layer, std::span<const double> params) {
    Matrix out(in.rows, layer.cols);
    const double* w = params.data();
    const double* b = layer.has_bias ? w + layer.rows * layer.cols : nullptr;
    for (std::size_t n = 0; n < in.rows; ++n) {
        auto o = out.row(n);
        if (b) std::copy(b, b + layer.cols, o.begin());
        for (std::size_t i = 0; i < layer.rows; ++i) {
            const double x = in(n, i);
            if (x == 0.0) continue;
            const double* wr = w + i * layer.cols;
            for (std::size_t j = 0; j < layer.cols; ++j) o[j] += x * wr[j];
        }
    }
    return out;
}

inline double log_clamped(double p) { return std::log(std::max(p, kProbClamp)); }

}  // namespace detail

inline ForwardResult forward(const ParameterVector& model, const Matrix& inputs, double temperature) {
    const auto& shapes = model.shapes();
    if (shapes.empty()) throw ShapeError("model has no layers");
    if (inputs.cols != shapes.front().rows) {
        throw ShapeError("input dimension " + std::to_string(inputs.cols) + " does not match model input " +
                         std::to_string(shapes.front().rows));
    }
    ForwardResult result;
    auto& cache = result.cache;
    cache.shapes = shapes;
    cache.temperature = temperature;
    Matrix a = inputs;
    std::size_t off = 0;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        Matrix z = detail::affine(a, shapes[l], model.values().subspan(off, shapes[l].size()));
        off += shapes[l].size();
        cache.inputs.push_back(std::move(a));
        if (l + 1 < shapes.size()) {
            a = z;
            for (double& v : a.data) v = std::max(v, 0.0);
        }
        cache.pre_activations.push_back(std::move(z));
    }
    result.probabilities = softmax_rows(cache.logits(), temperature);
    return result;
}

inline ForwardResult forward(const ParameterVector& model, const Batch& batch, double temperature) {
    return forward(model, batch.inputs, temperature);
}

inline Matrix logits(const ParameterVector& model, const Matrix& inputs) {
    return forward(model, inputs, 1.0).cache.pre_activations.back();
}

inline double loss_hard(const Matrix& probabilities, std::span<const int> labels) {
    if (probabilities.rows != labels.size()) throw ShapeError("label count does not match batch size");
    if (labels.empty()) throw ShapeError("empty batch");
    double total = 0.0;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        const int y = labels[n];
        if (y < 0 || static_cast<std::size_t>(y) >= probabilities.cols) {
            throw DomainError("label " + std::to_string(y) + " out of range");
        }
        total += -detail::log_clamped(probabilities(n, static_cast<std::size_t>(y)));
    }
    return total / static_cast<double>(labels.size());
}

/// Mean cross-entropy of `probabilities` against soft targets.
inline double soft_cross_entropy(const Matrix& probabilities, const Matrix& targets) {
    if (probabilities.rows != targets.rows || probabilities.cols != targets.cols) {
        throw ShapeError("soft target shape does not match predictions");
    }
    if (targets.rows == 0) throw ShapeError("empty batch");
    double total = 0.0;
    for (std::size_t n = 0; n < targets.rows; ++n) {
        for (std::size_t c = 0; c < targets.cols; ++c) {
            const double q = targets(n, c);
            if (q != 0.0) total += -q * detail::log_clamped(probabilities(n, c));
        }
    }
    return total / static_cast<double>(targets.rows);
}

/// Mean entropy of the rows of a probability matrix.
inline double entropy(const Matrix& probabilities) { return soft_cross_entropy(probabilities, probabilities); }

/// T^2-scaled cross-entropy between teacher soft targets and the student's
/// temperature softmax.
inline double loss_distill(const Matrix& student_logits, const Matrix& teacher_probs, double temperature) {
    if (student_logits.rows != teacher_probs.rows || student_logits.cols != teacher_probs.cols) {
        throw ShapeError("student logits and teacher probabilities differ in shape");
    }
    const Matrix p = softmax_rows(student_logits, temperature);
    return temperature * temperature * soft_cross_entropy(p, teacher_probs);
}

/// Loss of an already-computed forward pass under `spec`.
inline double evaluate_loss(const ForwardCache& cache, const Batch& batch, const LossSpec& spec) {
    const Matrix& z = cache.logits();
    switch (spec.kind) {
        case LossKind::Hard:
            if (!batch.hard_labels) throw ConfigurationError("hard loss requires hard labels");
            return loss_hard(softmax_rows(z, spec.temperature), *batch.hard_labels);
        case LossKind::Distill:
            if (!batch.soft_labels) throw ConfigurationError("distillation loss requires soft labels");
            return loss_distill(z, *batch.soft_labels, spec.temperature);
        case LossKind::Mixed: {
            if (!batch.soft_labels || !batch.hard_labels) {
                throw ConfigurationError("mixed loss requires hard and soft labels");
            }
            const double a = spec.hard_weight;
            return (1.0 - a) * loss_distill(z, *batch.soft_labels, spec.temperature) +
                   a * loss_hard(softmax_rows(z, 1.0), *batch.hard_labels);
        }
    }
    return 0.0;
}

inline double evaluate_loss(const ParameterVector& model, const Batch& batch, const LossSpec& spec) {
    return evaluate_loss(forward(model, batch, spec.temperature).cache, batch, spec);
}

namespace detail {

// dL/dlogits for the selected objective, averaged over the batch.
inline Matrix logit_gradient(const ForwardCache& cache, const Batch& batch, const LossSpec& spec) {
    const Matrix& z = cache.logits();
    const auto n = static_cast<double>(z.rows);
    Matrix g(z.rows, z.cols);

    auto add_hard = [&](double weight, double temperature) {
        if (!batch.hard_labels) throw ConfigurationError("hard loss requires hard labels");
        const auto& y = *batch.hard_labels;
        if (y.size() != z.rows) throw ShapeError("label count does not match batch size");
        const Matrix p = softmax_rows(z, temperature);
        const double scale = weight / (temperature * n);
        for (std::size_t r = 0; r < z.rows; ++r) {
            if (y[r] < 0 || static_cast<std::size_t>(y[r]) >= z.cols) throw DomainError("label out of range");
            for (std::size_t c = 0; c < z.cols; ++c) {
                const double target = static_cast<std::size_t>(y[r]) == c ? 1.0 : 0.0;
                g(r, c) += scale * (p(r, c) - target);
            }
        }
    };
    auto add_distill = [&](double weight) {
        if (!batch.soft_labels) throw ConfigurationError("distillation loss requires soft labels");
        const Matrix& q = *batch.soft_labels;
        if (q.rows != z.rows || q.cols != z.cols) throw ShapeError("soft label shape mismatch");
        const double t = spec.temperature;
        const Matrix p = softmax_rows(z, t);
        const double scale = weight * t / n;
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += scale * (p.data[i] - q.data[i]);
    };

    switch (spec.kind) {
        case LossKind::Hard: add_hard(1.0, spec.temperature); break;
        case LossKind::Distill: add_distill(1.0); break;
        case LossKind::Mixed:
            add_distill(1.0 - spec.hard_weight);
            add_hard(spec.hard_weight, 1.0);
            break;
    }
    return g;
}

}  // namespace detail

/// Analytic gradient of the selected loss with respect to every parameter.
inline ParameterVector backward(const ParameterVector& model, const ForwardCache& cache, const LossSpec& spec,
                                const Batch& batch) {
    const auto& shapes = model.shapes();
    if (cache.shapes != shapes || cache.pre_activations.size() != shapes.size() ||
        cache.inputs.size() != shapes.size()) {
        throw StateError("forward cache does not belong to this model");
    }
    if (cache.inputs.front().rows != batch.size()) {
        throw StateError("forward cache was computed on a different batch");
    }
    if (cache.temperature != spec.temperature) {
        throw StateError("forward cache temperature differs from the loss temperature");
    }

    ParameterVector grad = ParameterVector::zeros_like(model);
    Matrix delta = detail::logit_gradient(cache, batch, spec);

    for (std::size_t l = shapes.size(); l-- > 0;) {
        const auto& layer = shapes[l];
        const Matrix& a = cache.inputs[l];
        const std::size_t off = model.layer_offset(l);
        double* gw = grad.values().data() + off;
        for (std::size_t n = 0; n < a.rows; ++n) {
            for (std::size_t i = 0; i < layer.rows; ++i) {
                const double x = a(n, i);
                if (x == 0.0) continue;
                double* gr = gw + i * layer.cols;
                for (std::size_t j = 0; j < layer.cols; ++j) gr[j] += x * delta(n, j);
            }
        }
        if (layer.has_bias) {
            double* gb = gw + layer.rows * layer.cols;
            for (std::size_t n = 0; n < delta.rows; ++n) {
                for (std::size_t j = 0; j < layer.cols; ++j) gb[j] += delta(n, j);
            }
        }
        if (l == 0) break;

        // Propagate through W^T and the ReLU of the previous layer.
        const double* w = model.values().data() + off;
        const Matrix& z_prev = cache.pre_activations[l - 1];
        Matrix next(delta.rows, layer.rows);
        for (std::size_t n = 0; n < delta.rows; ++n) {
            for (std::size_t i = 0; i < layer.rows; ++i) {
                if (z_prev(n, i) <= 0.0) continue;
                double s = 0.0;
                const double* wr = w + i * layer.cols;
                for (std::size_t j = 0; j < layer.cols; ++j) s += wr[j] * delta(n, j);
                next(n, i) = s;
            }
        }
        delta = std::move(next);
    }
    return grad;
}

inline ParameterVector sgd_step(const ParameterVector& model, const ParameterVector& gradient, double lr) {
    model.require_same_shape(gradient, "sgd_step");
    ParameterVector out = model;
    auto v = out.values();
    auto g = gradient.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    return out;
}

/// Central-difference gradient estimate, one parameter at a time.
inline ParameterVector finite_diff_grad(const ParameterVector& model, const Batch& batch, const LossSpec& spec,
                                        double eps) {
    if (!(eps > 0.0)) throw DomainError("finite-difference step must be positive");
    ParameterVector probe = model;
    ParameterVector grad = ParameterVector::zeros_like(model);
    for (std::size_t i = 0; i < model.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double up = evaluate_loss(probe, batch, spec);
        probe[i] = orig - eps;
        const double down = evaluate_loss(probe, batch, spec);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    return grad;
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> xs) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < xs.size(); ++i) {
        if (xs[i] > xs[best]) best = i;
    }
    return best;
}

inline std::vector<std::size_t> predict(const ParameterVector& model, const Matrix& inputs) {
    const Matrix z = logits(model, inputs);
    std::vector<std::size_t> out(z.rows);
    for (std::size_t r = 0; r < z.rows; ++r) out[r] = argmax(z.row(r));
    return out;
}

}  // namespace fedunlearn::nn
