#pragma once

#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "marginforge/rng.hpp"
#include "marginforge/tensor.hpp"

namespace marginforge {

/// Probability vector over the C classes. One-hot vectors represent ground
/// truth labels; full softmax outputs of a teacher represent pseudo-labels.
struct SoftLabel {
    std::vector<double> probs;

    static SoftLabel one_hot(std::size_t cls, std::size_t class_count) {
        SoftLabel l;
        l.probs.assign(class_count, 0.0);
        l.probs.at(cls) = 1.0;
        return l;
    }

    void validate() const {
        double sum = 0.0;
        for (double p : probs) {
            if (!(p >= 0.0)) throw std::invalid_argument("SoftLabel: negative entry");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            throw std::invalid_argument("SoftLabel: entries sum to " + std::to_string(sum) +
                                        ", expected 1");
        }
    }
};

constexpr double kProbFloor = 1e-12;  // floor inside logs; keeps KL finite

// ---------------------------------------------------------------------------
// Differentiable row-wise building blocks shared by attacks and losses.
// All take logits of shape [B,C].
// ---------------------------------------------------------------------------

/// log softmax(logits / tau) per row, stabilized by subtracting the row max.
inline Tensor log_softmax_rows(const Tensor& logits, double tau = 1.0) {
    if (tau <= 0.0) throw std::invalid_argument("log_softmax_rows: temperature must be > 0");
    if (logits.shape().size() != 2) {
        throw std::invalid_argument("log_softmax_rows: expects [B,C] logits, got " +
                                    detail::shape_str(logits.shape()));
    }
    const auto shape = logits.shape();
    Tensor z = tau == 1.0 ? logits : scale(logits, 1.0 / tau);
    Tensor shifted = subtract(z, broadcast(max_axis(z, 1), shape));
    Tensor lse = log(sum_axis(exp(shifted), 1));
    return subtract(shifted, broadcast(lse, shape));
}

inline Tensor softmax_rows(const Tensor& logits, double tau = 1.0) {
    return exp(log_softmax_rows(logits, tau));
}

/// Per-row soft cross-entropy with optional label smoothing:
/// -sum_c t'_c log softmax(logits)_c with t' = (1-a)*target + a/C.
/// `targets` is a constant [B,C] matrix of valid SoftLabel rows.
inline Tensor cross_entropy_rows(const Tensor& logits, const Tensor& targets,
                                 double smoothing = 0.0) {
    detail::check_same_shape("cross_entropy_rows", logits, targets);
    if (smoothing < 0.0 || smoothing >= 1.0) {
        throw std::invalid_argument("cross_entropy_rows: smoothing must be in [0,1)");
    }
    Tensor t = targets.detach();
    if (smoothing > 0.0) {
        const std::size_t C = targets.shape()[1];
        Tensor uniform({1}, {1.0 / static_cast<double>(C)});
        t = add(scale(t, 1.0 - smoothing),
                scale(broadcast(uniform, targets.shape()), smoothing));
    }
    Tensor lsm = log_softmax_rows(logits);
    return scale(sum_axis(multiply(t, lsm), 1), -1.0);
}

/// Mean batch cross-entropy as a scalar tensor.
inline Tensor cross_entropy_mean(const Tensor& logits, const Tensor& targets,
                                 double smoothing = 0.0) {
    Tensor rows = cross_entropy_rows(logits, targets, smoothing);
    return scale(sum_axis(rows, 0), 1.0 / static_cast<double>(rows.shape()[0]));
}

/// Per-row KL(softmax(p_logits/tau) || softmax(q_logits/tau)), differentiable
/// through both sides. log p comes straight from log-softmax, so zero
/// probabilities never reach a log.
inline Tensor kl_rows_between_logits(const Tensor& p_logits, const Tensor& q_logits,
                                     double tau = 1.0) {
    detail::check_same_shape("kl_rows_between_logits", p_logits, q_logits);
    Tensor lp = log_softmax_rows(p_logits, tau);
    Tensor lq = log_softmax_rows(q_logits, tau);
    return sum_axis(multiply(exp(lp), subtract(lp, lq)), 1);
}

/// Per-row KL(p || softmax(q_logits/tau)) where p is a constant [B,C]
/// probability matrix. p entries are floored at 1e-12 inside its log, which
/// realizes the 0*log(0) = 0 convention.
inline Tensor kl_rows_const_ref(const Tensor& p_probs, const Tensor& q_logits,
                                double tau = 1.0) {
    detail::check_same_shape("kl_rows_const_ref", p_probs, q_logits);
    Tensor p = p_probs.detach();
    Tensor lq = log_softmax_rows(q_logits, tau);
    return sum_axis(multiply(p, subtract(log(clamp_min(p, kProbFloor)), lq)), 1);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Feed-forward classifier: relu hidden layers, linear output of width C.
/// Parameters are mutated only by the optimizer (single writer); forward
/// evaluation on a frozen snapshot is thread-safe.
class Model {
public:
    enum class Params { Trainable, Frozen };

    Model() = default;

    const std::vector<std::size_t>& layer_sizes() const { return layer_sizes_; }
    std::size_t input_dim() const { return layer_sizes_.front(); }
    std::size_t class_count() const { return layer_sizes_.back(); }

    std::vector<Tensor>& weights() { return weights_; }
    std::vector<Tensor>& biases() { return biases_; }
    const std::vector<Tensor>& weights() const { return weights_; }
    const std::vector<Tensor>& biases() const { return biases_; }

    /// Flattened parameter list, layer order, weight before bias.
    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            out.push_back(weights_[l]);
            out.push_back(biases_[l]);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Tensor& t : parameters()) n += t.size();
        return n;
    }

    /// Logits for a batch [B,d] -> [B,C]. Differentiable w.r.t. x always and
    /// w.r.t. parameters when mode is Trainable.
    Tensor forward(const Tensor& x, Params mode = Params::Trainable) const {
        if (x.shape().size() != 2 || x.shape()[1] != input_dim()) {
            throw std::invalid_argument("Model::forward: input " +
                                        detail::shape_str(x.shape()) + " does not match input dim " +
                                        std::to_string(input_dim()));
        }
        forward_calls_->fetch_add(1, std::memory_order_relaxed);
        const std::size_t B = x.shape()[0];
        Tensor h = x;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            Tensor w = mode == Params::Trainable ? weights_[l] : weights_[l].detach();
            Tensor b = mode == Params::Trainable ? biases_[l] : biases_[l].detach();
            Tensor z = add(matmul(h, w), broadcast(b, {B, w.shape()[1]}));
            h = (l + 1 < weights_.size()) ? relu(z) : z;
        }
        return h;
    }

    /// Number of forward() invocations on this model (shared across copies);
    /// exposed for the per-batch cost-contract checks.
    std::uint64_t forward_call_count() const {
        return forward_calls_->load(std::memory_order_relaxed);
    }

private:
    friend Model mlp_init(const std::vector<std::size_t>&, std::uint64_t);
    friend Model load_checkpoint_bytes(const std::vector<unsigned char>&);

    std::vector<std::size_t> layer_sizes_;
    std::vector<Tensor> weights_;  // [in,out] per layer
    std::vector<Tensor> biases_;   // [out] per layer
    std::shared_ptr<std::atomic<std::uint64_t>> forward_calls_ =
        std::make_shared<std::atomic<std::uint64_t>>(0);
};

/// Weights drawn from the scaled-uniform (Glorot) range
/// U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))), in index order
/// from Rng(seed); biases zero. Same (sizes, seed) gives bit-identical
/// parameters.
inline Model mlp_init(const std::vector<std::size_t>& layer_sizes, std::uint64_t seed) {
    if (layer_sizes.size() < 2) {
        throw std::invalid_argument("mlp_init: need at least input and output sizes");
    }
    for (std::size_t s : layer_sizes) {
        if (s == 0) throw std::invalid_argument("mlp_init: layer sizes must be positive");
    }
    Model m;
    m.layer_sizes_ = layer_sizes;
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
        const std::size_t fan_in = layer_sizes[l], fan_out = layer_sizes[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::vector<double> w(fan_in * fan_out);
        for (double& v : w) v = rng.uniform(-limit, limit);
        m.weights_.emplace_back(std::vector<std::size_t>{fan_in, fan_out}, std::move(w),
                                /*requires_grad=*/true);
        m.biases_.emplace_back(std::vector<std::size_t>{fan_out},
                               std::vector<double>(fan_out, 0.0),
                               /*requires_grad=*/true);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Plain-value operations (non-differentiating convenience surface)
// ---------------------------------------------------------------------------

/// softmax(logits/tau) over a single logit vector.
inline SoftLabel score(const std::vector<double>& logits, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("score: temperature must be > 0");
    if (logits.empty()) throw std::invalid_argument("score: empty logits");
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    SoftLabel out;
    out.probs.resize(logits.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out.probs[i] = std::exp((logits[i] - mx) / tau);
        denom += out.probs[i];
    }
    for (double& p : out.probs) p /= denom;
    return out;
}

inline double cross_entropy(const std::vector<double>& logits, const SoftLabel& target,
                            double smoothing = 0.0) {
    target.validate();
    if (target.probs.size() != logits.size()) {
        throw std::invalid_argument("cross_entropy: logits/target length mismatch");
    }
    Tensor l({1, logits.size()}, logits);
    Tensor t({1, target.probs.size()}, target.probs);
    return cross_entropy_rows(l, t, smoothing).value();
}

/// KL(p || q) >= 0 with q (and p inside its own log) floored at 1e-12.
inline double kl_divergence(const SoftLabel& p, const SoftLabel& q) {
    p.validate();
    q.validate();
    if (p.probs.size() != q.probs.size()) {
        throw std::invalid_argument("kl_divergence: dimension mismatch");
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.probs.size(); ++i) {
        const double pi = p.probs[i];
        if (pi <= 0.0) continue;  // 0 * log 0 := 0
        kl += pi * (std::log(std::max(pi, kProbFloor)) - std::log(std::max(q.probs[i], kProbFloor)));
    }
    return kl;
}

inline double entropy(const SoftLabel& p) {
    double h = 0.0;
    for (double pi : p.probs) {
        if (pi > 0.0) h -= pi * std::log(pi);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "MFORGE01", then little-endian
//   u32 layer-size count, u32 sizes..., then per layer the weight matrix
//   (row-major f64) followed by the bias vector (f64).
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32_le(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64_le(std::vector<unsigned char>& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32_le(const std::vector<unsigned char>& in, std::size_t& off) {
    if (off + 4 > in.size()) throw std::runtime_error("checkpoint: truncated header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
    off += 4;
    return v;
}

inline double get_f64_le(const std::vector<unsigned char>& in, std::size_t& off) {
    if (off + 8 > in.size()) throw std::runtime_error("checkpoint: truncated parameter data");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[off + i]) << (8 * i);
    off += 8;
    return std::bit_cast<double>(v);
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "MFORGE01";

inline std::vector<unsigned char> save_checkpoint_bytes(const Model& m) {
    std::vector<unsigned char> out;
    out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 8);
    detail::put_u32_le(out, static_cast<std::uint32_t>(m.layer_sizes().size()));
    for (std::size_t s : m.layer_sizes()) {
        detail::put_u32_le(out, static_cast<std::uint32_t>(s));
    }
    for (std::size_t l = 0; l < m.weights().size(); ++l) {
        for (double v : m.weights()[l].data()) detail::put_f64_le(out, v);
        for (double v : m.biases()[l].data()) detail::put_f64_le(out, v);
    }
    return out;
}

inline Model load_checkpoint_bytes(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic, expected MFORGE01");
    }
    std::size_t off = 8;
    const std::uint32_t n = detail::get_u32_le(bytes, off);
    if (n < 2) throw std::runtime_error("checkpoint: layer-size header too short");
    std::vector<std::size_t> sizes(n);
    for (auto& s : sizes) s = detail::get_u32_le(bytes, off);
    Model m;
    m.layer_sizes_ = sizes;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        std::vector<double> w(sizes[l] * sizes[l + 1]);
        for (double& v : w) v = detail::get_f64_le(bytes, off);
        std::vector<double> b(sizes[l + 1]);
        for (double& v : b) v = detail::get_f64_le(bytes, off);
        m.weights_.emplace_back(std::vector<std::size_t>{sizes[l], sizes[l + 1]}, std::move(w),
                                true);
        m.biases_.emplace_back(std::vector<std::size_t>{sizes[l + 1]}, std::move(b), true);
    }
    if (off != bytes.size()) {
        throw std::runtime_error("checkpoint: trailing bytes after parameter data");
    }
    return m;
}

inline void save_checkpoint(const Model& m, const std::string& path) {
    auto bytes = save_checkpoint_bytes(m);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    return load_checkpoint_bytes(bytes);
}

}  // namespace marginforge
