#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "marginforge/rng.hpp"
#include "marginforge/tensor.hpp"

namespace marginforge {

/// A (possibly partially labeled) dataset. Rows [0, labeled_count) carry
/// visible labels; the unlabeled tail's ground truth, when known, lives in
/// sealed_labels and is read only by evaluation code, never by training.
struct Dataset {
    Tensor inputs;                    // [N,d]
    std::vector<int> labels;          // visible labels for the labeled prefix
    std::vector<int> sealed_labels;   // evaluation-only truth for the unlabeled tail
    Tensor pseudo_labels;             // optional [N,C] soft rows
    std::size_t class_count = 0;
    std::optional<std::pair<double, double>> domain_bounds;
    std::optional<std::pair<std::size_t, std::size_t>> image_dims;  // rows, cols

    std::size_t size() const { return inputs.defined() ? inputs.shape()[0] : 0; }
    std::size_t dim() const { return inputs.defined() ? inputs.shape()[1] : 0; }
    bool empty() const { return size() == 0; }
    std::size_t labeled_count() const { return labels.size(); }
    std::size_t unlabeled_count() const { return sealed_labels.size(); }
    bool fully_labeled() const { return labels.size() == size(); }

    /// Ground truth for any row, pulling from the sealed channel for the
    /// unlabeled tail. Evaluation-only by convention.
    int truth_for_eval(std::size_t row) const {
        return row < labels.size() ? labels[row]
                                   : sealed_labels.at(row - labels.size());
    }
};

enum class SyntheticKind { TwoMoons, GaussianBlobs, ConcentricCircles };

namespace detail {

// Canonical affine map taking the raw two-moons bounding box
// [-1,2] x [-0.5,1] into the unit square (uniform scale 1/3, y centered).
inline std::pair<double, double> moons_to_unit(double x, double y) {
    return {(x + 1.0) / 3.0, (y + 0.5) / 3.0 + 0.25};
}

}  // namespace detail

/// Deterministic 2-class 2D generators, all emitting coordinates on the
/// scale of the unit square so one epsilon budget is comparable across
/// kinds. Noise is additive isotropic Gaussian in unit coordinates, applied
/// after the closed-form locus:
///   two_moons:          upper half-circle (cos t, sin t) vs lower
///                       (1 - cos t, 0.5 - sin t), t evenly spaced on [0,pi],
///                       mapped by the canonical affine map above;
///   gaussian_blobs:     points at (0.25,0.25) vs (0.75,0.75);
///   concentric_circles: radii 0.15 vs 0.35 around (0.5,0.5).
inline Dataset gen_synthetic(SyntheticKind kind, std::size_t n_points, double noise_sigma,
                             std::uint64_t seed) {
    if (n_points < 2) throw std::invalid_argument("gen_synthetic: need at least 2 points");
    if (noise_sigma < 0.0) throw std::invalid_argument("gen_synthetic: noise_sigma must be >= 0");
    const std::size_t n0 = (n_points + 1) / 2, n1 = n_points - n0;
    std::vector<double> xs(n_points * 2);
    std::vector<int> ys(n_points);
    Rng rng(seed);

    auto emit = [&](std::size_t row, double px, double py, int cls) {
        xs[row * 2] = px + noise_sigma * rng.normal();
        xs[row * 2 + 1] = py + noise_sigma * rng.normal();
        ys[row] = cls;
    };

    switch (kind) {
        case SyntheticKind::TwoMoons: {
            for (std::size_t i = 0; i < n0; ++i) {
                const double t = n0 > 1 ? M_PI * static_cast<double>(i) / static_cast<double>(n0 - 1) : 0.0;
                auto [px, py] = detail::moons_to_unit(std::cos(t), std::sin(t));
                emit(i, px, py, 0);
            }
            for (std::size_t i = 0; i < n1; ++i) {
                const double t = n1 > 1 ? M_PI * static_cast<double>(i) / static_cast<double>(n1 - 1) : 0.0;
                auto [px, py] = detail::moons_to_unit(1.0 - std::cos(t), 0.5 - std::sin(t));
                emit(n0 + i, px, py, 1);
            }
            break;
        }
        case SyntheticKind::GaussianBlobs: {
            for (std::size_t i = 0; i < n0; ++i) emit(i, 0.25, 0.25, 0);
            for (std::size_t i = 0; i < n1; ++i) emit(n0 + i, 0.75, 0.75, 1);
            break;
        }
        case SyntheticKind::ConcentricCircles: {
            for (std::size_t i = 0; i < n0; ++i) {
                const double t = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n0);
                emit(i, 0.5 + 0.15 * std::cos(t), 0.5 + 0.15 * std::sin(t), 0);
            }
            for (std::size_t i = 0; i < n1; ++i) {
                const double t = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n1);
                emit(n0 + i, 0.5 + 0.35 * std::cos(t), 0.5 + 0.35 * std::sin(t), 1);
            }
            break;
        }
        default:
            throw std::invalid_argument("gen_synthetic: invalid kind");
    }

    Dataset ds;
    ds.inputs = Tensor({n_points, 2}, std::move(xs));
    ds.labels = std::move(ys);
    ds.class_count = 2;
    return ds;
}

/// Copy out the given rows, preserving label visibility per row.
inline Dataset dataset_rows(const Dataset& ds, const std::vector<std::size_t>& rows) {
    const std::size_t d = ds.dim();
    std::vector<double> xs;
    xs.reserve(rows.size() * d);
    std::vector<int> labels, sealed;
    auto src = ds.inputs.data();
    for (std::size_t r : rows) {
        if (r >= ds.size()) throw std::invalid_argument("dataset_rows: row out of range");
        if (r < ds.labeled_count()) {
            labels.push_back(ds.labels[r]);
        } else {
            sealed.push_back(ds.sealed_labels[r - ds.labeled_count()]);
        }
    }
    // Labeled rows must stay a prefix; emit them first.
    std::vector<std::size_t> ordered;
    for (std::size_t r : rows) {
        if (r < ds.labeled_count()) ordered.push_back(r);
    }
    for (std::size_t r : rows) {
        if (r >= ds.labeled_count()) ordered.push_back(r);
    }
    for (std::size_t r : ordered) {
        xs.insert(xs.end(), src.begin() + static_cast<std::ptrdiff_t>(r * d),
                  src.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
    Dataset out;
    out.inputs = Tensor({ordered.size(), d}, std::move(xs));
    out.labels = std::move(labels);
    out.sealed_labels = std::move(sealed);
    out.class_count = ds.class_count;
    out.domain_bounds = ds.domain_bounds;
    out.image_dims = ds.image_dims;
    return out;
}

/// Stratified semi-supervised split of a fully labeled dataset. Per class,
/// ceil(fraction * class_size) points are selected as labeled via a seeded
/// shuffle; everything else becomes the unlabeled set, whose ground truth
/// moves into the sealed evaluation-only channel.
inline std::pair<Dataset, Dataset> split_semisup(const Dataset& ds, double labeled_fraction,
                                                 std::uint64_t seed) {
    if (!(labeled_fraction > 0.0) || labeled_fraction > 1.0) {
        throw std::invalid_argument("split_semisup: labeled_fraction must be in (0, 1]");
    }
    if (!ds.fully_labeled()) {
        throw std::invalid_argument("split_semisup: dataset must be fully labeled");
    }
    std::vector<std::vector<std::size_t>> by_class(ds.class_count);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const int y = ds.labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= ds.class_count) {
            throw std::invalid_argument("split_semisup: label out of range");
        }
        by_class[static_cast<std::size_t>(y)].push_back(i);
    }
    std::vector<std::size_t> take_l, take_u;
    for (std::size_t c = 0; c < ds.class_count; ++c) {
        auto& idx = by_class[c];
        if (idx.empty()) {
            throw std::invalid_argument("split_semisup: class " + std::to_string(c) +
                                        " has no examples");
        }
        const auto want = static_cast<std::size_t>(
            std::ceil(labeled_fraction * static_cast<double>(idx.size()) - 1e-12));
        if (want == 0) {
            throw std::invalid_argument("split_semisup: fraction yields zero labeled examples for class " +
                                        std::to_string(c));
        }
        Rng rng = Rng::derive(seed, c);
        rng.shuffle(idx);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            (i < want ? take_l : take_u).push_back(idx[i]);
        }
    }

    const std::size_t d = ds.dim();
    auto src = ds.inputs.data();
    auto build = [&](const std::vector<std::size_t>& rows, bool visible) {
        std::vector<double> xs;
        xs.reserve(rows.size() * d);
        std::vector<int> lab;
        for (std::size_t r : rows) {
            xs.insert(xs.end(), src.begin() + static_cast<std::ptrdiff_t>(r * d),
                      src.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
            lab.push_back(ds.labels[r]);
        }
        Dataset out;
        out.inputs = Tensor({rows.size(), d}, std::move(xs));
        if (visible) {
            out.labels = std::move(lab);
        } else {
            out.sealed_labels = std::move(lab);
        }
        out.class_count = ds.class_count;
        out.domain_bounds = ds.domain_bounds;
        out.image_dims = ds.image_dims;
        return out;
    };
    Dataset d_l = build(take_l, true);
    Dataset d_u;
    if (take_u.empty()) {  // fraction 1: empty unlabeled set (inputs left undefined)
        d_u.class_count = ds.class_count;
        d_u.domain_bounds = ds.domain_bounds;
        d_u.image_dims = ds.image_dims;
    } else {
        d_u = build(take_u, false);
    }
    return {std::move(d_l), std::move(d_u)};
}

// ---------------------------------------------------------------------------
// IDX container (MNIST-style): big-endian magic 00 00 <dtype> <ndim>,
// ndim big-endian u32 extents, then the payload. Supported dtypes:
// 0x08 (u8, mapped to [0,1] by /255) and 0x0E (big-endian f64, raw).
// Arrays of rank >= 2 parse to [N, product-of-remaining-extents].
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_u32_be(const std::vector<unsigned char>& b, std::size_t off) {
    return (static_cast<std::uint32_t>(b[off]) << 24) |
           (static_cast<std::uint32_t>(b[off + 1]) << 16) |
           (static_cast<std::uint32_t>(b[off + 2]) << 8) |
           static_cast<std::uint32_t>(b[off + 3]);
}

struct IdxHeader {
    unsigned dtype;
    std::vector<std::size_t> extents;
    std::size_t payload_offset;
};

inline IdxHeader parse_idx_header(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 4) {
        throw std::runtime_error("parse_idx: file too short for the 4-byte magic (got " +
                                 std::to_string(bytes.size()) + " bytes)");
    }
    if (bytes[0] != 0 || bytes[1] != 0) {
        std::ostringstream os;
        os << "parse_idx: bad magic at byte offset 0: expected 00 00, got "
           << std::hex << static_cast<int>(bytes[0]) << " " << static_cast<int>(bytes[1]);
        throw std::runtime_error(os.str());
    }
    const unsigned dtype = bytes[2];
    if (dtype != 0x08 && dtype != 0x0E) {
        std::ostringstream os;
        os << "parse_idx: unsupported dtype 0x" << std::hex << dtype
           << " at byte offset 2 (supported: 0x08 u8, 0x0e f64)";
        throw std::runtime_error(os.str());
    }
    const unsigned ndim = bytes[3];
    if (ndim == 0 || ndim > 4) {
        throw std::runtime_error("parse_idx: unsupported rank " + std::to_string(ndim) +
                                 " at byte offset 3");
    }
    if (bytes.size() < 4 + 4ull * ndim) {
        throw std::runtime_error("parse_idx: truncated extent header, expected " +
                                 std::to_string(4 + 4 * ndim) + " bytes, got " +
                                 std::to_string(bytes.size()));
    }
    IdxHeader h;
    h.dtype = dtype;
    for (unsigned i = 0; i < ndim; ++i) {
        h.extents.push_back(read_u32_be(bytes, 4 + 4ull * i));
    }
    h.payload_offset = 4 + 4ull * ndim;
    return h;
}

}  // namespace detail

inline Tensor parse_idx(const std::vector<unsigned char>& bytes) {
    auto h = detail::parse_idx_header(bytes);
    std::size_t count = 1;
    for (std::size_t e : h.extents) {
        if (e == 0) throw std::runtime_error("parse_idx: zero extent in header");
        count *= e;
    }
    const std::size_t elem_size = h.dtype == 0x08 ? 1 : 8;
    const std::size_t expected = h.payload_offset + count * elem_size;
    if (bytes.size() != expected) {
        std::ostringstream os;
        os << "parse_idx: payload size mismatch: expected " << expected
           << " total bytes (" << count * elem_size << " payload), got " << bytes.size();
        throw std::runtime_error(os.str());
    }
    std::vector<double> data(count);
    if (h.dtype == 0x08) {
        for (std::size_t i = 0; i < count; ++i) {
            data[i] = static_cast<double>(bytes[h.payload_offset + i]) / 255.0;
        }
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            std::uint64_t v = 0;
            for (int k = 0; k < 8; ++k) {
                v = (v << 8) | bytes[h.payload_offset + i * 8 + static_cast<std::size_t>(k)];
            }
            data[i] = std::bit_cast<double>(v);
        }
    }
    std::vector<std::size_t> shape;
    if (h.extents.size() == 1) {
        shape = {h.extents[0]};
    } else {
        std::size_t rest = 1;
        for (std::size_t i = 1; i < h.extents.size(); ++i) rest *= h.extents[i];
        shape = {h.extents[0], rest};
    }
    return Tensor(std::move(shape), std::move(data));
}

/// Row/column extents as stored in an IDX header (before flattening).
inline std::vector<std::size_t> idx_extents(const std::vector<unsigned char>& bytes) {
    return detail::parse_idx_header(bytes).extents;
}

/// Inverse of parse_idx for rank-1/rank-2 tensors. For dtype 0x08 every
/// value must already lie on the k/255 grid.
inline std::vector<unsigned char> serialize_idx(const Tensor& t, unsigned dtype = 0x08) {
    if (dtype != 0x08 && dtype != 0x0E) {
        throw std::invalid_argument("serialize_idx: unsupported dtype");
    }
    if (t.shape().size() > 4) throw std::invalid_argument("serialize_idx: rank too large");
    std::vector<unsigned char> out{0, 0, static_cast<unsigned char>(dtype),
                                   static_cast<unsigned char>(t.shape().size())};
    for (std::size_t e : t.shape()) {
        for (int k = 3; k >= 0; --k) {
            out.push_back(static_cast<unsigned char>((e >> (8 * k)) & 0xFF));
        }
    }
    if (dtype == 0x08) {
        for (double v : t.data()) {
            const double scaled = v * 255.0;
            const auto byte = static_cast<long>(std::llround(scaled));
            if (byte < 0 || byte > 255 || std::abs(scaled - static_cast<double>(byte)) > 1e-9) {
                throw std::invalid_argument(
                    "serialize_idx: value " + std::to_string(v) + " is not on the k/255 grid");
            }
            out.push_back(static_cast<unsigned char>(byte));
        }
    } else {
        for (double v : t.data()) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int k = 7; k >= 0; --k) {
                out.push_back(static_cast<unsigned char>((bits >> (8 * k)) & 0xFF));
            }
        }
    }
    return out;
}

}  // namespace marginforge
