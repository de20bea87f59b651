#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "melatts/core/rng.hpp"
#include "melatts/core/tape.hpp"
#include "melatts/nn/params.hpp"

namespace melatts {

// Registration and forward functions for the transformer pieces shared by
// the AR decoder, the denoiser, the utterance encoder and the frozen
// surrogate encoder. Registration order is forward order so checkpoints
// stay stable.

template <typename T>
void register_linear(ParamStore<T>& p, const std::string& prefix, int in_dim, int out_dim, Rng& rng,
                     bool trainable = true, double scale = -1.0) {
    const double std = scale >= 0 ? scale : 1.0 / std::sqrt(static_cast<double>(in_dim));
    fill_gaussian(p.add(prefix + ".w", out_dim, in_dim, trainable, /*weight_decay=*/trainable), rng, std);
    p.add(prefix + ".b", 1, out_dim, trainable, false);
}

template <typename T>
typename Tape<T>::Ref linear_fwd(Tape<T>& t, const BoundParams<T>& bp, const std::string& prefix,
                                 typename Tape<T>::Ref x) {
    return t.linear(x, bp[prefix + ".w"], bp[prefix + ".b"]);
}

template <typename T>
void register_layer_norm(ParamStore<T>& p, const std::string& prefix, int dim, bool trainable = true) {
    auto& gamma = p.add(prefix + ".g", 1, dim, trainable, false);
    for (size_t i = 0; i < gamma.size(); ++i) gamma.data()[i] = T(1);
    p.add(prefix + ".beta", 1, dim, trainable, false);
}

template <typename T>
typename Tape<T>::Ref layer_norm_fwd(Tape<T>& t, const BoundParams<T>& bp, const std::string& prefix,
                                     typename Tape<T>::Ref x) {
    return t.layer_norm(x, bp[prefix + ".g"], bp[prefix + ".beta"]);
}

template <typename T>
void register_attention(ParamStore<T>& p, const std::string& prefix, int dim, Rng& rng, bool trainable = true) {
    register_linear(p, prefix + ".q", dim, dim, rng, trainable);
    register_linear(p, prefix + ".k", dim, dim, rng, trainable);
    register_linear(p, prefix + ".v", dim, dim, rng, trainable);
    register_linear(p, prefix + ".o", dim, dim, rng, trainable);
}

template <typename T>
Matrix<T> causal_mask(int n) {
    Matrix<T> m(n, n);
    for (int r = 0; r < n; ++r)
        for (int c = r + 1; c < n; ++c) m(r, c) = -std::numeric_limits<T>::infinity();
    return m;
}

// Multi-head self-attention over x [S, D] with an optional additive score
// mask. Heads are computed as column slices of the joint Q/K/V projections.
template <typename T>
typename Tape<T>::Ref attention_fwd_masked(Tape<T>& t, const BoundParams<T>& bp, const std::string& prefix,
                                           typename Tape<T>::Ref x, int num_heads,
                                           const Matrix<T>* add_mask) {
    const int dim = t.val(x).cols();
    if (dim % num_heads != 0) throw std::invalid_argument("attention_fwd: dim not divisible by heads");
    const int dh = dim / num_heads;
    auto q = linear_fwd(t, bp, prefix + ".q", x);
    auto k = linear_fwd(t, bp, prefix + ".k", x);
    auto v = linear_fwd(t, bp, prefix + ".v", x);
    std::vector<typename Tape<T>::Ref> heads;
    heads.reserve(num_heads);
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    for (int h = 0; h < num_heads; ++h) {
        auto qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        auto kh = t.slice_cols(k, h * dh, (h + 1) * dh);
        auto vh = t.slice_cols(v, h * dh, (h + 1) * dh);
        auto scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt);
        auto att = t.softmax_rows(scores, add_mask);
        heads.push_back(t.matmul(att, vh));
    }
    auto merged = t.concat_cols(heads);
    return linear_fwd(t, bp, prefix + ".o", merged);
}

template <typename T>
typename Tape<T>::Ref attention_fwd(Tape<T>& t, const BoundParams<T>& bp, const std::string& prefix,
                                    typename Tape<T>::Ref x, int num_heads, bool causal) {
    if (!causal) return attention_fwd_masked(t, bp, prefix, x, num_heads, static_cast<const Matrix<T>*>(nullptr));
    Matrix<T> mask = causal_mask<T>(t.val(x).rows());
    return attention_fwd_masked(t, bp, prefix, x, num_heads, &mask);
}

template <typename T>
void register_mlp(ParamStore<T>& p, const std::string& prefix, int dim, int hidden, Rng& rng,
                  bool trainable = true) {
    register_linear(p, prefix + ".fc1", dim, hidden, rng, trainable);
    register_linear(p, prefix + ".fc2", hidden, dim, rng, trainable);
}

template <typename T>
typename Tape<T>::Ref mlp_fwd(Tape<T>& t, const BoundParams<T>& bp, const std::string& prefix,
                              typename Tape<T>::Ref x) {
    auto h = t.gelu(linear_fwd(t, bp, prefix + ".fc1", x));
    return linear_fwd(t, bp, prefix + ".fc2", h);
}

template <typename T>
void register_transformer_block(ParamStore<T>& p, const std::string& prefix, int dim, int mlp_ratio, Rng& rng,
                                bool trainable = true) {
    register_layer_norm(p, prefix + ".ln1", dim, trainable);
    register_attention(p, prefix + ".attn", dim, rng, trainable);
    register_layer_norm(p, prefix + ".ln2", dim, trainable);
    register_mlp(p, prefix + ".mlp", dim, dim * mlp_ratio, rng, trainable);
}

// Pre-norm residual block.
template <typename T>
typename Tape<T>::Ref transformer_block_fwd(Tape<T>& t, const BoundParams<T>& bp, const std::string& prefix,
                                            typename Tape<T>::Ref x, int num_heads, bool causal) {
    auto a = attention_fwd(t, bp, prefix + ".attn", layer_norm_fwd(t, bp, prefix + ".ln1", x), num_heads, causal);
    x = t.add(x, a);
    auto m = mlp_fwd(t, bp, prefix + ".mlp", layer_norm_fwd(t, bp, prefix + ".ln2", x));
    return t.add(x, m);
}

// Additive mask with -inf between row blocks, zero within; restricts
// attention to independent segments sharing one sequence.
template <typename T>
Matrix<T> block_diagonal_mask(int num_blocks, int block_rows) {
    const int n = num_blocks * block_rows;
    Matrix<T> m(n, n, -std::numeric_limits<T>::infinity());
    for (int b = 0; b < num_blocks; ++b)
        for (int r = 0; r < block_rows; ++r)
            for (int c = 0; c < block_rows; ++c) m(b * block_rows + r, b * block_rows + c) = T(0);
    return m;
}

// Fixed sine/cosine features of a scalar in [0, 1]; frequencies are
// log-spaced. Used for the denoiser timestep and the frozen encoder
// positions.
template <typename T>
Matrix<T> sinusoidal_features(double t, int dim, double max_freq = 1000.0) {
    if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_features: dim must be even");
    Matrix<T> out(1, dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::pow(max_freq, static_cast<double>(i) / std::max(1, half - 1));
        out(0, i) = static_cast<T>(std::sin(t * freq));
        out(0, half + i) = static_cast<T>(std::cos(t * freq));
    }
    return out;
}

template <typename T>
Matrix<T> sinusoidal_position_table(int max_len, int dim) {
    Matrix<T> out(max_len, dim);
    for (int pos = 0; pos < max_len; ++pos) {
        for (int i = 0; i < dim / 2; ++i) {
            const double angle = pos / std::pow(10000.0, 2.0 * i / dim);
            out(pos, 2 * i) = static_cast<T>(std::sin(angle));
            out(pos, 2 * i + 1) = static_cast<T>(std::cos(angle));
        }
    }
    return out;
}

}  // namespace melatts
