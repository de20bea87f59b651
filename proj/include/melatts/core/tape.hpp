#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "melatts/core/matrix.hpp"

namespace melatts {

// Reverse-mode autodiff over Matrix<T>. A Tape owns one computation graph;
// nodes are created in topological order, so backward() is a reverse sweep.
// Training instantiates Tape<float>; gradient checks instantiate Tape<double>.
template <typename T>
class Tape {
public:
    struct Ref {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t num_nodes() const { return nodes_.size(); }

    // Drops every node created after the given mark; refs taken before the
    // mark (e.g. bound parameters) stay valid. Lets inference reuse one tape
    // across many forward passes without rebinding.
    void truncate(size_t mark) {
        if (mark > nodes_.size()) throw std::invalid_argument("Tape::truncate: mark beyond tape");
        nodes_.resize(mark);
    }

    Ref leaf(Matrix<T> value, bool needs_grad) {
        nodes_.push_back(Node{std::move(value), {}, needs_grad, nullptr});
        return Ref{static_cast<int>(nodes_.size()) - 1};
    }
    Ref constant(Matrix<T> value) { return leaf(std::move(value), false); }

    const Matrix<T>& val(Ref r) const { return nodes_[check(r)].value; }

    // Valid after backward(); zero matrix for nodes the loss does not reach.
    const Matrix<T>& grad(Ref r) {
        Node& n = nodes_[check(r)];
        if (n.grad.empty()) n.grad = Matrix<T>(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void backward(Ref root) {
        Node& rn = nodes_[check(root)];
        if (rn.value.rows() != 1 || rn.value.cols() != 1)
            throw std::invalid_argument("Tape::backward: root must be a scalar");
        rn.grad = Matrix<T>(1, 1);
        rn.grad(0, 0) = T(1);
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && !n.grad.empty()) n.back(*this);
        }
    }

    // ---- elementwise ----

    Ref add(Ref a, Ref b) {
        const Matrix<T>&va = val(a), &vb = val(b);
        require(va.same_shape(vb), "add: shape mismatch");
        Matrix<T> out = va;
        axpy(out, vb);
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, const Matrix<T>& g) {
            t.accum(a, g);
            t.accum(b, g);
        });
    }

    Ref sub(Ref a, Ref b) {
        const Matrix<T>&va = val(a), &vb = val(b);
        require(va.same_shape(vb), "sub: shape mismatch");
        Matrix<T> out = va;
        axpy(out, vb, T(-1));
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, const Matrix<T>& g) {
            t.accum(a, g);
            t.accum_scaled(b, g, T(-1));
        });
    }

    Ref mul(Ref a, Ref b) {
        const Matrix<T>&va = val(a), &vb = val(b);
        require(va.same_shape(vb), "mul: shape mismatch");
        Matrix<T> out = Matrix<T>::uninit(va.rows(), va.cols());
        for (size_t i = 0; i < out.size(); ++i) out.data()[i] = va.data()[i] * vb.data()[i];
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, const Matrix<T>& g) {
            const Matrix<T>&xa = t.val(a), &xb = t.val(b);
            if (t.needs_grad(a)) {
                Matrix<T> da = Matrix<T>::uninit(g.rows(), g.cols());
                for (size_t i = 0; i < g.size(); ++i) da.data()[i] = g.data()[i] * xb.data()[i];
                t.accum_move(a, std::move(da));
            }
            if (t.needs_grad(b)) {
                Matrix<T> db = Matrix<T>::uninit(g.rows(), g.cols());
                for (size_t i = 0; i < g.size(); ++i) db.data()[i] = g.data()[i] * xa.data()[i];
                t.accum_move(b, std::move(db));
            }
        });
    }

    Ref scale(Ref a, T c) {
        Matrix<T> out = val(a);
        for (size_t i = 0; i < out.size(); ++i) out.data()[i] *= c;
        return unary(std::move(out), a, [a, c](Tape& t, const Matrix<T>& g) { t.accum_scaled(a, g, c); });
    }

    Ref add_scalar(Ref a, T c) {
        Matrix<T> out = val(a);
        for (size_t i = 0; i < out.size(); ++i) out.data()[i] += c;
        return unary(std::move(out), a, [a](Tape& t, const Matrix<T>& g) { t.accum(a, g); });
    }

    // Broadcast a 1xC row over every row of a.
    Ref add_rowvec(Ref a, Ref row) {
        const Matrix<T>&va = val(a), &vr = val(row);
        require(vr.rows() == 1 && vr.cols() == va.cols(), "add_rowvec: bad row shape");
        Matrix<T> out = va;
        for (int r = 0; r < out.rows(); ++r) axpy_row(out.row(r), vr.row(0), out.cols(), T(1));
        return unary_or_binary(std::move(out), a, row, [a, row](Tape& t, const Matrix<T>& g) {
            t.accum(a, g);
            if (t.needs_grad(row)) {
                Matrix<T> dr(1, g.cols());
                for (int r = 0; r < g.rows(); ++r) axpy_row(dr.row(0), g.row(r), g.cols(), T(1));
                t.accum(row, dr);
            }
        });
    }

    Ref mul_rowvec(Ref a, Ref row) {
        const Matrix<T>&va = val(a), &vr = val(row);
        require(vr.rows() == 1 && vr.cols() == va.cols(), "mul_rowvec: bad row shape");
        Matrix<T> out = Matrix<T>::uninit(va.rows(), va.cols());
        for (int r = 0; r < out.rows(); ++r)
            for (int c = 0; c < out.cols(); ++c) out(r, c) = va(r, c) * vr(0, c);
        return unary_or_binary(std::move(out), a, row, [a, row](Tape& t, const Matrix<T>& g) {
            const Matrix<T>&xa = t.val(a), &xr = t.val(row);
            if (t.needs_grad(a)) {
                Matrix<T> da = Matrix<T>::uninit(g.rows(), g.cols());
                for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < g.cols(); ++c) da(r, c) = g(r, c) * xr(0, c);
                t.accum_move(a, std::move(da));
            }
            if (t.needs_grad(row)) {
                Matrix<T> dr(1, g.cols());
                for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < g.cols(); ++c) dr(0, c) += g(r, c) * xa(r, c);
                t.accum(row, dr);
            }
        });
    }

    // ---- matrix products ----

    Ref matmul(Ref a, Ref b) {
        const Matrix<T>&va = val(a), &vb = val(b);
        require(va.cols() == vb.rows(), "matmul: inner dim mismatch");
        Matrix<T> out;
        gemm_nn(va, vb, out);
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, const Matrix<T>& g) {
            if (t.needs_grad(a)) {
                Matrix<T> da;
                gemm_nt(g, t.val(b), da);
                t.accum_move(a, std::move(da));
            }
            if (t.needs_grad(b)) {
                Matrix<T> db;
                gemm_tn(t.val(a), g, db);
                t.accum_move(b, std::move(db));
            }
        });
    }

    // a * b^T
    Ref matmul_nt(Ref a, Ref b) {
        const Matrix<T>&va = val(a), &vb = val(b);
        require(va.cols() == vb.cols(), "matmul_nt: inner dim mismatch");
        Matrix<T> out;
        gemm_nt(va, vb, out);
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, const Matrix<T>& g) {
            if (t.needs_grad(a)) {
                Matrix<T> da;
                gemm_nn(g, t.val(b), da);
                t.accum_move(a, std::move(da));
            }
            if (t.needs_grad(b)) {
                Matrix<T> db;
                gemm_tn(g, t.val(a), db);
                t.accum_move(b, std::move(db));
            }
        });
    }

    // x [R,I] with weight [O,I] and bias [1,O] -> [R,O]
    Ref linear(Ref x, Ref weight, Ref bias) {
        Ref y = matmul_nt(x, weight);
        return bias.valid() ? add_rowvec(y, bias) : y;
    }

    // ---- activations ----

    Ref sigmoid(Ref a) {
        Matrix<T> out = val(a);
        for (size_t i = 0; i < out.size(); ++i) out.data()[i] = T(1) / (T(1) + std::exp(-out.data()[i]));
        Matrix<T> cache = out;
        return unary(std::move(out), a, [a, cache](Tape& t, const Matrix<T>& g) {
            Matrix<T> da = Matrix<T>::uninit(g.rows(), g.cols());
            for (size_t i = 0; i < g.size(); ++i) {
                const T s = cache.data()[i];
                da.data()[i] = g.data()[i] * s * (T(1) - s);
            }
            t.accum_move(a, std::move(da));
        });
    }

    Ref silu(Ref a) {
        const Matrix<T>& va = val(a);
        Matrix<T> out = Matrix<T>::uninit(va.rows(), va.cols());
        for (size_t i = 0; i < out.size(); ++i) {
            const T x = va.data()[i];
            out.data()[i] = x / (T(1) + std::exp(-x));
        }
        return unary(std::move(out), a, [a](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& x = t.val(a);
            Matrix<T> da = Matrix<T>::uninit(g.rows(), g.cols());
            for (size_t i = 0; i < g.size(); ++i) {
                const T xi = x.data()[i];
                const T s = T(1) / (T(1) + std::exp(-xi));
                da.data()[i] = g.data()[i] * s * (T(1) + xi * (T(1) - s));
            }
            t.accum_move(a, std::move(da));
        });
    }

    // tanh-approximation GELU
    Ref gelu(Ref a) {
        const Matrix<T>& va = val(a);
        Matrix<T> out = Matrix<T>::uninit(va.rows(), va.cols());
        for (size_t i = 0; i < out.size(); ++i) out.data()[i] = gelu_fwd(va.data()[i]);
        return unary(std::move(out), a, [a](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& x = t.val(a);
            Matrix<T> da = Matrix<T>::uninit(g.rows(), g.cols());
            for (size_t i = 0; i < g.size(); ++i) da.data()[i] = g.data()[i] * gelu_bwd(x.data()[i]);
            t.accum_move(a, std::move(da));
        });
    }

    // Row-wise softmax with optional additive mask (e.g. -inf above diagonal
    // for causal attention). The mask is a constant, not a graph input.
    Ref softmax_rows(Ref a, const Matrix<T>* add_mask = nullptr) {
        const Matrix<T>& va = val(a);
        if (add_mask) require(add_mask->same_shape(va), "softmax_rows: mask shape mismatch");
        Matrix<T> out = Matrix<T>::uninit(va.rows(), va.cols());
        const T ninf = -std::numeric_limits<T>::infinity();
        for (int r = 0; r < va.rows(); ++r) {
            T mx = ninf;
            for (int c = 0; c < va.cols(); ++c) {
                const T z = va(r, c) + (add_mask ? (*add_mask)(r, c) : T(0));
                out(r, c) = z;
                mx = std::max(mx, z);
            }
            T sum = 0;
            for (int c = 0; c < va.cols(); ++c) {
                const T z = out(r, c);
                const T e = z == ninf ? T(0) : std::exp(z - mx);
                out(r, c) = e;
                sum += e;
            }
            for (int c = 0; c < va.cols(); ++c) out(r, c) /= sum;
        }
        Matrix<T> cache = out;
        return unary(std::move(out), a, [a, cache](Tape& t, const Matrix<T>& g) {
            Matrix<T> da = Matrix<T>::uninit(g.rows(), g.cols());
            for (int r = 0; r < g.rows(); ++r) {
                T dot = 0;
                for (int c = 0; c < g.cols(); ++c) dot += g(r, c) * cache(r, c);
                for (int c = 0; c < g.cols(); ++c) da(r, c) = cache(r, c) * (g(r, c) - dot);
            }
            t.accum_move(a, std::move(da));
        });
    }

    Ref layer_norm(Ref x, Ref gamma, Ref beta, T eps = T(1e-5)) {
        const Matrix<T>& vx = val(x);
        const Matrix<T>&vg = val(gamma), &vb = val(beta);
        require(vg.rows() == 1 && vg.cols() == vx.cols(), "layer_norm: gamma shape");
        require(vb.rows() == 1 && vb.cols() == vx.cols(), "layer_norm: beta shape");
        const int R = vx.rows(), C = vx.cols();
        Matrix<T> xhat = Matrix<T>::uninit(R, C);
        std::vector<T> inv_std(R);
        Matrix<T> out = Matrix<T>::uninit(R, C);
        for (int r = 0; r < R; ++r) {
            T mean = 0;
            for (int c = 0; c < C; ++c) mean += vx(r, c);
            mean /= C;
            T var = 0;
            for (int c = 0; c < C; ++c) {
                const T d = vx(r, c) - mean;
                var += d * d;
            }
            var /= C;
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[r] = is;
            for (int c = 0; c < C; ++c) {
                xhat(r, c) = (vx(r, c) - mean) * is;
                out(r, c) = xhat(r, c) * vg(0, c) + vb(0, c);
            }
        }
        return any_op(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, xhat, inv_std](Tape& t, const Matrix<T>& g) {
                          const int R = g.rows(), C = g.cols();
                          const Matrix<T>& vg = t.val(gamma);
                          if (t.needs_grad(gamma)) {
                              Matrix<T> dg(1, C);
                              for (int r = 0; r < R; ++r)
                                  for (int c = 0; c < C; ++c) dg(0, c) += g(r, c) * xhat(r, c);
                              t.accum_move(gamma, std::move(dg));
                          }
                          if (t.needs_grad(beta)) {
                              Matrix<T> db(1, C);
                              for (int r = 0; r < R; ++r)
                                  for (int c = 0; c < C; ++c) db(0, c) += g(r, c);
                              t.accum_move(beta, std::move(db));
                          }
                          if (t.needs_grad(x)) {
                              Matrix<T> dx = Matrix<T>::uninit(R, C);
                              for (int r = 0; r < R; ++r) {
                                  T mean_dy = 0, mean_dyx = 0;
                                  for (int c = 0; c < C; ++c) {
                                      const T dy = g(r, c) * vg(0, c);
                                      mean_dy += dy;
                                      mean_dyx += dy * xhat(r, c);
                                  }
                                  mean_dy /= C;
                                  mean_dyx /= C;
                                  for (int c = 0; c < C; ++c) {
                                      const T dy = g(r, c) * vg(0, c);
                                      dx(r, c) = inv_std[r] * (dy - mean_dy - xhat(r, c) * mean_dyx);
                                  }
                              }
                              t.accum_move(x, std::move(dx));
                          }
                      });
    }

    // ---- structure ----

    Ref concat_rows(const std::vector<Ref>& parts) {
        require(!parts.empty(), "concat_rows: empty");
        const int C = val(parts[0]).cols();
        int R = 0;
        bool ng = false;
        for (Ref p : parts) {
            require(val(p).cols() == C, "concat_rows: column mismatch");
            R += val(p).rows();
            ng = ng || needs_grad(p);
        }
        Matrix<T> out = Matrix<T>::uninit(R, C);
        int r = 0;
        for (Ref p : parts) {
            const Matrix<T>& v = val(p);
            std::copy(v.data(), v.data() + v.size(), out.row(r));
            r += v.rows();
        }
        if (!ng) return constant(std::move(out));
        std::vector<Ref> ps = parts;
        return make_node(std::move(out), [ps](Tape& t, const Matrix<T>& g) {
            int r = 0;
            for (Ref p : ps) {
                const int pr = t.val(p).rows();
                if (t.needs_grad(p)) {
                    Matrix<T> dp = Matrix<T>::uninit(pr, g.cols());
                    for (int i = 0; i < pr; ++i)
                        std::copy(g.row(r + i), g.row(r + i) + g.cols(), dp.row(i));
                    t.accum_move(p, std::move(dp));
                }
                r += pr;
            }
        });
    }

    Ref concat_cols(const std::vector<Ref>& parts) {
        require(!parts.empty(), "concat_cols: empty");
        const int R = val(parts[0]).rows();
        int C = 0;
        bool ng = false;
        for (Ref p : parts) {
            require(val(p).rows() == R, "concat_cols: row mismatch");
            C += val(p).cols();
            ng = ng || needs_grad(p);
        }
        Matrix<T> out = Matrix<T>::uninit(R, C);
        int c0 = 0;
        for (Ref p : parts) {
            const Matrix<T>& v = val(p);
            for (int r = 0; r < R; ++r) std::copy(v.row(r), v.row(r) + v.cols(), out.row(r) + c0);
            c0 += v.cols();
        }
        if (!ng) return constant(std::move(out));
        std::vector<Ref> ps = parts;
        return make_node(std::move(out), [ps](Tape& t, const Matrix<T>& g) {
            int c0 = 0;
            for (Ref p : ps) {
                const int pc = t.val(p).cols();
                if (t.needs_grad(p)) {
                    Matrix<T> dp = Matrix<T>::uninit(g.rows(), pc);
                    for (int r = 0; r < g.rows(); ++r)
                        std::copy(g.row(r) + c0, g.row(r) + c0 + pc, dp.row(r));
                    t.accum_move(p, std::move(dp));
                }
                c0 += pc;
            }
        });
    }

    Ref slice_rows(Ref a, int r0, int r1) {
        const Matrix<T>& va = val(a);
        require(0 <= r0 && r0 <= r1 && r1 <= va.rows(), "slice_rows: bad range");
        Matrix<T> out = Matrix<T>::uninit(r1 - r0, va.cols());
        for (int r = r0; r < r1; ++r) std::copy(va.row(r), va.row(r) + va.cols(), out.row(r - r0));
        return unary(std::move(out), a, [a, r0](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& va = t.val(a);
            Matrix<T> da(va.rows(), va.cols());
            for (int r = 0; r < g.rows(); ++r)
                std::copy(g.row(r), g.row(r) + g.cols(), da.row(r0 + r));
            t.accum_move(a, std::move(da));
        });
    }

    Ref slice_cols(Ref a, int c0, int c1) {
        const Matrix<T>& va = val(a);
        require(0 <= c0 && c0 <= c1 && c1 <= va.cols(), "slice_cols: bad range");
        Matrix<T> out = Matrix<T>::uninit(va.rows(), c1 - c0);
        for (int r = 0; r < va.rows(); ++r) std::copy(va.row(r) + c0, va.row(r) + c1, out.row(r));
        return unary(std::move(out), a, [a, c0](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& va = t.val(a);
            Matrix<T> da(va.rows(), va.cols());
            for (int r = 0; r < g.rows(); ++r)
                for (int c = 0; c < g.cols(); ++c) da(r, c0 + c) = g(r, c);
            t.accum_move(a, std::move(da));
        });
    }

    Ref gather_rows(Ref table, std::vector<int> idx) {
        const Matrix<T>& vt = val(table);
        Matrix<T> out = Matrix<T>::uninit(static_cast<int>(idx.size()), vt.cols());
        for (size_t i = 0; i < idx.size(); ++i) {
            require(idx[i] >= 0 && idx[i] < vt.rows(), "gather_rows: index out of range");
            std::copy(vt.row(idx[i]), vt.row(idx[i]) + vt.cols(), out.row(static_cast<int>(i)));
        }
        return unary(std::move(out), table, [table, idx](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& vt = t.val(table);
            Matrix<T> dt(vt.rows(), vt.cols());
            for (size_t i = 0; i < idx.size(); ++i)
                axpy_row(dt.row(idx[i]), g.row(static_cast<int>(i)), g.cols(), T(1));
            t.accum_move(table, std::move(dt));
        });
    }

    Ref tile_rows(Ref row, int n) {
        const Matrix<T>& vr = val(row);
        require(vr.rows() == 1, "tile_rows: input must be a single row");
        Matrix<T> out = Matrix<T>::uninit(n, vr.cols());
        for (int r = 0; r < n; ++r) std::copy(vr.row(0), vr.row(0) + vr.cols(), out.row(r));
        return unary(std::move(out), row, [row](Tape& t, const Matrix<T>& g) {
            Matrix<T> dr(1, g.cols());
            for (int r = 0; r < g.rows(); ++r) axpy_row(dr.row(0), g.row(r), g.cols(), T(1));
            t.accum_move(row, std::move(dr));
        });
    }

    // Row-major reinterpretation; element order is unchanged.
    Ref reshape(Ref a, int rows, int cols) {
        Matrix<T> out = val(a).reshaped(rows, cols);
        return unary(std::move(out), a, [a](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& va = t.val(a);
            t.accum_move(a, g.reshaped(va.rows(), va.cols()));
        });
    }

    Ref mean_rows(Ref a) {
        const Matrix<T>& va = val(a);
        require(va.rows() > 0, "mean_rows: empty");
        Matrix<T> out(1, va.cols());
        for (int r = 0; r < va.rows(); ++r) axpy_row(out.row(0), va.row(r), va.cols(), T(1));
        for (int c = 0; c < va.cols(); ++c) out(0, c) /= T(va.rows());
        return unary(std::move(out), a, [a](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& va = t.val(a);
            Matrix<T> da = Matrix<T>::uninit(va.rows(), va.cols());
            const T inv = T(1) / T(va.rows());
            for (int r = 0; r < va.rows(); ++r)
                for (int c = 0; c < va.cols(); ++c) da(r, c) = g(0, c) * inv;
            t.accum_move(a, std::move(da));
        });
    }

    Ref sum_all(Ref a) {
        const Matrix<T>& va = val(a);
        Matrix<T> out(1, 1);
        T s = 0;
        for (size_t i = 0; i < va.size(); ++i) s += va.data()[i];
        out(0, 0) = s;
        return unary(std::move(out), a, [a](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& va = t.val(a);
            t.accum_move(a, Matrix<T>(va.rows(), va.cols(), g(0, 0)));
        });
    }

    // ---- losses ----

    // Sum of squared error over the first valid_rows rows (padded rows
    // contribute nothing). Target is data, not a graph input.
    Ref squared_error_sum(Ref pred, const Matrix<T>& target, int valid_rows) {
        const Matrix<T>& vp = val(pred);
        require(vp.same_shape(target), "squared_error_sum: shape mismatch");
        require(valid_rows >= 0 && valid_rows <= vp.rows(), "squared_error_sum: bad valid_rows");
        Matrix<T> out(1, 1);
        T s = 0;
        for (int r = 0; r < valid_rows; ++r)
            for (int c = 0; c < vp.cols(); ++c) {
                const T d = vp(r, c) - target(r, c);
                s += d * d;
            }
        out(0, 0) = s;
        return unary(std::move(out), pred, [pred, target, valid_rows](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& vp = t.val(pred);
            Matrix<T> dp(vp.rows(), vp.cols());
            const T s = T(2) * g(0, 0);
            for (int r = 0; r < valid_rows; ++r)
                for (int c = 0; c < vp.cols(); ++c) dp(r, c) = s * (vp(r, c) - target(r, c));
            t.accum_move(pred, std::move(dp));
        });
    }

    // Mean binary cross-entropy over an [n,1] logit column, numerically
    // stable form; labels in {0,1}.
    Ref bce_with_logits_mean(Ref logits, const std::vector<int>& labels) {
        const Matrix<T>& vz = val(logits);
        require(vz.cols() == 1 && vz.rows() == static_cast<int>(labels.size()),
                "bce_with_logits_mean: shape mismatch");
        require(!labels.empty(), "bce_with_logits_mean: empty");
        Matrix<T> out(1, 1);
        T s = 0;
        for (int r = 0; r < vz.rows(); ++r) {
            const T z = vz(r, 0);
            const T y = T(labels[r]);
            s += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
        }
        out(0, 0) = s / T(vz.rows());
        return unary(std::move(out), logits, [logits, labels](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& vz = t.val(logits);
            Matrix<T> dz = Matrix<T>::uninit(vz.rows(), 1);
            const T s = g(0, 0) / T(vz.rows());
            for (int r = 0; r < vz.rows(); ++r) {
                const T sig = T(1) / (T(1) + std::exp(-vz(r, 0)));
                dz(r, 0) = s * (sig - T(labels[r]));
            }
            t.accum_move(logits, std::move(dz));
        });
    }

    // Mean over rows of (1 - cos(pred_row, target_row)). Rows whose pred or
    // target norm falls below zero_norm_eps are skipped and counted.
    Ref cosine_distance_rows(Ref pred, const Matrix<T>& target, int* skipped_rows = nullptr,
                             T zero_norm_eps = T(1e-12)) {
        const Matrix<T>& vp = val(pred);
        require(vp.same_shape(target), "cosine_distance_rows: shape mismatch");
        require(vp.rows() > 0, "cosine_distance_rows: empty");
        const int R = vp.rows(), C = vp.cols();
        std::vector<uint8_t> active(R, 0);
        int used = 0;
        T s = 0;
        for (int r = 0; r < R; ++r) {
            T pp = 0, tt = 0, pt = 0;
            for (int c = 0; c < C; ++c) {
                pp += vp(r, c) * vp(r, c);
                tt += target(r, c) * target(r, c);
                pt += vp(r, c) * target(r, c);
            }
            const T np = std::sqrt(pp), nt = std::sqrt(tt);
            if (np < zero_norm_eps || nt < zero_norm_eps) continue;
            active[r] = 1;
            ++used;
            s += T(1) - pt / (np * nt);
        }
        if (skipped_rows) *skipped_rows = R - used;
        require(used > 0, "cosine_distance_rows: all rows degenerate");
        Matrix<T> out(1, 1);
        out(0, 0) = s / T(used);
        return unary(std::move(out), pred, [pred, target, active, used](Tape& t, const Matrix<T>& g) {
            const Matrix<T>& vp = t.val(pred);
            const int R = vp.rows(), C = vp.cols();
            Matrix<T> dp(R, C);
            const T gs = g(0, 0) / T(used);
            for (int r = 0; r < R; ++r) {
                if (!active[r]) continue;
                T pp = 0, tt = 0, pt = 0;
                for (int c = 0; c < C; ++c) {
                    pp += vp(r, c) * vp(r, c);
                    tt += target(r, c) * target(r, c);
                    pt += vp(r, c) * target(r, c);
                }
                const T np = std::sqrt(pp), nt = std::sqrt(tt);
                // d(1-cos)/dp = -t/(|p||t|) + cos * p/|p|^2
                const T cosv = pt / (np * nt);
                for (int c = 0; c < C; ++c)
                    dp(r, c) = gs * (-target(r, c) / (np * nt) + cosv * vp(r, c) / pp);
            }
            t.accum_move(pred, std::move(dp));
        });
    }

    bool needs_grad(Ref r) const { return nodes_[check(r)].needs_grad; }

    void accum(Ref r, const Matrix<T>& g) {
        Node& n = nodes_[check(r)];
        if (!n.needs_grad && !n.back) return;
        if (n.grad.empty())
            n.grad = g;
        else
            axpy(n.grad, g);
    }
    void accum_move(Ref r, Matrix<T>&& g) {
        Node& n = nodes_[check(r)];
        if (!n.needs_grad && !n.back) return;
        if (n.grad.empty())
            n.grad = std::move(g);
        else
            axpy(n.grad, g);
    }
    void accum_scaled(Ref r, const Matrix<T>& g, T alpha) {
        Node& n = nodes_[check(r)];
        if (!n.needs_grad && !n.back) return;
        if (n.grad.empty()) n.grad = Matrix<T>(g.rows(), g.cols());
        axpy(n.grad, g, alpha);
    }

private:
    struct Node {
        Matrix<T> value;
        Matrix<T> grad;
        bool needs_grad = false;
        std::function<void(Tape&)> back;
    };

    std::vector<Node> nodes_;

    int check(Ref r) const {
        if (!r.valid() || r.id >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("Tape: invalid node reference");
        return r.id;
    }

    static void require(bool cond, const char* msg) {
        if (!cond) throw std::invalid_argument(msg);
    }

    static void axpy_row(T* dst, const T* src, int n, T alpha) {
        for (int i = 0; i < n; ++i) dst[i] += alpha * src[i];
    }

    static T gelu_fwd(T x) {
        const T k = T(0.7978845608028654);  // sqrt(2/pi)
        const T inner = k * (x + T(0.044715) * x * x * x);
        return T(0.5) * x * (T(1) + std::tanh(inner));
    }
    static T gelu_bwd(T x) {
        const T k = T(0.7978845608028654);
        const T x3 = x * x * x;
        const T inner = k * (x + T(0.044715) * x3);
        const T th = std::tanh(inner);
        const T sech2 = T(1) - th * th;
        return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * k * (T(1) + T(3) * T(0.044715) * x * x);
    }

    template <typename F>
    Ref make_node(Matrix<T> value, F&& back) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = true;
        Ref self{static_cast<int>(nodes_.size())};
        n.back = [self, f = std::forward<F>(back)](Tape& t) { f(t, t.nodes_[self.id].grad); };
        nodes_.push_back(std::move(n));
        return self;
    }

    template <typename F>
    Ref unary(Matrix<T> value, Ref a, F&& back) {
        if (!needs_grad(a)) return constant(std::move(value));
        return make_node(std::move(value), std::forward<F>(back));
    }

    template <typename F>
    Ref unary_or_binary(Matrix<T> value, Ref a, Ref b, F&& back) {
        if (!needs_grad(a) && !needs_grad(b)) return constant(std::move(value));
        return make_node(std::move(value), std::forward<F>(back));
    }

    template <typename F>
    Ref any_op(Matrix<T> value, std::initializer_list<Ref> inputs, F&& back) {
        bool ng = false;
        for (Ref r : inputs) ng = ng || needs_grad(r);
        if (!ng) return constant(std::move(value));
        return make_node(std::move(value), std::forward<F>(back));
    }
};

}  // namespace melatts
