#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace geossl {

// Reverse-mode autodiff over dense row-major matrices. A Graph is a tape:
// nodes are appended in topological order during the forward pass and
// visited once in reverse during backward(). Scalars are 1x1 matrices.
//
// The scalar type is a template parameter: float for training, double for
// finite-difference gradient checking. All reductions run in a fixed index
// order so results are bit-reproducible run to run.
template <typename T>
class Graph {
public:
    using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Map = Eigen::Map<Matrix>;
    using ConstMap = Eigen::Map<const Matrix>;

    struct Node {
        int rows = 0, cols = 0;
        std::vector<T> value;
        std::vector<T> grad;  // allocated lazily during backward
        bool requires_grad = false;
        std::function<void(Graph&, int)> backward_fn;
    };

    // --- node management --------------------------------------------------

    int leaf(int rows, int cols, std::vector<T> values, bool requires_grad) {
        check_count(rows, cols, values.size(), "leaf");
        Node n;
        n.rows = rows;
        n.cols = cols;
        n.value = std::move(values);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int constant(int rows, int cols, std::vector<T> values) {
        return leaf(rows, cols, std::move(values), false);
    }

    int scalar_constant(T v) { return constant(1, 1, {v}); }

    // Appends a node with precomputed values. requires_grad is inherited
    // from the parents; backward_fn runs only when some parent needs grads.
    int make_node(int rows, int cols, std::vector<T> values, const std::vector<int>& parents,
                  std::function<void(Graph&, int)> backward_fn) {
        check_count(rows, cols, values.size(), "make_node");
        Node n;
        n.rows = rows;
        n.cols = cols;
        n.value = std::move(values);
        for (const int p : parents) n.requires_grad |= node(p).requires_grad;
        if (n.requires_grad) n.backward_fn = std::move(backward_fn);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Node& node(int id) { return nodes_.at(static_cast<size_t>(id)); }
    const Node& node(int id) const { return nodes_.at(static_cast<size_t>(id)); }
    int rows(int id) const { return node(id).rows; }
    int cols(int id) const { return node(id).cols; }
    size_t size() const { return nodes_.size(); }

    std::vector<T>& val(int id) { return node(id).value; }
    const std::vector<T>& val(int id) const { return node(id).value; }
    T scalar(int id) const {
        const Node& n = node(id);
        if (n.rows != 1 || n.cols != 1) throw std::runtime_error("scalar() on non-scalar node");
        return n.value[0];
    }

    bool needs_grad(int id) const { return node(id).requires_grad; }

    // Zero-initialized gradient buffer, allocated on first touch.
    std::vector<T>& grad(int id) {
        Node& n = node(id);
        if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
        return n.grad;
    }

    Map mat(int id) {
        Node& n = node(id);
        return Map(n.value.data(), n.rows, n.cols);
    }
    Map gmat(int id) {
        Node& n = node(id);
        grad(id);
        return Map(n.grad.data(), n.rows, n.cols);
    }

    // --- backward ---------------------------------------------------------

    void backward(int loss_id) {
        const Node& loss = node(loss_id);
        if (loss.rows != 1 || loss.cols != 1) {
            throw std::runtime_error("backward: loss must be a scalar, got " +
                                     shape_str(loss.rows, loss.cols));
        }
        grad(loss_id)[0] = T(1);
        for (int id = loss_id; id >= 0; --id) {
            Node& n = node(id);
            if (!n.backward_fn || n.grad.empty()) continue;
            n.backward_fn(*this, id);
        }
    }

    // --- elementwise and linear ops ---------------------------------------

    int add(int a, int b) {
        check_same_shape(a, b, "add");
        std::vector<T> out = val(a);
        const auto& vb = val(b);
        for (size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return make_node(rows(a), cols(a), std::move(out), {a, b}, [a, b](Graph& g, int self) {
            const auto& go = g.grad(self);
            if (g.needs_grad(a)) {
                auto& ga = g.grad(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (g.needs_grad(b)) {
                auto& gb = g.grad(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
    }

    int sub(int a, int b) {
        check_same_shape(a, b, "sub");
        std::vector<T> out = val(a);
        const auto& vb = val(b);
        for (size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
        return make_node(rows(a), cols(a), std::move(out), {a, b}, [a, b](Graph& g, int self) {
            const auto& go = g.grad(self);
            if (g.needs_grad(a)) {
                auto& ga = g.grad(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (g.needs_grad(b)) {
                auto& gb = g.grad(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
            }
        });
    }

    int mul(int a, int b) {
        check_same_shape(a, b, "mul");
        std::vector<T> out = val(a);
        const auto& vb = val(b);
        for (size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return make_node(rows(a), cols(a), std::move(out), {a, b}, [a, b](Graph& g, int self) {
            const auto& go = g.grad(self);
            const auto& va = g.val(a);
            const auto& vb2 = g.val(b);
            if (g.needs_grad(a)) {
                auto& ga = g.grad(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb2[i];
            }
            if (g.needs_grad(b)) {
                auto& gb = g.grad(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va[i];
            }
        });
    }

    int scale(int a, T c) {
        std::vector<T> out = val(a);
        for (auto& v : out) v *= c;
        return make_node(rows(a), cols(a), std::move(out), {a}, [a, c](Graph& g, int self) {
            const auto& go = g.grad(self);
            auto& ga = g.grad(a);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
        });
    }

    // (M x K) * (K x N) -> (M x N)
    int matmul(int a, int b) {
        if (cols(a) != rows(b)) {
            throw std::runtime_error("matmul: incompatible shapes " +
                                     shape_str(rows(a), cols(a)) + " and " +
                                     shape_str(rows(b), cols(b)));
        }
        std::vector<T> out(static_cast<size_t>(rows(a)) * static_cast<size_t>(cols(b)));
        Map(out.data(), rows(a), cols(b)).noalias() = mat(a) * mat(b);
        return make_node(rows(a), cols(b), std::move(out), {a, b}, [a, b](Graph& g, int self) {
            Map go(g.grad(self).data(), g.rows(self), g.cols(self));
            if (g.needs_grad(a)) g.gmat(a).noalias() += go * g.mat(b).transpose();
            if (g.needs_grad(b)) g.gmat(b).noalias() += g.mat(a).transpose() * go;
        });
    }

    // (M x N) + row-broadcast bias (1 x N)
    int add_bias(int a, int bias) {
        if (rows(bias) != 1 || cols(bias) != cols(a)) {
            throw std::runtime_error("add_bias: bias " + shape_str(rows(bias), cols(bias)) +
                                     " does not match " + shape_str(rows(a), cols(a)));
        }
        std::vector<T> out = val(a);
        const auto& vb = val(bias);
        const int n = cols(a);
        for (int r = 0; r < rows(a); ++r) {
            for (int c = 0; c < n; ++c) {
                out[static_cast<size_t>(r) * n + c] += vb[static_cast<size_t>(c)];
            }
        }
        return make_node(rows(a), cols(a), std::move(out), {a, bias},
                         [a, bias](Graph& g, int self) {
                             const auto& go = g.grad(self);
                             const int n = g.cols(a);
                             if (g.needs_grad(a)) {
                                 auto& ga = g.grad(a);
                                 for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                             }
                             if (g.needs_grad(bias)) {
                                 auto& gb = g.grad(bias);
                                 for (int r = 0; r < g.rows(a); ++r) {
                                     for (int c = 0; c < n; ++c) {
                                         gb[static_cast<size_t>(c)] +=
                                             go[static_cast<size_t>(r) * n + c];
                                     }
                                 }
                             }
                         });
    }

    int linear(int x, int w, int b) { return add_bias(matmul(x, w), b); }

    int gelu(int a) {
        std::vector<T> out = val(a);
        for (auto& v : out) {
            v = v * T(0.5) * (T(1) + std::erf(v / T(M_SQRT2)));
        }
        return make_node(rows(a), cols(a), std::move(out), {a}, [a](Graph& g, int self) {
            const auto& go = g.grad(self);
            const auto& va = g.val(a);
            auto& ga = g.grad(a);
            const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
            for (size_t i = 0; i < go.size(); ++i) {
                const T x = va[i];
                const T cdf = T(0.5) * (T(1) + std::erf(x / T(M_SQRT2)));
                const T pdf = inv_sqrt2pi * std::exp(-x * x / T(2));
                ga[i] += go[i] * (cdf + x * pdf);
            }
        });
    }

    // y = x / sqrt(mean(x^2) + eps) * gain, per row; gain is (1 x C)
    int rms_norm(int x, int gain, T eps = T(1e-6)) {
        if (rows(gain) != 1 || cols(gain) != cols(x)) {
            throw std::runtime_error("rms_norm: gain " + shape_str(rows(gain), cols(gain)) +
                                     " does not match " + shape_str(rows(x), cols(x)));
        }
        const int R = rows(x), C = cols(x);
        const auto& vx = val(x);
        const auto& vg = val(gain);
        std::vector<T> out(vx.size());
        std::vector<T> inv_rms(static_cast<size_t>(R));
        for (int r = 0; r < R; ++r) {
            T m = T(0);
            for (int c = 0; c < C; ++c) {
                const T v = vx[static_cast<size_t>(r) * C + c];
                m += v * v;
            }
            m = m / T(C) + eps;
            const T ir = T(1) / std::sqrt(m);
            inv_rms[static_cast<size_t>(r)] = ir;
            for (int c = 0; c < C; ++c) {
                out[static_cast<size_t>(r) * C + c] =
                    vx[static_cast<size_t>(r) * C + c] * ir * vg[static_cast<size_t>(c)];
            }
        }
        return make_node(
            R, C, std::move(out), {x, gain},
            [x, gain, inv_rms = std::move(inv_rms)](Graph& g, int self) {
                const int R2 = g.rows(x), C2 = g.cols(x);
                const auto& go = g.grad(self);
                const auto& vx2 = g.val(x);
                const auto& vg2 = g.val(gain);
                if (g.needs_grad(x)) {
                    auto& gx = g.grad(x);
                    for (int r = 0; r < R2; ++r) {
                        const T ir = inv_rms[static_cast<size_t>(r)];
                        T dot = T(0);
                        for (int c = 0; c < C2; ++c) {
                            const size_t i = static_cast<size_t>(r) * C2 + c;
                            dot += go[i] * vg2[static_cast<size_t>(c)] * vx2[i];
                        }
                        const T k = dot * ir * ir * ir / T(C2);
                        for (int c = 0; c < C2; ++c) {
                            const size_t i = static_cast<size_t>(r) * C2 + c;
                            gx[i] += go[i] * vg2[static_cast<size_t>(c)] * ir - vx2[i] * k;
                        }
                    }
                }
                if (g.needs_grad(gain)) {
                    auto& gg = g.grad(gain);
                    for (int r = 0; r < R2; ++r) {
                        const T ir = inv_rms[static_cast<size_t>(r)];
                        for (int c = 0; c < C2; ++c) {
                            const size_t i = static_cast<size_t>(r) * C2 + c;
                            gg[static_cast<size_t>(c)] += go[i] * vx2[i] * ir;
                        }
                    }
                }
            });
    }

    int softmax_rows(int x) {
        const int R = rows(x), C = cols(x);
        std::vector<T> out = val(x);
        for (int r = 0; r < R; ++r) {
            T* row = out.data() + static_cast<size_t>(r) * C;
            T mx = row[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
            T sum = T(0);
            for (int c = 0; c < C; ++c) {
                row[c] = std::exp(row[c] - mx);
                sum += row[c];
            }
            for (int c = 0; c < C; ++c) row[c] /= sum;
        }
        return make_node(R, C, std::move(out), {x}, [x](Graph& g, int self) {
            const int R2 = g.rows(self), C2 = g.cols(self);
            const auto& y = g.val(self);
            const auto& go = g.grad(self);
            auto& gx = g.grad(x);
            for (int r = 0; r < R2; ++r) {
                T dot = T(0);
                for (int c = 0; c < C2; ++c) {
                    const size_t i = static_cast<size_t>(r) * C2 + c;
                    dot += go[i] * y[i];
                }
                for (int c = 0; c < C2; ++c) {
                    const size_t i = static_cast<size_t>(r) * C2 + c;
                    gx[i] += y[i] * (go[i] - dot);
                }
            }
        });
    }

    // --- shape surgery ----------------------------------------------------

    int gather_rows(int x, std::vector<int> idx) {
        const int C = cols(x);
        const int R = static_cast<int>(idx.size());
        const auto& vx = val(x);
        std::vector<T> out(idx.size() * static_cast<size_t>(C));
        for (size_t r = 0; r < idx.size(); ++r) {
            check_row(idx[r], rows(x), "gather_rows");
            std::copy_n(vx.data() + static_cast<size_t>(idx[r]) * C, C,
                        out.data() + r * static_cast<size_t>(C));
        }
        return make_node(R, C, std::move(out), {x},
                         [x, idx = std::move(idx)](Graph& g, int self) {
                             const int C2 = g.cols(x);
                             const auto& go = g.grad(self);
                             auto& gx = g.grad(x);
                             for (size_t r = 0; r < idx.size(); ++r) {
                                 for (int c = 0; c < C2; ++c) {
                                     gx[static_cast<size_t>(idx[r]) * C2 + c] +=
                                         go[r * static_cast<size_t>(C2) + c];
                                 }
                             }
                         });
    }

    // Copy of x with the given rows replaced by a single broadcast row.
    int replace_rows_with_row(int x, std::vector<int> idx, int row) {
        if (rows(row) != 1 || cols(row) != cols(x)) {
            throw std::runtime_error("replace_rows_with_row: row " +
                                     shape_str(rows(row), cols(row)) + " does not match " +
                                     shape_str(rows(x), cols(x)));
        }
        const int C = cols(x);
        std::vector<T> out = val(x);
        const auto& vr = val(row);
        for (const int r : idx) {
            check_row(r, rows(x), "replace_rows_with_row");
            std::copy_n(vr.data(), C, out.data() + static_cast<size_t>(r) * C);
        }
        return make_node(rows(x), C, std::move(out), {x, row},
                         [x, row, idx = std::move(idx)](Graph& g, int self) {
                             const int C2 = g.cols(x);
                             const auto& go = g.grad(self);
                             if (g.needs_grad(x)) {
                                 auto& gx = g.grad(x);
                                 std::vector<char> replaced(static_cast<size_t>(g.rows(x)), 0);
                                 for (const int r : idx) replaced[static_cast<size_t>(r)] = 1;
                                 for (int r = 0; r < g.rows(x); ++r) {
                                     if (replaced[static_cast<size_t>(r)]) continue;
                                     for (int c = 0; c < C2; ++c) {
                                         gx[static_cast<size_t>(r) * C2 + c] +=
                                             go[static_cast<size_t>(r) * C2 + c];
                                     }
                                 }
                             }
                             if (g.needs_grad(row)) {
                                 auto& gr = g.grad(row);
                                 for (const int r : idx) {
                                     for (int c = 0; c < C2; ++c) {
                                         gr[static_cast<size_t>(c)] +=
                                             go[static_cast<size_t>(r) * C2 + c];
                                     }
                                 }
                             }
                         });
    }

    // Builds an (n x C) matrix: every row starts as `base` (1 x C), then rows
    // listed in idx are overwritten with the corresponding row of `rows_x`.
    int broadcast_scatter(int base, int n, std::vector<int> idx, int rows_x) {
        if (rows(base) != 1 || cols(base) != cols(rows_x)) {
            throw std::runtime_error("broadcast_scatter: base " +
                                     shape_str(rows(base), cols(base)) + " does not match " +
                                     shape_str(rows(rows_x), cols(rows_x)));
        }
        if (static_cast<int>(idx.size()) != rows(rows_x)) {
            throw std::runtime_error("broadcast_scatter: index count " +
                                     std::to_string(idx.size()) + " != row count " +
                                     std::to_string(rows(rows_x)));
        }
        const int C = cols(base);
        std::vector<T> out(static_cast<size_t>(n) * C);
        const auto& vb = val(base);
        for (int r = 0; r < n; ++r) std::copy_n(vb.data(), C, out.data() + static_cast<size_t>(r) * C);
        const auto& vr = val(rows_x);
        for (size_t k = 0; k < idx.size(); ++k) {
            check_row(idx[k], n, "broadcast_scatter");
            std::copy_n(vr.data() + k * static_cast<size_t>(C), C,
                        out.data() + static_cast<size_t>(idx[k]) * C);
        }
        return make_node(n, C, std::move(out), {base, rows_x},
                         [base, rows_x, n, idx = std::move(idx)](Graph& g, int self) {
                             const int C2 = g.cols(base);
                             const auto& go = g.grad(self);
                             std::vector<char> scattered(static_cast<size_t>(n), 0);
                             for (const int r : idx) scattered[static_cast<size_t>(r)] = 1;
                             if (g.needs_grad(base)) {
                                 auto& gb = g.grad(base);
                                 for (int r = 0; r < n; ++r) {
                                     if (scattered[static_cast<size_t>(r)]) continue;
                                     for (int c = 0; c < C2; ++c) {
                                         gb[static_cast<size_t>(c)] +=
                                             go[static_cast<size_t>(r) * C2 + c];
                                     }
                                 }
                             }
                             if (g.needs_grad(rows_x)) {
                                 auto& gr = g.grad(rows_x);
                                 for (size_t k = 0; k < idx.size(); ++k) {
                                     for (int c = 0; c < C2; ++c) {
                                         gr[k * static_cast<size_t>(C2) + c] +=
                                             go[static_cast<size_t>(idx[k]) * C2 + c];
                                     }
                                 }
                             }
                         });
    }

    int concat_rows(const std::vector<int>& parts) {
        if (parts.empty()) throw std::runtime_error("concat_rows: no inputs");
        const int C = cols(parts[0]);
        int R = 0;
        for (const int p : parts) {
            if (cols(p) != C) {
                throw std::runtime_error("concat_rows: column mismatch " +
                                         shape_str(rows(p), cols(p)) + " vs C=" +
                                         std::to_string(C));
            }
            R += rows(p);
        }
        std::vector<T> out;
        out.reserve(static_cast<size_t>(R) * C);
        for (const int p : parts) {
            const auto& v = val(p);
            out.insert(out.end(), v.begin(), v.end());
        }
        return make_node(R, C, std::move(out), parts, [parts](Graph& g, int self) {
            const auto& go = g.grad(self);
            size_t offset = 0;
            for (const int p : parts) {
                const size_t count = g.val(p).size();
                if (g.needs_grad(p)) {
                    auto& gp = g.grad(p);
                    for (size_t i = 0; i < count; ++i) gp[i] += go[offset + i];
                }
                offset += count;
            }
        });
    }

    int concat_cols(const std::vector<int>& parts) {
        if (parts.empty()) throw std::runtime_error("concat_cols: no inputs");
        const int R = rows(parts[0]);
        int C = 0;
        for (const int p : parts) {
            if (rows(p) != R) {
                throw std::runtime_error("concat_cols: row mismatch " +
                                         shape_str(rows(p), cols(p)) + " vs R=" +
                                         std::to_string(R));
            }
            C += cols(p);
        }
        std::vector<T> out(static_cast<size_t>(R) * C);
        int col0 = 0;
        for (const int p : parts) {
            const auto& v = val(p);
            const int pc = cols(p);
            for (int r = 0; r < R; ++r) {
                std::copy_n(v.data() + static_cast<size_t>(r) * pc, pc,
                            out.data() + static_cast<size_t>(r) * C + col0);
            }
            col0 += pc;
        }
        return make_node(R, C, std::move(out), parts, [parts, C](Graph& g, int self) {
            const auto& go = g.grad(self);
            const int R2 = g.rows(self);
            int c0 = 0;
            for (const int p : parts) {
                const int pc = g.cols(p);
                if (g.needs_grad(p)) {
                    auto& gp = g.grad(p);
                    for (int r = 0; r < R2; ++r) {
                        for (int c = 0; c < pc; ++c) {
                            gp[static_cast<size_t>(r) * pc + c] +=
                                go[static_cast<size_t>(r) * C + c0 + c];
                        }
                    }
                }
                c0 += pc;
            }
        });
    }

    int slice_rows(int x, int begin, int count) {
        if (begin < 0 || count < 0 || begin + count > rows(x)) {
            throw std::runtime_error("slice_rows: range [" + std::to_string(begin) + ", " +
                                     std::to_string(begin + count) + ") outside " +
                                     std::to_string(rows(x)) + " rows");
        }
        const int C = cols(x);
        const auto& vx = val(x);
        std::vector<T> out(vx.begin() + static_cast<size_t>(begin) * C,
                           vx.begin() + static_cast<size_t>(begin + count) * C);
        return make_node(count, C, std::move(out), {x}, [x, begin](Graph& g, int self) {
            const int C2 = g.cols(x);
            const auto& go = g.grad(self);
            auto& gx = g.grad(x);
            const size_t off = static_cast<size_t>(begin) * C2;
            for (size_t i = 0; i < go.size(); ++i) gx[off + i] += go[i];
        });
    }

    // Pure reshape: same element order, new dimensions.
    int reshape(int x, int new_rows, int new_cols) {
        check_count(new_rows, new_cols, val(x).size(), "reshape");
        std::vector<T> out = val(x);
        return make_node(new_rows, new_cols, std::move(out), {x}, [x](Graph& g, int self) {
            const auto& go = g.grad(self);
            auto& gx = g.grad(x);
            for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }

    // --- reductions and losses --------------------------------------------

    int sum_all(int x) {
        T s = T(0);
        for (const T v : val(x)) s += v;
        return make_node(1, 1, {s}, {x}, [x](Graph& g, int self) {
            const T go = g.grad(self)[0];
            auto& gx = g.grad(x);
            for (auto& v : gx) v += go;
        });
    }

    int mean_all(int x) {
        const T n = static_cast<T>(val(x).size());
        T s = T(0);
        for (const T v : val(x)) s += v;
        s /= n;
        return make_node(1, 1, {s}, {x}, [x, n](Graph& g, int self) {
            const T go = g.grad(self)[0] / n;
            auto& gx = g.grad(x);
            for (auto& v : gx) v += go;
        });
    }

    // Mean over all elements of the per-element regression loss against a
    // constant target. kind_smooth_l1: r^2/(2b) for |r|<b else |r|-b/2.
    int smooth_l1_loss(int pred, const std::vector<T>& target, T beta) {
        check_target(pred, target, "smooth_l1_loss");
        if (!(beta > T(0))) throw std::runtime_error("smooth_l1_loss: beta must be positive");
        const auto& vp = val(pred);
        T acc = T(0);
        for (size_t i = 0; i < vp.size(); ++i) {
            const T r = vp[i] - target[i];
            const T a = std::abs(r);
            acc += (a < beta) ? r * r / (T(2) * beta) : a - beta / T(2);
        }
        const T n = static_cast<T>(vp.size());
        return make_node(1, 1, {acc / n}, {pred},
                         [pred, target, beta, n](Graph& g, int self) {
                             const T go = g.grad(self)[0] / n;
                             const auto& vp2 = g.val(pred);
                             auto& gp = g.grad(pred);
                             for (size_t i = 0; i < vp2.size(); ++i) {
                                 const T r = vp2[i] - target[i];
                                 const T d = (std::abs(r) < beta) ? r / beta
                                                                  : (r > T(0) ? T(1) : T(-1));
                                 gp[i] += go * d;
                             }
                         });
    }

    int mse_loss(int pred, const std::vector<T>& target) {
        check_target(pred, target, "mse_loss");
        const auto& vp = val(pred);
        T acc = T(0);
        for (size_t i = 0; i < vp.size(); ++i) {
            const T r = vp[i] - target[i];
            acc += r * r;
        }
        const T n = static_cast<T>(vp.size());
        return make_node(1, 1, {acc / n}, {pred}, [pred, target, n](Graph& g, int self) {
            const T go = g.grad(self)[0] / n;
            const auto& vp2 = g.val(pred);
            auto& gp = g.grad(pred);
            for (size_t i = 0; i < vp2.size(); ++i) {
                gp[i] += go * T(2) * (vp2[i] - target[i]);
            }
        });
    }

    // Rows scaled to unit L2 norm (with a small guard on the norm).
    int l2_normalize_rows(int x, T eps = T(1e-12)) {
        const int R = rows(x), C = cols(x);
        const auto& vx = val(x);
        std::vector<T> out(vx.size());
        std::vector<T> norms(static_cast<size_t>(R));
        for (int r = 0; r < R; ++r) {
            T s = T(0);
            for (int c = 0; c < C; ++c) {
                const T v = vx[static_cast<size_t>(r) * C + c];
                s += v * v;
            }
            const T n = std::sqrt(s);
            norms[static_cast<size_t>(r)] = n;
            const T inv = T(1) / (n + eps);
            for (int c = 0; c < C; ++c) {
                out[static_cast<size_t>(r) * C + c] = vx[static_cast<size_t>(r) * C + c] * inv;
            }
        }
        return make_node(R, C, std::move(out), {x},
                         [x, eps, norms = std::move(norms)](Graph& g, int self) {
                             const int R2 = g.rows(x), C2 = g.cols(x);
                             const auto& go = g.grad(self);
                             const auto& vx2 = g.val(x);
                             auto& gx = g.grad(x);
                             for (int r = 0; r < R2; ++r) {
                                 const T n = std::max(norms[static_cast<size_t>(r)], eps);
                                 const T s = norms[static_cast<size_t>(r)] + eps;
                                 T dot = T(0);
                                 for (int c = 0; c < C2; ++c) {
                                     const size_t i = static_cast<size_t>(r) * C2 + c;
                                     dot += go[i] * vx2[i];
                                 }
                                 const T k = dot / (n * s * s);
                                 for (int c = 0; c < C2; ++c) {
                                     const size_t i = static_cast<size_t>(r) * C2 + c;
                                     gx[i] += go[i] / s - vx2[i] * k;
                                 }
                             }
                         });
    }

    // Symmetric InfoNCE over two batches of unit-normalized embeddings.
    // 0.5 * [rowwise CE(za zb^T / tau, diag) + rowwise CE(zb za^T / tau, diag)]
    int info_nce(int za, int zb, T tau) {
        check_same_shape(za, zb, "info_nce");
        if (!(tau > T(0))) throw std::runtime_error("info_nce: tau must be positive");
        const int B = rows(za);
        using Mat = Matrix;
        Mat logits = (mat(za) * mat(zb).transpose()) / tau;  // B x B

        auto row_softmax = [](const Mat& m) {
            Mat p = m;
            for (int r = 0; r < p.rows(); ++r) {
                const T mx = p.row(r).maxCoeff();
                p.row(r) = (p.row(r).array() - mx).exp();
                p.row(r) /= p.row(r).sum();
            }
            return p;
        };
        const Mat pa = row_softmax(logits);
        const Mat pb = row_softmax(logits.transpose());
        T loss = T(0);
        for (int i = 0; i < B; ++i) {
            loss -= std::log(std::max(pa(i, i), std::numeric_limits<T>::min()));
            loss -= std::log(std::max(pb(i, i), std::numeric_limits<T>::min()));
        }
        loss /= T(2 * B);
        // d loss / d logits = 0.5/B * [(pa - I) + (pb - I)^T]
        Mat glogits = (pa + pb.transpose());
        for (int i = 0; i < B; ++i) glogits(i, i) -= T(2);
        glogits *= T(0.5) / static_cast<T>(B);
        std::vector<T> gl(glogits.data(), glogits.data() + B * B);
        return make_node(1, 1, {loss}, {za, zb},
                         [za, zb, tau, B, gl = std::move(gl)](Graph& g, int self) {
                             const T go = g.grad(self)[0];
                             ConstMap gm(gl.data(), B, B);
                             if (g.needs_grad(za)) {
                                 g.gmat(za).noalias() += (go / tau) * (gm * g.mat(zb));
                             }
                             if (g.needs_grad(zb)) {
                                 g.gmat(zb).noalias() +=
                                     (go / tau) * (gm.transpose() * g.mat(za));
                             }
                         });
    }

private:
    static std::string shape_str(int r, int c) {
        return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
    }
    static void check_count(int rows, int cols, size_t n, const char* op) {
        if (rows < 0 || cols < 0 || static_cast<size_t>(rows) * static_cast<size_t>(cols) != n) {
            throw std::runtime_error(std::string(op) + ": value count " + std::to_string(n) +
                                     " does not fill " + shape_str(rows, cols));
        }
    }
    static void check_row(int r, int n, const char* op) {
        if (r < 0 || r >= n) {
            throw std::runtime_error(std::string(op) + ": row index " + std::to_string(r) +
                                     " outside [0, " + std::to_string(n) + ")");
        }
    }
    void check_same_shape(int a, int b, const char* op) const {
        if (rows(a) != rows(b) || cols(a) != cols(b)) {
            throw std::runtime_error(std::string(op) + ": shape mismatch " +
                                     shape_str(rows(a), cols(a)) + " vs " +
                                     shape_str(rows(b), cols(b)));
        }
    }
    void check_target(int pred, const std::vector<T>& target, const char* op) const {
        if (target.size() != val(pred).size()) {
            throw std::runtime_error(std::string(op) + ": target count " +
                                     std::to_string(target.size()) + " != prediction count " +
                                     std::to_string(val(pred).size()));
        }
    }

    std::vector<Node> nodes_;
};

}  // namespace geossl
