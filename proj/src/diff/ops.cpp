#include "magekt/diff/ops.hpp"

#include "magekt/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace magekt::diff {

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw DomainError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " + b.shape_string());
}

// Applies f elementwise; the derivative is expressed through input x and
// output y so callers can pick whichever is cheaper.
template <typename F, typename D>
Var unary(Var a, const char* op, F f, D df) {
    const Tensor& x = a.value();
    Tensor y = Tensor::matrix(x.rows(), x.cols(), std::vector<double>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = f(x.data()[i]);
    const auto ia = a.id();
    return a.tape().record(std::move(y), {a},
                           [ia, df](Tape& t, std::size_t self, std::span<const double> g) {
                               const auto& xv = t.value(ia).data();
                               const auto& yv = t.value(self).data();
                               auto ga = t.grad_buffer(ia);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
                           },
                           op);
}

}  // namespace

SparseMatrix SparseMatrix::identity(std::size_t n) {
    SparseMatrix m;
    m.rows = m.cols = n;
    for (std::size_t i = 0; i < n; ++i) m.entries.push_back({i, i, 1.0});
    return m;
}

Tensor SparseMatrix::dense() const {
    Tensor t = Tensor::zeros(rows, cols);
    for (const auto& e : entries) t(e.row, e.col) += e.value;
    return t;
}

Var sparse_matmul(const SparseMatrix& sm, Var x) {
    const Tensor& X = x.value();
    if (sm.cols != X.rows()) throw DomainError("sparse_matmul: " + std::to_string(sm.cols) + " columns vs " + X.shape_string());
    const std::size_t m = X.cols();
    Tensor out = Tensor::zeros(sm.rows, m);
    for (const auto& e : sm.entries) {
        if (e.row >= sm.rows || e.col >= sm.cols) throw DomainError("sparse_matmul: entry out of range");
        for (std::size_t c = 0; c < m; ++c) out.data()[e.row * m + c] += e.value * X.data()[e.col * m + c];
    }
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x},
                           [ix, entries = sm.entries, m](Tape& t, std::size_t, std::span<const double> g) {
                               auto gx = t.grad_buffer(ix);
                               for (const auto& e : entries) {
                                   for (std::size_t c = 0; c < m; ++c) gx[e.col * m + c] += e.value * g[e.row * m + c];
                               }
                           },
                           "sparse_matmul");
}

Var matmul(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
    if (B.rows() != k) shape_error("matmul", A, B);
    Tensor C = Tensor::zeros(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        double* c = &C.data()[i * m];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A.data()[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &B.data()[p * m];
            for (std::size_t j = 0; j < m; ++j) c[j] += av * brow[j];
        }
    }
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(C), {a, b},
                           [ia, ib, n, k, m](Tape& t, std::size_t, std::span<const double> g) {
                               const auto& Av = t.value(ia).data();
                               const auto& Bv = t.value(ib).data();
                               if (t.needs_grad(ia)) {
                                   // dA = G B^T
                                   auto ga = t.grad_buffer(ia);
                                   for (std::size_t i = 0; i < n; ++i) {
                                       for (std::size_t p = 0; p < k; ++p) {
                                           double s = 0.0;
                                           for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * Bv[p * m + j];
                                           ga[i * k + p] += s;
                                       }
                                   }
                               }
                               if (t.needs_grad(ib)) {
                                   // dB = A^T G
                                   auto gb = t.grad_buffer(ib);
                                   for (std::size_t i = 0; i < n; ++i) {
                                       for (std::size_t p = 0; p < k; ++p) {
                                           const double av = Av[i * k + p];
                                           if (av == 0.0) continue;
                                           for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * g[i * m + j];
                                       }
                                   }
                               }
                           },
                           "matmul");
}

Var add(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    const bool same = A.shape() == B.shape();
    const bool row_bias = !same && B.rows() == 1 && B.cols() == A.cols();
    if (!same && !row_bias) shape_error("add", A, B);
    Tensor C = A;
    C.requires_grad = false;
    const std::size_t cols = A.cols();
    for (std::size_t i = 0; i < C.size(); ++i) C.data()[i] += B.data()[same ? i : i % cols];
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(C), {a, b},
                           [ia, ib, same, cols](Tape& t, std::size_t, std::span<const double> g) {
                               if (t.needs_grad(ia)) {
                                   auto ga = t.grad_buffer(ia);
                                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (t.needs_grad(ib)) {
                                   auto gb = t.grad_buffer(ib);
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[same ? i : i % cols] += g[i];
                               }
                           },
                           "add");
}

Var sub(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.shape() != B.shape()) shape_error("sub", A, B);
    Tensor C = A;
    C.requires_grad = false;
    for (std::size_t i = 0; i < C.size(); ++i) C.data()[i] -= B.data()[i];
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(C), {a, b},
                           [ia, ib](Tape& t, std::size_t, std::span<const double> g) {
                               if (t.needs_grad(ia)) {
                                   auto ga = t.grad_buffer(ia);
                                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (t.needs_grad(ib)) {
                                   auto gb = t.grad_buffer(ib);
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                               }
                           },
                           "sub");
}

Var mul(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.shape() != B.shape()) shape_error("mul", A, B);
    Tensor C = A;
    C.requires_grad = false;
    for (std::size_t i = 0; i < C.size(); ++i) C.data()[i] *= B.data()[i];
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(C), {a, b},
                           [ia, ib](Tape& t, std::size_t, std::span<const double> g) {
                               const auto& Av = t.value(ia).data();
                               const auto& Bv = t.value(ib).data();
                               if (t.needs_grad(ia)) {
                                   auto ga = t.grad_buffer(ia);
                                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * Bv[i];
                               }
                               if (t.needs_grad(ib)) {
                                   auto gb = t.grad_buffer(ib);
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * Av[i];
                               }
                           },
                           "mul");
}

Var affine(Var a, double scale, double shift) {
    return unary(
        a, "affine", [scale, shift](double x) { return scale * x + shift; },
        [scale](double, double) { return scale; });
}

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw DomainError("concat: no operands");
    if (axis != 0 && axis != 1) throw DomainError("concat: axis must be 0 or 1");
    const Tensor& first = parts.front().value();
    std::size_t rows = 0, cols = 0;
    for (const auto& p : parts) {
        const Tensor& v = p.value();
        if (axis == 0) {
            if (v.cols() != first.cols()) shape_error("concat", first, v);
            rows += v.rows();
        } else {
            if (v.rows() != first.rows()) shape_error("concat", first, v);
            cols += v.cols();
        }
    }
    if (axis == 0) cols = first.cols();
    else rows = first.rows();
    Tensor out = Tensor::zeros(rows, cols);
    // offsets[i] = starting row (axis 0) or column (axis 1) of part i.
    std::vector<std::size_t> offsets, ids;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const Tensor& v = p.value();
        offsets.push_back(off);
        ids.push_back(p.id());
        for (std::size_t r = 0; r < v.rows(); ++r) {
            for (std::size_t c = 0; c < v.cols(); ++c) {
                if (axis == 0) out(off + r, c) = v(r, c);
                else out(r, off + c) = v(r, c);
            }
        }
        off += axis == 0 ? v.rows() : v.cols();
    }
    return parts.front().tape().record(
        std::move(out), parts,
        [ids, offsets, axis, cols](Tape& t, std::size_t, std::span<const double> g) {
            for (std::size_t p = 0; p < ids.size(); ++p) {
                if (!t.needs_grad(ids[p])) continue;
                const Tensor& v = t.value(ids[p]);
                auto gp = t.grad_buffer(ids[p]);
                const std::size_t vr = v.rows(), vc = v.cols();
                for (std::size_t r = 0; r < vr; ++r) {
                    for (std::size_t c = 0; c < vc; ++c) {
                        const std::size_t src = axis == 0 ? (offsets[p] + r) * cols + c : r * cols + offsets[p] + c;
                        gp[r * vc + c] += g[src];
                    }
                }
            }
        },
        "concat");
}

Var slice(Var a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    const Tensor& A = a.value();
    if (r0 > r1 || r1 > A.rows() || c0 > c1 || c1 > A.cols() || r0 == r1 || c0 == c1) {
        throw DomainError("slice: range out of bounds for " + A.shape_string());
    }
    Tensor out = Tensor::zeros(r1 - r0, c1 - c0);
    for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) out(r - r0, c - c0) = A(r, c);
    }
    const auto ia = a.id();
    const std::size_t cols = A.cols(), w = c1 - c0;
    return a.tape().record(std::move(out), {a},
                           [ia, r0, r1, c0, cols, w](Tape& t, std::size_t, std::span<const double> g) {
                               auto ga = t.grad_buffer(ia);
                               for (std::size_t r = r0; r < r1; ++r) {
                                   for (std::size_t c = 0; c < w; ++c) ga[r * cols + c0 + c] += g[(r - r0) * w + c];
                               }
                           },
                           "slice");
}

Var transpose(Var a) {
    const Tensor& A = a.value();
    const std::size_t n = A.rows(), m = A.cols();
    Tensor out = Tensor::zeros(m, n);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < m; ++c) out(c, r) = A(r, c);
    }
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a},
                           [ia, n, m](Tape& t, std::size_t, std::span<const double> g) {
                               auto ga = t.grad_buffer(ia);
                               for (std::size_t r = 0; r < n; ++r) {
                                   for (std::size_t c = 0; c < m; ++c) ga[r * m + c] += g[c * n + r];
                               }
                           },
                           "transpose");
}

Var softmax_rows(Var a) {
    const Tensor& A = a.value();
    const std::size_t n = A.rows(), m = A.cols();
    Tensor out = Tensor::zeros(n, m);
    for (std::size_t r = 0; r < n; ++r) {
        double mx = A(r, 0);
        for (std::size_t c = 1; c < m; ++c) mx = std::max(mx, A(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < m; ++c) z += (out(r, c) = std::exp(A(r, c) - mx));
        for (std::size_t c = 0; c < m; ++c) out(r, c) /= z;
    }
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a},
                           [ia, n, m](Tape& t, std::size_t self, std::span<const double> g) {
                               const auto& y = t.value(self).data();
                               auto ga = t.grad_buffer(ia);
                               for (std::size_t r = 0; r < n; ++r) {
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < m; ++c) dot += g[r * m + c] * y[r * m + c];
                                   for (std::size_t c = 0; c < m; ++c) {
                                       ga[r * m + c] += y[r * m + c] * (g[r * m + c] - dot);
                                   }
                               }
                           },
                           "softmax_rows");
}

Var sigmoid(Var a) {
    return unary(
        a, "sigmoid",
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
    return unary(
        a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var gelu(Var a) {
    return unary(
        a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
            const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + x * pdf;
        });
}

Var log(Var a) {
    for (double v : a.value().data()) {
        if (!(v > 0.0)) throw DomainError("log: non-positive input");
    }
    return unary(
        a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& X = x.value();
    const std::size_t n = X.rows(), m = X.cols();
    if (gain.value().shape() != std::vector<std::size_t>{1, m}) shape_error("layer_norm", X, gain.value());
    if (bias.value().shape() != std::vector<std::size_t>{1, m}) shape_error("layer_norm", X, bias.value());
    const auto& G = gain.value().data();
    const auto& B = bias.value().data();
    Tensor out = Tensor::zeros(n, m);
    // Normalized rows and inverse std are kept for the backward pass.
    std::vector<double> xhat(n * m), inv_std(n);
    for (std::size_t r = 0; r < n; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < m; ++c) mu += X(r, c);
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t c = 0; c < m; ++c) var += (X(r, c) - mu) * (X(r, c) - mu);
        var /= static_cast<double>(m);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < m; ++c) {
            xhat[r * m + c] = (X(r, c) - mu) * inv_std[r];
            out(r, c) = xhat[r * m + c] * G[c] + B[c];
        }
    }
    const auto ix = x.id(), ig = gain.id(), ib = bias.id();
    return x.tape().record(
        std::move(out), {x, gain, bias},
        [ix, ig, ib, n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t,
                                                                                   std::span<const double> g) {
            const auto& Gv = t.value(ig).data();
            if (t.needs_grad(ig)) {
                auto gg = t.grad_buffer(ig);
                for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t c = 0; c < m; ++c) gg[c] += g[r * m + c] * xhat[r * m + c];
                }
            }
            if (t.needs_grad(ib)) {
                auto gb = t.grad_buffer(ib);
                for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t c = 0; c < m; ++c) gb[c] += g[r * m + c];
                }
            }
            if (t.needs_grad(ix)) {
                auto gx = t.grad_buffer(ix);
                const double inv_m = 1.0 / static_cast<double>(m);
                for (std::size_t r = 0; r < n; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t c = 0; c < m; ++c) {
                        const double dh = g[r * m + c] * Gv[c];
                        s1 += dh;
                        s2 += dh * xhat[r * m + c];
                    }
                    for (std::size_t c = 0; c < m; ++c) {
                        const double dh = g[r * m + c] * Gv[c];
                        gx[r * m + c] += inv_std[r] * (dh - inv_m * s1 - xhat[r * m + c] * inv_m * s2);
                    }
                }
            }
        },
        "layer_norm");
}

Var dropout(Var x, double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("dropout: rate must be in [0, 1)");
    auto& ctx = x.tape().dropout();
    if (!ctx.training || rate == 0.0) return x;
    const std::uint64_t key = hash_combine(ctx.key, ctx.next_instance++);
    const Tensor& X = x.value();
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(X.size());
    Tensor out = Tensor::matrix(X.rows(), X.cols(), std::vector<double>(X.size()));
    for (std::size_t i = 0; i < X.size(); ++i) {
        mask[i] = to_unit(hash_combine(key, i)) < rate ? 0.0 : keep_scale;
        out.data()[i] = X.data()[i] * mask[i];
    }
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x},
                           [ix, mask = std::move(mask)](Tape& t, std::size_t, std::span<const double> g) {
                               auto gx = t.grad_buffer(ix);
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                           },
                           "dropout");
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const auto ia = a.id();
    return a.tape().record(Tensor::scalar(s), {a},
                           [ia](Tape& t, std::size_t, std::span<const double> g) {
                               auto ga = t.grad_buffer(ia);
                               for (auto& v : ga) v += g[0];
                           },
                           "sum");
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mean_rows(Var a) {
    const Tensor& A = a.value();
    const std::size_t n = A.rows(), m = A.cols();
    Tensor out = Tensor::zeros(1, m);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < m; ++c) out(0, c) += A(r, c);
    }
    for (auto& v : out.data()) v /= static_cast<double>(n);
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a},
                           [ia, n, m](Tape& t, std::size_t, std::span<const double> g) {
                               auto ga = t.grad_buffer(ia);
                               const double inv = 1.0 / static_cast<double>(n);
                               for (std::size_t r = 0; r < n; ++r) {
                                   for (std::size_t c = 0; c < m; ++c) ga[r * m + c] += g[c] * inv;
                               }
                           },
                           "mean_rows");
}

Var gather_rows(Var table, const std::vector<std::size_t>& indices) {
    const Tensor& T = table.value();
    const std::size_t m = T.cols();
    if (indices.empty()) throw DomainError("gather_rows: no indices");
    Tensor out = Tensor::zeros(indices.size(), m);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= T.rows()) {
            throw DomainError("gather_rows: index " + std::to_string(indices[i]) + " out of range " + T.shape_string());
        }
        std::copy_n(&T.data()[indices[i] * m], m, &out.data()[i * m]);
    }
    const auto it = table.id();
    return table.tape().record(std::move(out), {table},
                               [it, indices, m](Tape& t, std::size_t, std::span<const double> g) {
                                   auto gt = t.grad_buffer(it);
                                   for (std::size_t i = 0; i < indices.size(); ++i) {
                                       for (std::size_t c = 0; c < m; ++c) gt[indices[i] * m + c] += g[i * m + c];
                                   }
                               },
                               "gather_rows");
}

Var bce_sum(Var p, const std::vector<double>& targets) {
    const Tensor& P = p.value();
    if (P.size() != targets.size()) {
        throw DomainError("bce_sum: " + std::to_string(P.size()) + " predictions for " +
                          std::to_string(targets.size()) + " targets");
    }
    constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
    double loss = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double q = std::clamp(P.data()[i], lo, hi);
        loss -= targets[i] * std::log(q) + (1.0 - targets[i]) * std::log(1.0 - q);
    }
    const auto ip = p.id();
    return p.tape().record(Tensor::scalar(loss), {p},
                           [ip, targets](Tape& t, std::size_t, std::span<const double> g) {
                               const auto& Pv = t.value(ip).data();
                               auto gp = t.grad_buffer(ip);
                               for (std::size_t i = 0; i < targets.size(); ++i) {
                                   const double x = Pv[i];
                                   if (x < lo || x > hi) continue;  // flat where clamped
                                   gp[i] += g[0] * (-targets[i] / x + (1.0 - targets[i]) / (1.0 - x));
                               }
                           },
                           "bce_sum");
}

}  // namespace magekt::diff
