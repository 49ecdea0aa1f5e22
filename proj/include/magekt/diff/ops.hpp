#pragma once

#include "magekt/diff/tape.hpp"

#include <vector>

namespace magekt::diff {

/// Constant sparse matrix in coordinate form.
struct SparseMatrix {
    struct Entry {
        std::size_t row;
        std::size_t col;
        double value;
    };
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<Entry> entries;

    static SparseMatrix identity(std::size_t n);
    Tensor dense() const;
};

// Every op throws DomainError on a shape mismatch or a non-finite result.

Var matmul(Var a, Var b);
/// Constant sparse `m` times `x`.
Var sparse_matmul(const SparseMatrix& m, Var x);
/// Same shapes, or `b` a 1 x cols row added to every row of `a`.
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product of equal shapes.
Var mul(Var a, Var b);
/// scale * a + shift, elementwise with constants.
Var affine(Var a, double scale, double shift = 0.0);
inline Var scale(Var a, double s) { return affine(a, s, 0.0); }
/// axis 0 stacks rows, axis 1 joins columns.
Var concat(const std::vector<Var>& parts, int axis);
/// Rows [r0, r1) and columns [c0, c1).
Var slice(Var a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);
Var transpose(Var a);
Var softmax_rows(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
/// Exact (erf) GELU.
Var gelu(Var a);
Var log(Var a);
/// Per-row normalization with learned 1 x cols gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Inverted dropout driven by the tape's DropoutContext; identity when not
/// training or rate is 0.
Var dropout(Var x, double rate);
/// Mean over all entries, 1 x 1.
Var mean(Var a);
/// Column means, 1 x cols.
Var mean_rows(Var a);
Var sum(Var a);
/// Rows of `table` at `indices` (repeats allowed).
Var gather_rows(Var table, const std::vector<std::size_t>& indices);
/// -sum_t [r ln p + (1 - r) ln(1 - p)] with p clamped to [1e-7, 1 - 1e-7].
/// `p` is any shape whose size matches `targets`.
Var bce_sum(Var p, const std::vector<double>& targets);

}  // namespace magekt::diff
