#pragma once

#include "magekt/diff/ops.hpp"
#include "magekt/random.hpp"

#include <cstdint>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

namespace magekt::fusion {

enum class Variant { Full, NoAsyAtt, NoKcGraph, NoSqGraph, NoSubgraph };

std::string_view to_string(Variant v);
/// Accepts "full", "no_asyatt", "no_kc_graph", "no_sq_graph", "no_subgraph".
Variant variant_from_string(std::string_view name);
inline constexpr Variant kAllVariants[] = {Variant::Full, Variant::NoAsyAtt, Variant::NoKcGraph,
                                           Variant::NoSqGraph, Variant::NoSubgraph};

struct ModelConfig {
    std::size_t embed_dim = 128;
    std::size_t attn_heads = 4;
    std::size_t attn_layers = 3;
    std::size_t gru_hidden = 512;
    /// Hidden width of the block feed-forward is ffn_mult * embed_dim.
    std::size_t ffn_mult = 4;
    double dropout = 0.3;
    std::size_t batch = 64;
    std::size_t max_epochs = 100;
    std::size_t patience = 10;
    std::size_t seeds = 3;
    double lr = 1e-3;
    double weight_decay = 1e-5;
    /// Also score the training windows (dropout off) after every epoch.
    bool eval_train = false;

    void validate() const;
};

/// Inputs of one prediction step, in embedding-row space. Row `count` of a
/// table is its "unseen id" row.
struct StepInput {
    /// Question nodes, target question first.
    std::vector<std::size_t> q_rows;
    std::vector<double> q_difficulty;
    /// 0 or 1 for the latest response in the history, 2 if not answered.
    std::vector<std::size_t> q_response;
    /// Student nodes, target student first.
    std::vector<std::size_t> s_rows;
    std::vector<double> s_ability;
    /// Neighborhood mixing over the stacked [questions; students] rows.
    diff::SparseMatrix sq_mix;
    std::vector<std::size_t> k_rows;
    diff::SparseMatrix k_mix;
    /// Positions in `k_rows` of the target KCs (pooled by mean).
    std::vector<std::size_t> k_pool;
};

/// Optional capture of intermediate values for inspection.
struct Trace {
    /// Attention weights per (layer, pathway, head), rows over queries.
    std::vector<diff::Tensor> attention;
    std::vector<double> alpha;
    /// Pooled [k_s, k_q] before gating, per step.
    std::vector<std::pair<diff::Tensor, diff::Tensor>> pooled;
    std::vector<diff::Tensor> z;
};

struct Streams {
    diff::Var k;
    diff::Var q;
    diff::Var s;
};

struct Fused {
    diff::Var k_s;
    diff::Var k_q;
    diff::Var s_k;
    diff::Var q_k;
    diff::Var alpha;
    diff::Var z;
};

/// Parameters and forward pass. Parameters live in a deque so their
/// addresses are stable; copying a model copies the values.
class FusionModel {
public:
    FusionModel(const ModelConfig& cfg, Variant variant, std::size_t students, std::size_t questions,
                std::size_t kcs, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    Variant variant() const { return variant_; }

    /// Parameters the variant actually uses, in a fixed order.
    std::vector<diff::Parameter*> parameters();
    std::vector<const diff::Parameter*> parameters() const;
    std::size_t parameter_count() const;
    diff::Parameter& parameter(std::string_view name);

    /// Embedding lookup, scalar features and one neighborhood mix.
    Streams encode(diff::Tape& tape, const StepInput& in);
    /// Cross-attention stack, pooling and gate.
    Fused fuse(diff::Tape& tape, const Streams& streams, const StepInput& in, Trace* trace = nullptr);
    /// alpha = sigmoid(w_g . [k_s; k_q] + b_g); z = [s_k; alpha k_s + (1 - alpha) k_q; q_k].
    Fused gate(diff::Tape& tape, diff::Var k_s, diff::Var k_q, diff::Var s_k, diff::Var q_k);
    /// GRU cell then sigmoid head. Returns (h_next, y_hat).
    std::pair<diff::Var, diff::Var> predict_step(diff::Tape& tape, diff::Var h, diff::Var z);
    /// Pre-norm residual cross-attention block of `pathway` in `layer`.
    diff::Var cross_attention(diff::Tape& tape, std::size_t layer, std::size_t pathway, diff::Var query,
                              diff::Var context, Trace* trace = nullptr);

    /// Runs a window: h_0 = 0, one fused step per input, loss = summed
    /// binary cross-entropy. Predictions are appended to `predictions`.
    diff::Var window_loss(diff::Tape& tape, const std::vector<StepInput>& steps, const std::vector<double>& targets,
                          std::vector<double>* predictions = nullptr, Trace* trace = nullptr);

    std::vector<diff::Tensor> snapshot() const;
    void restore(const std::vector<diff::Tensor>& values);

    /// Block pathway ids.
    static constexpr std::size_t kKFromS = 0, kKFromQ = 1, kSFromK = 2, kQFromK = 3;

private:
    std::size_t add(std::string name, diff::Tensor value);
    std::size_t add_xavier(std::string name, std::size_t in, std::size_t out, Rng& rng);
    std::size_t add_normal(std::string name, std::size_t rows, std::size_t cols, double sd, Rng& rng);
    std::size_t add_constant(std::string name, std::size_t rows, std::size_t cols, double v);
    diff::Var p(diff::Tape& tape, std::size_t index) { return tape.param(params_[index]); }

    struct Block {
        std::size_t ln_q_g, ln_q_b, ln_kv_g, ln_kv_b;
        std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
        std::size_t ln_f_g, ln_f_b, w1, b1, w2, b2;
    };

    ModelConfig cfg_;
    Variant variant_;
    std::deque<diff::Parameter> params_;
    std::size_t emb_s_, emb_q_, emb_k_, emb_r_;
    std::size_t w_theta_ = 0, b_theta_ = 0, w_b_ = 0, b_b_ = 0;
    std::vector<std::vector<Block>> blocks_;
    std::size_t w_g_, b_g_;
    std::size_t gru_wi_, gru_bi_, gru_wh_, gru_bh_;
    std::size_t w_o_, b_o_;
};

/// Summed binary cross-entropy of a 1 x T prediction row (not averaged).
diff::Var sequence_loss(diff::Var y_hats, const std::vector<double>& targets);

}  // namespace magekt::fusion
