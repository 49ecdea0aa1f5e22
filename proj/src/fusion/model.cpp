#include "magekt/fusion/model.hpp"

#include <cmath>

namespace magekt::fusion {

using diff::Tape;
using diff::Tensor;
using diff::Var;

std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::NoAsyAtt: return "no_asyatt";
        case Variant::NoKcGraph: return "no_kc_graph";
        case Variant::NoSqGraph: return "no_sq_graph";
        case Variant::NoSubgraph: return "no_subgraph";
    }
    return "?";
}

Variant variant_from_string(std::string_view name) {
    for (auto v : kAllVariants) {
        if (to_string(v) == name) return v;
    }
    throw DomainError("unknown model variant '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
    if (embed_dim == 0 || attn_heads == 0 || embed_dim % attn_heads != 0) {
        throw DomainError("embed_dim must be a positive multiple of attn_heads");
    }
    if (gru_hidden == 0 || ffn_mult == 0) throw DomainError("gru_hidden and ffn_mult must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw DomainError("dropout must be in [0, 1)");
    if (batch == 0 || max_epochs == 0 || seeds == 0) throw DomainError("batch, max_epochs and seeds must be positive");
    if (!(lr > 0.0) || !(weight_decay >= 0.0)) throw DomainError("lr must be positive, weight_decay non-negative");
}

std::size_t FusionModel::add(std::string name, Tensor value) {
    params_.emplace_back(std::move(name), std::move(value));
    return params_.size() - 1;
}

std::size_t FusionModel::add_xavier(std::string name, std::size_t in, std::size_t out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> v(in * out);
    for (auto& x : v) x = rng.uniform(-a, a);
    return add(std::move(name), Tensor::matrix(in, out, std::move(v)));
}

std::size_t FusionModel::add_normal(std::string name, std::size_t rows, std::size_t cols, double sd, Rng& rng) {
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = sd * rng.normal();
    return add(std::move(name), Tensor::matrix(rows, cols, std::move(v)));
}

std::size_t FusionModel::add_constant(std::string name, std::size_t rows, std::size_t cols, double v) {
    return add(std::move(name), Tensor::matrix(rows, cols, std::vector<double>(rows * cols, v)));
}

FusionModel::FusionModel(const ModelConfig& cfg, Variant variant, std::size_t students, std::size_t questions,
                         std::size_t kcs, std::uint64_t seed)
    : cfg_(cfg), variant_(variant) {
    cfg_.validate();
    Rng rng(hash_combine(seed, 0x1417));
    const std::size_t d = cfg_.embed_dim, H = cfg_.gru_hidden, f = cfg_.ffn_mult * d;

    // The extra last row of each table stands for ids unseen at build time;
    // it starts at zero so unseen entities rely on their features.
    auto table = [&](const char* name, std::size_t n) {
        const auto i = add_normal(name, n + 1, d, 0.1, rng);
        auto& t = params_[i].value;
        for (std::size_t c = 0; c < d; ++c) t(n, c) = 0.0;
        return i;
    };
    emb_s_ = table("emb.student", students);
    emb_q_ = table("emb.question", questions);
    emb_k_ = table("emb.kc", kcs);
    emb_r_ = add_normal("emb.response", 3, d, 0.1, rng);
    if (variant_ != Variant::NoSqGraph) {
        w_theta_ = add_normal("feat.theta.w", 1, d, 0.1, rng);
        b_theta_ = add_constant("feat.theta.b", 1, d, 0.0);
        w_b_ = add_normal("feat.difficulty.w", 1, d, 0.1, rng);
        b_b_ = add_constant("feat.difficulty.b", 1, d, 0.0);
    }
    if (variant_ != Variant::NoAsyAtt) {
        static constexpr const char* kPath[] = {"k_from_s", "k_from_q", "s_from_k", "q_from_k"};
        for (std::size_t l = 0; l < cfg_.attn_layers; ++l) {
            blocks_.emplace_back();
            for (const char* path : kPath) {
                const std::string pre = "attn." + std::to_string(l) + "." + path + ".";
                Block b{};
                b.ln_q_g = add_constant(pre + "ln_q.g", 1, d, 1.0);
                b.ln_q_b = add_constant(pre + "ln_q.b", 1, d, 0.0);
                b.ln_kv_g = add_constant(pre + "ln_kv.g", 1, d, 1.0);
                b.ln_kv_b = add_constant(pre + "ln_kv.b", 1, d, 0.0);
                b.wq = add_xavier(pre + "wq", d, d, rng);
                b.bq = add_constant(pre + "bq", 1, d, 0.0);
                b.wk = add_xavier(pre + "wk", d, d, rng);
                b.bk = add_constant(pre + "bk", 1, d, 0.0);
                b.wv = add_xavier(pre + "wv", d, d, rng);
                b.bv = add_constant(pre + "bv", 1, d, 0.0);
                b.wo = add_xavier(pre + "wo", d, d, rng);
                b.bo = add_constant(pre + "bo", 1, d, 0.0);
                b.ln_f_g = add_constant(pre + "ln_f.g", 1, d, 1.0);
                b.ln_f_b = add_constant(pre + "ln_f.b", 1, d, 0.0);
                b.w1 = add_xavier(pre + "ffn.w1", d, f, rng);
                b.b1 = add_constant(pre + "ffn.b1", 1, f, 0.0);
                b.w2 = add_xavier(pre + "ffn.w2", f, d, rng);
                b.b2 = add_constant(pre + "ffn.b2", 1, d, 0.0);
                blocks_.back().push_back(b);
            }
        }
    }
    w_g_ = add_xavier("gate.w", 2 * d, 1, rng);
    b_g_ = add_constant("gate.b", 1, 1, 0.0);
    gru_wi_ = add_xavier("gru.wi", 3 * d, 3 * H, rng);
    gru_bi_ = add_constant("gru.bi", 1, 3 * H, 0.0);
    gru_wh_ = add_xavier("gru.wh", H, 3 * H, rng);
    gru_bh_ = add_constant("gru.bh", 1, 3 * H, 0.0);
    // A small head keeps initial predictions near 0.5.
    w_o_ = add_normal("head.w", H, 1, 0.1 / std::sqrt(static_cast<double>(H)), rng);
    b_o_ = add_constant("head.b", 1, 1, 0.0);
}

std::vector<diff::Parameter*> FusionModel::parameters() {
    std::vector<diff::Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<const diff::Parameter*> FusionModel::parameters() const {
    std::vector<const diff::Parameter*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
}

std::size_t FusionModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

diff::Parameter& FusionModel::parameter(std::string_view name) {
    for (auto& p : params_) {
        if (p.name == name) return p;
    }
    throw DomainError("model has no parameter '" + std::string(name) + "'");
}

std::vector<Tensor> FusionModel::snapshot() const {
    std::vector<Tensor> out;
    for (const auto& p : params_) out.push_back(p.value);
    return out;
}

void FusionModel::restore(const std::vector<Tensor>& values) {
    if (values.size() != params_.size()) throw DomainError("restore: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i].shape() != params_[i].value.shape()) throw DomainError("restore: shape mismatch");
        params_[i].value = values[i];
    }
}

namespace {

Var column(Tape& tape, const std::vector<double>& v) {
    return tape.constant(Tensor::matrix(v.size(), 1, v));
}

}  // namespace

Streams FusionModel::encode(Tape& tape, const StepInput& in) {
    if (in.q_rows.empty() || in.s_rows.empty() || in.k_rows.empty()) {
        throw DomainError("encode: empty node sequence");
    }
    if (in.q_difficulty.size() != in.q_rows.size() || in.q_response.size() != in.q_rows.size() ||
        in.s_ability.size() != in.s_rows.size()) {
        throw DomainError("encode: feature length mismatch");
    }
    Streams out;
    out.k = diff::sparse_matmul(in.k_mix, diff::gather_rows(p(tape, emb_k_), in.k_rows));

    Var q = diff::add(diff::gather_rows(p(tape, emb_q_), in.q_rows), diff::gather_rows(p(tape, emb_r_), in.q_response));
    Var s = diff::gather_rows(p(tape, emb_s_), in.s_rows);
    if (variant_ != Variant::NoSqGraph) {
        q = diff::add(diff::add(q, diff::matmul(column(tape, in.q_difficulty), p(tape, w_b_))), p(tape, b_b_));
        s = diff::add(diff::add(s, diff::matmul(column(tape, in.s_ability), p(tape, w_theta_))), p(tape, b_theta_));
    }
    const std::size_t nq = in.q_rows.size(), ns = in.s_rows.size(), d = cfg_.embed_dim;
    const Var mixed = diff::sparse_matmul(in.sq_mix, diff::concat({q, s}, 0));
    out.q = diff::slice(mixed, 0, nq, 0, d);
    out.s = diff::slice(mixed, nq, nq + ns, 0, d);
    return out;
}

Var FusionModel::cross_attention(Tape& tape, std::size_t layer, std::size_t pathway, Var query, Var context,
                                 Trace* trace) {
    const Block& b = blocks_.at(layer).at(pathway);
    const std::size_t d = cfg_.embed_dim, heads = cfg_.attn_heads, dh = d / heads;
    const std::size_t n = query.rows(), m = context.rows();
    const Var xn = diff::layer_norm(query, p(tape, b.ln_q_g), p(tape, b.ln_q_b));
    const Var yn = diff::layer_norm(context, p(tape, b.ln_kv_g), p(tape, b.ln_kv_b));
    const Var Q = diff::add(diff::matmul(xn, p(tape, b.wq)), p(tape, b.bq));
    const Var K = diff::add(diff::matmul(yn, p(tape, b.wk)), p(tape, b.bk));
    const Var V = diff::add(diff::matmul(yn, p(tape, b.wv)), p(tape, b.bv));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
        const Var qh = diff::slice(Q, 0, n, h * dh, (h + 1) * dh);
        const Var kh = diff::slice(K, 0, m, h * dh, (h + 1) * dh);
        const Var vh = diff::slice(V, 0, m, h * dh, (h + 1) * dh);
        const Var weights = diff::softmax_rows(diff::scale(diff::matmul(qh, diff::transpose(kh)), inv_sqrt));
        if (trace) trace->attention.push_back(weights.value());
        head_out.push_back(diff::matmul(weights, vh));
    }
    const Var joined = heads == 1 ? head_out[0] : diff::concat(head_out, 1);
    const Var attn = diff::add(diff::matmul(joined, p(tape, b.wo)), p(tape, b.bo));
    const Var x1 = diff::add(query, diff::dropout(attn, cfg_.dropout));
    const Var hn = diff::layer_norm(x1, p(tape, b.ln_f_g), p(tape, b.ln_f_b));
    const Var ff = diff::add(
        diff::matmul(diff::gelu(diff::add(diff::matmul(hn, p(tape, b.w1)), p(tape, b.b1))), p(tape, b.w2)),
        p(tape, b.b2));
    return diff::add(x1, diff::dropout(ff, cfg_.dropout));
}

Fused FusionModel::fuse(Tape& tape, const Streams& st, const StepInput& in, Trace* trace) {
    const std::size_t d = cfg_.embed_dim;
    if (variant_ == Variant::NoAsyAtt) {
        const Var k = diff::mean_rows(st.k), s = diff::mean_rows(st.s), q = diff::mean_rows(st.q);
        return gate(tape, diff::add(k, s), diff::add(k, q), s, q);
    }
    Var ks = st.k, kq = st.k, s = st.s, q = st.q;
    for (std::size_t l = 0; l < cfg_.attn_layers; ++l) {
        const Var ks_next = cross_attention(tape, l, kKFromS, ks, s, trace);
        const Var kq_next = cross_attention(tape, l, kKFromQ, kq, q, trace);
        s = cross_attention(tape, l, kSFromK, s, ks_next, trace);
        q = cross_attention(tape, l, kQFromK, q, kq_next, trace);
        ks = ks_next;
        kq = kq_next;
    }
    if (in.k_pool.empty()) throw DomainError("fuse: no KC pooling positions");
    const Var k_s = diff::mean_rows(diff::gather_rows(ks, in.k_pool));
    const Var k_q = diff::mean_rows(diff::gather_rows(kq, in.k_pool));
    const Var s_k = diff::slice(s, 0, 1, 0, d);
    const Var q_k = diff::slice(q, 0, 1, 0, d);
    if (trace) trace->pooled.emplace_back(k_s.value(), k_q.value());
    Fused out = gate(tape, k_s, k_q, s_k, q_k);
    if (trace) {
        trace->alpha.push_back(out.alpha.value().item());
        trace->z.push_back(out.z.value());
    }
    return out;
}

Fused FusionModel::gate(Tape& tape, Var k_s, Var k_q, Var s_k, Var q_k) {
    const std::size_t d = cfg_.embed_dim;
    for (const Var* v : {&k_s, &k_q, &s_k, &q_k}) {
        if (v->rows() != 1 || v->cols() != d) throw DomainError("gate: expected 1 x embed_dim inputs");
    }
    Fused out{k_s, k_q, s_k, q_k, {}, {}};
    out.alpha = diff::sigmoid(diff::add(diff::matmul(diff::concat({k_s, k_q}, 1), p(tape, w_g_)), p(tape, b_g_)));
    const Var one_minus = diff::affine(out.alpha, -1.0, 1.0);
    const Var mid = diff::add(diff::matmul(out.alpha, k_s), diff::matmul(one_minus, k_q));
    out.z = diff::concat({s_k, mid, q_k}, 1);
    return out;
}

std::pair<Var, Var> FusionModel::predict_step(Tape& tape, Var h, Var z) {
    const std::size_t H = cfg_.gru_hidden;
    if (h.rows() != 1 || h.cols() != H) throw DomainError("predict_step: hidden state must be 1 x gru_hidden");
    if (z.rows() != 1 || z.cols() != 3 * cfg_.embed_dim) throw DomainError("predict_step: z must be 1 x 3*embed_dim");
    const Var gi = diff::add(diff::matmul(z, p(tape, gru_wi_)), p(tape, gru_bi_));
    const Var gh = diff::add(diff::matmul(h, p(tape, gru_wh_)), p(tape, gru_bh_));
    const Var r = diff::sigmoid(diff::add(diff::slice(gi, 0, 1, 0, H), diff::slice(gh, 0, 1, 0, H)));
    const Var u = diff::sigmoid(diff::add(diff::slice(gi, 0, 1, H, 2 * H), diff::slice(gh, 0, 1, H, 2 * H)));
    const Var n = diff::tanh(
        diff::add(diff::slice(gi, 0, 1, 2 * H, 3 * H), diff::mul(r, diff::slice(gh, 0, 1, 2 * H, 3 * H))));
    // h' = (1 - u) h + u n, so a closed update gate keeps the state.
    const Var h_next = diff::add(h, diff::mul(u, diff::sub(n, h)));
    const Var logit =
        diff::add(diff::matmul(diff::dropout(h_next, cfg_.dropout), p(tape, w_o_)), p(tape, b_o_));
    return {h_next, diff::sigmoid(logit)};
}

Var FusionModel::window_loss(Tape& tape, const std::vector<StepInput>& steps, const std::vector<double>& targets,
                             std::vector<double>* predictions, Trace* trace) {
    if (steps.empty() || steps.size() != targets.size()) {
        throw DomainError("window_loss: need one target per step and at least one step");
    }
    Var h = tape.constant(Tensor::zeros(1, cfg_.gru_hidden));
    std::vector<Var> ys;
    ys.reserve(steps.size());
    for (const auto& step : steps) {
        const Streams st = encode(tape, step);
        const Fused f = fuse(tape, st, step, trace);
        auto [h_next, y] = predict_step(tape, h, f.z);
        h = h_next;
        ys.push_back(y);
        if (predictions) predictions->push_back(y.value().item());
    }
    return sequence_loss(ys.size() == 1 ? ys[0] : diff::concat(ys, 1), targets);
}

Var sequence_loss(Var y_hats, const std::vector<double>& targets) {
    if (targets.empty()) throw DomainError("sequence_loss: empty sequence");
    return diff::bce_sum(y_hats, targets);
}

}  // namespace magekt::fusion
