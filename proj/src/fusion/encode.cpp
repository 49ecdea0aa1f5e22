#include "magekt/fusion/encode.hpp"

#include <algorithm>
#include <map>
#include <unordered_map>

namespace magekt::fusion {

using retrieval::NodeKind;

void RetrievalConfig::validate() const {
    if (budget == 0) throw DomainError("retrieval budget must be positive");
}

diff::SparseMatrix neighborhood_mix(std::size_t n,
                                    const std::vector<std::tuple<std::size_t, std::size_t, double>>& edges) {
    std::vector<std::map<std::size_t, double>> nbr(n);
    for (const auto& [u, v, w] : edges) {
        if (u >= n || v >= n) throw DomainError("neighborhood_mix: edge endpoint out of range");
        if (u == v || !(w > 0.0)) continue;
        for (auto [a, b] : {std::pair{u, v}, std::pair{v, u}}) {
            auto [it, inserted] = nbr[a].emplace(b, w);
            if (!inserted) it->second = std::max(it->second, w);
        }
    }
    diff::SparseMatrix m;
    m.rows = m.cols = n;
    for (std::size_t i = 0; i < n; ++i) {
        if (nbr[i].empty()) {
            m.entries.push_back({i, i, 1.0});
            continue;
        }
        double total = 0.0;
        for (auto [j, w] : nbr[i]) total += w;
        m.entries.push_back({i, i, 0.5});
        for (auto [j, w] : nbr[i]) m.entries.push_back({i, j, 0.5 * w / total});
    }
    return m;
}

StepInput build_step_input(const retrieval::PredictionInstance& inst, const retrieval::Subgraph& sq_sub,
                           const retrieval::Subgraph& kc_sub, const SqGraph& sq, const KcGraph& kc,
                           Variant variant, const irt::IrtConfig& ability_cfg, bool prefix_ability) {
    StepInput in;
    const std::size_t unseen_q = sq.questions.size(), unseen_s = sq.students.size(), unseen_k = kc.node_count();

    std::unordered_map<std::string, int> last_response;
    std::vector<irt::Response> responses;
    for (const auto& [q, r] : inst.history) {
        last_response[q] = r;
        const auto qi = sq.questions.find(q);
        responses.push_back({qi ? sq.difficulty[*qi] : 0.0, r});
    }
    auto response_row = [&](const std::string& q) -> std::size_t {
        auto it = last_response.find(q);
        return it == last_response.end() ? 2 : static_cast<std::size_t>(it->second);
    };

    // Target question and student always take position 0.
    const auto tq = sq.questions.find(inst.target_question);
    in.q_rows.push_back(tq ? *tq : unseen_q);
    in.q_difficulty.push_back(tq ? sq.difficulty[*tq] : 0.0);
    in.q_response.push_back(response_row(inst.target_question));
    const auto ts = sq.students.find(inst.student_id);
    in.s_rows.push_back(ts ? *ts : unseen_s);
    in.s_ability.push_back(ts && !prefix_ability ? sq.theta[*ts] : irt::fit_ability(responses, ability_cfg));

    if (variant == Variant::NoSqGraph) {
        in.sq_mix = diff::SparseMatrix::identity(2);
    } else {
        // Sub-node position -> (is_question, position within its stream).
        std::vector<std::pair<bool, std::size_t>> where(sq_sub.nodes.size());
        for (std::size_t i = 0; i < sq_sub.nodes.size(); ++i) {
            const auto& node = sq_sub.nodes[i];
            if (node.kind == NodeKind::Question) {
                if (tq && node.index == *tq) {
                    where[i] = {true, 0};
                    continue;
                }
                where[i] = {true, in.q_rows.size()};
                in.q_rows.push_back(node.index);
                in.q_difficulty.push_back(sq.difficulty[node.index]);
                in.q_response.push_back(response_row(sq.questions.id(node.index)));
            } else {
                if (ts && node.index == *ts) {
                    where[i] = {false, 0};
                    continue;
                }
                where[i] = {false, in.s_rows.size()};
                in.s_rows.push_back(node.index);
                in.s_ability.push_back(sq.theta[node.index]);
            }
        }
        const std::size_t nq = in.q_rows.size();
        auto pos = [&](std::size_t i) { return where[i].first ? where[i].second : nq + where[i].second; };
        std::vector<std::tuple<std::size_t, std::size_t, double>> edges;
        for (const auto& e : sq_sub.edges) edges.emplace_back(pos(e.u), pos(e.v), e.weight);
        in.sq_mix = neighborhood_mix(nq + in.s_rows.size(), edges);
    }

    auto target_kc_rows = [&] {
        std::vector<std::size_t> rows;
        for (const auto& k : inst.target_kcs) {
            const auto ki = kc.interner().find(k);
            const std::size_t row = ki ? *ki : unseen_k;
            if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
        }
        if (rows.empty()) rows.push_back(unseen_k);
        return rows;
    };
    if (variant == Variant::NoKcGraph || kc_sub.nodes.empty()) {
        in.k_rows = target_kc_rows();
        in.k_mix = diff::SparseMatrix::identity(in.k_rows.size());
        for (std::size_t i = 0; i < in.k_rows.size(); ++i) in.k_pool.push_back(i);
    } else {
        for (const auto& node : kc_sub.nodes) in.k_rows.push_back(node.index);
        in.k_pool = kc_sub.seeds;
        std::vector<std::tuple<std::size_t, std::size_t, double>> edges;
        for (const auto& e : kc_sub.edges) edges.emplace_back(e.u, e.v, e.weight);
        in.k_mix = neighborhood_mix(in.k_rows.size(), edges);
    }
    return in;
}

Encoder::Encoder(const SqGraph& sq, const KcGraph& kc, RetrievalConfig cfg, Variant variant,
                 irt::IrtConfig ability_cfg)
    : sq_(sq), kc_(kc), cfg_(cfg), variant_(variant), ability_cfg_(ability_cfg), sq_ret_(sq), kc_ret_(kc) {
    cfg_.validate();
}

StepInput Encoder::encode(const retrieval::PredictionInstance& inst) const {
    retrieval::Subgraph sq_sub, kc_sub;
    const bool sq_known = sq_.students.find(inst.student_id).has_value() ||
                          std::any_of(inst.history.begin(), inst.history.end(),
                                      [&](const auto& h) { return sq_.questions.find(h.first).has_value(); });
    if (variant_ != Variant::NoSqGraph && sq_known) {
        sq_sub = variant_ == Variant::NoSubgraph ? sq_ret_.full(inst, cfg_.budget)
                                                 : sq_ret_.retrieve(inst, cfg_.sq_hops, cfg_.budget);
    }
    const bool kc_known = std::any_of(inst.target_kcs.begin(), inst.target_kcs.end(),
                                      [&](const auto& k) { return kc_.interner().find(k).has_value(); });
    if (variant_ != Variant::NoKcGraph && kc_known) {
        kc_sub = variant_ == Variant::NoSubgraph ? kc_ret_.full(inst.target_kcs, cfg_.budget)
                                                 : kc_ret_.retrieve(inst.target_kcs, cfg_.kc_hops, cfg_.budget);
    }
    return build_step_input(inst, sq_sub, kc_sub, sq_, kc_, variant_, ability_cfg_, cfg_.prefix_ability);
}

std::vector<StepInput> Encoder::encode_window(const ingest::Window& window) const {
    std::vector<StepInput> out;
    retrieval::PredictionInstance inst;
    inst.student_id = window.student_id;
    for (std::size_t t = 1; t < window.items.size(); ++t) {
        const auto& prev = window.items[t - 1];
        inst.history.emplace_back(prev.question_id, prev.correct);
        inst.target_question = window.items[t].question_id;
        inst.target_kcs = window.items[t].kc_ids;
        out.push_back(encode(inst));
    }
    return out;
}

}  // namespace magekt::fusion
