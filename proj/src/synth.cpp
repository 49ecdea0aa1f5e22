#include "magekt/synth.hpp"

#include "magekt/irt.hpp"
#include "magekt/random.hpp"

#include <cstdio>

namespace magekt::synth {

namespace {

std::string padded(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%04zu", prefix, i);
    return buf;
}

}  // namespace

PlantedRasch planted_rasch(std::size_t students, std::size_t questions, std::uint64_t seed) {
    Rng rng(seed);
    PlantedRasch out;
    std::vector<double> theta(students), b(questions);
    for (auto& t : theta) t = rng.normal();
    for (auto& d : b) d = rng.normal();
    std::vector<Interaction> records;
    records.reserve(students * questions);
    for (std::size_t s = 0; s < students; ++s) {
        const auto sid = padded("s", s);
        out.theta[sid] = theta[s];
        for (std::size_t q = 0; q < questions; ++q) {
            const auto qid = padded("q", q);
            const int r = rng.bernoulli(irt::rasch_probability(theta[s], b[q])) ? 1 : 0;
            records.push_back({sid, qid, {"k" + std::to_string(q % 5)}, r, static_cast<double>(q)});
        }
    }
    for (std::size_t q = 0; q < questions; ++q) out.b[padded("q", q)] = b[q];
    out.log = InteractionLog(std::move(records));
    return out;
}

PlantedKt planted_kt(const KtConfig& cfg) {
    if (cfg.students == 0 || cfg.questions == 0 || cfg.kcs == 0 || cfg.attempts == 0) {
        throw DomainError("planted_kt: sizes must be positive");
    }
    Rng rng(hash_combine(cfg.seed, 0x4b7));
    PlantedKt out;
    std::vector<double> b(cfg.questions);
    for (std::size_t q = 0; q < cfg.questions; ++q) {
        b[q] = rng.normal();
        out.b[padded("q", q)] = b[q];
        out.kc_of[padded("q", q)] = "k" + std::to_string(q % cfg.kcs);
    }
    std::vector<Interaction> records;
    records.reserve(cfg.students * cfg.attempts);
    for (std::size_t s = 0; s < cfg.students; ++s) {
        const auto sid = padded("s", s);
        const double theta0 = rng.normal();
        const double drift = rng.uniform(0.0, cfg.drift);
        out.theta0[sid] = theta0;
        out.drift[sid] = drift;
        for (std::size_t t = 0; t < cfg.attempts; ++t) {
            const std::size_t q = static_cast<std::size_t>(rng.below(cfg.questions));
            const double progress = cfg.attempts > 1 ? static_cast<double>(t) / static_cast<double>(cfg.attempts - 1) : 0.0;
            const double theta = theta0 + drift * progress;
            const int r = rng.bernoulli(irt::rasch_probability(cfg.sharpness * theta, cfg.sharpness * b[q])) ? 1 : 0;
            records.push_back({sid, padded("q", q), {out.kc_of[padded("q", q)]}, r, static_cast<double>(t)});
        }
    }
    out.log = InteractionLog(std::move(records));
    return out;
}

}  // namespace magekt::synth

namespace magekt::synth {

namespace {

std::string kc_id(std::size_t unit, std::size_t k) { return "u" + std::to_string(unit) + "k" + std::to_string(k + 1); }

std::string title(std::string s) {
    bool start = true;
    for (auto& c : s) {
        if (start && c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
        start = c == ' ';
    }
    return s;
}

}  // namespace

PlantedRelations planted_relations(const RelationWorldConfig& cfg) {
    if (cfg.students_per_unit == 0 || cfg.attempts_per_kc == 0 || cfg.questions_per_kc == 0) {
        throw DomainError("planted_relations: sizes must be positive");
    }
    using agents::TypedRelation;
    using RT = RelationType;
    static const char* const chain_topics[] = {"fraction", "equation", "triangle"};
    static const char* const part_topics[] = {"probability", "derivative", "sequence"};
    static const char* const loose_words[] = {"estimation", "notation", "approximation"};

    PlantedRelations out;
    for (std::size_t u = 0; u < 6; ++u) {
        std::vector<std::string> names;
        if (u < 3) {
            const std::string t = chain_topics[u];
            names = {t + " foundations", t + " operations", t + " operations advanced techniques", t + " graphs",
                     t + " tables"};
        } else {
            const std::string t = part_topics[u - 3];
            names = {t + " rules", "rules of " + t, t, t + " trees", loose_words[u - 3]};
        }
        for (std::size_t k = 0; k < 5; ++k) out.kcs.push_back({kc_id(u, k), title(names[k]), "", "", false});
        const auto id = [u](std::size_t k) { return kc_id(u, k - 1); };
        if (u < 3) {
            out.gold.push_back({RT::PredecessorSuccessor, id(1), id(2)});
            out.gold.push_back({RT::PredecessorSuccessor, id(2), id(3)});
            out.gold.push_back({RT::PredecessorSuccessor, id(1), id(3)});
            out.gold.push_back({RT::Sibling, id(4), id(5)});
            for (std::size_t k = 1; k <= 3; ++k) {
                out.gold.push_back({RT::Sibling, id(k), id(4)});
                out.gold.push_back({RT::Sibling, id(k), id(5)});
            }
        } else {
            out.gold.push_back({RT::Equivalence, id(1), id(2)});
            out.gold.push_back({RT::Containment, id(3), id(1)});
            out.gold.push_back({RT::Containment, id(3), id(2)});
            out.gold.push_back({RT::Containment, id(3), id(4)});
            out.gold.push_back({RT::Sibling, id(1), id(4)});
            out.gold.push_back({RT::Sibling, id(2), id(4)});
            for (std::size_t k = 1; k <= 4; ++k) out.gold.push_back({RT::Association, id(k), id(5)});
        }
    }

    Rng rng(hash_combine(cfg.seed, 0x7e1a));
    std::vector<Interaction> records;
    for (std::size_t u = 0; u < 6; ++u) {
        for (std::size_t s = 0; s < cfg.students_per_unit; ++s) {
            const auto sid = "u" + std::to_string(u) + padded("s", s);
            // mastery[k][part]: part 1 is only used by the broad KC of units 3-5.
            bool mastery[5][2] = {};
            std::vector<std::size_t> order;
            if (u < 3) {
                mastery[0][0] = rng.bernoulli(0.75);
                mastery[1][0] = mastery[0][0] && rng.bernoulli(0.75);
                mastery[2][0] = mastery[1][0] && rng.bernoulli(0.75);
                mastery[3][0] = rng.bernoulli(0.6);
                mastery[4][0] = rng.bernoulli(0.6);
                std::vector<std::size_t> before, after;
                for (std::size_t k : {3, 4}) (rng.bernoulli(0.5) ? before : after).push_back(k);
                rng.shuffle(before);
                rng.shuffle(after);
                order = before;
                for (std::size_t k : {0, 1, 2}) order.push_back(k);
                order.insert(order.end(), after.begin(), after.end());
            } else {
                const bool rules = rng.bernoulli(0.6);
                const bool trees = rng.bernoulli(0.6);
                mastery[0][0] = mastery[1][0] = rules;
                mastery[2][0] = rules;
                mastery[2][1] = trees;
                mastery[3][0] = trees;
                mastery[4][0] = rng.bernoulli(0.8) ? rules : rng.bernoulli(0.6);
                order = {0, 1, 2, 3, 4};
                rng.shuffle(order);
            }
            double t = 0.0;
            for (auto k : order) {
                for (std::size_t i = 0; i < cfg.attempts_per_kc; ++i) {
                    const bool m = mastery[k][u >= 3 && k == 2 ? i % 2 : 0];
                    const auto q = static_cast<std::size_t>(rng.below(cfg.questions_per_kc));
                    const auto qid = kc_id(u, k) + "q" + std::to_string(q);
                    records.push_back({sid, qid, {kc_id(u, k)}, rng.bernoulli(m ? 0.9 : 0.2) ? 1 : 0, t});
                    t += 1.0;
                }
            }
        }
    }
    out.log = InteractionLog(std::move(records));
    return out;
}

}  // namespace magekt::synth
