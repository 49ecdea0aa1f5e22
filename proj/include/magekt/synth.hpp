#pragma once

#include "magekt/agents.hpp"
#include "magekt/core.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

namespace magekt::synth {

struct PlantedRasch {
    InteractionLog log;
    std::map<std::string, double> theta;
    std::map<std::string, double> b;
};

/// Every student answers every question once; correctness is
/// Bernoulli(sigma(theta - b)) with theta, b ~ N(0, 1).
PlantedRasch planted_rasch(std::size_t students, std::size_t questions, std::uint64_t seed);

struct KtConfig {
    std::size_t students = 20;
    std::size_t questions = 10;
    std::size_t kcs = 5;
    std::size_t attempts = 40;
    /// Logit scale: p = sigma(sharpness * (theta_t - b)).
    double sharpness = 2.0;
    /// Each student's ability rises by U(0, drift) over their attempts.
    double drift = 1.5;
    std::uint64_t seed = 0;
};

struct PlantedKt {
    InteractionLog log;
    std::map<std::string, double> theta0;
    std::map<std::string, double> drift;
    std::map<std::string, double> b;
    /// Question -> KC ("k<q mod kcs>").
    std::map<std::string, std::string> kc_of;
};

/// Knowledge-tracing toy set: students answer uniformly drawn questions,
/// and their ability drifts upward linearly across attempts.
PlantedKt planted_kt(const KtConfig& cfg);

struct RelationWorldConfig {
    std::size_t students_per_unit = 100;
    std::size_t attempts_per_kc = 4;
    std::size_t questions_per_kc = 5;
    std::uint64_t seed = 0;
};

struct PlantedRelations {
    InteractionLog log;
    /// Raw KC names only (no definition or category).
    std::vector<ConceptProfile> kcs;
    std::vector<agents::TypedRelation> gold;
};

/// Thirty KCs in six units of five, every relation type planted. Each
/// student studies one unit, KC by KC in blocks of attempts; correctness is
/// 0.9 on a mastered KC and 0.2 otherwise.
///
/// Units 0-2 ("<topic> foundations", "operations", "operations advanced
/// techniques", "graphs", "tables"): a mastery chain over the first three
/// KCs practised in that order, and two independent KCs scheduled before or
/// after the chain at random. Gold: prerequisites along the chain, siblings
/// elsewhere.
///
/// Units 3-5 ("<topic> rules", "rules of <topic>", "<topic>", "<topic>
/// trees", plus an unrelated word): two synonyms sharing one mastery, a
/// broad KC whose questions alternate between both parts, and a fifth KC
/// whose mastery mostly copies the rules part. Block order is random.
/// Gold: equivalence, containment, siblings and associations.
PlantedRelations planted_relations(const RelationWorldConfig& cfg);

}  // namespace magekt::synth
