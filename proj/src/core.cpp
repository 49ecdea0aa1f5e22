#include "magekt/core.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <set>

namespace magekt {

InteractionLog::InteractionLog(std::vector<Interaction> records) : records_(std::move(records)) {}

std::map<std::string, std::vector<std::size_t>> InteractionLog::student_sequences() const {
    std::map<std::string, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < records_.size(); ++i) {
        out[records_[i].student_id].push_back(i);
    }
    for (auto& [student, idx] : out) {
        std::stable_sort(idx.begin(), idx.end(), [this](std::size_t a, std::size_t b) {
            return records_[a].timestamp < records_[b].timestamp;
        });
    }
    return out;
}

namespace {

template <typename Proj>
std::vector<std::string> sorted_unique(const std::vector<Interaction>& records, Proj proj) {
    std::set<std::string> ids;
    for (const auto& r : records) proj(r, ids);
    return {ids.begin(), ids.end()};
}

}  // namespace

std::vector<std::string> InteractionLog::students() const {
    return sorted_unique(records_, [](const Interaction& r, auto& s) { s.insert(r.student_id); });
}

std::vector<std::string> InteractionLog::questions() const {
    return sorted_unique(records_, [](const Interaction& r, auto& s) { s.insert(r.question_id); });
}

std::vector<std::string> InteractionLog::kcs() const {
    return sorted_unique(records_, [](const Interaction& r, auto& s) {
        s.insert(r.kc_ids.begin(), r.kc_ids.end());
    });
}

InteractionLog InteractionLog::sorted_by_student_time() const {
    std::vector<Interaction> out;
    out.reserve(records_.size());
    for (const auto& [student, idx] : student_sequences()) {
        for (auto i : idx) out.push_back(records_[i]);
    }
    return InteractionLog(std::move(out));
}

std::vector<LogViolation> validate_log(const InteractionLog& log) {
    std::vector<LogViolation> out;
    std::unordered_map<std::string, double> last_time;
    const auto& records = log.records();
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.kc_ids.empty()) {
            out.push_back({i, "kc_ids non-empty", "record has no knowledge concepts"});
        }
        if (r.correct != 0 && r.correct != 1) {
            out.push_back({i, "correct binary", "correct = " + std::to_string(r.correct)});
        }
        if (r.student_id.empty() || r.question_id.empty()) {
            out.push_back({i, "identifiers present", "empty student or question id"});
        }
        auto [it, inserted] = last_time.try_emplace(r.student_id, r.timestamp);
        if (!inserted) {
            if (r.timestamp < it->second) {
                out.push_back({i, "timestamp order",
                               "student " + r.student_id + " goes back in time"});
            } else {
                it->second = r.timestamp;
            }
        }
    }
    return out;
}

Interner::Interner(std::vector<std::string> ids) : ids_(std::move(ids)) {
    index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        if (!index_.emplace(ids_[i], i).second) {
            throw DomainError("duplicate id in interner: " + ids_[i]);
        }
    }
}

std::optional<std::size_t> Interner::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t Interner::at(std::string_view id) const {
    auto found = find(id);
    if (!found) throw DomainError("unknown id: " + std::string(id));
    return *found;
}

std::string_view to_string(RelationType type) {
    switch (type) {
        case RelationType::None: return "None";
        case RelationType::Association: return "Association";
        case RelationType::Containment: return "Containment";
        case RelationType::Equivalence: return "Equivalence";
        case RelationType::Sibling: return "Sibling";
        case RelationType::PredecessorSuccessor: return "PredecessorSuccessor";
    }
    return "None";
}

RelationType relation_from_string(std::string_view name) {
    std::string key;
    for (char c : name) {
        if (c == '-' || c == '_' || c == ' ') continue;
        key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    if (key == "none" || key.empty()) return RelationType::None;
    if (key == "association") return RelationType::Association;
    if (key == "containment") return RelationType::Containment;
    if (key == "equivalence") return RelationType::Equivalence;
    if (key == "sibling") return RelationType::Sibling;
    if (key == "predecessorsuccessor" || key == "prerequisite") {
        return RelationType::PredecessorSuccessor;
    }
    throw DomainError("unknown relation type: " + std::string(name));
}

std::string_view to_string(DecisionStep step) {
    return step == DecisionStep::Arbitration ? "arbitration" : "cross-correction";
}

KcGraph::KcGraph(std::vector<ConceptProfile> nodes, std::vector<KcEdge> edges)
    : nodes_(std::move(nodes)), edges_(std::move(edges)) {
    std::vector<std::string> ids;
    ids.reserve(nodes_.size());
    for (const auto& n : nodes_) ids.push_back(n.kc_id);
    interner_ = Interner(std::move(ids));
    incident_.assign(nodes_.size(), {});
    for (std::size_t e = 0; e < edges_.size(); ++e) {
        const auto& edge = edges_[e];
        if (edge.src >= nodes_.size() || edge.dst >= nodes_.size()) {
            throw DomainError("KC edge references node outside graph");
        }
        incident_[edge.src].push_back(e);
        if (edge.dst != edge.src) incident_[edge.dst].push_back(e);
    }
}

}  // namespace magekt
