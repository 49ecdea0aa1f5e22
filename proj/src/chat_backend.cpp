#include "magekt/chat_backend.hpp"

#include "magekt/jsonl.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>
#include <thread>

#ifndef MAGEKT_PROMPT_DIR
#define MAGEKT_PROMPT_DIR "prompts/v1"
#endif

namespace magekt::agents {

using nlohmann::json;

namespace {

const char* const kTemplateNames[] = {"system", "complete_concept", "propose_relation", "score_relation",
                                      "arbitrate", "vote"};

std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw DomainError("cannot read prompt template " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string fill(std::string text, const std::map<std::string, std::string>& values) {
    for (const auto& [key, value] : values) {
        const auto tag = "{{" + key + "}}";
        for (auto pos = text.find(tag); pos != std::string::npos; pos = text.find(tag, pos + value.size())) {
            text.replace(pos, tag.size(), value);
        }
    }
    const auto open = text.find("{{");
    if (open != std::string::npos && text.find("}}", open) != std::string::npos) {
        throw DomainError("prompt template has an unknown placeholder near: " + text.substr(open, 40));
    }
    return text;
}

std::string persona_brief(const AgentRole& role) {
    if (role.role != Role::Persona) return "";
    switch (role.persona) {
        case Persona::Teaching:
            return "You judge from the viewpoint of curriculum design: the order in which concepts are taught and "
                   "learned.";
        case Persona::Structure:
            return "You judge from the viewpoint of concept structure: what each concept means and how the "
                   "meanings nest or overlap.";
        case Persona::Behavior:
            return "You judge from the viewpoint of learner behavior: how performance on one concept tracks "
                   "performance on the other.";
    }
    return "";
}

}  // namespace

std::filesystem::path PromptSet::default_dir() { return MAGEKT_PROMPT_DIR; }

PromptSet PromptSet::load(const std::filesystem::path& dir) {
    PromptSet set;
    std::string all;
    for (const char* name : kTemplateNames) {
        auto text = read_text(dir / (std::string(name) + ".txt"));
        all += text;
        set.templates_[name] = std::move(text);
    }
    set.version_ = dir.filename().string() + "-" + jsonl::hex64(jsonl::fnv1a(all));
    return set;
}

std::string PromptSet::system(const AgentRole& role) const {
    return fill(templates_.at("system"), {{"role", role.name()}, {"persona", persona_brief(role)}});
}

std::string PromptSet::user(const AgentRole& role, TaskKind task, const json& payload) const {
    json body = payload;
    std::string repair;
    if (body.contains("repair")) {
        repair = body["repair"].get<std::string>();
        body.erase("repair");
    }
    return fill(templates_.at(std::string(to_string(task))), {{"role", role.name()},
                                                              {"persona", persona_brief(role)},
                                                              {"payload", body.dump(2)},
                                                              {"schema", response_schema(task)},
                                                              {"repair", repair}});
}

std::string response_schema(TaskKind task) {
    switch (task) {
        case TaskKind::CompleteConcept:
            return R"({"name": string, "definition": string, "category": string})";
        case TaskKind::ProposeRelation:
            return R"({"type": "Association"|"Containment"|"Equivalence"|"Sibling"|"PredecessorSuccessor"|"None", )"
                   R"("src": kc_id, "dst": kc_id, "justification": string, "evidence_excerpts": string})";
        case TaskKind::ScoreRelation:
            return R"({"scores": {criterion: integer 0..5, one entry per listed criterion}, )"
                   R"("explanations": {criterion: string}})";
        case TaskKind::Arbitrate:
        case TaskKind::Vote:
            return R"({"type": "Association"|"Containment"|"Equivalence"|"Sibling"|"PredecessorSuccessor"|"None", )"
                   R"("src": kc_id, "dst": kc_id, "rationale": string})";
    }
    return "{}";
}

json extract_json_object(const std::string& content) {
    std::string text = content;
    // Prefer the inside of a fenced block when present.
    static const std::regex fence(R"(```(?:json|JSON)?\s*([\s\S]*?)```)");
    std::smatch m;
    if (std::regex_search(text, m, fence)) text = m[1].str();
    const auto open = text.find('{');
    if (open == std::string::npos) throw SchemaError("reply contains no JSON object");
    // Scan for the matching brace, honoring strings and escapes.
    int depth = 0;
    bool in_string = false, escaped = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}' && --depth == 0) {
            try {
                return json::parse(text.substr(open, i - open + 1));
            } catch (const json::parse_error& e) {
                throw SchemaError(std::string("reply JSON does not parse: ") + e.what());
            }
        }
    }
    throw SchemaError("reply JSON object is not closed");
}

ChatBackend::ChatBackend(ChatConfig cfg) : cfg_(std::move(cfg)), prompts_(PromptSet::load(cfg_.prompt_dir)) {
    static const std::regex url(R"(^(https?)://([^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(cfg_.endpoint, m, url)) throw DomainError("bad chat endpoint URL: " + cfg_.endpoint);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (m[1] == "https") throw DomainError("this build has no TLS support; use an http:// endpoint");
#endif
    base_ = m[1].str() + "://" + m[2].str();
    path_ = m[3].matched ? m[3].str() : "/";
    if (!cfg_.api_key_env.empty()) {
        if (const char* key = std::getenv(cfg_.api_key_env.c_str())) api_key_ = key;
    }
    sleeper_ = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
}

std::string ChatBackend::post(const std::string& body) const {
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    double delay = cfg_.backoff_initial_s;
    std::string last;
    for (int attempt = 0; attempt <= std::max(0, cfg_.max_retries); ++attempt) {
        if (attempt > 0) {
            sleeper_(delay);
            delay = std::min(cfg_.backoff_max_s, 2.0 * delay);
        }
        httplib::Client client(base_);
        const auto secs = static_cast<time_t>(cfg_.timeout_s);
        client.set_connection_timeout(secs, 0);
        client.set_read_timeout(secs, 0);
        client.set_write_timeout(secs, 0);
        const auto res = client.Post(path_, headers, body, "application/json");
        if (!res) {
            last = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 200) return res->body;
        last = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
        if (res->status != 429 && res->status < 500) break;
    }
    throw BackendError("chat endpoint " + cfg_.endpoint + " failed: " + last);
}

json ChatBackend::respond(const AgentRole& role, TaskKind task, const json& payload) {
    const json request{{"model", cfg_.model},
                       {"temperature", cfg_.temperature},
                       {"messages",
                        json::array({{{"role", "system"}, {"content", prompts_.system(role)}},
                                     {{"role", "user"}, {"content", prompts_.user(role, task, payload)}}})}};
    const auto raw = post(request.dump());
    json reply;
    try {
        reply = json::parse(raw);
    } catch (const json::parse_error&) {
        throw BackendError("chat endpoint returned a body that is not JSON");
    }
    const auto choices = reply.find("choices");
    if (choices == reply.end() || !choices->is_array() || choices->empty() ||
        !(*choices)[0].contains("message") || !(*choices)[0]["message"].contains("content") ||
        !(*choices)[0]["message"]["content"].is_string()) {
        throw BackendError("chat endpoint reply lacks choices[0].message.content");
    }
    return extract_json_object((*choices)[0]["message"]["content"].get<std::string>());
}

}  // namespace magekt::agents
