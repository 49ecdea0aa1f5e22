#pragma once

#include "magekt/agents.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <string>

namespace magekt::agents {

/// Prompt templates: one file per task plus `system.txt`, with named
/// placeholders {{role}}, {{payload}}, {{schema}} and {{repair}}.
class PromptSet {
public:
    static PromptSet load(const std::filesystem::path& dir);
    /// Directory of the bundled templates.
    static std::filesystem::path default_dir();

    std::string system(const AgentRole& role) const;
    std::string user(const AgentRole& role, TaskKind task, const nlohmann::json& payload) const;
    /// Identifies the template set (directory name plus content hash).
    const std::string& version() const { return version_; }

private:
    std::map<std::string, std::string> templates_;
    std::string version_;
};

/// Compact description of the JSON object each task must return.
std::string response_schema(TaskKind task);

/// First JSON object in a chat reply, tolerating code fences and prose
/// around it. Throws SchemaError when there is none.
nlohmann::json extract_json_object(const std::string& content);

struct ChatConfig {
    /// Full URL of the chat-completions endpoint.
    std::string endpoint = "https://api.openai.com/v1/chat/completions";
    std::string model = "gpt-4o-mini";
    /// Environment variable holding the bearer token; empty sends none.
    std::string api_key_env = "MAGEKT_API_KEY";
    double temperature = 0.0;
    /// Transport retries on connection errors, 429 and 5xx.
    int max_retries = 4;
    double backoff_initial_s = 1.0;
    double backoff_max_s = 30.0;
    double timeout_s = 120.0;
    std::filesystem::path prompt_dir = PromptSet::default_dir();
};

/// Live backend speaking the chat-completions wire format. Each call opens
/// its own connection, so concurrent use is safe.
class ChatBackend : public AgentBackend {
public:
    explicit ChatBackend(ChatConfig cfg);

    nlohmann::json respond(const AgentRole& role, TaskKind task, const nlohmann::json& payload) override;

    /// Replaces the sleep used between retries (tests).
    void set_sleeper(std::function<void(double)> sleeper) { sleeper_ = std::move(sleeper); }
    const PromptSet& prompts() const { return prompts_; }

private:
    std::string post(const std::string& body) const;

    ChatConfig cfg_;
    PromptSet prompts_;
    std::string base_;
    std::string path_;
    std::string api_key_;
    std::function<void(double)> sleeper_;
};

}  // namespace magekt::agents
