// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Chat-completion clients: an abstract interface, a deterministic mock and an
// HTTP client for OpenAI-compatible endpoints.

#pragma once

#include <cstdlib>
#include <functional>
#include <iostream>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "saediff/core/errors.hpp"

namespace saediff::interp {

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;

  std::string all_content() const {
    std::string s;
    for (const auto& m : messages) s += m.content + "\n";
    return s;
  }
};

inline nlohmann::json to_json(const ChatRequest& r) {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : r.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  return {{"model", r.model},
          {"messages", msgs},
          {"temperature", r.temperature},
          {"response_format", {{"type", "json_object"}}}};
}

class ApiClient {
 public:
  virtual ~ApiClient() = default;
  // Returns the assistant message content.
  virtual std::string complete(const ChatRequest& req) = 0;
  virtual std::string name() const = 0;
};

// Pure function of the request. Rules are tried in order; the first whose
// `contains` occurs in the request text answers. Without a matching rule the
// handler (if any) answers, otherwise the request is an error.
class MockClient : public ApiClient {
 public:
  struct Rule {
    std::string contains;
    std::string response;
  };
  using Handler = std::function<std::string(const ChatRequest&)>;

  MockClient() = default;
  explicit MockClient(std::vector<Rule> rules, Handler fallback = {})
      : rules_(std::move(rules)), fallback_(std::move(fallback)) {}
  explicit MockClient(Handler h) : fallback_(std::move(h)) {}

  std::string complete(const ChatRequest& req) override {
    ++calls_;
    requests_.push_back(req);
    const auto text = req.all_content();
    for (const auto& r : rules_)
      if (text.find(r.contains) != std::string::npos) return r.response;
    if (fallback_) return fallback_(req);
    throw ApiError("mock client: no rule matches the request");
  }
  std::string name() const override { return "mock"; }

  std::size_t calls() const { return calls_; }
  const std::vector<ChatRequest>& requests() const { return requests_; }

 private:
  std::vector<Rule> rules_;
  Handler fallback_;
  std::size_t calls_ = 0;
  std::vector<ChatRequest> requests_;
};

struct HttpClientConfig {
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4o-mini";
  std::string api_key_env = "OPENAI_API_KEY";
  int timeout_seconds = 60;
  int max_retries = 3;
  bool debug = false;  // log request and response bodies to stderr
};

inline nlohmann::json to_json(const HttpClientConfig& c) {
  return {{"base_url", c.base_url}, {"path", c.path},         {"model", c.model},
          {"api_key_env", c.api_key_env}, {"timeout_seconds", c.timeout_seconds}, {"max_retries", c.max_retries},
          {"debug", c.debug}};
}

inline HttpClientConfig http_client_config_from_json(const nlohmann::json& j) {
  HttpClientConfig c;
  c.base_url = j.value("base_url", c.base_url);
  c.path = j.value("path", c.path);
  c.model = j.value("model", c.model);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.debug = j.value("debug", c.debug);
  return c;
}

// Pulls choices[0].message.content out of a chat-completion response body.
inline std::string completion_content(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw ApiError(std::string("completion response is not JSON: ") + e.what());
  }
  const auto* content = [&]() -> const nlohmann::json* {
    if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) return nullptr;
    const auto& c = j["choices"][0];
    if (!c.contains("message") || !c["message"].contains("content")) return nullptr;
    return &c["message"]["content"];
  }();
  if (!content || !content->is_string()) throw ApiError("completion response has no choices[0].message.content");
  return content->get<std::string>();
}

}  // namespace saediff::interp
