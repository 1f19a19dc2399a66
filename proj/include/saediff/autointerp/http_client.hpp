// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Chat-completion client over HTTP(S) using cpp-httplib.

#pragma once

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <string>
#include <thread>

#include "saediff/autointerp/client.hpp"

namespace saediff::interp {

class HttpClient : public ApiClient {
 public:
  explicit HttpClient(HttpClientConfig cfg) : cfg_(std::move(cfg)) {
    const char* key = std::getenv(cfg_.api_key_env.c_str());
    if (!key || !*key) throw ConfigError("interp: environment variable " + cfg_.api_key_env + " is not set");
    key_ = key;
  }

  std::string complete(const ChatRequest& req) override {
    ChatRequest r = req;
    if (r.model.empty()) r.model = cfg_.model;
    const std::string body = to_json(r).dump();
    if (cfg_.debug) std::cerr << "[interp] request " << body << "\n";
    httplib::Client cli(cfg_.base_url);
    cli.set_connection_timeout(cfg_.timeout_seconds);
    cli.set_read_timeout(cfg_.timeout_seconds);
    cli.set_bearer_token_auth(key_);
    std::string last;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(500 << (attempt - 1)));
      auto res = cli.Post(cfg_.path, body, "application/json");
      if (!res) {
        last = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (cfg_.debug) std::cerr << "[interp] response " << res->status << " " << res->body << "\n";
      if (res->status == 429 || res->status >= 500) {
        last = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) throw ApiError("interp: HTTP " + std::to_string(res->status) + ": " + res->body);
      return completion_content(res->body);
    }
    throw ApiError("interp: request failed after " + std::to_string(cfg_.max_retries) + " retries (" + last + ")");
  }

  std::string name() const override { return "http:" + cfg_.model; }

 private:
  HttpClientConfig cfg_;
  std::string key_;
};

}  // namespace saediff::interp
