#include <chrono>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "nura/defense.hpp"

namespace nura {

namespace {

// Splits "http://host:port/path" into client target and path.
bool split_url(const std::string& url, std::string& origin, std::string& path) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) return false;
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) {
        origin = url;
        path = "/";
    } else {
        origin = url.substr(0, path_start);
        path = url.substr(path_start);
    }
    return true;
}

}  // namespace

std::optional<std::string> HttpTranslator::round_trip(std::string_view text) {
    auto log = [&](const std::string& msg) {
        if (opts_.debug_log) opts_.debug_log(msg);
    };
    if (opts_.url.empty()) {
        log("translator: no endpoint configured");
        return std::nullopt;
    }
    std::string origin, path;
    if (!split_url(opts_.url, origin, path)) {
        log("translator: malformed endpoint url");
        return std::nullopt;
    }

    nlohmann::json body;
    body["text"] = std::string(text);
    const std::string payload = body.dump();
    log("translator: POST " + path + " body=" +
        (opts_.redact_logs ? std::string("<redacted>") : payload));

    httplib::Client client(origin);
    client.set_connection_timeout(5);
    client.set_read_timeout(10);
    httplib::Headers headers;
    if (!opts_.token.empty()) headers.emplace("Authorization", "Bearer " + opts_.token);

    int delay_ms = opts_.backoff_ms;
    for (int attempt = 0; attempt <= opts_.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
            delay_ms *= 2;
        }
        auto res = client.Post(path, headers, payload, "application/json");
        if (!res) {
            log("translator: attempt " + std::to_string(attempt + 1) + " failed: no response");
            continue;
        }
        if (res->status != 200) {
            log("translator: attempt " + std::to_string(attempt + 1) +
                " failed: status " + std::to_string(res->status));
            continue;
        }
        log("translator: response body=" +
            (opts_.redact_logs ? std::string("<redacted>") : res->body));
        try {
            nlohmann::json parsed = nlohmann::json::parse(res->body);
            if (parsed.contains("text") && parsed["text"].is_string()) {
                std::string out = parsed["text"].get<std::string>();
                if (out.empty()) return std::nullopt;
                return out;
            }
        } catch (const nlohmann::json::exception&) {
            log("translator: unparseable response");
        }
        return std::nullopt;
    }
    return std::nullopt;
}

}  // namespace nura
