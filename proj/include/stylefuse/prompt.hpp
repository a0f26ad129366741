#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <vector>

#include "stylefuse/errors.hpp"

namespace stylefuse {

// A resolved prompt: token id sequence plus the position of every special
// token, keyed by concept id.
struct PromptSpec {
    std::string text;                            // substituted prompt text
    std::vector<int> token_ids;                  // padded to the backend's length
    std::map<std::string, int> special_positions;  // concept id -> index k
    int length = 0;                              // tokens before padding
};

// lowercase word split; punctuation stripped except the <...> token syntax
inline std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        while (!cur.empty() && (cur.back() == '.' || cur.back() == ',' || cur.back() == '!' ||
                                cur.back() == '?' || cur.back() == ';' || cur.back() == ':'))
            cur.pop_back();
        if (!cur.empty()) words.push_back(cur);
        cur.clear();
    };
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            flush();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    flush();
    return words;
}

inline bool looks_like_special_token(const std::string& w) {
    return w.size() >= 3 && w.front() == '<' && w.back() == '>';
}

// Fill {src} / {ref} style placeholders with special-token strings.
inline std::string substitute_template(const std::string& tmpl,
                                       const std::map<std::string, std::string>& slots) {
    std::string out = tmpl;
    for (const auto& [slot, token] : slots) {
        std::string needle = "{" + slot + "}";
        size_t pos         = 0;
        while ((pos = out.find(needle, pos)) != std::string::npos) {
            out.replace(pos, needle.size(), token);
            pos += token.size();
        }
    }
    if (out.find('{') != std::string::npos)
        throw ConfigError("unresolved placeholder in prompt template: " + tmpl);
    return out;
}

}  // namespace stylefuse
