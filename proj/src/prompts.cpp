#include "factalign/prompts.hpp"

#include <algorithm>
#include <fstream>
#include <regex>
#include <sstream>
#include <stdexcept>

#include "factalign/core.hpp"

namespace factalign::prompts {

namespace builtin {
struct Entry {
    const char* name;
    int version;
    const char* text;
};
// Generated from prompts/*.txt at configure time.
extern const Entry kEntries[];
extern const std::size_t kCount;
}  // namespace builtin

namespace {

bool is_ident_char(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || (c >= '0' && c <= '9'); }

// Calls on_text / on_placeholder for each segment of the template.
template <typename OnText, typename OnPlaceholder>
void scan(std::string_view tmpl, OnText on_text, OnPlaceholder on_placeholder) {
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        const auto open = tmpl.find('{', pos);
        if (open == std::string_view::npos) break;
        auto close = open + 1;
        while (close < tmpl.size() && is_ident_char(tmpl[close])) ++close;
        if (close < tmpl.size() && tmpl[close] == '}' && close > open + 1) {
            on_text(tmpl.substr(pos, open - pos));
            on_placeholder(tmpl.substr(open + 1, close - open - 1));
            pos = close + 1;
        } else {
            on_text(tmpl.substr(pos, open + 1 - pos));
            pos = open + 1;
        }
    }
    on_text(tmpl.substr(pos));
}

}  // namespace

std::vector<std::string> placeholders(std::string_view tmpl) {
    std::vector<std::string> out;
    scan(tmpl, [](std::string_view) {},
         [&](std::string_view name) {
             if (std::find(out.begin(), out.end(), name) == out.end()) out.emplace_back(name);
         });
    return out;
}

std::string render(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
    std::string out;
    out.reserve(tmpl.size());
    scan(tmpl, [&](std::string_view text) { out += text; },
         [&](std::string_view name) {
             auto it = vars.find(std::string(name));
             if (it == vars.end()) {
                 throw std::invalid_argument("prompt placeholder {" + std::string(name) + "} has no value");
             }
             out += it->second;
         });
    return out;
}

PromptLibrary::PromptLibrary() {
    for (std::size_t i = 0; i < builtin::kCount; ++i) {
        const auto& e = builtin::kEntries[i];
        auto it = templates_.find(e.name);
        if (it == templates_.end() || it->second.version < e.version) {
            templates_[e.name] = PromptTemplate{e.name, e.version, e.text};
        }
    }
}

void PromptLibrary::load_overrides(const std::filesystem::path& dir) {
    static const std::regex kFileName(R"(([a-z_]+)\.v([0-9]+)\.txt)");
    std::map<std::string, PromptTemplate> found;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const auto fname = entry.path().filename().string();
        std::smatch m;
        if (!std::regex_match(fname, m, kFileName)) continue;
        const int version = std::stoi(m[2].str());
        auto& slot = found[m[1].str()];
        if (!slot.name.empty() && slot.version >= version) continue;
        std::ifstream in(entry.path(), std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        slot = PromptTemplate{m[1].str(), version, ss.str()};
    }
    for (auto& [name, t] : found) templates_[name] = std::move(t);
}

const PromptTemplate& PromptLibrary::get(std::string_view name) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) throw std::out_of_range("unknown prompt template " + std::string(name));
    return it->second;
}

std::string PromptLibrary::digest() const {
    std::vector<std::string> parts;
    for (const auto& [name, t] : templates_) {
        parts.push_back(name);
        parts.push_back(std::to_string(t.version));
        parts.push_back(t.text);
    }
    std::vector<std::string_view> views(parts.begin(), parts.end());
    return digest_fields(views);
}

}  // namespace factalign::prompts
