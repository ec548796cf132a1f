// SPDX-License-Identifier: Apache-2.0
#include "medgen/config.hpp"

#include "medgen/error.hpp"

#include <fstream>
#include <sstream>

namespace medgen {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
    KeyValueConfig cfg;
    cfg.origin_ = origin;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw InvalidInput(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const auto key = trim(line.substr(0, eq));
        if (key.empty()) throw InvalidInput(origin + ":" + std::to_string(lineno) + ": empty key");
        cfg.values_[key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("config not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

void KeyValueConfig::apply_overrides(const std::vector<std::string>& assignments) {
    for (auto& a : assignments) {
        const auto eq = a.find('=');
        if (eq == std::string::npos) throw InvalidInput("override '" + a + "' is not key=value");
        values_[trim(a.substr(0, eq))] = trim(a.substr(eq + 1));
    }
}

const std::string& KeyValueConfig::require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidInput(origin_ + ": missing required key '" + key + "'");
    return it->second;
}

std::string KeyValueConfig::get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        size_t used = 0;
        int v = std::stoi(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw InvalidInput(origin_ + ": key '" + key + "' expects an integer, got '" + it->second + "'");
    }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        size_t used = 0;
        double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw InvalidInput(origin_ + ": key '" + key + "' expects a number, got '" + it->second + "'");
    }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw InvalidInput(origin_ + ": key '" + key + "' expects true/false, got '" + it->second + "'");
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return {};
    return split(it->second, ',');
}

std::string KeyValueConfig::dump() const {
    std::ostringstream os;
    for (auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
}

} // namespace medgen
