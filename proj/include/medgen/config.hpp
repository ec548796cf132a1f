// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace medgen {

/// Flat `key = value` text; `#` starts a comment. Later keys override earlier ones.
class KeyValueConfig {
public:
    KeyValueConfig() = default;
    static KeyValueConfig parse(const std::string& text, const std::string& origin = "<config>");
    static KeyValueConfig load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    /// Applies `key=value` strings on top (command-line overrides).
    void apply_overrides(const std::vector<std::string>& assignments);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    /// Throws InvalidInput naming the missing key.
    const std::string& require(const std::string& key) const;
    std::string get(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<std::string> get_list(const std::string& key) const;

    const std::map<std::string, std::string>& values() const { return values_; }
    std::string dump() const;

private:
    std::map<std::string, std::string> values_;
    std::string origin_ = "<config>";
};

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);

} // namespace medgen
