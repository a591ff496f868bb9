#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace bevit::cfg {

// Flat `key = value` text format with '#' comments and an explicit
// `config_version` line. Runs dump their fully-resolved config so every output
// directory is self-describing.
class KvConfig {
public:
    static constexpr int kVersion = 1;

    KvConfig() = default;
    static KvConfig load(const std::string& path);
    static KvConfig from_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;

    void set(const std::string& key, const std::string& value);
    void set_int(const std::string& key, std::int64_t value);
    void set_double(const std::string& key, double value);
    void set_bool(const std::string& key, bool value);

    // Keys in first-set order; unread keys can be audited by callers.
    const std::vector<std::string>& keys() const { return order_; }

    void dump(const std::string& path) const;
    std::string dump_string() const;

    // FNV-1a over the sorted canonical "key=value" lines; tags every report row.
    std::string hash() const;

private:
    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
};

}  // namespace bevit::cfg
