#pragma once

// key=value text records shared by sidecars, checkpoint headers, configs and
// metric reports. Lines starting with '#' and blank lines are ignored.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace icvseg {

class KeyValues {
public:
    static KeyValues parse(std::string_view text);

    void set(const std::string& key, std::string value);
    bool contains(const std::string& key) const { return values_.count(key) != 0; }
    /// Throws DataError naming the key when absent.
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;

    /// Lines in insertion order.
    std::string to_string() const;

private:
    std::vector<std::string> order_;
    std::map<std::string, std::string> values_;
};

/// Shortest decimal text that parses back to the same value.
std::string format_double(double value);
double parse_double(std::string_view text);
std::uint64_t parse_uint(std::string_view text);
std::vector<std::string> split(std::string_view text, char sep);
std::string join_uints(const std::vector<std::size_t>& values, char sep = ',');
std::vector<std::size_t> parse_uint_list(std::string_view text, char sep = ',');

}  // namespace icvseg
