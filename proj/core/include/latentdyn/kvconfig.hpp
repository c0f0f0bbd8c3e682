#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "latentdyn/errors.hpp"

namespace latentdyn {

/// Flat `key = value` text: one pair per line, `#` starts a comment, blank
/// lines ignored. Keys are unique; duplicates are an error.
using KvMap = std::map<std::string, std::string>;

KvMap parse_kv_text(const std::string& text);
KvMap read_kv_file(const std::string& path);
std::string kv_to_text(const KvMap& kv);

/// Throws config_error naming the first key not in `allowed`.
void kv_require_known(const KvMap& kv, const std::set<std::string>& allowed);

/// Getters throw config_error naming the key when it is missing or does not
/// parse. The defaulted forms return the fallback when the key is absent.
std::string kv_get(const KvMap& kv, const std::string& key);
long long kv_get_int(const KvMap& kv, const std::string& key);
double kv_get_double(const KvMap& kv, const std::string& key);
std::vector<int> kv_get_int_list(const KvMap& kv, const std::string& key);

std::string kv_get(const KvMap& kv, const std::string& key, const std::string& fallback);
long long kv_get_int(const KvMap& kv, const std::string& key, long long fallback);
double kv_get_double(const KvMap& kv, const std::string& key, double fallback);

std::string format_double(double v);       // round-trip exact (%.17g)
std::string format_int_list(const std::vector<int>& v);

} // namespace latentdyn
