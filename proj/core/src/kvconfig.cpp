#include "latentdyn/kvconfig.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace latentdyn {

namespace {

std::string trim(const std::string& s) {
    const std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace

KvMap parse_kv_text(const std::string& text) {
    KvMap kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw config_error("line " + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw config_error("duplicate key '" + key + "'");
        kv[key] = value;
    }
    return kv;
}

KvMap read_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_kv_text(buf.str());
}

std::string kv_to_text(const KvMap& kv) {
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += " = ";
        out += v;
        out += '\n';
    }
    return out;
}

void kv_require_known(const KvMap& kv, const std::set<std::string>& allowed) {
    for (const auto& [k, v] : kv)
        if (!allowed.count(k)) throw config_error("unknown key '" + k + "'");
}

std::string kv_get(const KvMap& kv, const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw config_error("missing key '" + key + "'");
    return it->second;
}

std::string kv_get(const KvMap& kv, const std::string& key, const std::string& fallback) {
    const auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

long long kv_get_int(const KvMap& kv, const std::string& key) {
    const std::string v = kv_get(kv, key);
    std::size_t pos = 0;
    long long r = 0;
    try {
        r = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw config_error("key '" + key + "': expected integer, got '" + v + "'");
    }
    if (pos != v.size()) throw config_error("key '" + key + "': expected integer, got '" + v + "'");
    return r;
}

long long kv_get_int(const KvMap& kv, const std::string& key, long long fallback) {
    return kv.count(key) ? kv_get_int(kv, key) : fallback;
}

double kv_get_double(const KvMap& kv, const std::string& key) {
    const std::string v = kv_get(kv, key);
    std::size_t pos = 0;
    double r = 0;
    try {
        r = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw config_error("key '" + key + "': expected number, got '" + v + "'");
    }
    if (pos != v.size()) throw config_error("key '" + key + "': expected number, got '" + v + "'");
    return r;
}

double kv_get_double(const KvMap& kv, const std::string& key, double fallback) {
    return kv.count(key) ? kv_get_double(kv, key) : fallback;
}

std::vector<int> kv_get_int_list(const KvMap& kv, const std::string& key) {
    const std::string v = kv_get(kv, key);
    std::vector<int> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) {
        std::size_t pos = 0;
        int r = 0;
        try {
            r = std::stoi(item, &pos);
        } catch (const std::exception&) {
            throw config_error("key '" + key + "': expected comma-separated integers, got '" + v + "'");
        }
        while (pos < item.size() && (item[pos] == ' ' || item[pos] == '\t')) ++pos;
        if (pos != item.size())
            throw config_error("key '" + key + "': expected comma-separated integers, got '" + v + "'");
        out.push_back(r);
    }
    if (out.empty()) throw config_error("key '" + key + "': empty list");
    return out;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string format_int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

} // namespace latentdyn
