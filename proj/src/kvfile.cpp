#include "warpkit/kvfile.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "warpkit/error.hpp"

namespace warpkit {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k) {
        bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                  (c >= '0' && c <= '9') || c == '_' || c == '.' || c == '-';
        if (!ok) return false;
    }
    return true;
}

}  // namespace

KvFile KvFile::load(const std::filesystem::path& path,
                    const std::string& expected_schema) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path.string());
    std::string line;
    bool saw_schema = false;
    KvFile kv("");
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t sp = t.find(' ');
        std::string key = (sp == std::string::npos) ? t : t.substr(0, sp);
        std::string value = (sp == std::string::npos) ? "" : trim(t.substr(sp + 1));
        if (!saw_schema) {
            if (key != "schema")
                throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                                  ": first entry must be 'schema', got '" + key + "'");
            if (value != expected_schema)
                throw ConfigError(path.string() + ": schema '" + value +
                                  "' does not match expected '" + expected_schema + "'");
            kv.schema_ = value;
            saw_schema = true;
            continue;
        }
        if (!valid_key(key))
            throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                              ": bad key '" + key + "'");
        if (kv.has(key))
            throw ConfigError(path.string() + ": duplicate key '" + key + "'");
        kv.entries_.emplace_back(key, value);
    }
    if (!saw_schema) throw ConfigError(path.string() + ": missing schema line");
    return kv;
}

std::string KvFile::to_text() const {
    std::ostringstream os;
    os << "schema " << schema_ << "\n";
    for (const auto& [k, v] : entries_) os << k << " " << v << "\n";
    return os.str();
}

void KvFile::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);  // binary: no newline translation
    if (!os) throw IoError("cannot open for write: " + path.string());
    os << to_text();
    if (!os) throw IoError("write failed: " + path.string());
}

bool KvFile::has(const std::string& key) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return true;
    return false;
}

void KvFile::set(const std::string& key, const std::string& value) {
    if (!valid_key(key)) throw ConfigError("bad key '" + key + "'");
    for (auto& [k, v] : entries_) {
        if (k == key) {
            v = value;
            return;
        }
    }
    entries_.emplace_back(key, value);
}

void KvFile::set_int(const std::string& key, long long v) {
    set(key, std::to_string(v));
}

void KvFile::set_double(const std::string& key, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    set(key, buf);
}

std::string KvFile::get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return v;
    throw ConfigError("missing key '" + key + "'");
}

std::string KvFile::get_or(const std::string& key, const std::string& fallback) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return v;
    return fallback;
}

long long KvFile::get_int(const std::string& key) const {
    const std::string v = get(key);
    try {
        std::size_t pos = 0;
        long long n = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + v + "' is not an integer");
    }
}

double KvFile::get_double(const std::string& key) const {
    const std::string v = get(key);
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + v + "' is not a number");
    }
}

std::string content_hash(const std::string& text) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace warpkit
