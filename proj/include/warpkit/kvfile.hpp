#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace warpkit {

// Line-oriented "schema <tag>" + "key value" text files used for configs,
// scene specs, checkpoints and corpus manifests. Keys keep insertion order so
// files round-trip byte-identically; doubles are printed with 17 significant
// digits for the same reason. '#' starts a comment line.
class KvFile {
public:
    explicit KvFile(std::string schema) : schema_(std::move(schema)) {}

    static KvFile load(const std::filesystem::path& path,
                       const std::string& expected_schema);
    void save(const std::filesystem::path& path) const;
    std::string to_text() const;

    const std::string& schema() const { return schema_; }

    bool has(const std::string& key) const;
    const std::vector<std::pair<std::string, std::string>>& entries() const {
        return entries_;
    }

    void set(const std::string& key, const std::string& value);
    void set_int(const std::string& key, long long v);
    void set_double(const std::string& key, double v);

    std::string get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    long long get_int(const std::string& key) const;
    double get_double(const std::string& key) const;

private:
    std::string schema_;
    std::vector<std::pair<std::string, std::string>> entries_;
};

// stable content hash over the serialized text (FNV-1a, hex)
std::string content_hash(const std::string& text);

}  // namespace warpkit
