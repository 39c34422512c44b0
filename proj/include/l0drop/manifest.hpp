#pragma once

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "l0drop/checkpoint.hpp"
#include "l0drop/errors.hpp"

// Needs OpenSSL's libcrypto at link time.
namespace l0drop {

// Hex SHA-1 of "blob <size>\0<content>", the object id git assigns to a file.
inline std::string git_blob_hash(const std::vector<unsigned char>& content) {
    const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
        EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw Error("SHA-1 computation failed");
    }
    EVP_MD_CTX_free(ctx);
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

inline std::string git_blob_hash_file(const std::filesystem::path& p) { return git_blob_hash(read_file_bytes(p)); }

// One record per command invocation.
struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config;
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::map<std::string, std::string> checkpoint_hashes;  // path -> git blob id
    std::map<std::string, double> timing;                  // seconds

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["command"] = command;
        j["config"] = config;
        j["seed"] = seed;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        j["checkpoint_hashes"] = checkpoint_hashes;
        j["timing"] = timing;
        return j;
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) {
            throw DataError("cannot write manifest " + path.string());
        }
        os << to_json().dump(2) << '\n';
    }
};

}  // namespace l0drop
