#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gmflow {

// FIPS 180-4 SHA-256, used for dataset/checkpoint content hashes.
class Sha256 {
public:
    Sha256();
    void update(const void* data, size_t len);
    void update(const std::string& s) { update(s.data(), s.size()); }
    // Finalizes and returns lowercase hex; the object must not be reused.
    std::string hex_digest();

    static std::string of(const std::string& s);
    static std::string of_file(const std::string& path);

private:
    void process_block(const uint8_t* p);
    uint32_t h_[8];
    uint8_t buf_[64];
    size_t buf_len_ = 0;
    uint64_t total_ = 0;
};

}  // namespace gmflow
