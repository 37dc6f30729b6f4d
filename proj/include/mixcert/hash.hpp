#pragma once

// FNV-1a (64-bit) content hashes used to tie results to their inputs.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace mixcert {

class Fnv1a {
public:
    Fnv1a& bytes(const void* data, std::size_t n) noexcept {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
        return *this;
    }
    Fnv1a& doubles(std::span<const double> v) noexcept { return bytes(v.data(), v.size_bytes()); }
    Fnv1a& u64(std::uint64_t v) noexcept { return bytes(&v, sizeof v); }
    Fnv1a& text(std::string_view s) noexcept { return bytes(s.data(), s.size()); }
    std::uint64_t value() const noexcept { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace mixcert
