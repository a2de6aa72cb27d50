#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace repsteer {

// Fixed byte-level mapping: token id == byte value. Byte 0 never occurs in
// corpus text and doubles as end-of-sequence.
inline constexpr int kByteVocab = 256;
inline constexpr int kEosToken = 0;

inline std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (const unsigned char c : text) out.push_back(static_cast<int>(c));
    return out;
}

inline std::string decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (const int id : ids) {
        if (id == kEosToken) break;
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

}  // namespace repsteer
