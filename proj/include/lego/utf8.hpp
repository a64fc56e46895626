#pragma once

#include <string>
#include <vector>

namespace lego::utf8 {

constexpr char32_t kReplacement = 0xFFFD;

// Decodes UTF-8, emitting U+FFFD for stray or truncated sequences.
inline std::vector<char32_t> decode(const std::string& s) {
  std::vector<char32_t> out;
  std::size_t i = 0;
  while (i < s.size()) {
    unsigned char b = s[i];
    char32_t cp;
    int extra;
    if (b < 0x80) { cp = b; extra = 0; }
    else if ((b >> 5) == 0x6) { cp = b & 0x1F; extra = 1; }
    else if ((b >> 4) == 0xE) { cp = b & 0x0F; extra = 2; }
    else if ((b >> 3) == 0x1E) { cp = b & 0x07; extra = 3; }
    else { cp = kReplacement; extra = 0; }
    for (int k = 0; k < extra; ++k) {
      if (i + 1 + k >= s.size() ||
          (static_cast<unsigned char>(s[i + 1 + k]) >> 6) != 0x2) {
        cp = kReplacement;
        extra = k;
        break;
      }
      cp = (cp << 6) | (static_cast<unsigned char>(s[i + 1 + k]) & 0x3F);
    }
    out.push_back(cp);
    i += 1 + extra;
  }
  return out;
}

inline void append(std::string& s, char32_t cp) {
  if (cp < 0x80) {
    s += static_cast<char>(cp);
  } else if (cp < 0x800) {
    s += static_cast<char>(0xC0 | (cp >> 6));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    s += static_cast<char>(0xE0 | (cp >> 12));
    s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    s += static_cast<char>(0xF0 | (cp >> 18));
    s += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

inline std::string encode(const std::vector<char32_t>& cps) {
  std::string s;
  for (auto cp : cps) append(s, cp);
  return s;
}

// Re-encodes, replacing any invalid sequence with U+FFFD.
inline std::string sanitize(const std::string& s) { return encode(decode(s)); }

}  // namespace lego::utf8
