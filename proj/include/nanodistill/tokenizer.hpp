#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace nanodistill {

// Character-level vocabulary shared by every teacher and student, so their
// output distributions always live over the same ids.
//
//   0 PAD, 1 BOS, 2 EOS, 3 UNK, 4..98 printable ASCII ' '..'~', 99 '\n'
class CharTokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kFirstPrintable = 4;
  static constexpr int kNewline = 99;
  static constexpr int kVocabSize = 100;

  static constexpr int vocab_size() { return kVocabSize; }

  static int encode_char(char c) {
    const auto u = static_cast<unsigned char>(c);
    if (u == '\n') return kNewline;
    if (u >= 32 && u <= 126) return kFirstPrintable + (u - 32);
    return kUnk;
  }

  static std::vector<int> encode(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(encode_char(c));
    return ids;
  }

  // Special tokens other than newline decode to nothing; UNK decodes to '?'.
  static std::string decode(const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
      if (id == kNewline) {
        out.push_back('\n');
      } else if (id >= kFirstPrintable && id < kNewline) {
        out.push_back(static_cast<char>(32 + id - kFirstPrintable));
      } else if (id == kUnk) {
        out.push_back('?');
      }
    }
    return out;
  }
};

}  // namespace nanodistill
