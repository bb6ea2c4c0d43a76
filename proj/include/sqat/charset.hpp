#pragma once

#include <string>
#include <vector>

namespace sqat {

// Character vocabulary: lowercase a-z plus space, with bos/eos/pad special
// tokens appended after the characters. Index assignment is fixed:
//   0..25 -> 'a'..'z', 26 -> ' ', 27 -> bos, 28 -> eos, 29 -> pad.
class Charset {
 public:
  Charset();

  int size() const { return vocab_size_; }
  int num_chars() const { return static_cast<int>(chars_.size()); }
  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int pad() const { return pad_; }

  bool contains(char c) const;
  int to_index(char c) const;  // throws std::invalid_argument on unknown char
  char to_char(int index) const;  // valid only for character indices
  bool is_char_index(int index) const {
    return index >= 0 && index < num_chars();
  }

  const std::string& chars() const { return chars_; }

  // [bos, c_1, ..., c_k, eos]
  std::vector<int> encode(const std::string& text) const;
  // Inverse of encode: special tokens are skipped.
  std::string decode(const std::vector<int>& tokens) const;

 private:
  std::string chars_;
  int bos_ = 0;
  int eos_ = 0;
  int pad_ = 0;
  int vocab_size_ = 0;
  int index_of_[256];
};

// Sequence helpers shared by model and attacks. A well-formed sequence is
// bos-initiated, holds at most one eos, and nothing follows the eos.
bool starts_with_bos(const std::vector<int>& seq, const Charset& cs);
bool ends_with_eos(const std::vector<int>& seq, const Charset& cs);
void validate_sequence(const std::vector<int>& seq, const Charset& cs,
                       int max_len);

}  // namespace sqat
