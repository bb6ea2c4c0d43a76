#include "sqat/charset.hpp"

#include <stdexcept>

namespace sqat {

Charset::Charset() {
  for (char c = 'a'; c <= 'z'; ++c) chars_.push_back(c);
  chars_.push_back(' ');
  bos_ = num_chars();
  eos_ = bos_ + 1;
  pad_ = eos_ + 1;
  vocab_size_ = pad_ + 1;
  for (int& idx : index_of_) idx = -1;
  for (int i = 0; i < num_chars(); ++i) {
    index_of_[static_cast<unsigned char>(chars_[i])] = i;
  }
}

bool Charset::contains(char c) const {
  return index_of_[static_cast<unsigned char>(c)] >= 0;
}

int Charset::to_index(char c) const {
  int idx = index_of_[static_cast<unsigned char>(c)];
  if (idx < 0) {
    throw std::invalid_argument(std::string("character outside charset: '") +
                                c + "'");
  }
  return idx;
}

char Charset::to_char(int index) const {
  if (!is_char_index(index)) {
    throw std::invalid_argument("index is not a character token: " +
                                std::to_string(index));
  }
  return chars_[static_cast<size_t>(index)];
}

std::vector<int> Charset::encode(const std::string& text) const {
  std::vector<int> out;
  out.reserve(text.size() + 2);
  out.push_back(bos_);
  for (char c : text) out.push_back(to_index(c));
  out.push_back(eos_);
  return out;
}

std::string Charset::decode(const std::vector<int>& tokens) const {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (is_char_index(t)) out.push_back(chars_[static_cast<size_t>(t)]);
  }
  return out;
}

bool starts_with_bos(const std::vector<int>& seq, const Charset& cs) {
  return !seq.empty() && seq.front() == cs.bos();
}

bool ends_with_eos(const std::vector<int>& seq, const Charset& cs) {
  return !seq.empty() && seq.back() == cs.eos();
}

void validate_sequence(const std::vector<int>& seq, const Charset& cs,
                       int max_len) {
  if (static_cast<int>(seq.size()) > max_len) {
    throw std::invalid_argument("token sequence longer than max_len");
  }
  int eos_count = 0;
  for (size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] < 0 || seq[i] >= cs.size()) {
      throw std::invalid_argument("token index out of vocabulary");
    }
    if (seq[i] == cs.eos()) {
      ++eos_count;
      if (i + 1 != seq.size()) {
        throw std::invalid_argument("tokens present after eos");
      }
    }
  }
  if (eos_count > 1) throw std::invalid_argument("more than one eos");
}

}  // namespace sqat
