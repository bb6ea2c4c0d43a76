#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "sqat/charset.hpp"
#include "sqat/dataset.hpp"
#include "sqat/font5x7.hpp"
#include "sqat/rng.hpp"

using namespace sqat;

namespace {
bool bitwise_equal(const Image& a, const Image& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(),
                     sizeof(double) * static_cast<size_t>(a.size())) == 0;
}
}  // namespace

TEST_CASE("charset indices and round trip") {
  Charset cs;
  CHECK(cs.size() == 30);
  CHECK(cs.num_chars() == 27);
  CHECK(cs.to_index('a') == 0);
  CHECK(cs.to_index('z') == 25);
  CHECK(cs.to_index(' ') == 26);
  CHECK(cs.bos() == 27);
  CHECK(cs.eos() == 28);
  CHECK(cs.pad() == 29);
  CHECK(std::set<int>({cs.bos(), cs.eos(), cs.pad()}).size() == 3);
  CHECK_THROWS_AS(cs.to_index('A'), std::invalid_argument);

  CHECK(cs.encode("") == std::vector<int>{cs.bos(), cs.eos()});
  CHECK(cs.encode("ab") == std::vector<int>{cs.bos(), 0, 1, cs.eos()});

  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const int len = rng.uniform_int(0, 24);
    std::string s;
    for (int i = 0; i < len; ++i) {
      s.push_back(cs.chars()[rng.uniform_int(
          static_cast<std::uint64_t>(cs.num_chars()))]);
    }
    CHECK(cs.decode(cs.encode(s)) == s);
  }
}

TEST_CASE("sequence validation") {
  Charset cs;
  CHECK_NOTHROW(validate_sequence({cs.bos(), 0, 1, cs.eos()}, cs, 32));
  CHECK_THROWS(validate_sequence({cs.bos(), cs.eos(), 0}, cs, 32));
  CHECK_THROWS(validate_sequence({cs.bos(), 99}, cs, 32));
  CHECK_THROWS(validate_sequence(std::vector<int>(33, 0), cs, 32));
}

TEST_CASE("render rejects bad input") {
  CHECK_THROWS_AS(render_text_line("", 0), std::invalid_argument);
  CHECK_THROWS_AS(render_text_line("ab!cd", 0), std::invalid_argument);
  CHECK_THROWS_AS(render_text_line(std::string(26, 'a'), 0),
                  std::invalid_argument);
}

TEST_CASE("render determinism and pixel range") {
  const Image a = render_text_line("hello", 7);
  const Image b = render_text_line("hello", 7);
  CHECK(bitwise_equal(a, b));
  const Image c = render_text_line("hello", 8);
  CHECK(!bitwise_equal(a, c));

  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const Image img = render_text_line("the quick brown fox", rng.next_u64());
    CHECK(img.minCoeff() >= 0.0);
    CHECK(img.maxCoeff() <= 1.0);
    CHECK(img.rows() == kImageHeight);
    CHECK(img.cols() == kImageWidth);
  }
}

TEST_CASE("ink pixel count near the font nominal count") {
  const int nominal = Font5x7::nominal_ink_count("hello");
  CHECK(nominal > 0);
  const Image img = render_text_line("hello", 7);
  int ink = 0;
  for (Eigen::Index r = 0; r < img.rows(); ++r) {
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
      if (img(r, c) > 0.5) ++ink;
    }
  }
  CHECK(ink >= nominal * 0.8);
  CHECK(ink <= nominal * 1.2);
}

TEST_CASE("glyphs are pairwise distinct") {
  Charset cs;
  for (int i = 0; i < cs.num_chars(); ++i) {
    for (int j = i + 1; j < cs.num_chars(); ++j) {
      CHECK(Font5x7::glyph(cs.chars()[i]) != Font5x7::glyph(cs.chars()[j]));
    }
  }
}

TEST_CASE("generate_dataset basics") {
  CHECK_THROWS_AS(generate_dataset(0, 1, 0), std::invalid_argument);

  const Dataset tiny = generate_dataset(1, 1, 0);
  CHECK(tiny.train.size() == 1);
  CHECK(tiny.test.size() == 1);

  const Dataset again = generate_dataset(1, 1, 0);
  CHECK(tiny.train[0].text == again.train[0].text);
  CHECK(bitwise_equal(tiny.train[0].image, again.train[0].image));
  CHECK(tiny.test[0].seed == again.test[0].seed);

  for (const auto& s : tiny.train) {
    CHECK(s.text.size() >= 8);
    CHECK(s.text.size() <= 24);
    CHECK(s.text.front() != ' ');
    CHECK(s.text.back() != ' ');
  }
}

TEST_CASE("train and test transcriptions are disjoint") {
  const Dataset ds = generate_dataset(2000, 200, 42);
  std::set<std::string> train_texts;
  for (const auto& s : ds.train) train_texts.insert(s.text);
  for (const auto& s : ds.test) {
    CHECK(train_texts.count(s.text) == 0);
  }
  CHECK(ds.test.size() == 200);
}

TEST_CASE("pgm and manifest export") {
  const Dataset ds = generate_dataset(2, 1, 5);
  const std::string dir = "test_out_dataset";
  std::filesystem::create_directories(dir);
  write_pgm(dir + "/sample.pgm", ds.train[0].image);
  std::ifstream pgm(dir + "/sample.pgm", std::ios::binary);
  std::string header;
  pgm >> header;
  CHECK(header == "P5");
  int w = 0, h = 0, maxval = 0;
  pgm >> w >> h >> maxval;
  CHECK(w == kImageWidth);
  CHECK(h == kImageHeight);
  CHECK(maxval == 255);
  pgm.get();
  std::vector<char> bytes(static_cast<size_t>(w) * h);
  pgm.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  CHECK(pgm.gcount() == static_cast<std::streamsize>(bytes.size()));

  write_manifest(dir + "/manifest.csv", ds);
  std::ifstream man(dir + "/manifest.csv");
  std::string line;
  std::getline(man, line);
  CHECK(line == "id,split,seed,text");
  int rows = 0;
  while (std::getline(man, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 3);
}
