#include "sqat/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "sqat/font5x7.hpp"
#include "sqat/rng.hpp"

namespace sqat {

namespace {

constexpr int kMarginX = 4;
constexpr int kPitch = 10;
constexpr int kBaselineY = 12;  // top row of the glyph box
constexpr int kMaxBaselineJitter = 2;
constexpr int kMaxPitchJitter = 1;
constexpr double kNoiseAmplitude = 0.05;
constexpr int kMinTextLen = 8;
constexpr int kMaxTextLen = 24;

}  // namespace

int max_renderable_chars() {
  // Rightmost glyph must fit: margin + (n-1)*pitch + jitter + width <= W.
  return (kImageWidth - kMarginX - kMaxPitchJitter - Font5x7::kWidth) / kPitch + 1;
}

Image render_text_line(const std::string& text, std::uint64_t seed) {
  if (text.empty()) throw std::invalid_argument("empty text");
  Charset cs;
  for (char c : text) {
    if (!cs.contains(c)) {
      throw std::invalid_argument(std::string("character outside charset: '") +
                                  c + "'");
    }
  }
  if (static_cast<int>(text.size()) > max_renderable_chars()) {
    throw std::invalid_argument("text too long for canvas: " + text);
  }

  Rng rng(seed);
  const int baseline = kBaselineY + rng.uniform_int(-kMaxBaselineJitter,
                                                    kMaxBaselineJitter);

  Image img = Image::Zero(kImageHeight, kImageWidth);
  for (size_t i = 0; i < text.size(); ++i) {
    const int jitter = rng.uniform_int(-kMaxPitchJitter, kMaxPitchJitter);
    const int x0 = kMarginX + static_cast<int>(i) * kPitch + jitter;
    const auto& glyph = Font5x7::glyph(text[i]);
    for (int r = 0; r < Font5x7::kHeight; ++r) {
      for (int c = 0; c < Font5x7::kWidth; ++c) {
        if (glyph[static_cast<size_t>(r)] & (1 << (Font5x7::kWidth - 1 - c))) {
          img(baseline + r, x0 + c) = 1.0;
        }
      }
    }
  }

  for (int r = 0; r < kImageHeight; ++r) {
    for (int c = 0; c < kImageWidth; ++c) {
      img(r, c) = std::min(1.0, img(r, c) + kNoiseAmplitude * rng.uniform());
    }
  }
  return img;
}

namespace {

std::string sample_text(Rng& rng, const Charset& cs) {
  const int len = rng.uniform_int(kMinTextLen, kMaxTextLen);
  std::string text(static_cast<size_t>(len), ' ');
  for (int i = 0; i < len; ++i) {
    for (;;) {
      char c = cs.chars()[rng.uniform_int(
          static_cast<std::uint64_t>(cs.num_chars()))];
      // A trailing or leading space leaves no visual evidence on a fixed
      // canvas, so those positions are resampled.
      if (c == ' ' && (i == 0 || i == len - 1)) continue;
      text[static_cast<size_t>(i)] = c;
      break;
    }
  }
  return text;
}

TextSample make_sample(Rng stream, const Charset& cs,
                       const std::unordered_set<std::string>* forbidden) {
  for (;;) {
    std::string text = sample_text(stream, cs);
    if (forbidden && forbidden->count(text)) continue;
    const std::uint64_t render_seed = stream.next_u64();
    return TextSample{text, render_text_line(text, render_seed), render_seed};
  }
}

}  // namespace

Dataset generate_dataset(int n_train, int n_test, std::uint64_t seed) {
  if (n_train < 1 || n_test < 1) {
    throw std::invalid_argument("n_train and n_test must be >= 1");
  }
  Dataset ds;
  ds.seed = seed;
  Rng master(seed);

  std::unordered_set<std::string> train_texts;
  ds.train.reserve(static_cast<size_t>(n_train));
  for (int i = 0; i < n_train; ++i) {
    ds.train.push_back(make_sample(
        master.child(2 * static_cast<std::uint64_t>(i)), ds.charset, nullptr));
    train_texts.insert(ds.train.back().text);
  }
  ds.test.reserve(static_cast<size_t>(n_test));
  for (int j = 0; j < n_test; ++j) {
    ds.test.push_back(
        make_sample(master.child(2 * static_cast<std::uint64_t>(j) + 1),
                    ds.charset, &train_texts));
  }
  return ds;
}

void write_pgm(const std::string& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "P5\n" << image.cols() << " " << image.rows() << "\n255\n";
  for (Eigen::Index r = 0; r < image.rows(); ++r) {
    for (Eigen::Index c = 0; c < image.cols(); ++c) {
      double v = std::clamp(image(r, c), 0.0, 1.0);
      out.put(static_cast<char>(
          static_cast<unsigned char>(v * 255.0 + 0.5)));
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_manifest(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "id,split,seed,text\n";
  int id = 0;
  for (const auto& s : ds.train) {
    out << id++ << ",train," << s.seed << "," << s.text << "\n";
  }
  for (const auto& s : ds.test) {
    out << id++ << ",test," << s.seed << "," << s.text << "\n";
  }
}

}  // namespace sqat
