#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sqat/charset.hpp"
#include "sqat/image.hpp"

namespace sqat {

// One synthetic text line. Regenerating with the same (text, seed) pair is
// bit-identical.
struct TextSample {
  std::string text;
  Image image;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<TextSample> train;
  std::vector<TextSample> test;
  Charset charset;
  std::uint64_t seed = 0;
};

// Renders `text` with the built-in 5x7 font: fixed glyph pitch, small
// per-sample baseline/pitch jitter, additive background noise of amplitude
// <= 0.05, clipped to [0,1]. Deterministic for fixed (text, seed).
// Throws std::invalid_argument on empty text, unknown characters, or text
// too long for the 256-pixel canvas.
Image render_text_line(const std::string& text, std::uint64_t seed);

// Longest text render_text_line accepts.
int max_renderable_chars();

// Deterministic synthetic dataset. Texts are sampled uniformly over lengths
// 8..24 and charset characters (no leading/trailing space); test
// transcriptions are resampled until disjoint from the train split.
Dataset generate_dataset(int n_train, int n_test, std::uint64_t seed);

// Binary PGM export (P5, maxval 255, row-major). Values are clamped to
// [0,1] and quantized to bytes.
void write_pgm(const std::string& path, const Image& image);

// Dataset manifest CSV with columns: id, split, seed, text.
void write_manifest(const std::string& path, const Dataset& ds);

}  // namespace sqat
