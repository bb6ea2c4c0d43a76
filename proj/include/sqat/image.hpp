#pragma once

#include <Eigen/Core>

namespace sqat {

// Grayscale pixel grid, values nominally in [0,1]. Fixed 32x256 for the
// recognizer; attack deltas share the shape. Attack evaluation may leave
// the nominal range, so no clamping is baked into the type.
using Image = Eigen::MatrixXd;

inline constexpr int kImageHeight = 32;
inline constexpr int kImageWidth = 256;

inline bool has_image_shape(const Image& x) {
  return x.rows() == kImageHeight && x.cols() == kImageWidth;
}

}  // namespace sqat
