#ifndef DTOK_VIZ_HPP
#define DTOK_VIZ_HPP

#include <string>
#include <vector>

#include "dtok/model.hpp"

// Attention-map export as ASCII NetPBM: per-token grayscale maps (P2) and the
// input image modulated by each token's upsampled map (P3).

namespace dtok {

struct PgmImage {
  int64_t width = 0;
  int64_t height = 0;
  int maxval = 255;
  std::vector<int> values;  // row-major, height*width entries
};

struct PpmImage {
  int64_t width = 0;
  int64_t height = 0;
  int maxval = 255;
  std::vector<int> values;  // row-major, height*width*3 entries
};

void write_pgm(const std::string& path, const std::vector<int>& values, int64_t width,
               int64_t height, int maxval = 255);
PgmImage read_pgm(const std::string& path);

void write_ppm(const std::string& path, const std::vector<int>& values, int64_t width,
               int64_t height, int maxval = 255);
PpmImage read_ppm(const std::string& path);

// round(255 * (v - min) / (max - min)); an all-equal map becomes all zeros.
std::vector<int> normalize_map_to_gray(const std::vector<double>& map);

// Writes, under out_dir:
//   layer{l}_token{i}.pgm            per layer and token (image mode)
//   layer{l}_token{i}_t{k}.pgm       per temporal grid slice (video mode)
//   grounded_token{i}.ppm            input scaled by the last layer's map
//   grounded_token{i}_t{k}.ppm       per raw frame (video mode)
// Token indices run across streams in declaration order.
void export_attention_maps(const ModelConfig& cfg, const ParameterStore& params,
                           const Example& example, const std::string& out_dir);

}  // namespace dtok

#endif  // DTOK_VIZ_HPP
