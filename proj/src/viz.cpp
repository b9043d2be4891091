#include "dtok/viz.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dtok/io.hpp"

namespace dtok {

namespace {

void write_netpbm(const std::string& path, const char* magic, const std::vector<int>& values,
                  int64_t width, int64_t height, int maxval, int per_pixel) {
  if (static_cast<int64_t>(values.size()) != width * height * per_pixel) {
    throw IoError("pixel count does not match dimensions for " + path);
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << magic << "\n" << width << " " << height << "\n" << maxval << "\n";
  for (int64_t y = 0; y < height; ++y) {
    for (int64_t x = 0; x < width * per_pixel; ++x) {
      if (x) f << " ";
      f << values[y * width * per_pixel + x];
    }
    f << "\n";
  }
  if (!f) throw IoError("write failed for " + path);
}

// whitespace- and comment-tolerant ASCII NetPBM token stream
class PnmScanner {
 public:
  explicit PnmScanner(const std::string& path) : f_(path) {
    if (!f_) throw IoError("cannot open " + path);
  }

  std::string token() {
    std::string t;
    char ch;
    while (f_.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(f_, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) return t;
        continue;
      }
      t.push_back(ch);
    }
    if (t.empty()) throw IoError("unexpected end of NetPBM file");
    return t;
  }

  int number() {
    const std::string t = token();
    try {
      return std::stoi(t);
    } catch (const std::exception&) {
      throw IoError("expected a number in NetPBM file, got '" + t + "'");
    }
  }

 private:
  std::ifstream f_;
};

}  // namespace

void write_pgm(const std::string& path, const std::vector<int>& values, int64_t width,
               int64_t height, int maxval) {
  write_netpbm(path, "P2", values, width, height, maxval, 1);
}

PgmImage read_pgm(const std::string& path) {
  PnmScanner scan(path);
  if (scan.token() != "P2") throw IoError(path + " is not an ASCII PGM");
  PgmImage img;
  img.width = scan.number();
  img.height = scan.number();
  img.maxval = scan.number();
  img.values.resize(img.width * img.height);
  for (int& v : img.values) v = scan.number();
  return img;
}

void write_ppm(const std::string& path, const std::vector<int>& values, int64_t width,
               int64_t height, int maxval) {
  write_netpbm(path, "P3", values, width, height, maxval, 3);
}

PpmImage read_ppm(const std::string& path) {
  PnmScanner scan(path);
  if (scan.token() != "P3") throw IoError(path + " is not an ASCII PPM");
  PpmImage img;
  img.width = scan.number();
  img.height = scan.number();
  img.maxval = scan.number();
  img.values.resize(img.width * img.height * 3);
  for (int& v : img.values) v = scan.number();
  return img;
}

std::vector<int> normalize_map_to_gray(const std::vector<double>& map) {
  double lo = map[0], hi = map[0];
  for (double v : map) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<int> out(map.size(), 0);
  if (hi > lo) {
    for (size_t i = 0; i < map.size(); ++i) {
      out[i] = static_cast<int>(std::lround(255.0 * (map[i] - lo) / (hi - lo)));
    }
  }
  return out;
}

namespace {

// min-max normalized map in [0,1]; all-equal maps collapse to 0
std::vector<double> normalize_map_unit(const std::vector<double>& map) {
  double lo = map[0], hi = map[0];
  for (double v : map) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<double> out(map.size(), 0.0);
  if (hi > lo) {
    for (size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - lo) / (hi - lo);
  }
  return out;
}

std::vector<double> map_row(const Tensor& maps, int64_t token) {
  const int64_t s = maps.shape()[2];
  const double* base = maps.data().data() + token * s;
  return std::vector<double>(base, base + s);
}

}  // namespace

void export_attention_maps(const ModelConfig& cfg, const ParameterStore& params,
                           const Example& example, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  EncoderState enc = encode(cfg, params, {example});

  struct StreamGrid {
    int64_t gt, gh, gw;
  };
  std::vector<StreamGrid> grids;
  for (size_t si = 0; si < cfg.streams.size(); ++si) {
    const StreamSpec& s = cfg.streams[si];
    if (cfg.is_video()) {
      grids.push_back({cfg.frames / s.t_stride / s.patch_t,
                       cfg.image_size / s.s_stride / s.patch,
                       cfg.image_size / s.s_stride / s.patch});
    } else {
      grids.push_back({1, cfg.image_size / cfg.patch, cfg.image_size / cfg.patch});
    }
  }

  // per-token grayscale maps, every layer
  for (size_t l = 0; l < enc.maps.size(); ++l) {
    int64_t token_base = 0;
    for (size_t si = 0; si < enc.maps[l].size(); ++si) {
      const Tensor& maps = enc.maps[l][si];
      const StreamGrid& g = grids[si];
      for (int64_t i = 0; i < maps.shape()[1]; ++i) {
        const std::vector<int> gray = normalize_map_to_gray(map_row(maps, i));
        const std::string stem =
            out_dir + "/layer" + std::to_string(l) + "_token" + std::to_string(token_base + i);
        if (cfg.is_video()) {
          for (int64_t k = 0; k < g.gt; ++k) {
            std::vector<int> slice(gray.begin() + k * g.gh * g.gw,
                                   gray.begin() + (k + 1) * g.gh * g.gw);
            write_pgm(stem + "_t" + std::to_string(k) + ".pgm", slice, g.gw, g.gh);
          }
        } else {
          write_pgm(stem + ".pgm", gray, g.gw, g.gh);
        }
      }
      token_base += maps.shape()[1];
    }
  }

  // grounded masks from the last layer's maps
  const auto& last = enc.maps.back();
  int64_t token_base = 0;
  for (size_t si = 0; si < last.size(); ++si) {
    const Tensor& maps = last[si];
    const StreamGrid& g = grids[si];
    const StreamSpec& spec = cfg.streams[si];
    for (int64_t i = 0; i < maps.shape()[1]; ++i) {
      const std::vector<double> unit = normalize_map_unit(map_row(maps, i));
      const std::string stem = out_dir + "/grounded_token" + std::to_string(token_base + i);
      if (cfg.is_video()) {
        const int64_t hw = cfg.image_size;
        for (int64_t t = 0; t < cfg.frames; ++t) {
          const int64_t clip_t = std::min(t / spec.t_stride, cfg.frames / spec.t_stride - 1);
          const int64_t cell_t = clip_t / spec.patch_t;
          std::vector<int> rgb(hw * hw * 3);
          for (int64_t y = 0; y < hw; ++y) {
            for (int64_t x = 0; x < hw; ++x) {
              const int64_t cy = y / spec.s_stride / spec.patch;
              const int64_t cx = x / spec.s_stride / spec.patch;
              const double scale = unit[(cell_t * g.gh + cy) * g.gw + cx];
              for (int64_t c = 0; c < 3; ++c) {
                const uint8_t px = example.pixels[((t * hw + y) * hw + x) * 3 + c];
                rgb[(y * hw + x) * 3 + c] = static_cast<int>(std::lround(px * scale));
              }
            }
          }
          write_ppm(stem + "_t" + std::to_string(t) + ".ppm", rgb, hw, hw);
        }
      } else {
        const int64_t hw = cfg.image_size;
        std::vector<int> rgb(hw * hw * 3);
        for (int64_t y = 0; y < hw; ++y) {
          for (int64_t x = 0; x < hw; ++x) {
            const double scale = unit[(y / cfg.patch) * g.gw + (x / cfg.patch)];
            for (int64_t c = 0; c < 3; ++c) {
              const uint8_t px = example.pixels[(y * hw + x) * 3 + c];
              rgb[(y * hw + x) * 3 + c] = static_cast<int>(std::lround(px * scale));
            }
          }
        }
        write_ppm(stem + ".ppm", rgb, hw, hw);
      }
    }
    token_base += maps.shape()[1];
  }
}

}  // namespace dtok
