#ifndef DTOK_DATA_HPP
#define DTOK_DATA_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "dtok/rng.hpp"
#include "dtok/tensor.hpp"

// Deterministic synthetic QA data. Scenes are grids of solid shapes drawn by
// integer rasterization rules (no anti-aliasing), so the same seed yields the
// same bytes on every platform. Questions come from a fixed template grammar
// and are regenerated until exactly one answer is correct.

namespace dtok {

// Fixed word <-> id map over the template grammar plus 4 special tokens.
class Vocab {
 public:
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kStart = 1;
  static constexpr int64_t kEnd = 2;
  static constexpr int64_t kUnk = 3;

  static const Vocab& standard();

  int64_t size() const { return static_cast<int64_t>(words_.size()); }
  int64_t id(const std::string& word) const;          // kUnk when absent
  const std::string& word(int64_t id) const;

 private:
  Vocab();
  std::vector<std::string> words_;
  std::vector<std::pair<std::string, int64_t>> index_;  // sorted for lookup
};

// Lowercases, strips {? , .}, splits on spaces.
std::vector<int64_t> text_tokenize(const std::string& s, const Vocab& vocab);

// Joins vocab words with single spaces; pad/start/end are skipped.
std::string detokenize(const std::vector<int64_t>& ids, const Vocab& vocab);

// One multimodal sample. pixels are row-major RGB bytes shaped (h, w, 3) for
// images or (t, h, w, 3) for videos.
struct Example {
  Shape vis_shape;
  std::vector<uint8_t> pixels;
  std::string question;
  std::string answer;
  std::vector<int64_t> question_ids;
  std::vector<int64_t> answer_ids;

  bool is_video() const { return vis_shape.size() == 4; }
  // float tensor in [0,1], same layout as pixels
  Tensor visual_tensor() const;
};

enum class DatasetMode : uint8_t { image = 0, video = 1 };

enum class ShapeKind { circle = 0, square = 1, triangle = 2 };
enum class Color { red = 0, green = 1, blue = 2, yellow = 3 };

// Draws one solid shape into an RGB byte image. The shape sits inside the
// cell [x0, x0+cell) x [y0, y0+cell) with margin cell/8; exact integer fill
// rules are documented in the README.
void draw_shape(std::vector<uint8_t>& pixels, int64_t width, ShapeKind kind, Color color,
                int64_t x0, int64_t y0, int64_t cell);

// g x g grid of optional shapes plus one unambiguous question from
// {"what color is the <shape>", "what shape is <color>", "how many shapes"}.
Example gen_image_example(uint64_t seed, int64_t grid, int64_t image_size);

// One shape translating across `frames` frames (plus static distractors) and
// a question from {"which direction does the <shape> move",
// "what color is the moving shape"}.
Example gen_video_example(uint64_t seed, int64_t frames, int64_t image_size);

void write_dataset(const std::string& path, DatasetMode mode,
                   const std::vector<Example>& examples);

struct Dataset {
  DatasetMode mode = DatasetMode::image;
  std::vector<Example> examples;
};

Dataset read_dataset(const std::string& path);

}  // namespace dtok

#endif  // DTOK_DATA_HPP
