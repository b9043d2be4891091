#include "dtok/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>

#include "dtok/io.hpp"

namespace dtok {

namespace {

const char* kShapeWords[3] = {"circle", "square", "triangle"};
const char* kColorWords[4] = {"red", "green", "blue", "yellow"};
const char* kNumberWords[17] = {"zero",     "one",     "two",    "three",    "four",
                                "five",     "six",     "seven",  "eight",    "nine",
                                "ten",      "eleven",  "twelve", "thirteen", "fourteen",
                                "fifteen",  "sixteen"};
const char* kDirectionWords[4] = {"left", "right", "up", "down"};

const std::array<std::array<uint8_t, 3>, 4> kColorRgb = {{
    {{255, 0, 0}},      // red
    {{0, 255, 0}},      // green
    {{0, 0, 255}},      // blue
    {{255, 255, 0}},    // yellow
}};

}  // namespace

Vocab::Vocab() {
  words_ = {"<pad>", "<s>", "</s>", "<unk>"};
  const char* grammar[] = {"what", "color", "is",  "the",  "shape",  "how",
                           "many", "shapes", "which", "direction", "does", "move",
                           "moving"};
  for (const char* w : grammar) words_.push_back(w);
  for (const char* w : kShapeWords) words_.push_back(w);
  for (const char* w : kColorWords) words_.push_back(w);
  for (const char* w : kNumberWords) words_.push_back(w);
  for (const char* w : kDirectionWords) words_.push_back(w);
  for (size_t i = 0; i < words_.size(); ++i) {
    index_.emplace_back(words_[i], static_cast<int64_t>(i));
  }
  std::sort(index_.begin(), index_.end());
}

const Vocab& Vocab::standard() {
  static const Vocab vocab;
  return vocab;
}

int64_t Vocab::id(const std::string& word) const {
  auto it = std::lower_bound(index_.begin(), index_.end(),
                             std::make_pair(word, int64_t{0}));
  if (it != index_.end() && it->first == word) return it->second;
  return kUnk;
}

const std::string& Vocab::word(int64_t id) const {
  if (id < 0 || id >= size()) throw ShapeError("token id out of vocab range");
  return words_[id];
}

std::vector<int64_t> text_tokenize(const std::string& s, const Vocab& vocab) {
  std::string cleaned;
  for (char ch : s) {
    if (ch == '?' || ch == ',' || ch == '.') continue;
    cleaned.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  std::vector<int64_t> ids;
  std::string word;
  auto flush = [&]() {
    if (!word.empty()) {
      ids.push_back(vocab.id(word));
      word.clear();
    }
  };
  for (char ch : cleaned) {
    if (ch == ' ') {
      flush();
    } else {
      word.push_back(ch);
    }
  }
  flush();
  return ids;
}

std::string detokenize(const std::vector<int64_t>& ids, const Vocab& vocab) {
  std::string out;
  for (int64_t id : ids) {
    if (id == Vocab::kPad || id == Vocab::kStart || id == Vocab::kEnd) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.word(id);
  }
  return out;
}

Tensor Example::visual_tensor() const {
  std::vector<double> values(pixels.size());
  for (size_t i = 0; i < pixels.size(); ++i) values[i] = pixels[i] / 255.0;
  return Tensor::from(vis_shape, std::move(values));
}

// ---- rasterizer ----

void draw_shape(std::vector<uint8_t>& pixels, int64_t width, ShapeKind kind, Color color,
                int64_t x0, int64_t y0, int64_t cell) {
  const int64_t m = cell / 8;
  const int64_t b = cell - 2 * m;  // box side
  const auto& rgb = kColorRgb[static_cast<size_t>(color)];
  auto put = [&](int64_t x, int64_t y) {
    uint8_t* p = pixels.data() + (y * width + x) * 3;
    p[0] = rgb[0];
    p[1] = rgb[1];
    p[2] = rgb[2];
  };
  for (int64_t y = y0 + m; y < y0 + cell - m; ++y) {
    for (int64_t x = x0 + m; x < x0 + cell - m; ++x) {
      // doubled offsets of the pixel center from the cell center
      const int64_t dx2 = 2 * (x - x0) + 1 - cell;
      const int64_t dy2 = 2 * (y - y0) + 1 - cell;
      bool fill = false;
      switch (kind) {
        case ShapeKind::square:
          fill = true;
          break;
        case ShapeKind::circle:
          fill = dx2 * dx2 + dy2 * dy2 <= b * b;
          break;
        case ShapeKind::triangle: {
          const int64_t t = y - (y0 + m);
          fill = std::abs(dx2) <= t + 1;
          break;
        }
      }
      if (fill) put(x, y);
    }
  }
}

// ---- image scenes ----

namespace {

struct Cell {
  bool filled = false;
  int kind = 0;
  int color = 0;
};

std::vector<Cell> random_scene(Rng& rng, int64_t grid) {
  std::vector<Cell> cells(grid * grid);
  for (Cell& cell : cells) {
    cell.filled = rng.u01() < 0.6;
    if (cell.filled) {
      cell.kind = static_cast<int>(rng.below(3));
      cell.color = static_cast<int>(rng.below(4));
    }
  }
  return cells;
}

std::vector<uint8_t> render_scene(const std::vector<Cell>& cells, int64_t grid,
                                  int64_t image_size) {
  std::vector<uint8_t> pixels(image_size * image_size * 3, 0);
  const int64_t cell_px = image_size / grid;
  for (int64_t r = 0; r < grid; ++r) {
    for (int64_t q = 0; q < grid; ++q) {
      const Cell& cell = cells[r * grid + q];
      if (!cell.filled) continue;
      draw_shape(pixels, image_size, static_cast<ShapeKind>(cell.kind),
                 static_cast<Color>(cell.color), q * cell_px, r * cell_px, cell_px);
    }
  }
  return pixels;
}

void finish_example(Example& ex) {
  const Vocab& vocab = Vocab::standard();
  ex.question_ids = text_tokenize(ex.question, vocab);
  ex.answer_ids = text_tokenize(ex.answer, vocab);
}

}  // namespace

Example gen_image_example(uint64_t seed, int64_t grid, int64_t image_size) {
  if (grid < 2 || grid > 4) throw ShapeError("grid must be 2, 3 or 4");
  if (image_size % grid != 0) throw ShapeError("image size must divide by grid");
  Rng rng(seed);
  int attempts = 0;
  while (true) {
    if (attempts == 100) {
      // bounded regeneration: continue from a deterministically derived seed
      rng = Rng(Rng::mix(seed));
      attempts = 0;
    }
    ++attempts;

    std::vector<Cell> cells = random_scene(rng, grid);
    const int template_id = static_cast<int>(rng.below(3));

    std::array<int, 3> kind_counts{};
    std::array<int, 4> color_counts{};
    int total = 0;
    for (const Cell& cell : cells) {
      if (!cell.filled) continue;
      kind_counts[cell.kind]++;
      color_counts[cell.color]++;
      total++;
    }

    Example ex;
    if (template_id == 0) {
      std::vector<int> unique_kinds;
      for (int k = 0; k < 3; ++k) {
        if (kind_counts[k] == 1) unique_kinds.push_back(k);
      }
      if (unique_kinds.empty()) continue;  // ambiguous; regenerate
      const int kind = unique_kinds[rng.below(unique_kinds.size())];
      int color = 0;
      for (const Cell& cell : cells) {
        if (cell.filled && cell.kind == kind) color = cell.color;
      }
      ex.question = std::string("what color is the ") + kShapeWords[kind];
      ex.answer = kColorWords[color];
    } else if (template_id == 1) {
      std::vector<int> unique_colors;
      for (int c = 0; c < 4; ++c) {
        if (color_counts[c] == 1) unique_colors.push_back(c);
      }
      if (unique_colors.empty()) continue;
      const int color = unique_colors[rng.below(unique_colors.size())];
      int kind = 0;
      for (const Cell& cell : cells) {
        if (cell.filled && cell.color == color) kind = cell.kind;
      }
      ex.question = std::string("what shape is ") + kColorWords[color];
      ex.answer = kShapeWords[kind];
    } else {
      ex.question = "how many shapes";
      ex.answer = kNumberWords[total];
    }
    ex.vis_shape = {image_size, image_size, 3};
    ex.pixels = render_scene(cells, grid, image_size);
    finish_example(ex);
    return ex;
  }
}

// ---- video scenes ----

Example gen_video_example(uint64_t seed, int64_t frames, int64_t image_size) {
  if (frames != 4 && frames != 8 && frames != 16) throw ShapeError("frames must be 4, 8 or 16");
  if (image_size % 4 != 0) throw ShapeError("image size must divide into 4 lanes");
  Rng rng(seed);

  const int64_t cell = image_size / 4;
  const int mover_kind = static_cast<int>(rng.below(3));
  const int mover_color = static_cast<int>(rng.below(4));
  const int direction = static_cast<int>(rng.below(4));  // left right up down
  const int64_t lane = static_cast<int64_t>(rng.below(4));

  // Both directions of an axis traverse the same positions, only in opposite
  // order, so no single frame reveals the direction.
  const int64_t lo = cell / 4;
  const int64_t hi = image_size - cell - lo;
  const int64_t step = std::max<int64_t>(1, (hi - lo) / (frames - 1));
  auto mover_pos = [&](int64_t t) -> std::pair<int64_t, int64_t> {
    const int64_t along = (direction == 1 || direction == 3)  // right or down
                              ? lo + step * t
                              : lo + step * (frames - 1) - step * t;
    if (direction == 0 || direction == 1) return {along, lane * cell};  // horizontal
    return {lane * cell, along};                                        // vertical
  };

  // static distractors on cells clear of the mover's path band
  const bool horizontal = direction == 0 || direction == 1;
  std::vector<std::pair<int64_t, int64_t>> candidates;
  for (int64_t r = 0; r < 4; ++r) {
    for (int64_t q = 0; q < 4; ++q) {
      if (horizontal ? (r == lane) : (q == lane)) continue;
      candidates.emplace_back(q * cell, r * cell);
    }
  }
  const int n_distractors = static_cast<int>(rng.below(3));
  struct Distractor {
    int64_t x, y;
    int kind, color;
  };
  std::vector<Distractor> distractors;
  for (int i = 0; i < n_distractors; ++i) {
    const size_t pick = rng.below(candidates.size());
    Distractor d;
    d.x = candidates[pick].first;
    d.y = candidates[pick].second;
    candidates.erase(candidates.begin() + static_cast<int64_t>(pick));
    d.kind = (mover_kind + 1 + static_cast<int>(rng.below(2))) % 3;
    d.color = (mover_color + 1 + static_cast<int>(rng.below(3))) % 4;
    distractors.push_back(d);
  }

  Example ex;
  ex.vis_shape = {frames, image_size, image_size, 3};
  ex.pixels.assign(frames * image_size * image_size * 3, 0);
  for (int64_t t = 0; t < frames; ++t) {
    std::vector<uint8_t> frame(image_size * image_size * 3, 0);
    for (const Distractor& d : distractors) {
      draw_shape(frame, image_size, static_cast<ShapeKind>(d.kind),
                 static_cast<Color>(d.color), d.x, d.y, cell);
    }
    auto [mx, my] = mover_pos(t);
    draw_shape(frame, image_size, static_cast<ShapeKind>(mover_kind),
               static_cast<Color>(mover_color), mx, my, cell);
    std::copy(frame.begin(), frame.end(),
              ex.pixels.begin() + t * image_size * image_size * 3);
  }

  if (rng.below(2) == 0) {
    ex.question = std::string("which direction does the ") + kShapeWords[mover_kind] + " move";
    ex.answer = kDirectionWords[direction];
  } else {
    ex.question = "what color is the moving shape";
    ex.answer = kColorWords[mover_color];
  }
  finish_example(ex);
  return ex;
}

// ---- DTDS container ----

void write_dataset(const std::string& path, DatasetMode mode,
                   const std::vector<Example>& examples) {
  ByteWriter w;
  w.magic("DTDS");
  w.u32(1);  // version
  w.u8(static_cast<uint8_t>(mode));
  w.u32(static_cast<uint32_t>(examples.size()));
  for (const Example& ex : examples) {
    const size_t want_rank = mode == DatasetMode::image ? 3 : 4;
    if (ex.vis_shape.size() != want_rank) {
      throw IoError("example rank does not match dataset mode");
    }
    for (size_t d = 0; d + 1 < ex.vis_shape.size(); ++d) {
      w.u32(static_cast<uint32_t>(ex.vis_shape[d]));
    }
    if (static_cast<int64_t>(ex.pixels.size()) != numel(ex.vis_shape)) {
      throw IoError("pixel buffer does not match declared dims");
    }
    w.bytes(ex.pixels.data(), ex.pixels.size());
    w.str16(ex.question);
    w.str16(ex.answer);
  }
  w.append_crc();
  write_file(path, w.buffer());
}

Dataset read_dataset(const std::string& path) {
  ByteReader r(read_file(path));
  r.check_crc(path);
  r.expect_magic("DTDS");
  const uint32_t version = r.u32();
  if (version != 1) throw IoError("unsupported DTDS version");
  Dataset ds;
  const uint8_t mode = r.u8();
  if (mode > 1) throw IoError("unknown DTDS mode byte");
  ds.mode = static_cast<DatasetMode>(mode);
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    Example ex;
    if (ds.mode == DatasetMode::image) {
      const int64_t h = r.u32(), w_ = r.u32();
      ex.vis_shape = {h, w_, 3};
    } else {
      const int64_t t = r.u32(), h = r.u32(), w_ = r.u32();
      ex.vis_shape = {t, h, w_, 3};
    }
    const int64_t n = numel(ex.vis_shape);
    const uint8_t* px = r.raw(static_cast<size_t>(n));
    ex.pixels.assign(px, px + n);
    ex.question = r.str16();
    ex.answer = r.str16();
    finish_example(ex);
    ds.examples.push_back(std::move(ex));
  }
  if (r.remaining() != 0) throw IoError("trailing bytes after last example");
  return ds;
}

}  // namespace dtok
