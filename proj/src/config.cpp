#include "dtok/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace dtok {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(const std::string& source, int line, const std::string& what) {
  throw ConfigError(source + ":" + std::to_string(line) + ": " + what);
}

int64_t parse_int(const std::string& v, const std::string& source, int line,
                  const std::string& key) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    fail(source, line, "expected an integer for '" + key + "', got '" + v + "'");
  }
  return out;
}

uint64_t parse_u64(const std::string& v, const std::string& source, int line,
                   const std::string& key) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    fail(source, line, "expected an unsigned integer for '" + key + "', got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& v, const std::string& source, int line,
                    const std::string& key) {
  try {
    size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    fail(source, line, "expected a number for '" + key + "', got '" + v + "'");
  }
}

// "t_stride:s_stride:patch_t:patch" per stream, comma-separated
std::vector<StreamSpec> parse_streams(const std::string& v, const std::string& source,
                                      int line) {
  std::vector<StreamSpec> specs;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    StreamSpec spec;
    int64_t fields[4];
    std::stringstream fs(item);
    std::string f;
    int idx = 0;
    while (std::getline(fs, f, ':')) {
      if (idx >= 4) fail(source, line, "stream spec has too many fields: '" + item + "'");
      fields[idx++] = parse_int(trim(f), source, line, "streams");
    }
    if (idx != 4) {
      fail(source, line, "stream spec needs t_stride:s_stride:patch_t:patch, got '" + item + "'");
    }
    spec.t_stride = fields[0];
    spec.s_stride = fields[1];
    spec.patch_t = fields[2];
    spec.patch = fields[3];
    if (spec.t_stride < 1 || spec.s_stride < 1 || spec.patch_t < 1 || spec.patch < 1) {
      fail(source, line, "stream spec fields must be positive");
    }
    specs.push_back(spec);
  }
  if (specs.empty()) fail(source, line, "streams must name at least one stream");
  return specs;
}

}  // namespace

ModelConfig RunConfig::finalized_model() const {
  ModelConfig cfg = model;
  cfg.finalize();
  return cfg;
}

RunConfig parse_config_text(const std::string& text, const std::string& source) {
  RunConfig cfg;
  cfg.source_path = source;
  std::stringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      fail(source, line_no, "expected 'key = value', got '" + trim(raw) + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(source, line_no, "missing key before '='");
    if (value.empty()) fail(source, line_no, "missing value for '" + key + "'");

    auto as_int = [&]() { return parse_int(value, source, line_no, key); };
    auto as_double = [&]() { return parse_double(value, source, line_no, key); };
    auto positive_int = [&](int64_t v) {
      if (v < 1) fail(source, line_no, "'" + key + "' must be >= 1");
      return v;
    };

    if (key == "mode") {
      if (value != "image" && value != "video") {
        fail(source, line_no, "mode must be image or video");
      }
      cfg.model.mode = value;
    } else if (key == "seed") {
      cfg.model.seed = parse_u64(value, source, line_no, key);
    } else if (key == "vocab") {
      cfg.model.vocab = positive_int(as_int());
    } else if (key == "channels") {
      cfg.model.channels = positive_int(as_int());
    } else if (key == "heads") {
      cfg.model.heads = static_cast<int>(positive_int(as_int()));
    } else if (key == "enc_layers") {
      cfg.model.enc_layers = static_cast<int>(positive_int(as_int()));
    } else if (key == "dec_layers") {
      cfg.model.dec_layers = static_cast<int>(positive_int(as_int()));
    } else if (key == "tokens") {
      cfg.model.tokens = positive_int(as_int());
    } else if (key == "ff_mult") {
      cfg.model.ff_mult = positive_int(as_int());
    } else if (key == "map_hidden") {
      cfg.model.map_hidden = positive_int(as_int());
    } else if (key == "image_size") {
      cfg.model.image_size = positive_int(as_int());
    } else if (key == "patch") {
      cfg.model.patch = positive_int(as_int());
    } else if (key == "frames") {
      cfg.model.frames = positive_int(as_int());
    } else if (key == "grid") {
      cfg.grid = as_int();
      if (cfg.grid < 2 || cfg.grid > 4) fail(source, line_no, "grid must be 2, 3 or 4");
    } else if (key == "lambda") {
      cfg.model.lambda = as_double();
      if (cfg.model.lambda < 0.0) fail(source, line_no, "lambda must be >= 0");
    } else if (key == "div_layers") {
      if (value != "all" && value != "last") {
        fail(source, line_no, "div_layers must be all or last");
      }
      cfg.model.div_layers = value;
    } else if (key == "max_question_len") {
      cfg.model.max_question_len = positive_int(as_int());
    } else if (key == "max_answer_len") {
      cfg.model.max_answer_len = positive_int(as_int());
    } else if (key == "tau") {
      cfg.model.tau = as_double();
      if (cfg.model.tau <= 0.0 || cfg.model.tau >= 1.0) {
        fail(source, line_no, "tau must lie in (0,1)");
      }
    } else if (key == "streams") {
      cfg.model.streams = parse_streams(value, source, line_no);
    } else if (key == "steps") {
      cfg.train.steps = positive_int(as_int());
    } else if (key == "batch_size") {
      cfg.train.batch_size = positive_int(as_int());
    } else if (key == "eval_every") {
      cfg.train.eval_every = positive_int(as_int());
    } else if (key == "clip_norm") {
      cfg.train.clip_norm = as_double();
    } else if (key == "lr") {
      cfg.train.adam.lr = as_double();
      if (cfg.train.adam.lr <= 0.0) fail(source, line_no, "lr must be > 0");
    } else if (key == "weight_decay") {
      cfg.train.adam.weight_decay = as_double();
      if (cfg.train.adam.weight_decay < 0.0) fail(source, line_no, "weight_decay must be >= 0");
    } else if (key == "beta1") {
      cfg.train.adam.beta1 = as_double();
    } else if (key == "beta2") {
      cfg.train.adam.beta2 = as_double();
    } else if (key == "eps") {
      cfg.train.adam.eps = as_double();
    } else {
      cfg.unknown_keys.push_back(key);
    }
  }
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::stringstream buffer;
  buffer << f.rdbuf();
  return parse_config_text(buffer.str(), path);
}

}  // namespace dtok
