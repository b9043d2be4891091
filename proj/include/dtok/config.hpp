#ifndef DTOK_CONFIG_HPP
#define DTOK_CONFIG_HPP

#include <string>
#include <vector>

#include "dtok/model.hpp"
#include "dtok/train.hpp"

// `key = value` run configuration. '#' starts a comment, blank lines are
// ignored. Unknown keys are collected as warnings, never errors; a type error
// on a known key reports its line number.

namespace dtok {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;       // not yet finalized
  TrainConfig train;
  int64_t grid = 2;        // image-scene grid for gen-data
  std::string source_path;
  std::vector<std::string> unknown_keys;

  // finalize() the model config; throws on invalid combinations
  ModelConfig finalized_model() const;
};

RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& source);

}  // namespace dtok

#endif  // DTOK_CONFIG_HPP
