#include "dtok/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "dtok/config.hpp"
#include "dtok/io.hpp"
#include "dtok/train.hpp"
#include "dtok/viz.hpp"

namespace dtok::cli {

namespace {

const char* kUsage = R"(usage: dtok <subcommand> [flags]

subcommands:
  gen-data   --mode image|video --count N --seed N --out DIR [--config PATH]
             writes DIR/dataset.dtds
  train      --config PATH --train-data PATH --val-data PATH --out DIR [--seed N]
             writes DIR/checkpoint.dtok, DIR/optimizer.dopt, DIR/metrics.tsv
  eval       --config PATH --checkpoint PATH --data PATH
             prints task_loss div_loss mean_overlap em f1 empty_tokens (tab-separated)
  gradcheck  --config PATH [--seed N]
             prints the max gradient rel-err; exits 0 when <= 1e-5
  visualize  --config PATH --checkpoint PATH --data PATH --index N --out DIR
             writes per-token PGM maps and grounded PPM masks

common flags: --config PATH, --seed N, --out DIR
)";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Flags {
 public:
  Flags(const std::vector<std::string>& args, size_t start) {
    for (size_t i = start; i < args.size(); ++i) {
      const std::string& a = args[i];
      if (a.rfind("--", 0) != 0) throw UsageError("unexpected argument '" + a + "'");
      if (i + 1 >= args.size()) throw UsageError("flag " + a + " needs a value");
      if (values_.count(a)) throw UsageError("flag " + a + " given twice");
      values_[a] = args[++i];
    }
  }

  std::optional<std::string> get(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) return std::nullopt;
    used_.insert({name, true});
    return it->second;
  }

  std::string require(const std::string& name) {
    auto v = get(name);
    if (!v) throw UsageError("missing required flag " + name);
    return *v;
  }

  int64_t require_int(const std::string& name) {
    const std::string v = require(name);
    try {
      size_t used = 0;
      int64_t out = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw UsageError("flag " + name + " expects an integer, got '" + v + "'");
    }
  }

  void reject_unknown() const {
    for (const auto& [name, value] : values_) {
      if (!used_.count(name)) throw UsageError("unknown flag " + name);
    }
  }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> used_;
};

RunConfig load_config(Flags& flags, std::ostream& err) {
  RunConfig rc;
  auto path = flags.get("--config");
  if (path) rc = parse_config(*path);
  for (const std::string& key : rc.unknown_keys) {
    err << "warning: unknown config key '" << key << "' ignored\n";
  }
  auto seed = flags.get("--seed");
  if (seed) {
    try {
      rc.model.seed = std::stoull(*seed);
    } catch (const std::exception&) {
      throw UsageError("flag --seed expects an unsigned integer, got '" + *seed + "'");
    }
  }
  return rc;
}

int cmd_gen_data(Flags& flags, std::ostream& out, std::ostream& err) {
  const std::string mode = flags.require("--mode");
  if (mode != "image" && mode != "video") {
    throw UsageError("--mode must be image or video");
  }
  const int64_t count = flags.require_int("--count");
  if (count < 0) throw UsageError("--count must be >= 0");
  const std::string out_dir = flags.require("--out");
  RunConfig rc = load_config(flags, err);
  flags.reject_unknown();

  std::vector<Example> examples;
  for (int64_t i = 0; i < count; ++i) {
    const uint64_t seed = rc.model.seed + static_cast<uint64_t>(i);
    if (mode == "image") {
      examples.push_back(gen_image_example(seed, rc.grid, rc.model.image_size));
    } else {
      examples.push_back(gen_video_example(seed, rc.model.frames, rc.model.image_size));
    }
  }
  std::filesystem::create_directories(out_dir);
  const std::string path = out_dir + "/dataset.dtds";
  write_dataset(path, mode == "image" ? DatasetMode::image : DatasetMode::video, examples);
  out << "wrote " << count << " examples to " << path << "\n";
  return 0;
}

int cmd_train(Flags& flags, std::ostream& out, std::ostream& err) {
  const std::string train_path = flags.require("--train-data");
  const std::string val_path = flags.require("--val-data");
  const std::string out_dir = flags.require("--out");
  RunConfig rc = load_config(flags, err);
  flags.reject_unknown();

  Dataset train_set = read_dataset(train_path);
  Dataset val_set = read_dataset(val_path);
  ModelConfig cfg = rc.finalized_model();
  train(cfg, rc.train, train_set.examples, val_set.examples, out_dir, &out);
  return 0;
}

int cmd_eval(Flags& flags, std::ostream& out, std::ostream& err) {
  const std::string ckpt = flags.require("--checkpoint");
  const std::string data_path = flags.require("--data");
  RunConfig rc = load_config(flags, err);
  flags.reject_unknown();

  ModelConfig cfg = rc.finalized_model();
  ParameterStore params = build_params(cfg);
  load_checkpoint(ckpt, params);
  Dataset data = read_dataset(data_path);
  MetricsReport rep = evaluate(cfg, params, data.examples);
  // same fields as a metrics.tsv record, minus the step column
  const std::string line = metrics_line(0, rep);
  out << line.substr(line.find('\t') + 1) << "\n";
  return 0;
}

int cmd_gradcheck(Flags& flags, std::ostream& out, std::ostream& err) {
  RunConfig rc = load_config(flags, err);
  flags.reject_unknown();
  ModelConfig cfg = rc.finalized_model();
  std::vector<Example> batch = synthetic_batch(cfg, 2, cfg.seed + 1);
  const double worst = model_gradient_check(cfg, batch);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "max_rel_err %.3e", worst);
  out << buf << "\n";
  return worst <= 1e-5 ? 0 : 2;
}

int cmd_visualize(Flags& flags, std::ostream& out, std::ostream& err) {
  const std::string ckpt = flags.require("--checkpoint");
  const std::string data_path = flags.require("--data");
  const int64_t index = flags.require_int("--index");
  const std::string out_dir = flags.require("--out");
  RunConfig rc = load_config(flags, err);
  flags.reject_unknown();

  ModelConfig cfg = rc.finalized_model();
  ParameterStore params = build_params(cfg);
  load_checkpoint(ckpt, params);
  Dataset data = read_dataset(data_path);
  if (index < 0 || index >= static_cast<int64_t>(data.examples.size())) {
    throw UsageError("--index out of range for dataset of " +
                     std::to_string(data.examples.size()));
  }
  export_attention_maps(cfg, params, data.examples[index], out_dir);
  out << "wrote attention maps to " << out_dir << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    if (args.empty()) {
      err << kUsage;
      return 1;
    }
    const std::string& cmd = args[0];
    Flags flags(args, 1);
    if (cmd == "gen-data") return cmd_gen_data(flags, out, err);
    if (cmd == "train") return cmd_train(flags, out, err);
    if (cmd == "eval") return cmd_eval(flags, out, err);
    if (cmd == "gradcheck") return cmd_gradcheck(flags, out, err);
    if (cmd == "visualize") return cmd_visualize(flags, out, err);
    err << "unknown subcommand '" << cmd << "'\n" << kUsage;
    return 1;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << kUsage;
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace dtok::cli
