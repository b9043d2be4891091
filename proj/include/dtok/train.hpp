#ifndef DTOK_TRAIN_HPP
#define DTOK_TRAIN_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "dtok/model.hpp"

// Training and evaluation: Adam with decoupled weight decay, the fixed-step
// training loop, QA metrics and the tab-separated metrics log.

namespace dtok {

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct TrainConfig {
  int64_t steps = 3000;
  int64_t batch_size = 8;
  int64_t eval_every = 250;
  double clip_norm = 1.0;  // global-norm gradient clip; <= 0 disables
  AdamParams adam;
};

struct TrainingState {
  int64_t step = 0;
  ParameterStore params;
  std::vector<std::vector<double>> m;  // first moments, one slot per parameter
  std::vector<std::vector<double>> v;  // second moments

  void init_moments();
};

// One bias-corrected Adam update from the gradients stored on the parameters.
// Decoupled weight decay (p -= lr*wd*p) is applied before the Adam update.
// Throws NumericError on a non-finite gradient.
void adam_step(TrainingState& state, const AdamParams& adam);

double global_grad_norm(const ParameterStore& params);
void scale_grads(ParameterStore& params, double factor);

// Optimizer sidecar (magic DOPT): step counter plus both moment tensors per
// parameter, same container framing as checkpoints.
void save_optimizer(const std::string& path, const TrainingState& state);
void load_optimizer(const std::string& path, TrainingState& state);

// ---- metrics ----

// lowercase, strip {? , .}, collapse whitespace
std::string normalize_answer(const std::string& s);

// 1 iff the normalized prediction equals any normalized gold.
int exact_match(const std::string& pred, const std::vector<std::string>& golds);

// Bag-of-tokens F1 against each gold, max over golds.
double token_f1(const std::string& pred, const std::vector<std::string>& golds);

struct MetricsReport {
  double exact_match = 0;
  double token_f1 = 0;
  double mean_task_loss = 0;
  double mean_div_loss = 0;
  double mean_overlap = 0;       // mean off-diagonal squared inner product
  double mean_empty_tokens = 0;  // empty-like tokens per example per layer
  int64_t examples = 0;
};

struct EvalOptions {
  bool shuffle_frames = false;  // permute video frames before encoding
  uint64_t shuffle_seed = 97;
  // restrict to examples whose question starts with this prefix ("" = all)
  std::string question_prefix;
};

// Greedy-decodes every example and aggregates answer metrics plus the
// diversity diagnostics. Read-only with respect to the parameters.
MetricsReport evaluate(const ModelConfig& cfg, const ParameterStore& params,
                       const std::vector<Example>& dataset, const EvalOptions& opts = {});

// `step<TAB>task_loss<TAB>div_loss<TAB>mean_overlap<TAB>em<TAB>f1<TAB>empty_tokens`
std::string metrics_line(int64_t step, const MetricsReport& report);

struct TrainResult {
  TrainingState state;
  std::vector<std::string> log_lines;
  MetricsReport final_metrics;
};

// Fixed-step loop with periodic validation. When out_dir is non-empty, writes
// checkpoint.dtok + optimizer.dopt at every eval point and metrics.tsv at the
// end. Parameters are rounded to checkpoint (f32) precision before the final
// evaluation so `eval` on the saved checkpoint reproduces the last logged
// record exactly. `echo`, when given, receives each log line.
TrainResult train(const ModelConfig& cfg, const TrainConfig& tc,
                  const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const std::string& out_dir = "",
                  std::ostream* echo = nullptr);

}  // namespace dtok

#endif  // DTOK_TRAIN_HPP
