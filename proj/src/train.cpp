#include "dtok/train.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>

#include "dtok/io.hpp"

namespace dtok {

void TrainingState::init_moments() {
  m.clear();
  v.clear();
  for (size_t i = 0; i < params.size(); ++i) {
    m.emplace_back(params.at(i).size(), 0.0);
    v.emplace_back(params.at(i).size(), 0.0);
  }
}

void adam_step(TrainingState& state, const AdamParams& adam) {
  if (state.m.size() != state.params.size()) {
    throw NumericError("optimizer moments not initialized for this parameter set");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(state.step));
  for (size_t p = 0; p < state.params.size(); ++p) {
    Tensor& param = state.params.at(p);
    std::vector<double>& data = param.mutable_data();
    std::vector<double>& m = state.m[p];
    std::vector<double>& v = state.v[p];
    const bool has_grad = param.has_grad();
    const std::vector<double> zero(has_grad ? 0 : data.size(), 0.0);
    const std::vector<double>& grad = has_grad ? param.grad() : zero;
    for (size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter " + state.params.name(p));
      }
      // decoupled weight decay, applied before the Adam update
      data[i] -= adam.lr * adam.weight_decay * data[i];
      m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g;
      v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      data[i] -= adam.lr * m_hat / (std::sqrt(v_hat) + adam.eps);
    }
  }
}

double global_grad_norm(const ParameterStore& params) {
  double sq = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    if (!params.at(p).has_grad()) continue;
    for (double g : params.at(p).grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

void scale_grads(ParameterStore& params, double factor) {
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params.at(p);
    if (!t.has_grad()) continue;
    for (double& g : t.node->grad) g *= factor;
  }
}

// ---- optimizer sidecar ----

void save_optimizer(const std::string& path, const TrainingState& state) {
  ByteWriter w;
  w.magic("DOPT");
  w.u32(1);
  w.u64(static_cast<uint64_t>(state.step));
  w.u32(static_cast<uint32_t>(state.params.size()));
  for (size_t p = 0; p < state.params.size(); ++p) {
    const Tensor& t = state.params.at(p);
    w.str16(state.params.name(p));
    w.u8(static_cast<uint8_t>(t.rank()));
    for (int64_t e : t.shape()) w.u32(static_cast<uint32_t>(e));
    for (double x : state.m[p]) w.f32(static_cast<float>(x));
    for (double x : state.v[p]) w.f32(static_cast<float>(x));
  }
  w.append_crc();
  write_file(path, w.buffer());
}

void load_optimizer(const std::string& path, TrainingState& state) {
  ByteReader r(read_file(path));
  r.check_crc(path);
  r.expect_magic("DOPT");
  if (r.u32() != 1) throw IoError("unsupported optimizer file version");
  state.step = static_cast<int64_t>(r.u64());
  const uint32_t count = r.u32();
  if (count != state.params.size()) {
    throw IoError("optimizer file parameter count mismatch");
  }
  state.init_moments();
  for (uint32_t p = 0; p < count; ++p) {
    const std::string name = r.str16();
    if (name != state.params.name(p)) throw IoError("optimizer file order mismatch at " + name);
    const Tensor& t = state.params.at(p);
    const uint8_t rank = r.u8();
    Shape shape;
    for (uint8_t d = 0; d < rank; ++d) shape.push_back(r.u32());
    if (shape != t.shape()) throw IoError("optimizer moment shape mismatch for " + name);
    for (double& x : state.m[p]) x = static_cast<double>(r.f32());
    for (double& x : state.v[p]) x = static_cast<double>(r.f32());
  }
  if (r.remaining() != 0) throw IoError("trailing bytes in optimizer file");
}

// ---- metrics ----

std::string normalize_answer(const std::string& s) {
  std::string out;
  bool pending_space = false;
  for (char ch : s) {
    if (ch == '?' || ch == ',' || ch == '.') continue;
    if (ch == ' ' || ch == '\t' || ch == '\n') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  return out;
}

int exact_match(const std::string& pred, const std::vector<std::string>& golds) {
  if (golds.empty()) throw ShapeError("exact_match needs at least one gold answer");
  const std::string p = normalize_answer(pred);
  for (const std::string& g : golds) {
    if (p == normalize_answer(g)) return 1;
  }
  return 0;
}

namespace {

std::map<std::string, int> token_bag(const std::string& normalized) {
  std::map<std::string, int> bag;
  std::string word;
  for (char ch : normalized) {
    if (ch == ' ') {
      if (!word.empty()) bag[word]++;
      word.clear();
    } else {
      word.push_back(ch);
    }
  }
  if (!word.empty()) bag[word]++;
  return bag;
}

}  // namespace

double token_f1(const std::string& pred, const std::vector<std::string>& golds) {
  if (golds.empty()) throw ShapeError("token_f1 needs at least one gold answer");
  const std::map<std::string, int> pred_bag = token_bag(normalize_answer(pred));
  int pred_total = 0;
  for (const auto& [w, c] : pred_bag) pred_total += c;

  double best = 0.0;
  for (const std::string& gold : golds) {
    const std::map<std::string, int> gold_bag = token_bag(normalize_answer(gold));
    int gold_total = 0, overlap = 0;
    for (const auto& [w, c] : gold_bag) {
      gold_total += c;
      auto it = pred_bag.find(w);
      if (it != pred_bag.end()) overlap += std::min(c, it->second);
    }
    if (overlap == 0 || pred_total == 0 || gold_total == 0) continue;
    const double precision = static_cast<double>(overlap) / pred_total;
    const double recall = static_cast<double>(overlap) / gold_total;
    best = std::max(best, 2.0 * precision * recall / (precision + recall));
  }
  return best;
}

// ---- evaluation ----

namespace {

Example shuffle_example_frames(const Example& ex, uint64_t seed) {
  if (!ex.is_video()) return ex;
  const int64_t t = ex.vis_shape[0];
  const int64_t frame_bytes = numel(ex.vis_shape) / t;
  std::vector<int64_t> perm(t);
  for (int64_t i = 0; i < t; ++i) perm[i] = i;
  Rng rng(seed);
  for (int64_t i = t - 1; i > 0; --i) {
    std::swap(perm[i], perm[rng.below(static_cast<uint64_t>(i + 1))]);
  }
  Example shuffled = ex;
  for (int64_t i = 0; i < t; ++i) {
    std::copy_n(ex.pixels.begin() + perm[i] * frame_bytes, frame_bytes,
                shuffled.pixels.begin() + i * frame_bytes);
  }
  return shuffled;
}

}  // namespace

MetricsReport evaluate(const ModelConfig& cfg, const ParameterStore& params,
                       const std::vector<Example>& dataset, const EvalOptions& opts) {
  std::vector<const Example*> picked;
  for (const Example& ex : dataset) {
    if (!opts.question_prefix.empty() &&
        ex.question.rfind(opts.question_prefix, 0) != 0) {
      continue;
    }
    picked.push_back(&ex);
  }
  if (picked.empty()) throw ShapeError("evaluation over an empty dataset");

  MetricsReport rep;
  rep.examples = static_cast<int64_t>(picked.size());
  double em_sum = 0, f1_sum = 0, task_sum = 0, div_sum = 0, overlap_sum = 0, empty_sum = 0;
  for (size_t i = 0; i < picked.size(); ++i) {
    Example ex = opts.shuffle_frames
                     ? shuffle_example_frames(*picked[i], opts.shuffle_seed + i)
                     : *picked[i];
    EncoderState enc = encode(cfg, params, {ex});

    const std::string pred = greedy_decode(cfg, params, enc);
    const std::vector<std::string> golds = {ex.answer};
    em_sum += exact_match(pred, golds);
    f1_sum += token_f1(pred, golds);

    ForwardResult fwd = decode_teacher_forced(cfg, params, enc, {ex});
    task_sum += sequence_cross_entropy(fwd.logits, fwd.targets, fwd.target_mask).item();

    double div = 0, overlap = 0, empty = 0;
    int64_t stacks = 0;
    for (const auto& layer : enc.maps) {
      for (const Tensor& maps : layer) {
        div += diversity_loss(maps).item();
        overlap += mean_offdiagonal_overlap(maps);
        empty += static_cast<double>(token_mass_diagnostic(maps, cfg.tau).empty_count);
        ++stacks;
      }
    }
    div_sum += div / static_cast<double>(stacks);
    overlap_sum += overlap / static_cast<double>(stacks);
    empty_sum += empty / static_cast<double>(enc.maps.size());  // per layer
  }
  const double n = static_cast<double>(rep.examples);
  rep.exact_match = em_sum / n;
  rep.token_f1 = f1_sum / n;
  rep.mean_task_loss = task_sum / n;
  rep.mean_div_loss = div_sum / n;
  rep.mean_overlap = overlap_sum / n;
  rep.mean_empty_tokens = empty_sum / n;
  return rep;
}

std::string metrics_line(int64_t step, const MetricsReport& rep) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g",
                static_cast<long long>(step), rep.mean_task_loss, rep.mean_div_loss,
                rep.mean_overlap, rep.exact_match, rep.token_f1, rep.mean_empty_tokens);
  return std::string(buf);
}

// ---- training loop ----

TrainResult train(const ModelConfig& cfg, const TrainConfig& tc,
                  const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const std::string& out_dir,
                  std::ostream* echo) {
  if (train_set.empty()) throw ShapeError("empty training set");
  if (val_set.empty()) throw ShapeError("empty validation set");

  TrainResult result;
  result.state.params = build_params(cfg);
  result.state.init_moments();
  TrainingState& st = result.state;

  Rng sampler(Rng::mix(cfg.seed));
  const bool persist = !out_dir.empty();
  if (persist) std::filesystem::create_directories(out_dir);

  auto save_state = [&]() {
    if (!persist) return;
    save_checkpoint(out_dir + "/checkpoint.dtok", st.params);
    save_optimizer(out_dir + "/optimizer.dopt", st);
  };

  for (int64_t step = 1; step <= tc.steps; ++step) {
    std::vector<Example> batch;
    for (int64_t b = 0; b < tc.batch_size; ++b) {
      batch.push_back(train_set[sampler.below(train_set.size())]);
    }

    Tensor step_loss;
    Tape tape;
    try {
      {
        TapeScope scope(tape);
        step_loss = loss(cfg, st.params, batch);
      }
      tape.backward(step_loss);
    } catch (const NumericError& err) {
      // the last-good checkpoint from the previous eval point stays on disk
      throw NumericError("training aborted at step " + std::to_string(step) + ": " +
                         err.what());
    }

    if (tc.clip_norm > 0.0) {
      const double norm = global_grad_norm(st.params);
      if (norm > tc.clip_norm) scale_grads(st.params, tc.clip_norm / norm);
    }
    adam_step(st, tc.adam);
    st.params.zero_grad();

    if (step % tc.eval_every == 0 || step == tc.steps) {
      if (step == tc.steps) {
        // snap to checkpoint precision so the saved file and the final logged
        // metrics describe the same parameters
        quantize_params_f32(st.params);
      }
      save_state();
      MetricsReport rep = evaluate(cfg, st.params, val_set);
      const std::string line = metrics_line(step, rep);
      result.log_lines.push_back(line);
      if (echo) (*echo) << line << "\n";
      if (step == tc.steps) result.final_metrics = rep;
    }
  }

  if (persist) {
    std::string text = "# step\ttask_loss\tdiv_loss\tmean_overlap\tem\tf1\tempty_tokens\n";
    for (const std::string& line : result.log_lines) text += line + "\n";
    std::vector<uint8_t> bytes(text.begin(), text.end());
    write_file(out_dir + "/metrics.tsv", bytes);
  }
  return result;
}

}  // namespace dtok
