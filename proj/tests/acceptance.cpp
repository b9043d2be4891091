// Acceptance suite. Runs every criterion end to end and prints one
// PASS/FAIL line per criterion; exits non-zero if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dtok/config.hpp"
#include "dtok/io.hpp"
#include "dtok/train.hpp"
#include "dtok/viz.hpp"
#include "oracles.hpp"

using namespace dtok;
using Clock = std::chrono::steady_clock;

#ifndef DTOK_TESTDATA_DIR
#define DTOK_TESTDATA_DIR "testdata"
#endif

namespace {

int g_failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  std::printf("[%s] %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

ModelConfig desk_image_config(double lambda, uint64_t seed) {
  ModelConfig cfg;
  cfg.mode = "image";
  cfg.lambda = lambda;
  cfg.seed = seed;
  cfg.finalize();  // desk defaults: C=64, A=4, L=2, M=16, 32px, patch 8
  return cfg;
}

ModelConfig desk_video_config(double lambda, uint64_t seed) {
  ModelConfig cfg;
  cfg.mode = "video";
  cfg.lambda = lambda;
  cfg.seed = seed;
  cfg.finalize();  // two streams: 8x32x32 (t-stride 2) and 16x16x16 (s-stride 2)
  return cfg;
}

std::vector<Example> image_split(uint64_t base, int count) {
  std::vector<Example> out;
  for (int i = 0; i < count; ++i) out.push_back(gen_image_example(base + i, 2, 32));
  return out;
}

std::vector<Example> video_split(uint64_t base, int count) {
  std::vector<Example> out;
  for (int i = 0; i < count; ++i) out.push_back(gen_video_example(base + i, 16, 32));
  return out;
}

// ---- criterion 1: oracle equivalence ----

void criterion_oracle_equivalence() {
  auto t0 = Clock::now();
  double worst = 0.0;
  int instances = 0;

  for (uint64_t seed = 1; seed <= 100; ++seed) {
    Rng rng(seed * 977 + 3);
    // matmul
    const int64_t m = 2 + rng.below(5), k = 2 + rng.below(5), n = 2 + rng.below(5);
    Tensor a = oracles::random_tensor({m, k}, rng);
    Tensor b = oracles::random_tensor({k, n}, rng);
    worst = std::max(worst, max_rel_err(matmul(a, b), oracles::loop_matmul(a, b)));

    // attention with identity projections against the per-head loop
    const int64_t heads = 1 + rng.below(2);
    const int64_t d = heads * (2 + rng.below(3)) * 2;
    const int64_t s = 2 + rng.below(4);
    ParameterStore eye;
    std::vector<double> id(d * d, 0.0);
    for (int64_t i = 0; i < d; ++i) id[i * d + i] = 1.0;
    for (const char* nm : {"attn/wq", "attn/wk", "attn/wv", "attn/wo"}) {
      eye.create(std::string(nm) + "/w", {d, d}, std::vector<double>(id));
      eye.create(std::string(nm) + "/b", {d});
    }
    Tensor q = oracles::random_tensor({s, d}, rng);
    Tensor kk = oracles::random_tensor({s, d}, rng);
    Tensor v = oracles::random_tensor({s, d}, rng);
    worst = std::max(
        worst, max_rel_err(multi_head_attention(q, kk, v, static_cast<int>(heads), eye, "attn"),
                           oracles::loop_attention_context(q, kk, v, static_cast<int>(heads))));

    // tokenize
    const int64_t nb = 1 + rng.below(3), sp = 2 + rng.below(6), ch = 1 + rng.below(4);
    const int64_t mt = 1 + rng.below(4);
    Tensor features = oracles::random_tensor({nb, sp, ch}, rng);
    Tensor maps = softmax(oracles::random_tensor({nb, mt, sp}, rng, -2, 2), -1);
    worst = std::max(worst, max_rel_err(tokenize(features, maps),
                                        oracles::loop_tokenize(features, maps)));

    // diversity loss + overlap matrix
    Tensor dmaps = softmax(oracles::random_tensor({2, 3, 4}, rng, -2, 2), -1);
    const double got = diversity_loss(dmaps).item();
    const double want = oracles::loop_diversity(dmaps);
    worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
    worst = std::max(worst, max_rel_err(pairwise_overlap_matrix(dmaps),
                                        oracles::loop_overlap(dmaps)));
    instances += 5;
  }

  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "%d instances, worst rel err %.2e (tol 1e-10), %.1fs", instances, worst,
                seconds_since(t0));
  report("oracle-equivalence", worst <= 1e-10, detail);
}

// ---- criterion 2: gradient suite ----

void criterion_gradient_suite() {
  auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_block = "none";
  auto track = [&](const char* name, double err) {
    if (err > worst) {
      worst = err;
      worst_block = name;
    }
  };

  Rng rng(4242);
  {  // linear
    ParameterStore store;
    create_linear(store, "lin", 5, 3, rng);
    Tensor x = oracles::random_tensor({4, 5}, rng);
    Tensor w = oracles::random_tensor({4, 3}, rng);
    auto lossfn = [&]() { return reduce_sum_all(mul(linear(x, store, "lin"), w)); };
    track("linear", oracles::store_gradcheck(store, lossfn));
    track("linear-input", oracles::input_gradcheck(x, lossfn));
  }
  {  // softmax and log_softmax as used by the blocks
    Tensor x = oracles::random_tensor({3, 6}, rng);
    Tensor w = oracles::random_tensor({3, 6}, rng);
    auto smfn = [&]() { return reduce_sum_all(mul(softmax(x, -1), w)); };
    track("softmax", oracles::input_gradcheck(x, smfn));
    x.clear_grad();
    auto lsfn = [&]() { return reduce_sum_all(mul(log_softmax(x, -1), w)); };
    track("log_softmax", oracles::input_gradcheck(x, lsfn));
  }
  {  // layer norm
    ParameterStore store;
    create_layer_norm(store, "ln", 6);
    Tensor x = oracles::random_tensor({4, 6}, rng);
    Tensor w = oracles::random_tensor({4, 6}, rng);
    auto lossfn = [&]() { return reduce_sum_all(mul(layer_norm(x, store, "ln"), w)); };
    track("layer_norm", oracles::store_gradcheck(store, lossfn));
    track("layer_norm-input", oracles::input_gradcheck(x, lossfn));
  }
  {  // multi-head attention with a causal mask
    ParameterStore store;
    create_attention(store, "attn", 6, rng);
    Tensor x = oracles::random_tensor({4, 6}, rng);
    Tensor w = oracles::random_tensor({4, 6}, rng);
    Tensor mask = causal_mask(4);
    auto lossfn = [&]() {
      return reduce_sum_all(mul(multi_head_attention(x, x, x, 3, store, "attn", &mask), w));
    };
    track("multi_head_attention", oracles::store_gradcheck(store, lossfn));
  }
  {  // encoder layer
    ParameterStore store;
    create_encoder_layer(store, "enc", 6, 12, rng);
    Tensor x = oracles::random_tensor({3, 6}, rng);
    Tensor w = oracles::random_tensor({3, 6}, rng);
    auto lossfn = [&]() { return reduce_sum_all(mul(encoder_layer(x, 2, store, "enc"), w)); };
    track("encoder_layer", oracles::store_gradcheck(store, lossfn));
  }
  {  // decoder stack with cross attention
    ParameterStore store;
    create_decoder_layer(store, "dec/l0", 6, 12, rng);
    create_layer_norm(store, "dec/ln", 6);
    create_linear(store, "dec/out", 6, 7, rng);
    Tensor y = oracles::random_tensor({3, 6}, rng);
    Tensor memory = oracles::random_tensor({5, 6}, rng);
    Tensor w = oracles::random_tensor({3, 7}, rng);
    auto lossfn = [&]() {
      return reduce_sum_all(mul(decoder_step(y, memory, 2, 1, store, "dec", nullptr), w));
    };
    track("decoder_step", oracles::store_gradcheck(store, lossfn));
  }
  {  // patch embed
    ParameterStore store;
    create_patch_embed(store, "pe", 4, 2, 2, 5, rng);
    Tensor img = oracles::random_tensor({2, 8, 8, 3}, rng, 0, 1);
    auto lossfn = [&]() { return reduce_sum_all(square(patch_embed(img, 4, store, "pe"))); };
    track("patch_embed", oracles::store_gradcheck(store, lossfn));
  }
  {  // frame embed
    ParameterStore store;
    create_frame_embed(store, "fe", 2, 4, 2, 2, 2, 5, rng);
    Tensor clip = oracles::random_tensor({1, 4, 8, 8, 3}, rng, 0, 1);
    auto lossfn = [&]() {
      return reduce_sum_all(square(frame_embed(clip, 2, 4, store, "fe")));
    };
    track("frame_embed", oracles::store_gradcheck(store, lossfn));
  }
  {  // tokenizer chain: maps -> tokens -> diversity
    ParameterStore store;
    create_spatial_attention_params(store, "tok", 5, 5, 3, rng);
    Tensor features = oracles::random_tensor({2, 6, 5}, rng);
    Tensor cond = oracles::random_tensor({2, 5}, rng);
    Tensor w = oracles::random_tensor({2, 3, 5}, rng);
    auto lossfn = [&]() {
      AttentionMaps maps = spatial_attention_maps(features, cond, 3, store, "tok");
      return add(reduce_sum_all(mul(tokenize(features, maps), w)), diversity_loss(maps));
    };
    track("tokenizer+diversity", oracles::store_gradcheck(store, lossfn));
  }

  // end-to-end micro model: C=8, L=1, M=2, vocab 12, 2x2 grid
  {
    ModelConfig cfg;
    cfg.mode = "image";
    cfg.vocab = 12;
    cfg.channels = 8;
    cfg.heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.tokens = 2;
    cfg.ff_mult = 2;
    cfg.image_size = 16;
    cfg.patch = 8;
    cfg.max_question_len = 4;
    cfg.max_answer_len = 2;
    cfg.seed = 5;
    cfg.finalize();
    track("micro-model", model_gradient_check(cfg, synthetic_batch(cfg, 2, 99)));
  }

  char detail[160];
  std::snprintf(detail, sizeof(detail), "worst rel err %.2e in %s (tol 1e-5), %.1fs", worst,
                worst_block.c_str(), seconds_since(t0));
  report("gradient-suite", worst <= 1e-5, detail);
}

// ---- criterion 3: diversity-loss hand cases ----

void criterion_diversity_hand_cases() {
  Tensor disjoint = Tensor::from({1, 2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  const double zero = diversity_loss(disjoint).item();
  Tensor dup = Tensor::from({1, 2, 4}, {0.5, 0.5, 0, 0, 0.5, 0.5, 0, 0});
  const double half = diversity_loss(dup).item();
  const bool ok = zero == 0.0 && std::abs(half - 0.5) <= 1e-15;
  char detail[120];
  std::snprintf(detail, sizeof(detail),
                "disjoint -> %g (want 0), duplicated -> %.17g (want 0.5)", zero, half);
  report("diversity-hand-cases", ok, detail);
}

// ---- criterion 4: orthogonality descent ----

void criterion_orthogonality_descent() {
  auto t0 = Clock::now();
  const int64_t m = 8, s = 16;
  Rng rng(2024);
  std::vector<double> init(m * s);
  for (double& x : init) x = rng.uniform(-0.5, 0.5);

  TrainingState state;
  state.params.create("logits", {1, m, s}, std::move(init));
  state.init_moments();
  AdamParams adam;
  adam.lr = 0.1;
  adam.weight_decay = 0.0;

  for (int step = 0; step < 500; ++step) {
    Tape tape;
    Tensor l;
    {
      TapeScope scope(tape);
      l = diversity_loss(softmax(state.params.get("logits"), -1));
    }
    tape.backward(l);
    adam_step(state, adam);
    state.params.zero_grad();
  }

  Tensor overlap = pairwise_overlap_matrix(softmax(state.params.get("logits"), -1));
  double worst = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      if (i != j) worst = std::max(worst, overlap.at({0, i, j}));
    }
  }
  char detail[120];
  std::snprintf(detail, sizeof(detail), "max off-diagonal overlap %.2e (tol 1e-3), %.1fs",
                worst, seconds_since(t0));
  report("orthogonality-descent", worst < 1e-3, detail);
}

// ---- criterion 5: learning check ----

void criterion_learning_check() {
  auto t0 = Clock::now();
  std::vector<Example> train_set = image_split(1, 2000);
  std::vector<Example> val_set = image_split(10000001, 200);

  TrainConfig tc;
  tc.steps = 3000;
  tc.eval_every = 500;

  TrainResult base = train(desk_image_config(0.0, 1), tc, train_set, val_set);
  TrainResult div = train(desk_image_config(0.1, 1), tc, train_set, val_set);

  const double em0 = base.final_metrics.exact_match;
  const double em1 = div.final_metrics.exact_match;
  const double ov0 = base.final_metrics.mean_overlap;
  const double ov1 = div.final_metrics.mean_overlap;

  const bool ok = em0 >= 0.90 && em1 >= em0 - 0.03 && ov1 <= 0.5 * ov0;
  char detail[220];
  std::snprintf(detail, sizeof(detail),
                "EM(l=0)=%.3f (need >=0.90), EM(l=0.1)=%.3f (need >=%.3f), "
                "overlap %.2e vs %.2e (need <=0.5x), %.0fs",
                em0, em1, em0 - 0.03, ov1, ov0, seconds_since(t0));
  report("learning-check", ok, detail);
}

// ---- criterion 6: video path ----

void criterion_video_path() {
  auto t0 = Clock::now();
  std::vector<Example> train_set = video_split(1, 2000);
  std::vector<Example> val_set = video_split(10000001, 200);

  ModelConfig cfg = desk_video_config(0.1, 1);
  TrainConfig tc;
  tc.steps = 4000;
  tc.eval_every = 1000;

  TrainResult res = train(cfg, tc, train_set, val_set);

  EvalOptions dir_only;
  dir_only.question_prefix = "which direction";
  MetricsReport plain = evaluate(cfg, res.state.params, val_set, dir_only);
  EvalOptions shuffled = dir_only;
  shuffled.shuffle_frames = true;
  MetricsReport shuf = evaluate(cfg, res.state.params, val_set, shuffled);

  const double degradation = plain.exact_match - shuf.exact_match;
  const bool ok = plain.exact_match >= 0.85 && degradation >= 0.2;
  char detail[220];
  std::snprintf(detail, sizeof(detail),
                "direction EM %.3f (need >=0.85), frame-shuffled EM %.3f, "
                "degradation %.3f (need >=0.2), %d questions, %.0fs",
                plain.exact_match, shuf.exact_match, degradation,
                static_cast<int>(plain.examples), seconds_since(t0));
  report("video-path", ok, detail);
}

// ---- criterion 7: determinism & persistence ----

void criterion_determinism_persistence() {
  auto t0 = Clock::now();
  std::vector<Example> train_set = image_split(501, 200);
  std::vector<Example> val_set = image_split(20000001, 40);

  ModelConfig cfg = desk_image_config(0.1, 7);
  TrainConfig tc;
  tc.steps = 200;
  tc.eval_every = 100;

  const auto dir = std::filesystem::temp_directory_path() / "dtok_acceptance_run";
  std::filesystem::remove_all(dir);
  TrainResult a = train(cfg, tc, train_set, val_set, dir.string());
  TrainResult b = train(cfg, tc, train_set, val_set);

  bool logs_equal = a.log_lines.size() == b.log_lines.size();
  for (size_t i = 0; logs_equal && i < a.log_lines.size(); ++i) {
    logs_equal = a.log_lines[i] == b.log_lines[i];
  }

  // checkpoint round trip reproduces evaluation bit for bit
  ParameterStore loaded = build_params(cfg);
  load_checkpoint((dir / "checkpoint.dtok").string(), loaded);
  MetricsReport from_memory = evaluate(cfg, a.state.params, val_set);
  MetricsReport from_disk = evaluate(cfg, loaded, val_set);
  const bool ckpt_exact = from_memory.exact_match == from_disk.exact_match &&
                          from_memory.token_f1 == from_disk.token_f1 &&
                          from_memory.mean_task_loss == from_disk.mean_task_loss &&
                          from_memory.mean_div_loss == from_disk.mean_div_loss &&
                          from_memory.mean_overlap == from_disk.mean_overlap &&
                          from_memory.mean_empty_tokens == from_disk.mean_empty_tokens;

  // golden datasets regenerate byte-identically
  const auto tmp_img = dir / "image_golden.dtds";
  const auto tmp_vid = dir / "video_golden.dtds";
  write_dataset(tmp_img.string(), DatasetMode::image, {gen_image_example(42, 2, 32)});
  write_dataset(tmp_vid.string(), DatasetMode::video, {gen_video_example(7, 16, 32)});
  const bool goldens_match =
      read_file(tmp_img.string()) ==
          read_file(std::string(DTOK_TESTDATA_DIR) + "/image_seed42.dtds") &&
      read_file(tmp_vid.string()) ==
          read_file(std::string(DTOK_TESTDATA_DIR) + "/video_seed7.dtds");

  std::filesystem::remove_all(dir);
  const bool ok = logs_equal && ckpt_exact && goldens_match;
  char detail[200];
  std::snprintf(detail, sizeof(detail),
                "identical logs: %s, checkpoint round-trip exact: %s, goldens match: %s, %.0fs",
                logs_equal ? "yes" : "no", ckpt_exact ? "yes" : "no",
                goldens_match ? "yes" : "no", seconds_since(t0));
  report("determinism-persistence", ok, detail);
}

// ---- criterion 8: memorization ----

void criterion_memorization() {
  auto t0 = Clock::now();
  std::vector<Example> memo = image_split(61, 4);

  ModelConfig cfg = desk_image_config(0.1, 3);
  TrainConfig tc;
  tc.steps = 1000;
  tc.eval_every = 1000;
  tc.batch_size = 4;

  TrainResult res = train(cfg, tc, memo, memo);
  MetricsReport rep = evaluate(cfg, res.state.params, memo);
  const bool ok = rep.exact_match == 1.0 && rep.token_f1 == 1.0;
  char detail[120];
  std::snprintf(detail, sizeof(detail), "EM=%.3f F1=%.3f after 1000 steps (need 1.0), %.0fs",
                rep.exact_match, rep.token_f1, seconds_since(t0));
  report("memorization", ok, detail);
}

}  // namespace

int main() {
  criterion_oracle_equivalence();
  criterion_gradient_suite();
  criterion_diversity_hand_cases();
  criterion_orthogonality_descent();
  criterion_learning_check();
  criterion_video_path();
  criterion_determinism_persistence();
  criterion_memorization();
  if (g_failures == 0) {
    std::printf("all acceptance criteria passed\n");
    return 0;
  }
  std::printf("%d acceptance criteria failed\n", g_failures);
  return 1;
}
