#ifndef DTOK_MODEL_HPP
#define DTOK_MODEL_HPP

#include <string>
#include <vector>

#include "dtok/data.hpp"
#include "dtok/diversity.hpp"
#include "dtok/nn.hpp"
#include "dtok/tokenizer.hpp"

// The full question-answering model: patch/tubelet embedders and a text
// embedding feed layer-wise co-tokenization; the decoder generates the answer
// from the final joint sequence.

namespace dtok {

struct ModelConfig {
  std::string mode = "image";  // image | video
  int64_t vocab = 0;           // 0 -> standard grammar vocab
  int64_t channels = 64;       // hidden width
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 4;
  int64_t tokens = 0;          // 0 -> 16 for images, 8 for videos
  int64_t ff_mult = 4;
  int64_t map_hidden = 0;      // attention-map MLP width, 0 -> channels
  int64_t image_size = 32;
  int64_t patch = 8;
  int64_t frames = 16;         // raw clip length (video mode)
  std::vector<StreamSpec> streams;  // filled with the two defaults if empty
  double lambda = 0.1;
  std::string div_layers = "all";  // all | last
  int64_t max_question_len = 8;
  int64_t max_answer_len = 4;      // decoder positions (answer words + end)
  double tau = 0.5;                // empty-token threshold
  uint64_t seed = 1;

  // Fills mode-dependent defaults and validates; throws ShapeError on
  // inconsistent settings. Must be called before use.
  void finalize();

  bool is_video() const { return mode == "video"; }
  int64_t stream_positions(size_t stream) const;  // flattened grid size
};

// All learned weights, created in a fixed insertion order (this order is the
// checkpoint layout).
ParameterStore build_params(const ModelConfig& cfg);

// Raw clip -> one stream's clip: temporal stride subsampling then spatial
// box-average downsampling. video: (n, t, h, w, 3).
Tensor derive_stream(const Tensor& video, const StreamSpec& spec);

struct EncoderState {
  Tensor memory;     // (n, t_text + m, c), final-normed
  Tensor memory_mask;  // (n, 1, 1, t_text + m) additive key mask
  std::vector<std::vector<AttentionMaps>> maps;  // [layer][stream]
};

EncoderState encode(const ModelConfig& cfg, const ParameterStore& params,
                    const std::vector<Example>& batch);

struct ForwardResult {
  Tensor logits;  // (n, max_answer_len, vocab)
  std::vector<std::vector<AttentionMaps>> maps;
  std::vector<int64_t> targets;     // flattened (n * max_answer_len)
  std::vector<double> target_mask;  // 1 for scored positions
};

// Teacher-forced decoder pass over an already encoded batch.
ForwardResult decode_teacher_forced(const ModelConfig& cfg, const ParameterStore& params,
                                    const EncoderState& enc,
                                    const std::vector<Example>& batch);

// Teacher-forced pass over a homogeneous batch (encode + decode).
ForwardResult forward(const ModelConfig& cfg, const ParameterStore& params,
                      const std::vector<Example>& batch);

// Mean over examples of per-example mean token cross-entropy; pad targets are
// skipped per example.
Tensor sequence_cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                              const std::vector<double>& target_mask);

// Greedy decoding over an existing single-example encoder state.
std::string greedy_decode(const ModelConfig& cfg, const ParameterStore& params,
                          const EncoderState& enc);

// Mean over examples of per-example mean token cross-entropy (pads ignored),
// plus lambda times the diversity term per cfg.div_layers.
Tensor loss(const ModelConfig& cfg, const ParameterStore& params,
            const std::vector<Example>& batch);

// Flattens [layer][stream] map stacks into the list combined_loss consumes,
// honoring div_layers = all | last.
std::vector<Tensor> maps_for_loss(const ModelConfig& cfg,
                                  const std::vector<std::vector<AttentionMaps>>& maps);

// Greedy decoding until the end token or the answer-length cap.
std::string generate(const ModelConfig& cfg, const ParameterStore& params,
                     const Example& example);

// Checkpoint container (magic DTOK): parameter names, extents and 32-bit
// float data in store order, CRC-trailed.
void save_checkpoint(const std::string& path, const ParameterStore& store);
void load_checkpoint(const std::string& path, ParameterStore& store);

// Rounds every parameter through 32-bit floats, the checkpoint precision, so
// a save/load cycle reproduces in-memory evaluation exactly.
void quantize_params_f32(ParameterStore& store);

// Builds fresh parameters from cfg.seed and checks every element of every
// parameter's backward gradient of loss() against central finite differences.
// Returns the worst |analytic - fd| / max(1, |analytic|, |fd|).
double model_gradient_check(const ModelConfig& cfg, const std::vector<Example>& batch,
                            double h = 1e-5);

// A synthetic batch for gradient checking: random pixels and random in-vocab
// word ids, valid for any ModelConfig (no grammar constraints).
std::vector<Example> synthetic_batch(const ModelConfig& cfg, int64_t n, uint64_t seed);

}  // namespace dtok

#endif  // DTOK_MODEL_HPP
