#ifndef DTOK_TOKENIZER_HPP
#define DTOK_TOKENIZER_HPP

#include <vector>

#include "dtok/nn.hpp"
#include "dtok/tensor.hpp"

// Adaptive tokenization: per-token spatial attention maps conditioned on both
// modalities, attention-weighted pooling into learned tokens, multi-stream
// fusion, and layer-wise re-tokenization.

namespace dtok {

// (n, m, s) stack of per-token attention maps. Each map is a softmax
// distribution over the s flattened spatial (or spatio-temporal) positions.
using AttentionMaps = Tensor;

// (n, m, c) learned token vectors.
using TokenSet = Tensor;

// One input stream: how to carve the raw visual input and how many of the
// global token budget it owns.
struct StreamSpec {
  int64_t t_stride = 1;   // temporal subsampling of the raw clip (video only)
  int64_t s_stride = 1;   // spatial subsampling factor
  int64_t patch_t = 1;    // tubelet temporal extent (video only)
  int64_t patch = 8;      // tubelet/patch spatial extent
  int64_t tokens = 0;     // m_s, this stream's share of the budget
};

// Splits the budget evenly across streams, remainder to the first.
std::vector<int64_t> split_token_budget(int64_t total, size_t streams);

// Throws unless every map is a distribution over positions: entries in [0,1],
// each (example, token) row summing to 1 within `tol`.
void check_attention_maps(const AttentionMaps& maps, double tol = 1e-6);

void create_spatial_attention_params(ParameterStore& store, const std::string& prefix,
                                     int64_t channels, int64_t hidden, int64_t tokens,
                                     Rng& rng);
void create_fuse_params(ParameterStore& store, const std::string& prefix, int64_t channels,
                        Rng& rng);

// Per position, [feature ; conditioning] goes through a two-layer MLP that
// emits one logit per token; softmax over positions yields the maps.
// features: (n, s, c) flattened grid, conditioning: (n, c) -> (n, m, s).
AttentionMaps spatial_attention_maps(const Tensor& features, const Tensor& conditioning,
                                     int64_t tokens, const ParameterStore& store,
                                     const std::string& prefix);

// z_i[c] = mean over positions of features[s, c] * alpha_i[s]:
// attention-weighted spatial average pooling. (n,s,c) x (n,m,s) -> (n,m,c).
TokenSet tokenize(const Tensor& features, const AttentionMaps& maps);

// Concatenate token sets along the token axis (declaration order), then a
// shared c -> c projection.
TokenSet fuse_streams(const std::vector<TokenSet>& tokensets, const ParameterStore& store,
                      const std::string& prefix);

struct CoTokenizeResult {
  Tensor sequence;  // (n, t_text + m, c) after the last encoder layer
  std::vector<std::vector<AttentionMaps>> maps;  // [layer][stream]
};

// Layer-wise co-tokenization. Each layer: condition on the mean of the
// previous layer's output (layer 0: mean of the text embeddings), re-derive
// per-stream maps and tokens from the cached stream features, fuse,
// concatenate [text half | fused tokens] and run one encoder layer.
//
// text_valid marks real (non-pad) text positions; pads are excluded from the
// conditioning mean and masked out of attention keys.
CoTokenizeResult co_tokenize_iterative(const std::vector<Tensor>& stream_features,
                                       const std::vector<int64_t>& stream_tokens,
                                       const Tensor& text,
                                       const std::vector<std::vector<bool>>& text_valid,
                                       int layers, int heads, const ParameterStore& store,
                                       const std::string& prefix);

struct TokenMassStats {
  std::vector<double> max_weight;  // per (example, token), row-major
  std::vector<double> entropy;     // spatial entropy, nats
  std::vector<bool> empty_like;    // max weight below (1 + tau)/s
  int64_t empty_count = 0;
  int64_t examples = 0;
  int64_t tokens = 0;
};

// Quantifies how close each token's map is to carrying no information.
TokenMassStats token_mass_diagnostic(const AttentionMaps& maps, double tau);

}  // namespace dtok

#endif  // DTOK_TOKENIZER_HPP
