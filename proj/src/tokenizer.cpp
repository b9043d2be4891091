#include "dtok/tokenizer.hpp"

#include <cmath>

namespace dtok {

std::vector<int64_t> split_token_budget(int64_t total, size_t streams) {
  if (streams == 0) throw ShapeError("token budget split over zero streams");
  std::vector<int64_t> quota(streams, total / static_cast<int64_t>(streams));
  quota[0] += total % static_cast<int64_t>(streams);
  return quota;
}

void check_attention_maps(const AttentionMaps& maps, double tol) {
  if (maps.rank() != 3) {
    throw ShapeError("attention maps must be (n, m, s), got " + shape_str(maps.shape()));
  }
  const int64_t rows = maps.shape()[0] * maps.shape()[1];
  const int64_t s = maps.shape()[2];
  for (int64_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (int64_t j = 0; j < s; ++j) {
      const double v = maps.data()[r * s + j];
      if (v < 0.0 || v > 1.0) throw NumericError("attention weight outside [0,1]");
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol) {
      throw NumericError("attention map row does not sum to 1");
    }
  }
}

void create_spatial_attention_params(ParameterStore& store, const std::string& prefix,
                                     int64_t channels, int64_t hidden, int64_t tokens,
                                     Rng& rng) {
  create_linear(store, prefix + "/mlp1", 2 * channels, hidden, rng);
  create_linear(store, prefix + "/mlp2", hidden, tokens, rng);
}

void create_fuse_params(ParameterStore& store, const std::string& prefix, int64_t channels,
                        Rng& rng) {
  create_linear(store, prefix + "/proj", channels, channels, rng);
}

AttentionMaps spatial_attention_maps(const Tensor& features, const Tensor& conditioning,
                                     int64_t tokens, const ParameterStore& store,
                                     const std::string& prefix) {
  if (features.rank() != 3) {
    throw ShapeError("stream features must be (n, s, c), got " + shape_str(features.shape()));
  }
  if (tokens < 1) throw ShapeError("token count must be >= 1");
  const int64_t n = features.shape()[0];
  const int64_t s = features.shape()[1];
  const int64_t c = features.shape()[2];
  if (conditioning.shape() != Shape{n, c}) {
    throw ShapeError("conditioning must be (n, c), got " + shape_str(conditioning.shape()));
  }
  Tensor cond = broadcast_to(reshape(conditioning, {n, 1, c}), {n, s, c});
  Tensor joint = concat({features, cond}, 2);              // (n, s, 2c)
  Tensor hidden = relu(linear(joint, store, prefix + "/mlp1"));
  Tensor logits = linear(hidden, store, prefix + "/mlp2");  // (n, s, m)
  return softmax(permute(logits, {0, 2, 1}), -1);           // (n, m, s)
}

TokenSet tokenize(const Tensor& features, const AttentionMaps& maps) {
  if (features.rank() != 3 || maps.rank() != 3) {
    throw ShapeError("tokenize expects features (n,s,c) and maps (n,m,s)");
  }
  const int64_t s = features.shape()[1];
  if (maps.shape()[2] != s || maps.shape()[0] != features.shape()[0]) {
    throw ShapeError("maps " + shape_str(maps.shape()) + " do not match features " +
                     shape_str(features.shape()));
  }
  return mul_scalar(matmul(maps, features), 1.0 / static_cast<double>(s));
}

TokenSet fuse_streams(const std::vector<TokenSet>& tokensets, const ParameterStore& store,
                      const std::string& prefix) {
  if (tokensets.empty()) throw ShapeError("fuse_streams over zero streams");
  const int64_t n = tokensets[0].shape()[0];
  const int64_t c = tokensets[0].shape()[2];
  for (const TokenSet& t : tokensets) {
    if (t.rank() != 3 || t.shape()[0] != n || t.shape()[2] != c) {
      throw ShapeError("token sets disagree on batch or channels");
    }
  }
  Tensor all = tokensets.size() == 1 ? tokensets[0] : concat(tokensets, 1);
  return linear(all, store, prefix + "/proj");
}

namespace {

// Mean over valid sequence positions; (n, seq, c) -> (n, c). The first
// `text_len` positions obey text_valid, positions beyond it always count.
Tensor masked_sequence_mean(const Tensor& seq, const std::vector<std::vector<bool>>& text_valid) {
  const int64_t n = seq.shape()[0];
  const int64_t len = seq.shape()[1];
  const int64_t text_len = static_cast<int64_t>(text_valid[0].size());
  std::vector<double> mask(n * len, 1.0);
  std::vector<double> counts(n, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < len; ++j) {
      if (j < text_len && !text_valid[i][j]) mask[i * len + j] = 0.0;
      counts[i] += mask[i * len + j];
    }
  }
  Tensor masked = mul(seq, Tensor::from({n, len, 1}, std::move(mask)));
  Tensor sums = reduce_sum(masked, {1});  // (n, c)
  return div(sums, Tensor::from({n, 1}, std::move(counts)));
}

}  // namespace

CoTokenizeResult co_tokenize_iterative(const std::vector<Tensor>& stream_features,
                                       const std::vector<int64_t>& stream_tokens,
                                       const Tensor& text,
                                       const std::vector<std::vector<bool>>& text_valid,
                                       int layers, int heads, const ParameterStore& store,
                                       const std::string& prefix) {
  if (stream_features.empty()) throw ShapeError("co-tokenization needs at least one stream");
  if (stream_features.size() != stream_tokens.size()) {
    throw ShapeError("stream feature/token-quota count mismatch");
  }
  if (layers < 1) throw ShapeError("co-tokenization needs at least one layer");
  if (text.rank() != 3 || text.shape()[1] < 1) {
    throw ShapeError("text embeddings must be (n, t, c) with t >= 1");
  }
  const int64_t n = text.shape()[0];
  const int64_t text_len = text.shape()[1];
  int64_t total_tokens = 0;
  for (int64_t q : stream_tokens) total_tokens += q;

  // attention key mask over [text | tokens]: pad text positions removed
  std::vector<std::vector<bool>> seq_valid(n, std::vector<bool>(text_len + total_tokens, true));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < text_len; ++j) seq_valid[i][j] = text_valid[i][j];
  }
  Tensor seq_mask = key_padding_mask(seq_valid);

  CoTokenizeResult result;
  Tensor text_part = text;
  Tensor sequence;
  for (int l = 0; l < layers; ++l) {
    Tensor conditioning = l == 0 ? masked_sequence_mean(text, text_valid)
                                 : masked_sequence_mean(sequence, text_valid);
    std::vector<TokenSet> tokensets;
    std::vector<AttentionMaps> layer_maps;
    const std::string layer_prefix = prefix + "/l" + std::to_string(l);
    for (size_t si = 0; si < stream_features.size(); ++si) {
      AttentionMaps maps = spatial_attention_maps(
          stream_features[si], conditioning, stream_tokens[si], store,
          layer_prefix + "/tok/s" + std::to_string(si));
      tokensets.push_back(tokenize(stream_features[si], maps));
      layer_maps.push_back(std::move(maps));
    }
    result.maps.push_back(std::move(layer_maps));
    Tensor fused = fuse_streams(tokensets, store, layer_prefix + "/fuse");
    Tensor layer_in = concat({text_part, fused}, 1);
    sequence = encoder_layer(layer_in, heads, store, layer_prefix + "/enc", &seq_mask);
    text_part = slice(sequence, 1, 0, text_len);
  }
  result.sequence = sequence;
  return result;
}

TokenMassStats token_mass_diagnostic(const AttentionMaps& maps, double tau) {
  if (tau <= 0.0 || tau >= 1.0) throw NumericError("tau must lie in (0,1)");
  if (maps.rank() != 3) throw ShapeError("attention maps must be (n, m, s)");
  const int64_t n = maps.shape()[0], m = maps.shape()[1], s = maps.shape()[2];
  TokenMassStats stats;
  stats.examples = n;
  stats.tokens = m;
  const double threshold = (1.0 + tau) / static_cast<double>(s);
  for (int64_t r = 0; r < n * m; ++r) {
    double mx = 0.0;
    double ent = 0.0;
    for (int64_t j = 0; j < s; ++j) {
      const double v = maps.data()[r * s + j];
      mx = std::max(mx, v);
      if (v > 0.0) ent -= v * std::log(v);
    }
    const bool empty = mx < threshold;
    stats.max_weight.push_back(mx);
    stats.entropy.push_back(ent);
    stats.empty_like.push_back(empty);
    if (empty) stats.empty_count++;
  }
  return stats;
}

}  // namespace dtok
