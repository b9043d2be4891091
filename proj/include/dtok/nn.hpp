#ifndef DTOK_NN_HPP
#define DTOK_NN_HPP

#include <string>
#include <unordered_map>
#include <vector>

#include "dtok/rng.hpp"
#include "dtok/tensor.hpp"

// Neural building blocks. Blocks are pure functions of (params, input); all
// learned weights live in a ParameterStore and are addressed by
// slash-delimited path names.

namespace dtok {

// Ordered name -> tensor map. Iteration follows insertion order, which fixes
// the checkpoint layout and the optimizer slot order.
class ParameterStore {
 public:
  Tensor& create(const std::string& name, const Shape& shape);
  Tensor& create(const std::string& name, const Shape& shape, std::vector<double> values);

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);

  size_t size() const { return order_.size(); }
  const std::string& name(size_t i) const { return order_[i]; }
  const Tensor& at(size_t i) const { return tensors_[i]; }
  Tensor& at(size_t i) { return tensors_[i]; }

  int64_t total_elements() const;
  void zero_grad();

 private:
  std::vector<std::string> order_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, size_t> index_;
};

// Spatial (n, h', w', c) or spatio-temporal (n, t', h', w', c) grid of
// channel vectors produced by an embedder.
using FeatureMap = Tensor;

// Weight init: uniform(-s, s) with s = sqrt(6/(fan_in+fan_out)). Biases and
// position embeddings are created zero via plain create().
Tensor& create_weight(ParameterStore& store, const std::string& name, int64_t fan_in,
                      int64_t fan_out, const Shape& shape, Rng& rng);

// Parameter creation for the common blocks, mirrored by the *_forward
// functions below. `prefix` namespaces the weights, e.g. "enc/l0/attn".
void create_linear(ParameterStore& store, const std::string& prefix, int64_t din,
                   int64_t dout, Rng& rng);
void create_layer_norm(ParameterStore& store, const std::string& prefix, int64_t d);
void create_attention(ParameterStore& store, const std::string& prefix, int64_t d, Rng& rng);
void create_encoder_layer(ParameterStore& store, const std::string& prefix, int64_t d,
                          int64_t ff_hidden, Rng& rng);
void create_decoder_layer(ParameterStore& store, const std::string& prefix, int64_t d,
                          int64_t ff_hidden, Rng& rng);
void create_patch_embed(ParameterStore& store, const std::string& prefix, int64_t patch,
                        int64_t grid_h, int64_t grid_w, int64_t channels, Rng& rng);
void create_frame_embed(ParameterStore& store, const std::string& prefix, int64_t patch_t,
                        int64_t patch, int64_t grid_t, int64_t grid_h, int64_t grid_w,
                        int64_t channels, Rng& rng);

// y = x @ w + b over the last axis; x is (..., din).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear(const Tensor& x, const ParameterStore& store, const std::string& prefix);

// Zero-mean unit-variance over the last axis, then gamma * x + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);
Tensor layer_norm(const Tensor& x, const ParameterStore& store, const std::string& prefix);

// Additive attention masks: 0 keeps a key, kMaskedOut removes it.
inline constexpr double kMaskedOut = -1e30;

// (t, t) causal mask: position i may attend to positions <= i.
Tensor causal_mask(int64_t t);

// (n, 1, 1, len) additive key mask from per-position validity flags.
Tensor key_padding_mask(const std::vector<std::vector<bool>>& valid);

// Scaled dot-product multi-head attention with output projection.
// q: (..., Sq, d), k/v: (..., Sk, d) with matching leading dims; mask, when
// given, broadcasts against (..., heads, Sq, Sk).
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            const ParameterStore& store, const std::string& prefix,
                            const Tensor* mask = nullptr);

// Pre-norm self-attention + feed-forward with residuals.
Tensor encoder_layer(const Tensor& x, int heads, const ParameterStore& store,
                     const std::string& prefix, const Tensor* mask = nullptr);

// Pre-norm causal self-attention, cross-attention over memory, feed-forward.
Tensor decoder_layer(const Tensor& y, const Tensor& memory, int heads,
                     const ParameterStore& store, const std::string& prefix,
                     const Tensor& self_mask, const Tensor* memory_mask);

// Full decoder pass: embedded prefix (..., t, d) + memory (..., m, d) ->
// logits (..., t, vocab) through `layers` decoder layers, a final norm and the
// output projection.
Tensor decoder_step(const Tensor& y_prefix, const Tensor& memory, int heads, int layers,
                    const ParameterStore& store, const std::string& prefix,
                    const Tensor* memory_mask);

// Non-overlapping p x p patches, flattened, projected to `channels`, plus a
// learned 2-d position embedding. image: (n, h, w, 3) -> (n, h/p, w/p, c).
Tensor patch_embed(const Tensor& image, int64_t patch, const ParameterStore& store,
                   const std::string& prefix);

// Spatio-temporal tubelets of extent (pt, p, p) with a 3-d position
// embedding. video: (n, t, h, w, 3) -> (n, t/pt, h/p, w/p, c).
Tensor frame_embed(const Tensor& video, int64_t patch_t, int64_t patch,
                   const ParameterStore& store, const std::string& prefix);

}  // namespace dtok

#endif  // DTOK_NN_HPP
