#include "dtok/nn.hpp"

#include <cmath>

namespace dtok {

// ---- ParameterStore ----

Tensor& ParameterStore::create(const std::string& name, const Shape& shape) {
  return create(name, shape, std::vector<double>(numel(shape), 0.0));
}

Tensor& ParameterStore::create(const std::string& name, const Shape& shape,
                               std::vector<double> values) {
  if (has(name)) throw ShapeError("duplicate parameter name: " + name);
  Tensor t = Tensor::from(shape, std::move(values));
  t.set_requires_grad(true);
  index_[name] = order_.size();
  order_.push_back(name);
  tensors_.push_back(std::move(t));
  return tensors_.back();
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown parameter: " + name);
  return tensors_[it->second];
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown parameter: " + name);
  return tensors_[it->second];
}

int64_t ParameterStore::total_elements() const {
  int64_t n = 0;
  for (const Tensor& t : tensors_) n += t.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (Tensor& t : tensors_) t.clear_grad();
}

Tensor& create_weight(ParameterStore& store, const std::string& name, int64_t fan_in,
                      int64_t fan_out, const Shape& shape, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> values(numel(shape));
  for (double& v : values) v = rng.uniform(-s, s);
  return store.create(name, shape, std::move(values));
}

void create_linear(ParameterStore& store, const std::string& prefix, int64_t din,
                   int64_t dout, Rng& rng) {
  create_weight(store, prefix + "/w", din, dout, {din, dout}, rng);
  store.create(prefix + "/b", {dout});
}

void create_layer_norm(ParameterStore& store, const std::string& prefix, int64_t d) {
  store.create(prefix + "/gamma", {d}, std::vector<double>(d, 1.0));
  store.create(prefix + "/beta", {d});
}

void create_attention(ParameterStore& store, const std::string& prefix, int64_t d, Rng& rng) {
  create_linear(store, prefix + "/wq", d, d, rng);
  create_linear(store, prefix + "/wk", d, d, rng);
  create_linear(store, prefix + "/wv", d, d, rng);
  create_linear(store, prefix + "/wo", d, d, rng);
}

void create_encoder_layer(ParameterStore& store, const std::string& prefix, int64_t d,
                          int64_t ff_hidden, Rng& rng) {
  create_layer_norm(store, prefix + "/ln1", d);
  create_attention(store, prefix + "/attn", d, rng);
  create_layer_norm(store, prefix + "/ln2", d);
  create_linear(store, prefix + "/ff1", d, ff_hidden, rng);
  create_linear(store, prefix + "/ff2", ff_hidden, d, rng);
}

void create_decoder_layer(ParameterStore& store, const std::string& prefix, int64_t d,
                          int64_t ff_hidden, Rng& rng) {
  create_layer_norm(store, prefix + "/ln1", d);
  create_attention(store, prefix + "/self", d, rng);
  create_layer_norm(store, prefix + "/ln2", d);
  create_attention(store, prefix + "/cross", d, rng);
  create_layer_norm(store, prefix + "/ln3", d);
  create_linear(store, prefix + "/ff1", d, ff_hidden, rng);
  create_linear(store, prefix + "/ff2", ff_hidden, d, rng);
}

void create_patch_embed(ParameterStore& store, const std::string& prefix, int64_t patch,
                        int64_t grid_h, int64_t grid_w, int64_t channels, Rng& rng) {
  const int64_t din = patch * patch * 3;
  create_linear(store, prefix + "/proj", din, channels, rng);
  store.create(prefix + "/pos", {grid_h, grid_w, channels});
}

void create_frame_embed(ParameterStore& store, const std::string& prefix, int64_t patch_t,
                        int64_t patch, int64_t grid_t, int64_t grid_h, int64_t grid_w,
                        int64_t channels, Rng& rng) {
  const int64_t din = patch_t * patch * patch * 3;
  create_linear(store, prefix + "/proj", din, channels, rng);
  store.create(prefix + "/pos", {grid_t, grid_h, grid_w, channels});
}

// ---- blocks ----

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw ShapeError("linear weight must be rank 2");
  const int64_t din = w.shape()[0];
  const int64_t dout = w.shape()[1];
  if (x.shape().empty() || x.shape().back() != din) {
    throw ShapeError("linear input " + shape_str(x.shape()) + " does not end in " +
                     std::to_string(din));
  }
  if (b.shape() != Shape{dout}) throw ShapeError("linear bias shape mismatch");
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  const int64_t rows = x.size() / din;
  Tensor flat = reshape(x, {rows, din});
  Tensor y = add(matmul(flat, w), b);
  return reshape(y, out_shape);
}

Tensor linear(const Tensor& x, const ParameterStore& store, const std::string& prefix) {
  return linear(x, store.get(prefix + "/w"), store.get(prefix + "/b"));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int last = x.rank() - 1;
  Tensor mu = reduce_mean(x, {last}, /*keepdims=*/true);
  Tensor centered = sub(x, mu);
  Tensor var = reduce_mean(square(centered), {last}, /*keepdims=*/true);
  Tensor normed = div(centered, sqrt(add_scalar(var, eps)));
  return add(mul(normed, gamma), beta);
}

Tensor layer_norm(const Tensor& x, const ParameterStore& store, const std::string& prefix) {
  return layer_norm(x, store.get(prefix + "/gamma"), store.get(prefix + "/beta"));
}

Tensor causal_mask(int64_t t) {
  std::vector<double> values(t * t, 0.0);
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = i + 1; j < t; ++j) values[i * t + j] = kMaskedOut;
  }
  return Tensor::from({t, t}, std::move(values));
}

Tensor key_padding_mask(const std::vector<std::vector<bool>>& valid) {
  const int64_t n = static_cast<int64_t>(valid.size());
  const int64_t len = static_cast<int64_t>(valid[0].size());
  std::vector<double> values(n * len, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < len; ++j) {
      if (!valid[i][j]) values[i * len + j] = kMaskedOut;
    }
  }
  return Tensor::from({n, 1, 1, len}, std::move(values));
}

namespace {

// (..., S, d) -> (batch..., heads, S, d/heads)
Tensor split_heads(const Tensor& x, int heads) {
  Shape s = x.shape();
  const int64_t d = s.back();
  const int64_t seq = s[s.size() - 2];
  Shape with_heads(s.begin(), s.end() - 2);
  with_heads.push_back(seq);
  with_heads.push_back(heads);
  with_heads.push_back(d / heads);
  Tensor y = reshape(x, with_heads);
  std::vector<int> axes(y.rank());
  for (int i = 0; i < y.rank(); ++i) axes[i] = i;
  std::swap(axes[y.rank() - 3], axes[y.rank() - 2]);
  return permute(y, axes);
}

Tensor merge_heads(const Tensor& x) {
  std::vector<int> axes(x.rank());
  for (int i = 0; i < x.rank(); ++i) axes[i] = i;
  std::swap(axes[x.rank() - 3], axes[x.rank() - 2]);
  Tensor y = permute(x, axes);
  Shape s = y.shape();
  Shape merged(s.begin(), s.end() - 2);
  merged.push_back(s[s.size() - 2] * s.back());
  return reshape(y, merged);
}

}  // namespace

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            const ParameterStore& store, const std::string& prefix,
                            const Tensor* mask) {
  const int64_t d = q.shape().back();
  if (heads <= 0 || d % heads != 0) {
    throw ShapeError("width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  Tensor qh = split_heads(linear(q, store, prefix + "/wq"), heads);
  Tensor kh = split_heads(linear(k, store, prefix + "/wk"), heads);
  Tensor vh = split_heads(linear(v, store, prefix + "/wv"), heads);

  const double scale = 1.0 / std::sqrt(static_cast<double>(d / heads));
  Tensor scores = mul_scalar(matmul(qh, transpose_last2(kh)), scale);
  if (mask != nullptr) scores = add(scores, *mask);
  Tensor weights = softmax(scores, -1);
  Tensor context = merge_heads(matmul(weights, vh));
  return linear(context, store, prefix + "/wo");
}

Tensor encoder_layer(const Tensor& x, int heads, const ParameterStore& store,
                     const std::string& prefix, const Tensor* mask) {
  Tensor normed = layer_norm(x, store, prefix + "/ln1");
  Tensor h = add(x, multi_head_attention(normed, normed, normed, heads, store,
                                         prefix + "/attn", mask));
  Tensor normed2 = layer_norm(h, store, prefix + "/ln2");
  Tensor ff = linear(relu(linear(normed2, store, prefix + "/ff1")), store, prefix + "/ff2");
  return add(h, ff);
}

Tensor decoder_layer(const Tensor& y, const Tensor& memory, int heads,
                     const ParameterStore& store, const std::string& prefix,
                     const Tensor& self_mask, const Tensor* memory_mask) {
  Tensor normed = layer_norm(y, store, prefix + "/ln1");
  Tensor h = add(y, multi_head_attention(normed, normed, normed, heads, store,
                                         prefix + "/self", &self_mask));
  Tensor normed2 = layer_norm(h, store, prefix + "/ln2");
  h = add(h, multi_head_attention(normed2, memory, memory, heads, store, prefix + "/cross",
                                  memory_mask));
  Tensor normed3 = layer_norm(h, store, prefix + "/ln3");
  Tensor ff = linear(relu(linear(normed3, store, prefix + "/ff1")), store, prefix + "/ff2");
  return add(h, ff);
}

Tensor decoder_step(const Tensor& y_prefix, const Tensor& memory, int heads, int layers,
                    const ParameterStore& store, const std::string& prefix,
                    const Tensor* memory_mask) {
  if (y_prefix.rank() < 2 || y_prefix.shape()[y_prefix.rank() - 2] < 1) {
    throw ShapeError("decoder prefix must be non-empty");
  }
  const int64_t t = y_prefix.shape()[y_prefix.rank() - 2];
  Tensor mask = causal_mask(t);
  Tensor h = y_prefix;
  for (int l = 0; l < layers; ++l) {
    h = decoder_layer(h, memory, heads, store, prefix + "/l" + std::to_string(l), mask,
                      memory_mask);
  }
  h = layer_norm(h, store, prefix + "/ln");
  return linear(h, store, prefix + "/out");
}

Tensor patch_embed(const Tensor& image, int64_t patch, const ParameterStore& store,
                   const std::string& prefix) {
  if (image.rank() != 4 || image.shape()[3] != 3) {
    throw ShapeError("patch_embed expects (n, h, w, 3), got " + shape_str(image.shape()));
  }
  const int64_t n = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
  if (h % patch != 0 || w % patch != 0) {
    throw ShapeError("image extents " + shape_str({h, w}) + " not divisible by patch " +
                     std::to_string(patch));
  }
  const int64_t gh = h / patch, gw = w / patch;
  Tensor x = reshape(image, {n, gh, patch, gw, patch, 3});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  x = reshape(x, {n, gh, gw, patch * patch * 3});
  x = linear(x, store, prefix + "/proj");
  return add(x, store.get(prefix + "/pos"));
}

Tensor frame_embed(const Tensor& video, int64_t patch_t, int64_t patch,
                   const ParameterStore& store, const std::string& prefix) {
  if (video.rank() != 5 || video.shape()[4] != 3) {
    throw ShapeError("frame_embed expects (n, t, h, w, 3), got " + shape_str(video.shape()));
  }
  const int64_t n = video.shape()[0], t = video.shape()[1];
  const int64_t h = video.shape()[2], w = video.shape()[3];
  if (t % patch_t != 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("video extents " + shape_str({t, h, w}) + " not divisible by tubelet (" +
                     std::to_string(patch_t) + "," + std::to_string(patch) + ")");
  }
  const int64_t gt = t / patch_t, gh = h / patch, gw = w / patch;
  Tensor x = reshape(video, {n, gt, patch_t, gh, patch, gw, patch, 3});
  x = permute(x, {0, 1, 3, 5, 2, 4, 6, 7});
  x = reshape(x, {n, gt, gh, gw, patch_t * patch * patch * 3});
  x = linear(x, store, prefix + "/proj");
  return add(x, store.get(prefix + "/pos"));
}

}  // namespace dtok
