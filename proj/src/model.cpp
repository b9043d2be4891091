#include "dtok/model.hpp"

#include <algorithm>
#include <cmath>

#include "dtok/io.hpp"

namespace dtok {

void ModelConfig::finalize() {
  if (mode != "image" && mode != "video") {
    throw ShapeError("mode must be image or video, got '" + mode + "'");
  }
  if (vocab == 0) vocab = Vocab::standard().size();
  if (vocab < 5) throw ShapeError("vocab must cover the 4 special tokens plus words");
  if (tokens == 0) tokens = is_video() ? 8 : 16;
  if (map_hidden == 0) map_hidden = channels;
  if (channels < 1 || heads < 1 || channels % heads != 0) {
    throw ShapeError("channels must be a positive multiple of heads");
  }
  if (enc_layers < 1 || dec_layers < 1) throw ShapeError("layer counts must be >= 1");
  if (tokens < 1) throw ShapeError("token budget must be >= 1");
  if (max_question_len < 1 || max_answer_len < 2) {
    throw ShapeError("sequence length limits too small");
  }
  if (!std::isfinite(lambda) || lambda < 0.0) throw ShapeError("lambda must be >= 0");
  if (div_layers != "all" && div_layers != "last") {
    throw ShapeError("div_layers must be all or last");
  }
  if (tau <= 0.0 || tau >= 1.0) throw ShapeError("tau must lie in (0,1)");

  if (is_video()) {
    if (streams.empty()) {
      // half the frames at full resolution, all frames at half resolution
      streams.push_back({2, 1, 2, 8, 0});
      streams.push_back({1, 2, 4, 8, 0});
    }
    if (tokens < static_cast<int64_t>(streams.size())) {
      throw ShapeError("token budget smaller than the stream count");
    }
    std::vector<int64_t> quota = split_token_budget(tokens, streams.size());
    for (size_t i = 0; i < streams.size(); ++i) {
      StreamSpec& s = streams[i];
      s.tokens = quota[i];
      if (frames % s.t_stride != 0 || image_size % s.s_stride != 0) {
        throw ShapeError("stream strides must divide the raw clip extents");
      }
      const int64_t t = frames / s.t_stride;
      const int64_t hw = image_size / s.s_stride;
      if (t % s.patch_t != 0 || hw % s.patch != 0) {
        throw ShapeError("stream extents must divide by the tubelet size");
      }
    }
  } else {
    streams.clear();
    StreamSpec s;
    s.patch = patch;
    s.tokens = tokens;
    streams.push_back(s);
    if (image_size % patch != 0) throw ShapeError("patch must divide image size");
  }
}

int64_t ModelConfig::stream_positions(size_t stream) const {
  const StreamSpec& s = streams.at(stream);
  if (is_video()) {
    const int64_t gt = frames / s.t_stride / s.patch_t;
    const int64_t g = image_size / s.s_stride / s.patch;
    return gt * g * g;
  }
  const int64_t g = image_size / patch;
  return g * g;
}

ParameterStore build_params(const ModelConfig& cfg) {
  Rng rng(cfg.seed);
  ParameterStore store;
  const int64_t c = cfg.channels;

  create_weight(store, "text/embed", cfg.vocab, c, {cfg.vocab, c}, rng);
  store.create("text/pos", {cfg.max_question_len, c});

  for (size_t i = 0; i < cfg.streams.size(); ++i) {
    const StreamSpec& s = cfg.streams[i];
    const std::string prefix = "vis/s" + std::to_string(i);
    if (cfg.is_video()) {
      const int64_t gt = cfg.frames / s.t_stride / s.patch_t;
      const int64_t g = cfg.image_size / s.s_stride / s.patch;
      create_frame_embed(store, prefix, s.patch_t, s.patch, gt, g, g, c, rng);
    } else {
      const int64_t g = cfg.image_size / cfg.patch;
      create_patch_embed(store, prefix, cfg.patch, g, g, c, rng);
    }
  }

  for (int l = 0; l < cfg.enc_layers; ++l) {
    const std::string layer = "cotok/l" + std::to_string(l);
    for (size_t i = 0; i < cfg.streams.size(); ++i) {
      create_spatial_attention_params(store, layer + "/tok/s" + std::to_string(i), c,
                                      cfg.map_hidden, cfg.streams[i].tokens, rng);
    }
    create_fuse_params(store, layer + "/fuse", c, rng);
    create_encoder_layer(store, layer + "/enc", c, c * cfg.ff_mult, rng);
  }
  create_layer_norm(store, "enc/ln", c);

  store.create("dec/pos", {cfg.max_answer_len, c});
  for (int l = 0; l < cfg.dec_layers; ++l) {
    create_decoder_layer(store, "dec/l" + std::to_string(l), c, c * cfg.ff_mult, rng);
  }
  create_layer_norm(store, "dec/ln", c);
  create_linear(store, "dec/out", c, cfg.vocab, rng);
  return store;
}

Tensor derive_stream(const Tensor& video, const StreamSpec& spec) {
  if (video.rank() != 5) throw ShapeError("derive_stream expects (n, t, h, w, 3)");
  const int64_t n = video.shape()[0], t = video.shape()[1];
  const int64_t h = video.shape()[2], w = video.shape()[3];
  const int64_t ot = t / spec.t_stride;
  const int64_t oh = h / spec.s_stride, ow = w / spec.s_stride;
  const int64_t ss = spec.s_stride;
  std::vector<double> out(n * ot * oh * ow * 3);
  const double* src = video.data().data();
  const double norm = 1.0 / static_cast<double>(ss * ss);
  int64_t idx = 0;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ft = 0; ft < ot; ++ft) {
      const int64_t st = ft * spec.t_stride;
      for (int64_t y = 0; y < oh; ++y) {
        for (int64_t x = 0; x < ow; ++x) {
          for (int64_t ch = 0; ch < 3; ++ch) {
            double acc = 0.0;
            for (int64_t dy = 0; dy < ss; ++dy) {
              for (int64_t dx = 0; dx < ss; ++dx) {
                acc += src[(((b * t + st) * h + y * ss + dy) * w + x * ss + dx) * 3 + ch];
              }
            }
            out[idx++] = acc * norm;
          }
        }
      }
    }
  }
  return Tensor::from({n, ot, oh, ow, 3}, std::move(out));
}

namespace {

// ids padded/cut to `len`, validity flags alongside
struct PaddedText {
  std::vector<int64_t> ids;                 // flattened (n, len)
  std::vector<std::vector<bool>> valid;
};

PaddedText pad_questions(const ModelConfig& cfg, const std::vector<Example>& batch) {
  PaddedText out;
  const int64_t len = cfg.max_question_len;
  out.valid.assign(batch.size(), std::vector<bool>(len, false));
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& q = batch[i].question_ids;
    if (static_cast<int64_t>(q.size()) > len) {
      throw ShapeError("question longer than max_question_len");
    }
    if (q.empty()) throw ShapeError("empty question");
    for (int64_t j = 0; j < len; ++j) {
      const bool real = j < static_cast<int64_t>(q.size());
      out.ids.push_back(real ? q[j] : Vocab::kPad);
      out.valid[i][j] = real;
    }
  }
  return out;
}

Tensor batch_visual(const std::vector<Example>& batch) {
  const Shape& one = batch[0].vis_shape;
  Shape shape;
  shape.push_back(static_cast<int64_t>(batch.size()));
  for (int64_t e : one) shape.push_back(e);
  std::vector<double> values;
  values.reserve(numel(shape));
  for (const Example& ex : batch) {
    if (ex.vis_shape != one) throw ShapeError("batch visual shapes are not homogeneous");
    for (uint8_t p : ex.pixels) values.push_back(p / 255.0);
  }
  return Tensor::from(shape, std::move(values));
}

Tensor embed_text(const ModelConfig& cfg, const ParameterStore& params,
                  const std::vector<int64_t>& flat_ids, int64_t n) {
  Tensor emb = embedding(params.get("text/embed"), flat_ids);
  emb = reshape(emb, {n, cfg.max_question_len, cfg.channels});
  return add(emb, params.get("text/pos"));
}

}  // namespace

EncoderState encode(const ModelConfig& cfg, const ParameterStore& params,
                    const std::vector<Example>& batch) {
  if (batch.empty()) throw ShapeError("empty batch");
  const int64_t n = static_cast<int64_t>(batch.size());
  const int64_t c = cfg.channels;

  PaddedText text = pad_questions(cfg, batch);
  Tensor text_emb = embed_text(cfg, params, text.ids, n);

  Tensor visual = batch_visual(batch);
  std::vector<Tensor> features;
  std::vector<int64_t> quotas;
  for (size_t i = 0; i < cfg.streams.size(); ++i) {
    const std::string prefix = "vis/s" + std::to_string(i);
    Tensor grid;
    if (cfg.is_video()) {
      Tensor clip = derive_stream(visual, cfg.streams[i]);
      grid = frame_embed(clip, cfg.streams[i].patch_t, cfg.streams[i].patch, params, prefix);
    } else {
      grid = patch_embed(visual, cfg.patch, params, prefix);
    }
    features.push_back(reshape(grid, {n, cfg.stream_positions(i), c}));
    quotas.push_back(cfg.streams[i].tokens);
  }

  CoTokenizeResult cotok = co_tokenize_iterative(features, quotas, text_emb, text.valid,
                                                 cfg.enc_layers, cfg.heads, params, "cotok");

  EncoderState state;
  state.memory = layer_norm(cotok.sequence, params, "enc/ln");
  state.maps = std::move(cotok.maps);
  std::vector<std::vector<bool>> mem_valid(n, std::vector<bool>(cfg.max_question_len + cfg.tokens, true));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < cfg.max_question_len; ++j) mem_valid[i][j] = text.valid[i][j];
  }
  state.memory_mask = key_padding_mask(mem_valid);
  return state;
}

ForwardResult decode_teacher_forced(const ModelConfig& cfg, const ParameterStore& params,
                                    const EncoderState& enc,
                                    const std::vector<Example>& batch) {
  const int64_t n = static_cast<int64_t>(batch.size());
  const int64_t t = cfg.max_answer_len;

  ForwardResult out;
  std::vector<int64_t> dec_in;
  for (const Example& ex : batch) {
    const auto& a = ex.answer_ids;
    if (a.empty()) throw ShapeError("empty answer");
    if (static_cast<int64_t>(a.size()) + 1 > t) {
      throw ShapeError("answer longer than max_answer_len allows");
    }
    // teacher forcing: input [start, a...], target [a..., end], pad-filled
    for (int64_t j = 0; j < t; ++j) {
      dec_in.push_back(j == 0 ? Vocab::kStart
                              : (j - 1 < static_cast<int64_t>(a.size()) ? a[j - 1] : Vocab::kPad));
      int64_t target = Vocab::kPad;
      if (j < static_cast<int64_t>(a.size())) {
        target = a[j];
      } else if (j == static_cast<int64_t>(a.size())) {
        target = Vocab::kEnd;
      }
      out.targets.push_back(target);
      out.target_mask.push_back(target == Vocab::kPad ? 0.0 : 1.0);
    }
  }

  Tensor y = embedding(params.get("text/embed"), dec_in);
  y = reshape(y, {n, t, cfg.channels});
  y = add(y, params.get("dec/pos"));
  out.logits = decoder_step(y, enc.memory, cfg.heads, cfg.dec_layers, params, "dec",
                            &enc.memory_mask);
  out.maps = enc.maps;
  return out;
}

ForwardResult forward(const ModelConfig& cfg, const ParameterStore& params,
                      const std::vector<Example>& batch) {
  EncoderState enc = encode(cfg, params, batch);
  return decode_teacher_forced(cfg, params, enc, batch);
}

Tensor sequence_cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                              const std::vector<double>& target_mask) {
  const int64_t n = logits.shape()[0];
  const int64_t t = logits.shape()[1];
  std::vector<double> counts(n, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < t; ++j) counts[i] += target_mask[i * t + j];
    if (counts[i] == 0.0) throw ShapeError("example with all-pad answer targets");
  }
  Tensor logp = log_softmax(logits, -1);
  Tensor nll = neg(gather_last(logp, targets));  // (n, t)
  nll = mul(nll, Tensor::from({n, t}, std::vector<double>(target_mask)));
  Tensor per_example = div(reduce_sum(nll, {1}), Tensor::from({n}, std::move(counts)));
  return reduce_mean_all(per_example);
}

std::vector<Tensor> maps_for_loss(const ModelConfig& cfg,
                                  const std::vector<std::vector<AttentionMaps>>& maps) {
  std::vector<Tensor> flat;
  const size_t first = cfg.div_layers == "last" ? maps.size() - 1 : 0;
  for (size_t l = first; l < maps.size(); ++l) {
    for (const Tensor& m : maps[l]) flat.push_back(m);
  }
  return flat;
}

Tensor loss(const ModelConfig& cfg, const ParameterStore& params,
            const std::vector<Example>& batch) {
  ForwardResult fwd = forward(cfg, params, batch);
  Tensor task = sequence_cross_entropy(fwd.logits, fwd.targets, fwd.target_mask);
  return combined_loss(task, maps_for_loss(cfg, fwd.maps), cfg.lambda);
}

std::string greedy_decode(const ModelConfig& cfg, const ParameterStore& params,
                          const EncoderState& enc) {
  const Vocab& vocab = Vocab::standard();

  std::vector<int64_t> prefix = {Vocab::kStart};
  std::vector<int64_t> emitted;
  while (static_cast<int64_t>(prefix.size()) <= cfg.max_answer_len) {
    const int64_t t = static_cast<int64_t>(prefix.size());
    Tensor y = embedding(params.get("text/embed"), prefix);
    y = reshape(y, {1, t, cfg.channels});
    y = add(y, slice(params.get("dec/pos"), 0, 0, t));
    Tensor logits = decoder_step(y, enc.memory, cfg.heads, cfg.dec_layers, params, "dec",
                                 &enc.memory_mask);
    // greedy argmax over the last position; ties go to the lowest id
    const int64_t v = cfg.vocab;
    const double* row = logits.data().data() + (t - 1) * v;
    int64_t best = 0;
    for (int64_t k = 1; k < v; ++k) {
      if (row[k] > row[best]) best = k;
    }
    if (best == Vocab::kEnd) break;
    emitted.push_back(best);
    if (static_cast<int64_t>(emitted.size()) >= cfg.max_answer_len - 1) break;
    prefix.push_back(best);
  }
  return detokenize(emitted, vocab);
}

std::string generate(const ModelConfig& cfg, const ParameterStore& params,
                     const Example& example) {
  EncoderState enc = encode(cfg, params, {example});
  return greedy_decode(cfg, params, enc);
}

// ---- checkpoints ----

void save_checkpoint(const std::string& path, const ParameterStore& store) {
  ByteWriter w;
  w.magic("DTOK");
  w.u32(1);  // version
  w.u32(static_cast<uint32_t>(store.size()));
  for (size_t i = 0; i < store.size(); ++i) {
    const Tensor& t = store.at(i);
    w.str16(store.name(i));
    w.u8(static_cast<uint8_t>(t.rank()));
    for (int64_t e : t.shape()) w.u32(static_cast<uint32_t>(e));
    for (double v : t.data()) w.f32(static_cast<float>(v));
  }
  w.append_crc();
  write_file(path, w.buffer());
}

void load_checkpoint(const std::string& path, ParameterStore& store) {
  ByteReader r(read_file(path));
  r.check_crc(path);
  r.expect_magic("DTOK");
  if (r.u32() != 1) throw IoError("unsupported checkpoint version");
  const uint32_t count = r.u32();
  if (count != store.size()) {
    throw IoError("checkpoint/model config mismatch: parameter count " +
                  std::to_string(count) + " vs " + std::to_string(store.size()));
  }
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str16();
    if (!store.has(name)) {
      throw IoError("checkpoint/model config mismatch: unknown parameter " + name);
    }
    Tensor& t = store.get(name);
    const uint8_t rank = r.u8();
    Shape shape;
    for (uint8_t d = 0; d < rank; ++d) shape.push_back(r.u32());
    if (shape != t.shape()) {
      throw IoError("checkpoint/model config mismatch: shape of " + name);
    }
    for (double& v : t.mutable_data()) v = static_cast<double>(r.f32());
    t.clear_grad();
  }
  if (r.remaining() != 0) throw IoError("trailing bytes in checkpoint");
}

void quantize_params_f32(ParameterStore& store) {
  for (size_t i = 0; i < store.size(); ++i) {
    for (double& v : store.at(i).mutable_data()) {
      v = static_cast<double>(static_cast<float>(v));
    }
  }
}

std::vector<Example> synthetic_batch(const ModelConfig& cfg, int64_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<Example> batch;
  for (int64_t i = 0; i < n; ++i) {
    Example ex;
    ex.vis_shape = cfg.is_video()
                       ? Shape{cfg.frames, cfg.image_size, cfg.image_size, 3}
                       : Shape{cfg.image_size, cfg.image_size, 3};
    ex.pixels.resize(numel(ex.vis_shape));
    for (uint8_t& p : ex.pixels) p = static_cast<uint8_t>(rng.below(256));
    const int64_t q_len = 1 + static_cast<int64_t>(rng.below(cfg.max_question_len));
    // word ids in [4, vocab): skip the special tokens
    for (int64_t j = 0; j < q_len; ++j) {
      ex.question_ids.push_back(4 + static_cast<int64_t>(rng.below(cfg.vocab - 4)));
    }
    const int64_t a_len = 1 + static_cast<int64_t>(rng.below(cfg.max_answer_len - 1));
    for (int64_t j = 0; j < a_len; ++j) {
      ex.answer_ids.push_back(4 + static_cast<int64_t>(rng.below(cfg.vocab - 4)));
    }
    ex.question = "synthetic";
    ex.answer = "synthetic";
    batch.push_back(std::move(ex));
  }
  return batch;
}

double model_gradient_check(const ModelConfig& cfg, const std::vector<Example>& batch,
                            double h) {
  ParameterStore params = build_params(cfg);

  Tape tape;
  Tensor l;
  {
    TapeScope scope(tape);
    l = loss(cfg, params, batch);
  }
  tape.backward(l);

  double worst = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& param = params.at(p);
    std::vector<double> analytic =
        param.has_grad() ? param.grad() : std::vector<double>(param.size(), 0.0);
    std::vector<double> fd(param.size());
    std::vector<double>& data = param.mutable_data();
    for (int64_t i = 0; i < param.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = loss(cfg, params, batch).item();
      data[i] = orig - h;
      const double fm = loss(cfg, params, batch).item();
      data[i] = orig;
      fd[i] = (fp - fm) / (2.0 * h);
    }
    worst = std::max(worst, max_rel_err(analytic, fd));
  }
  return worst;
}

}  // namespace dtok
