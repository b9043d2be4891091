#ifndef DTOK_TESTS_ORACLES_HPP
#define DTOK_TESTS_ORACLES_HPP

// Brute-force reference implementations, independent of the library's op
// code paths. Everything here is plain index arithmetic and nested loops.

#include <cmath>
#include <functional>
#include <vector>

#include "dtok/nn.hpp"
#include "dtok/rng.hpp"
#include "dtok/tensor.hpp"

namespace oracles {

using dtok::Rng;
using dtok::Shape;
using dtok::Tensor;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> values(dtok::numel(shape));
  for (double& v : values) v = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(values));
}

// right-aligned broadcast of `in` materialized at `out` shape
inline std::vector<double> materialize_broadcast(const Tensor& in, const Shape& out) {
  const int out_rank = static_cast<int>(out.size());
  const int in_rank = static_cast<int>(in.shape().size());
  std::vector<double> result(dtok::numel(out));
  std::vector<int64_t> idx(out_rank, 0);
  for (size_t i = 0; i < result.size(); ++i) {
    int64_t in_off = 0;
    int64_t stride = 1;
    for (int d = in_rank - 1; d >= 0; --d) {
      const int od = d + out_rank - in_rank;
      const int64_t coord = in.shape()[d] == 1 ? 0 : idx[od];
      in_off += coord * stride;
      stride *= in.shape()[d];
    }
    result[i] = in.data()[in_off];
    for (int d = out_rank - 1; d >= 0; --d) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return result;
}

inline std::vector<double> loop_binary(const Tensor& a, const Tensor& b, const Shape& out,
                                       double (*op)(double, double)) {
  std::vector<double> av = materialize_broadcast(a, out);
  std::vector<double> bv = materialize_broadcast(b, out);
  std::vector<double> result(av.size());
  for (size_t i = 0; i < av.size(); ++i) result[i] = op(av[i], bv[i]);
  return result;
}

// plain triple loop, 2-d only
inline Tensor loop_matmul(const Tensor& a, const Tensor& b) {
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += a.data()[i * k + p] * b.data()[p * n + j];
      out[i * n + j] = acc;
    }
  }
  return Tensor::from({m, n}, std::move(out));
}

// y = x w + b over the last axis of x
inline Tensor loop_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int64_t din = w.shape()[0], dout = w.shape()[1];
  const int64_t rows = x.size() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  std::vector<double> out(rows * dout);
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < dout; ++j) {
      double acc = b.data()[j];
      for (int64_t i = 0; i < din; ++i) {
        acc += x.data()[r * din + i] * w.data()[i * dout + j];
      }
      out[r * dout + j] = acc;
    }
  }
  return Tensor::from(out_shape, std::move(out));
}

// single-example scaled dot-product attention with per-head loops;
// q,k,v: (s, d) already projected, returns pre-output-projection context
inline Tensor loop_attention_context(const Tensor& q, const Tensor& k, const Tensor& v,
                                     int heads) {
  const int64_t s = q.shape()[0], d = q.shape()[1];
  const int64_t dh = d / heads;
  std::vector<double> out(s * d, 0.0);
  for (int h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < s; ++i) {
      std::vector<double> scores(s);
      double mx = -1e300;
      for (int64_t j = 0; j < s; ++j) {
        double acc = 0.0;
        for (int64_t c = 0; c < dh; ++c) {
          acc += q.data()[i * d + h * dh + c] * k.data()[j * d + h * dh + c];
        }
        scores[j] = acc / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, scores[j]);
      }
      double z = 0.0;
      for (int64_t j = 0; j < s; ++j) z += std::exp(scores[j] - mx);
      for (int64_t j = 0; j < s; ++j) {
        const double w = std::exp(scores[j] - mx) / z;
        for (int64_t c = 0; c < dh; ++c) {
          out[i * d + h * dh + c] += w * v.data()[j * d + h * dh + c];
        }
      }
    }
  }
  return Tensor::from({s, d}, std::move(out));
}

// z[n,m,c] = (1/s) sum_s maps[n,m,s] * features[n,s,c]
inline Tensor loop_tokenize(const Tensor& features, const Tensor& maps) {
  const int64_t n = features.shape()[0], s = features.shape()[1], c = features.shape()[2];
  const int64_t m = maps.shape()[1];
  std::vector<double> out(n * m * c, 0.0);
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int64_t p = 0; p < s; ++p) {
          acc += features.data()[(b * s + p) * c + ch] * maps.data()[(b * m + i) * s + p];
        }
        out[(b * m + i) * c + ch] = acc / static_cast<double>(s);
      }
    }
  }
  return Tensor::from({n, m, c}, std::move(out));
}

// sum over examples and ordered pairs i != j of <a_i, a_j>^2, / n
inline double loop_diversity(const Tensor& maps) {
  const int64_t n = maps.shape()[0], m = maps.shape()[1], s = maps.shape()[2];
  double total = 0.0;
  for (int64_t k = 0; k < n; ++k) {
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < m; ++j) {
        if (i == j) continue;
        double dot = 0.0;
        for (int64_t p = 0; p < s; ++p) {
          dot += maps.data()[(k * m + i) * s + p] * maps.data()[(k * m + j) * s + p];
        }
        total += dot * dot;
      }
    }
  }
  return total / static_cast<double>(n);
}

inline Tensor loop_overlap(const Tensor& maps) {
  const int64_t n = maps.shape()[0], m = maps.shape()[1], s = maps.shape()[2];
  std::vector<double> out(n * m * m);
  for (int64_t k = 0; k < n; ++k) {
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < m; ++j) {
        double dot = 0.0;
        for (int64_t p = 0; p < s; ++p) {
          dot += maps.data()[(k * m + i) * s + p] * maps.data()[(k * m + j) * s + p];
        }
        out[(k * m + i) * m + j] = dot * dot;
      }
    }
  }
  return Tensor::from({n, m, m}, std::move(out));
}

// Backward-vs-finite-difference check of `forward_loss` with respect to every
// parameter in the store. Returns the worst rel err.
inline double store_gradcheck(dtok::ParameterStore& store,
                              const std::function<Tensor()>& forward_loss, double h = 1e-5) {
  dtok::Tape tape;
  Tensor loss;
  {
    dtok::TapeScope scope(tape);
    loss = forward_loss();
  }
  tape.backward(loss);

  double worst = 0.0;
  for (size_t p = 0; p < store.size(); ++p) {
    Tensor& param = store.at(p);
    const std::vector<double> analytic = param.grad_or_zeros();
    std::vector<double> fd(param.size());
    std::vector<double>& data = param.mutable_data();
    for (int64_t i = 0; i < param.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = forward_loss().item();
      data[i] = orig - h;
      const double fm = forward_loss().item();
      data[i] = orig;
      fd[i] = (fp - fm) / (2.0 * h);
    }
    worst = std::max(worst, dtok::max_rel_err(analytic, fd));
    param.clear_grad();
  }
  return worst;
}

// Same check for a single input tensor.
inline double input_gradcheck(Tensor& x, const std::function<Tensor()>& forward_loss,
                              double h = 1e-5) {
  x.set_requires_grad(true);
  dtok::Tape tape;
  Tensor loss;
  {
    dtok::TapeScope scope(tape);
    loss = forward_loss();
  }
  tape.backward(loss);
  const std::vector<double> analytic = x.grad_or_zeros();
  Tensor fd = dtok::finite_difference_grad(
      [&](const Tensor& probe) {
        std::vector<double> saved = x.data();
        x.mutable_data() = probe.data();
        const double out = forward_loss().item();
        x.mutable_data() = saved;
        return out;
      },
      x, h);
  x.clear_grad();
  return dtok::max_rel_err(analytic, fd.data());
}

}  // namespace oracles

#endif  // DTOK_TESTS_ORACLES_HPP
