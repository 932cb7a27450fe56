#include "hicl/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hicl {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  value.require_finite("constant");
  nodes_.push_back(Node{std::move(value), Tensor(), false, false, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Parameter& param) {
  param.value.require_finite("parameter");
  const bool tracked = grad_enabled_ && param.requires_grad;
  nodes_.push_back(Node{param.value, Tensor(), false, tracked, {}, tracked ? &param : nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  value.require_finite("operation output");
  bool needs_grad = false;
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw Error("operation mixes values from different tapes");
    needs_grad = needs_grad || nodes_[in.id_].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Tensor(), false, needs_grad, needs_grad ? std::move(backward) : BackwardFn{},
                        nullptr});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(const Var& v) {
  Node& node = nodes_.at(v.id_);
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape());
    node.has_grad = true;
  }
  return node.grad;
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  if (!requires_grad(v.id_)) return;
  Tensor& buf = grad_buffer(v);
  if (!buf.same_shape(g)) {
    throw DimensionError("gradient shape " + shape_string(g.shape()) + " does not match value shape " +
                         shape_string(buf.shape()));
  }
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(const Var& loss) {
  if (loss.tape_ != this) throw Error("backward: loss belongs to another tape");
  if (loss.value().size() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  for (Node& node : nodes_) {
    node.has_grad = false;
    node.grad = Tensor();
  }
  last_visits_ = 0;
  if (!requires_grad(loss.id_)) return;
  grad_buffer(loss).fill(1.0);

  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.has_grad) continue;
    if (node.backward) {
      ++last_visits_;
      // The rule may append to other nodes' grads but never to this one.
      const Tensor out_grad = node.grad;
      node.backward(*this, out_grad);
    } else if (node.param != nullptr) {
      node.grad.require_finite("parameter gradient");
      if (!node.param->grad.same_shape(node.param->value)) node.param->zero_grad();
      auto dst = node.param->grad.data();
      auto src = node.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
}

namespace {

enum class Broadcast { none, left_scalar, right_scalar };

Broadcast check_binary(const Var& a, const Var& b, const char* op) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.same_shape(y)) return Broadcast::none;
  if (y.size() == 1) return Broadcast::right_scalar;
  if (x.size() == 1) return Broadcast::left_scalar;
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(x.shape()) + " vs " +
                       shape_string(y.shape()));
}

/// Reduces a full-shape gradient to the operand's shape (sum when the operand was broadcast).
Tensor reduce_to(const Tensor& g, const Tensor& operand) {
  if (operand.same_shape(g)) return g;
  double s = std::accumulate(g.data().begin(), g.data().end(), 0.0);
  return Tensor(operand.shape(), s);
}

template <typename F>
Tensor binary_values(const Tensor& x, const Tensor& y, Broadcast bc, F f) {
  const Tensor& big = bc == Broadcast::left_scalar ? y : x;
  Tensor out(big.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double xv = bc == Broadcast::left_scalar ? x[0] : x[i];
    const double yv = bc == Broadcast::right_scalar ? y[0] : y[i];
    out[i] = f(xv, yv);
  }
  return out;
}

template <typename F, typename D>
Var unary(const Var& a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return a.tape().record(std::move(out), {a}, [a, dfdx](Tape& t, const Tensor& g) {
    const Tensor& xv = a.value();
    Tensor dx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] = g[i] * dfdx(xv[i]);
    t.accumulate(a, dx);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  const Broadcast bc = check_binary(a, b, "add");
  Tensor out = binary_values(a.value(), b.value(), bc, [](double x, double y) { return x + y; });
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, reduce_to(g, a.value()));
    t.accumulate(b, reduce_to(g, b.value()));
  });
}

Var sub(const Var& a, const Var& b) {
  const Broadcast bc = check_binary(a, b, "sub");
  Tensor out = binary_values(a.value(), b.value(), bc, [](double x, double y) { return x - y; });
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, reduce_to(g, a.value()));
    Tensor neg = reduce_to(g, b.value());
    for (double& v : neg.data()) v = -v;
    t.accumulate(b, neg);
  });
}

Var mul(const Var& a, const Var& b) {
  const Broadcast bc = check_binary(a, b, "mul");
  Tensor out = binary_values(a.value(), b.value(), bc, [](double x, double y) { return x * y; });
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    auto at = [](const Tensor& v, std::size_t i) { return v.size() == 1 ? v[0] : v[i]; };
    if (a.requires_grad()) {
      Tensor full(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) full[i] = g[i] * at(y, i);
      t.accumulate(a, reduce_to(full, x));
    }
    if (b.requires_grad()) {
      Tensor full(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) full[i] = g[i] * at(x, i);
      t.accumulate(b, reduce_to(full, y));
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary(a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Var add_scalar(const Var& a, double offset) {
  return unary(a, [offset](double x) { return x + offset; }, [](double) { return 1.0; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sin(const Var& a) {
  return unary(a, [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); });
}

Var sigmoid(const Var& a) {
  auto s = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary(a, s, [s](double x) {
    const double y = s(x);
    return y * (1.0 - y);
  });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var abs(const Var& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var matmul(const Var& a, const Var& b) {
  Tensor out = matmul_values(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) t.accumulate(a, matmul_nt(g, b.value()));
    if (b.requires_grad()) t.accumulate(b, matmul_tn(a.value(), g));
  });
}

Var add_row_bias(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_row_bias: bias " + shape_string(bv.shape()) + " vs input " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return x.tape().record(std::move(out), {x, bias}, [x, bias](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (bias.requires_grad()) {
      Tensor db(bias.value().shape());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) db[c] += row[c];
      }
      t.accumulate(bias, db);
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) { return add_row_bias(matmul(x, weight), bias); }

Var sum(const Var& a) {
  const Tensor& x = a.value();
  const double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  return a.tape().record(Tensor::scalar(s), {a},
                         [a](Tape& t, const Tensor& g) { t.accumulate(a, Tensor(a.value().shape(), g[0])); });
}

Var mean(const Var& a) {
  const Tensor& x = a.value();
  const double n = static_cast<double>(x.size());
  const double s = std::accumulate(x.data().begin(), x.data().end(), 0.0) / n;
  return a.tape().record(Tensor::scalar(s), {a},
                         [a, n](Tape& t, const Tensor& g) { t.accumulate(a, Tensor(a.value().shape(), g[0] / n)); });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (xv.rank() == 0 || d < 2) throw DimensionError("layer_norm needs at least 2 features, got " + shape_string(xv.shape()));
  if (gain.value().size() != d || bias.value().size() != d) throw DimensionError("layer_norm: gain/bias length mismatch");
  if (!(eps >= 0.0)) throw ParameterError("layer_norm: eps must be nonnegative");

  const std::size_t rows = xv.rows();
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto in = xv.row(r);
    double mu = std::accumulate(in.begin(), in.end(), 0.0) / static_cast<double>(d);
    double residual = 0.0;
    for (double v : in) residual += v - mu;
    mu += residual / static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    auto out = xhat.row(r);
    for (std::size_t c = 0; c < d; ++c) out[c] = (in[c] - mu) * inv_std[r];
  }
  Tensor y(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < d; ++c) y.at(r, c) = xhat.at(r, c) * gv[c] + bv[c];
  }
  return x.tape().record(std::move(y), {x, gain, bias},
                         [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
                           const std::size_t d = xhat.cols();
                           const double dd = static_cast<double>(d);
                           const Tensor& gv = gain.value();
                           if (x.requires_grad()) {
                             Tensor dx(xhat.shape());
                             for (std::size_t r = 0; r < xhat.rows(); ++r) {
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t c = 0; c < d; ++c) {
                                 const double dxh = g.at(r, c) * gv[c];
                                 s1 += dxh;
                                 s2 += dxh * xhat.at(r, c);
                               }
                               for (std::size_t c = 0; c < d; ++c) {
                                 const double dxh = g.at(r, c) * gv[c];
                                 dx.at(r, c) = inv_std[r] / dd * (dd * dxh - s1 - xhat.at(r, c) * s2);
                               }
                             }
                             t.accumulate(x, dx);
                           }
                           if (gain.requires_grad() || bias.requires_grad()) {
                             Tensor dg(gain.value().shape());
                             Tensor db(bias.value().shape());
                             for (std::size_t r = 0; r < xhat.rows(); ++r) {
                               for (std::size_t c = 0; c < d; ++c) {
                                 dg[c] += g.at(r, c) * xhat.at(r, c);
                                 db[c] += g.at(r, c);
                               }
                             }
                             t.accumulate(gain, dg);
                             t.accumulate(bias, db);
                           }
                         });
}

Var layer_norm(const Var& x, double eps) {
  const std::size_t d = x.value().cols();
  Tape& t = x.tape();
  return layer_norm(x, t.constant(Tensor(Shape{d}, 1.0)), t.constant(Tensor(Shape{d}, 0.0)), eps);
}

Var softmax(const Var& x, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax: temperature must be > 0, got " + std::to_string(temperature));
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const auto in = xv.row(r);
    auto out = y.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      out[c] = std::exp((in[c] - mx) / temperature);
      z += out[c];
    }
    for (double& v : out) v /= z;
  }
  Tensor saved = y;
  return x.tape().record(std::move(y), {x}, [x, temperature, y = std::move(saved)](Tape& t, const Tensor& g) {
    Tensor dx(y.shape());
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g.at(r, c) * y.at(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) dx.at(r, c) = y.at(r, c) * (g.at(r, c) - dot) / temperature;
    }
    t.accumulate(x, dx);
  });
}

Var cross_entropy_rows(const Var& logits, std::span<const std::size_t> labels) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2) throw DimensionError("cross_entropy: logits must be a matrix, got " + shape_string(lv.shape()));
  const std::size_t rows = lv.rows(), classes = lv.cols();
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  Tensor probs(lv.shape());
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= classes) {
      throw DataError("label " + std::to_string(labels[r]) + " out of range for " + std::to_string(classes) + " classes");
    }
    const auto in = lv.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (double v : in) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    out[r] = lse - in[labels[r]];
    for (std::size_t c = 0; c < classes; ++c) probs.at(r, c) = std::exp(in[c] - lse);
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return logits.tape().record(std::move(out), {logits},
                              [logits, probs = std::move(probs), lab = std::move(lab)](Tape& t, const Tensor& g) {
                                Tensor dl = probs;
                                for (std::size_t r = 0; r < dl.rows(); ++r) {
                                  dl.at(r, lab[r]) -= 1.0;
                                  for (double& v : dl.row(r)) v *= g[r];
                                }
                                t.accumulate(logits, dl);
                              });
}

std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
  if (k > values.size()) throw ParameterError("top_k: k exceeds length");
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    return values[a] > values[b] || (values[a] == values[b] && a < b);
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

TopK top_k(const Var& x, std::size_t k) {
  const Tensor& xv = x.value();
  if (k == 0 || k > xv.cols()) {
    throw ParameterError("top_k: k=" + std::to_string(k) + " invalid for " + std::to_string(xv.cols()) + " features");
  }
  TopK result;
  result.active.reserve(xv.rows());
  Tensor mask(xv.shape());
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto kept = top_k_indices(xv.row(r), k);
    for (std::size_t c : kept) {
      mask.at(r, c) = 1.0;
      out.at(r, c) = xv.at(r, c);
    }
    result.active.push_back(std::move(kept));
  }
  result.values = x.tape().record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, const Tensor& g) {
    Tensor dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask[i];
    t.accumulate(x, dx);
  });
  return result;
}

Var concat_cols(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows()) {
    throw DimensionError("concat_cols: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  const std::size_t m = av.cols(), n = bv.cols();
  Tensor out(Shape{av.rows(), m + n});
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy(av.row(r).begin(), av.row(r).end(), out.row(r).begin());
    std::copy(bv.row(r).begin(), bv.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(m));
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, m, n](Tape& t, const Tensor& g) {
    Tensor da(Shape{g.rows(), m});
    Tensor db(Shape{g.rows(), n});
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const auto row = g.row(r);
      std::copy(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(m), da.row(r).begin());
      std::copy(row.begin() + static_cast<std::ptrdiff_t>(m), row.end(), db.row(r).begin());
    }
    t.accumulate(a, da);
    t.accumulate(b, db);
  });
}

Var cosine_rows(const Var& x, const Tensor& u) {
  const Tensor& xv = x.value();
  if (u.size() != xv.cols()) {
    throw DimensionError("cosine_rows: vector length " + std::to_string(u.size()) + " vs " + std::to_string(xv.cols()));
  }
  constexpr double kTiny = 1e-12;
  double unorm = 0.0;
  for (double v : u.data()) unorm += v * v;
  unorm = std::sqrt(unorm);
  const std::size_t rows = xv.rows();
  Tensor out(Shape{rows});
  std::vector<double> xnorm(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = xv.row(r);
    double dot = 0.0, nn = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      dot += row[c] * u[c];
      nn += row[c] * row[c];
    }
    xnorm[r] = std::sqrt(nn);
    out[r] = (xnorm[r] < kTiny || unorm < kTiny) ? 0.0 : dot / (xnorm[r] * unorm);
  }
  Tensor cosines = out;
  return x.tape().record(std::move(out), {x},
                         [x, u, unorm, xnorm = std::move(xnorm), cosines = std::move(cosines)](Tape& t, const Tensor& g) {
                           const Tensor& xv = x.value();
                           Tensor dx(xv.shape());
                           for (std::size_t r = 0; r < xv.rows(); ++r) {
                             if (xnorm[r] < kTiny || unorm < kTiny) continue;
                             const auto row = xv.row(r);
                             for (std::size_t c = 0; c < row.size(); ++c) {
                               dx.at(r, c) = g[r] * (u[c] / (xnorm[r] * unorm) - cosines[r] * row[c] / (xnorm[r] * xnorm[r]));
                             }
                           }
                           t.accumulate(x, dx);
                         });
}

}  // namespace hicl
