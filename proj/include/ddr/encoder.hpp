#pragma once

// Dual encoder with prefix-injected multi-head attention.
//
// Passage encoder: every layer attends over [P^g ; context].
// Query encoder:   every layer pools its input to x_l, routes beta_l = softmax(W_r x_l),
//                  and attends over the composed prefix (see compose_prefix).
// Plain encoder:   no prefix at all; used for backbone warm-up.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddr/model.hpp"
#include "ddr/ops.hpp"
#include "ddr/routing.hpp"

namespace ddr {

using TokenIds = std::vector<std::int32_t>;

enum class EncoderRole { Plain, Passage, Query };

template <typename T>
struct LayerTape {
  Tensor<T> input;         // [seq x d]
  Tensor<T> router_input;  // [d], query role only
  Tensor<T> beta;          // [N], query role with a router-driven strategy
  Selection<T> selection;  // query role only
  PrefixPair<T> prefix;    // what the layer attended to
  Tensor<T> q, k, v;       // [seq x d]
  std::vector<Tensor<T>> probs;  // per head [seq x (prefix + seq)]
  Tensor<T> context;             // concatenated head outputs [seq x d]
  Tensor<T> resid1;
  LayerNormCache<T> ln1;
  Tensor<T> hidden;
  Tensor<T> ffn_pre, ffn_act;
  Tensor<T> resid2;
  LayerNormCache<T> ln2;
  Tensor<T> output;
};

/// Everything the backward pass needs from one forward call.
template <typename T>
struct ActivationTape {
  EncoderRole role = EncoderRole::Plain;
  TokenIds tokens;
  RoutingStrategy strategy;
  std::optional<std::vector<std::size_t>> task_domains;
  std::vector<LayerTape<T>> layers;
  Tensor<T> pooled;
};

template <typename T>
struct Encoding {
  Tensor<T> embedding;
  ActivationTape<T> tape;
};

/// Gradients of every trainable quantity. Backbone gradients are only
/// collected when `backbone` is engaged (backbone warm-up).
template <typename T>
struct Gradients {
  PrefixBank<T> prefixes;
  Tensor<T> router;
  std::optional<Backbone<T>> backbone;

  static Gradients zeros(const ModelConfig& c, bool with_backbone = false) {
    Gradients g{PrefixBank<T>::zeros(c), Tensor<T>({c.num_domains, c.model_dim}), std::nullopt};
    if (with_backbone) g.backbone = Backbone<T>::zeros(c);
    return g;
  }

  void accumulate(Gradients& other) {
    auto dst = tensors();
    auto src = other.tensors();
    if (dst.size() != src.size()) throw ShapeError("gradient accumulate: layout mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) add_into(*src[i], *dst[i]);
  }

  void scale(T factor) {
    for (Tensor<T>* t : tensors()) {
      for (auto& v : t->span()) v *= factor;
    }
  }

  std::vector<Tensor<T>*> tensors() {
    std::vector<Tensor<T>*> out;
    prefixes.for_each([&](Tensor<T>& t) { out.push_back(&t); });
    out.push_back(&router);
    if (backbone) backbone->for_each([&](Tensor<T>& t) { out.push_back(&t); });
    return out;
  }
};

inline void warn(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

namespace detail {

inline TokenIds checked_tokens(const TokenIds& tokens, const ModelConfig& c) {
  if (tokens.empty()) throw Error("encoder: empty token sequence");
  for (auto id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw Error("encoder: token id " + std::to_string(id) + " outside vocabulary of size " +
                  std::to_string(c.vocab_size));
    }
  }
  if (tokens.size() > c.max_seq_len) {
    warn("encoder: truncating sequence of length " + std::to_string(tokens.size()) + " to " +
         std::to_string(c.max_seq_len));
    return TokenIds(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(c.max_seq_len));
  }
  return tokens;
}

template <typename T>
Tensor<T> embed(const TokenIds& tokens, const Backbone<T>& b, const ModelConfig& c) {
  Tensor<T> x({tokens.size(), c.model_dim});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto tok = b.token_embedding.row(static_cast<std::size_t>(tokens[t]));
    const auto pos = b.position_embedding.row(t);
    for (std::size_t e = 0; e < c.model_dim; ++e) x(t, e) = tok[e] + pos[e];
  }
  return x;
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  Tensor<T> m({x.cols()});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t e = 0; e < x.cols(); ++e) m[e] += x(r, e);
  }
  const T inv = T{1} / static_cast<T>(x.rows());
  for (auto& v : m.span()) v *= inv;
  return m;
}

template <typename T>
Tensor<T> add_bias_rows(Tensor<T> x, const Tensor<T>& bias) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t e = 0; e < x.cols(); ++e) x(r, e) += bias[e];
  }
  return x;
}

}  // namespace detail

/// Multi-head attention whose keys and values are prefixed per head:
/// head_i = softmax(Q_i [P_k,i ; K_i]^T / sqrt(d_h)) [P_v,i ; V_i], output = concat(heads) W_o.
/// When `tape` is given, projections and attention probabilities are recorded.
template <typename T>
Tensor<T> prefix_attention(const Tensor<T>& x, const PrefixPair<T>& prefix,
                           const LayerWeights<T>& w, const ModelConfig& c,
                           LayerTape<T>* tape = nullptr) {
  const std::size_t seq = x.rows(), H = c.num_heads, dh = c.head_dim;
  require_shape(x, {seq, c.model_dim}, "prefix_attention input");
  const std::size_t lp = prefix.length();
  require_shape(prefix.key, {H, lp, dh}, "prefix_attention prefix key");
  require_shape(prefix.value, {H, lp, dh}, "prefix_attention prefix value");

  Tensor<T> q = matmul(x, w.wq);
  Tensor<T> k = matmul(x, w.wk);
  Tensor<T> v = matmul(x, w.wv);
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  const std::size_t keys = lp + seq;

  Tensor<T> context({seq, c.model_dim});
  std::vector<Tensor<T>> probs;
  probs.reserve(H);
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t col = h * dh;
    Tensor<T> p({seq, keys});
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t j = 0; j < keys; ++j) {
        T acc{0};
        if (j < lp) {
          for (std::size_t e = 0; e < dh; ++e) acc += q(i, col + e) * prefix.key(h, j, e);
        } else {
          for (std::size_t e = 0; e < dh; ++e) acc += q(i, col + e) * k(j - lp, col + e);
        }
        p(i, j) = acc * scale;
      }
      softmax_inplace(p.row(i));
      for (std::size_t j = 0; j < keys; ++j) {
        const T a = p(i, j);
        if (j < lp) {
          for (std::size_t e = 0; e < dh; ++e) context(i, col + e) += a * prefix.value(h, j, e);
        } else {
          for (std::size_t e = 0; e < dh; ++e) context(i, col + e) += a * v(j - lp, col + e);
        }
      }
    }
    probs.push_back(std::move(p));
  }
  Tensor<T> out = matmul(context, w.wo);
  if (tape) {
    tape->q = std::move(q);
    tape->k = std::move(k);
    tape->v = std::move(v);
    tape->probs = std::move(probs);
    tape->context = std::move(context);
  }
  return out;
}

/// One full transformer layer given the prefix it should attend to.
template <typename T>
Tensor<T> layer_forward(const Tensor<T>& input, const PrefixPair<T>& prefix,
                        const LayerWeights<T>& w, const ModelConfig& c, LayerTape<T>& tape) {
  tape.input = input;
  tape.prefix = prefix;
  Tensor<T> attn = prefix_attention(input, prefix, w, c, &tape);
  tape.resid1 = input;
  add_into(attn, tape.resid1);
  tape.hidden = layer_norm_rows(tape.resid1, w.ln1_gain, w.ln1_bias, tape.ln1);
  tape.ffn_pre = detail::add_bias_rows(matmul(tape.hidden, w.w1), w.b1);
  tape.ffn_act = gelu(tape.ffn_pre);
  Tensor<T> ffn_out = detail::add_bias_rows(matmul(tape.ffn_act, w.w2), w.b2);
  tape.resid2 = tape.hidden;
  add_into(ffn_out, tape.resid2);
  tape.output = layer_norm_rows(tape.resid2, w.ln2_gain, w.ln2_bias, tape.ln2);
  return tape.output;
}

/// Shared forward path for the three encoder roles.
template <typename T>
Encoding<T> encode(const TokenIds& raw_tokens, EncoderRole role, const ModelConfig& c,
                   const Backbone<T>& backbone, const PrefixBank<T>* bank,
                   const Router<T>* router, const std::vector<std::size_t>* task_domains) {
  Encoding<T> enc;
  auto& tape = enc.tape;
  tape.role = role;
  tape.tokens = detail::checked_tokens(raw_tokens, c);
  if (role == EncoderRole::Query) {
    tape.strategy = router->strategy;
    tape.strategy.validate(c.num_domains);
    if (tape.strategy.needs_task_domains()) {
      if (!task_domains || task_domains->empty()) {
        throw Error("encode_query: routing strategy '" + tape.strategy.name() +
                    "' requires a task label");
      }
      tape.task_domains = *task_domains;
    }
  }
  const PrefixPair<T> empty = PrefixPair<T>::zeros(c.num_heads, 0, c.head_dim);

  Tensor<T> x = detail::embed(tape.tokens, backbone, c);
  tape.layers.resize(c.num_layers);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    auto& lt = tape.layers[l];
    const PrefixPair<T>* prefix = &empty;
    PrefixPair<T> composed;
    if (role == EncoderRole::Passage) {
      prefix = &bank->general[l];
    } else if (role == EncoderRole::Query) {
      lt.router_input = detail::mean_rows(x);
      if (tape.strategy.uses_router()) {
        lt.beta = route_distribution<T>(lt.router_input.span(), router->weights);
      } else {
        lt.beta = Tensor<T>({c.num_domains});
      }
      lt.selection = select_active(lt.beta, tape.strategy,
                                   tape.task_domains ? &*tape.task_domains : nullptr);
      composed = compose_prefix<T>(lt.selection.weights.span(), *bank, l, c);
      prefix = &composed;
    }
    x = layer_forward(x, *prefix, backbone.layers[l], c, lt);
  }

  const Tensor<T>& last = tape.layers.back().output;
  if (c.pooling == Pooling::FirstToken) {
    enc.embedding = Tensor<T>({c.model_dim}, std::vector<T>(last.row(0).begin(), last.row(0).end()));
  } else {
    enc.embedding = detail::mean_rows(last);
  }
  tape.pooled = enc.embedding;
  return enc;
}

/// z_p = f_p(p; P^g). Domain prefixes and the router are never read.
template <typename T>
Encoding<T> encode_passage(const TokenIds& tokens, const ModelConfig& c,
                           const Backbone<T>& backbone, const PrefixBank<T>& bank) {
  return encode<T>(tokens, EncoderRole::Passage, c, backbone, &bank, nullptr, nullptr);
}

/// z_q = f_q(q; P^g, P^d) with routing per the router's strategy.
template <typename T>
Encoding<T> encode_query(const TokenIds& tokens, const ModelConfig& c, const Backbone<T>& backbone,
                         const PrefixBank<T>& bank, const Router<T>& router,
                         const std::vector<std::size_t>* task_domains = nullptr) {
  return encode<T>(tokens, EncoderRole::Query, c, backbone, &bank, &router, task_domains);
}

/// Backbone only, no prefixes.
template <typename T>
Encoding<T> encode_plain(const TokenIds& tokens, const ModelConfig& c, const Backbone<T>& backbone) {
  return encode<T>(tokens, EncoderRole::Plain, c, backbone, nullptr, nullptr, nullptr);
}

template <typename T>
Encoding<T> encode_passage(const Model<T>& m, const TokenIds& tokens) {
  return encode_passage(tokens, m.config, m.backbone, m.prefixes);
}

template <typename T>
Encoding<T> encode_query(const Model<T>& m, const TokenIds& tokens,
                         const std::vector<std::size_t>* task_domains = nullptr) {
  return encode_query(tokens, m.config, m.backbone, m.prefixes, m.router, task_domains);
}

namespace detail {

/// Backward through one layer. Returns d loss / d layer input and adds the
/// prefix gradient to `dprefix`. Backbone gradients go to `dw` when non-null.
template <typename T>
Tensor<T> layer_backward(const LayerTape<T>& lt, const LayerWeights<T>& w, const ModelConfig& c,
                         const Tensor<T>& dout, PrefixPair<T>& dprefix, LayerWeights<T>* dw) {
  const std::size_t seq = lt.input.rows(), H = c.num_heads, dh = c.head_dim;
  const std::size_t lp = lt.prefix.length(), keys = lp + seq;

  Tensor<T> dresid2 = layer_norm_rows_backward(lt.resid2, w.ln2_gain, lt.ln2, dout,
                                               dw ? &dw->ln2_gain : nullptr,
                                               dw ? &dw->ln2_bias : nullptr);
  // resid2 = hidden + act W2 + b2
  Tensor<T> dact = matmul_nt(dresid2, w.w2);
  if (dw) {
    add_into(matmul_tn(lt.ffn_act, dresid2), dw->w2);
    for (std::size_t r = 0; r < seq; ++r) axpy<T>(T{1}, dresid2.row(r), dw->b2.span());
  }
  Tensor<T> dpre(lt.ffn_pre.shape());
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] = dact[i] * gelu_derivative(lt.ffn_pre[i]);
  Tensor<T> dhidden = matmul_nt(dpre, w.w1);
  add_into(dresid2, dhidden);
  if (dw) {
    add_into(matmul_tn(lt.hidden, dpre), dw->w1);
    for (std::size_t r = 0; r < seq; ++r) axpy<T>(T{1}, dpre.row(r), dw->b1.span());
  }
  Tensor<T> dresid1 = layer_norm_rows_backward(lt.resid1, w.ln1_gain, lt.ln1, dhidden,
                                               dw ? &dw->ln1_gain : nullptr,
                                               dw ? &dw->ln1_bias : nullptr);
  // resid1 = input + context Wo
  Tensor<T> dinput = dresid1;
  Tensor<T> dcontext = matmul_nt(dresid1, w.wo);
  if (dw) add_into(matmul_tn(lt.context, dresid1), dw->wo);

  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  Tensor<T> dq({seq, c.model_dim}), dk({seq, c.model_dim}), dv({seq, c.model_dim});
  std::vector<T> dprob(keys), dscore(keys);
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t col = h * dh;
    const Tensor<T>& p = lt.probs[h];
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t j = 0; j < keys; ++j) {
        T acc{0};
        const T a = p(i, j);
        if (j < lp) {
          for (std::size_t e = 0; e < dh; ++e) {
            const T g = dcontext(i, col + e);
            acc += g * lt.prefix.value(h, j, e);
            dprefix.value(h, j, e) += a * g;
          }
        } else {
          for (std::size_t e = 0; e < dh; ++e) {
            const T g = dcontext(i, col + e);
            acc += g * lt.v(j - lp, col + e);
            dv(j - lp, col + e) += a * g;
          }
        }
        dprob[j] = acc;
      }
      softmax_backward<T>(p.row(i), dprob, dscore);
      for (std::size_t j = 0; j < keys; ++j) {
        const T g = dscore[j] * scale;
        if (j < lp) {
          for (std::size_t e = 0; e < dh; ++e) {
            dq(i, col + e) += g * lt.prefix.key(h, j, e);
            dprefix.key(h, j, e) += g * lt.q(i, col + e);
          }
        } else {
          for (std::size_t e = 0; e < dh; ++e) {
            dq(i, col + e) += g * lt.k(j - lp, col + e);
            dk(j - lp, col + e) += g * lt.q(i, col + e);
          }
        }
      }
    }
  }
  add_into(matmul_nt(dq, w.wq), dinput);
  add_into(matmul_nt(dk, w.wk), dinput);
  add_into(matmul_nt(dv, w.wv), dinput);
  if (dw) {
    add_into(matmul_tn(lt.input, dq), dw->wq);
    add_into(matmul_tn(lt.input, dk), dw->wk);
    add_into(matmul_tn(lt.input, dv), dw->wv);
  }
  return dinput;
}

}  // namespace detail

/// Reverse pass from d loss / d embedding. Adds into `grads`: the general
/// prefix, the domain prefixes, and W_r for whatever the forward pass touched,
/// plus backbone weights if `grads.backbone` is engaged.
template <typename T>
void encoder_backward(const ActivationTape<T>& tape, const Tensor<T>& grad_embedding,
                      const ModelConfig& c, const Backbone<T>& backbone, const PrefixBank<T>& bank,
                      const Router<T>& router, Gradients<T>& grads) {
  if (tape.layers.size() != c.num_layers || tape.pooled.size() != c.model_dim) {
    throw ShapeError("encoder_backward: tape does not match the model config");
  }
  require_shape(grad_embedding, {c.model_dim}, "encoder_backward grad_embedding");
  const std::size_t seq = tape.tokens.size();
  if (tape.layers.front().input.rows() != seq) {
    throw ShapeError("encoder_backward: tape sequence length mismatch");
  }

  Tensor<T> dx({seq, c.model_dim});
  if (c.pooling == Pooling::FirstToken) {
    for (std::size_t e = 0; e < c.model_dim; ++e) dx(0, e) = grad_embedding[e];
  } else {
    const T inv = T{1} / static_cast<T>(seq);
    for (std::size_t t = 0; t < seq; ++t) {
      for (std::size_t e = 0; e < c.model_dim; ++e) dx(t, e) = grad_embedding[e] * inv;
    }
  }

  for (std::size_t l = c.num_layers; l-- > 0;) {
    const auto& lt = tape.layers[l];
    PrefixPair<T> dprefix =
        PrefixPair<T>::zeros(c.num_heads, lt.prefix.length(), c.head_dim);
    LayerWeights<T>* dw = grads.backbone ? &grads.backbone->layers[l] : nullptr;
    Tensor<T> dinput = detail::layer_backward(lt, backbone.layers[l], c, dx, dprefix, dw);

    if (tape.role == EncoderRole::Passage) {
      add_into(dprefix.key, grads.prefixes.general[l].key);
      add_into(dprefix.value, grads.prefixes.general[l].value);
    } else if (tape.role == EncoderRole::Query) {
      Tensor<T> dweights = compose_prefix_backward<T>(lt.selection.weights.span(), bank, l, c,
                                                      dprefix, grads.prefixes);
      if (tape.strategy.uses_router()) {
        Tensor<T> dbeta = select_active_backward(lt.beta, lt.selection, tape.strategy, dweights);
        Tensor<T> dlogits({c.num_domains});
        softmax_backward<T>(lt.beta.span(), dbeta.span(), dlogits.span());
        std::vector<T> dpooled(c.model_dim, T{0});
        for (std::size_t n = 0; n < c.num_domains; ++n) {
          const T g = dlogits[n];
          for (std::size_t e = 0; e < c.model_dim; ++e) {
            grads.router(n, e) += g * lt.router_input[e];
            dpooled[e] += g * router.weights(n, e);
          }
        }
        const T inv = T{1} / static_cast<T>(seq);
        for (std::size_t t = 0; t < seq; ++t) {
          for (std::size_t e = 0; e < c.model_dim; ++e) dinput(t, e) += dpooled[e] * inv;
        }
      }
    }
    dx = std::move(dinput);
  }

  if (grads.backbone) {
    auto& gb = *grads.backbone;
    for (std::size_t t = 0; t < seq; ++t) {
      axpy<T>(T{1}, dx.row(t), gb.token_embedding.row(static_cast<std::size_t>(tape.tokens[t])));
      axpy<T>(T{1}, dx.row(t), gb.position_embedding.row(t));
    }
  }
}

template <typename T>
void encoder_backward(const ActivationTape<T>& tape, const Tensor<T>& grad_embedding,
                      const Model<T>& m, Gradients<T>& grads) {
  encoder_backward(tape, grad_embedding, m.config, m.backbone, m.prefixes, m.router, grads);
}

}  // namespace ddr
