#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "unidet/tensor.hpp"

namespace unidet {

class Rng;

struct EncoderConfig {
  std::size_t layers = 6;
  std::size_t heads = 8;
  std::size_t model_dim = 32;
  std::size_t ffn_dim = 0;  // 0 picks 4 * model_dim
  bool use_positional_encoding = false;
};

void validate_encoder_config(const EncoderConfig& config);

// One pre-norm block: x + attention(norm(x)) followed by x + ffn(norm(x)).
// Attention projections are stored per head.
struct EncoderLayer {
  std::vector<Tensor> wq, wk, wv;  // each model_dim x head_dim
  Tensor wo;                       // model_dim x model_dim
  Tensor bo;                       // [model_dim]
  Tensor ln1_gain, ln1_bias;       // [model_dim]
  Tensor w1, b1, w2, b2;           // ffn
  Tensor ln2_gain, ln2_bias;       // [model_dim]
};

struct Encoder {
  EncoderConfig config;
  std::vector<EncoderLayer> layers;
  Tensor pe_w;  // 3 x model_dim, only when use_positional_encoding
  Tensor pe_b;  // [model_dim]
};

Encoder make_encoder(const EncoderConfig& config, Rng& rng);

// Pooled superpoint features plus where each query came from.
struct QuerySet {
  Tensor features;                             // M x model_dim
  std::vector<int> superpoint;                 // M query -> superpoint index
  std::vector<std::array<double, 3>> centers;  // M mass centers
};

void validate_query_set(const QuerySet& qs);

// Attention sublayer with a pre-norm residual: output = x + Wo . concat of
// softmax(q kT / sqrt(d)) v per head. Weights are the per-head M x M
// attention matrices; every row sums to one.
struct AttentionResult {
  Tensor output;
  std::vector<Tensor> weights;
};

AttentionResult self_attention(const Tensor& x, const EncoderLayer& layer,
                               std::size_t heads);

Tensor encoder_block(const Tensor& x, const EncoderLayer& layer,
                     std::size_t heads);

// Full stack over the query features. layers = 0 returns the input as is.
// Queries are routed through a canonical row order internally, so permuting
// the input rows permutes the output rows exactly, bit for bit. With
// positional encoding enabled, a learned projection of the mass centers is
// added to the queries first.
Tensor encode(const Encoder& encoder, const QuerySet& qs);

std::vector<std::pair<std::string, Tensor>> encoder_parameters(
    const Encoder& encoder);

}  // namespace unidet
