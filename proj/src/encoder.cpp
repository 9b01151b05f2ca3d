#include "unidet/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "unidet/random.hpp"

namespace unidet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

Tensor normed(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  return rowwise_affine(layernorm(x), gain, bias);
}

// Row order determined by feature values alone: permuting the input rows
// never changes what the stack computes, only how results map back.
std::vector<int> canonical_order(const Tensor& x) {
  const std::size_t m = x.rows(), c = x.cols();
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  const double* d = x.data();
  std::sort(order.begin(), order.end(), [d, c](int a, int b) {
    const double* ra = d + static_cast<std::size_t>(a) * c;
    const double* rb = d + static_cast<std::size_t>(b) * c;
    for (std::size_t j = 0; j < c; ++j) {
      if (ra[j] != rb[j]) return ra[j] < rb[j];
    }
    return a < b;
  });
  return order;
}

std::string head_name(std::size_t h) {
  std::ostringstream s;
  s << "head" << (h < 10 ? "0" : "") << h;
  return s.str();
}

void append_layer_params(const std::string& prefix, const EncoderLayer& layer,
                         std::vector<std::pair<std::string, Tensor>>& out) {
  for (std::size_t h = 0; h < layer.wq.size(); ++h) {
    const std::string base = prefix + ".attn." + head_name(h);
    out.emplace_back(base + ".wq", layer.wq[h]);
    out.emplace_back(base + ".wk", layer.wk[h]);
    out.emplace_back(base + ".wv", layer.wv[h]);
  }
  out.emplace_back(prefix + ".attn.wo", layer.wo);
  out.emplace_back(prefix + ".attn.bo", layer.bo);
  out.emplace_back(prefix + ".ln1.gain", layer.ln1_gain);
  out.emplace_back(prefix + ".ln1.bias", layer.ln1_bias);
  out.emplace_back(prefix + ".ffn.w1", layer.w1);
  out.emplace_back(prefix + ".ffn.b1", layer.b1);
  out.emplace_back(prefix + ".ffn.w2", layer.w2);
  out.emplace_back(prefix + ".ffn.b2", layer.b2);
  out.emplace_back(prefix + ".ln2.gain", layer.ln2_gain);
  out.emplace_back(prefix + ".ln2.bias", layer.ln2_bias);
}

}  // namespace

void validate_encoder_config(const EncoderConfig& config) {
  if (config.model_dim == 0) fail("encoder: model_dim must be positive");
  if (config.heads == 0) fail("encoder: heads must be positive");
  if (config.model_dim % config.heads != 0) {
    fail("encoder: model_dim " + std::to_string(config.model_dim) +
         " is not divisible by heads " + std::to_string(config.heads));
  }
}

Encoder make_encoder(const EncoderConfig& config, Rng& rng) {
  validate_encoder_config(config);
  Encoder enc;
  enc.config = config;
  if (enc.config.ffn_dim == 0) enc.config.ffn_dim = 4 * config.model_dim;
  const std::size_t c = config.model_dim;
  const std::size_t dh = c / config.heads;
  const std::size_t f = enc.config.ffn_dim;
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderLayer layer;
    for (std::size_t h = 0; h < config.heads; ++h) {
      layer.wq.push_back(init_uniform({c, dh}, c, rng));
      layer.wk.push_back(init_uniform({c, dh}, c, rng));
      layer.wv.push_back(init_uniform({c, dh}, c, rng));
    }
    layer.wo = init_uniform({c, c}, c, rng);
    layer.bo = init_uniform({c}, c, rng);
    layer.ln1_gain = Tensor::full({c}, 1.0, true);
    layer.ln1_bias = Tensor::zeros({c}, true);
    layer.w1 = init_uniform({c, f}, c, rng);
    layer.b1 = init_uniform({f}, c, rng);
    layer.w2 = init_uniform({f, c}, f, rng);
    layer.b2 = init_uniform({c}, f, rng);
    layer.ln2_gain = Tensor::full({c}, 1.0, true);
    layer.ln2_bias = Tensor::zeros({c}, true);
    enc.layers.push_back(std::move(layer));
  }
  if (config.use_positional_encoding) {
    enc.pe_w = init_uniform({3, c}, 3, rng);
    enc.pe_b = init_uniform({c}, 3, rng);
  }
  return enc;
}

void validate_query_set(const QuerySet& qs) {
  if (!qs.features.defined() || qs.features.ndim() != 2 ||
      qs.features.rows() == 0) {
    fail("query set: features must be a non-empty M x C matrix");
  }
  if (qs.superpoint.size() != qs.features.rows() ||
      qs.centers.size() != qs.features.rows()) {
    fail("query set: superpoint origins and centers must match the feature "
         "rows");
  }
}

AttentionResult self_attention(const Tensor& x, const EncoderLayer& layer,
                               std::size_t heads) {
  if (heads == 0 || layer.wq.size() != heads) {
    fail("self_attention: layer does not hold the requested head count");
  }
  const Tensor y = normed(x, layer.ln1_gain, layer.ln1_bias);
  const std::size_t dh = layer.wq[0].cols();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionResult result;
  std::vector<Tensor> head_out;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor q = matmul(y, layer.wq[h]);
    const Tensor k = matmul(y, layer.wk[h]);
    const Tensor v = matmul(y, layer.wv[h]);
    const Tensor weights = softmax(scale(matmul(q, transpose(k)), inv_scale));
    result.weights.push_back(weights);
    head_out.push_back(matmul(weights, v));
  }
  const Tensor merged = heads == 1 ? head_out[0] : concat_cols(head_out);
  result.output = add(x, affine(merged, layer.wo, layer.bo));
  return result;
}

Tensor encoder_block(const Tensor& x, const EncoderLayer& layer,
                     std::size_t heads) {
  const Tensor a = self_attention(x, layer, heads).output;
  const Tensor y = normed(a, layer.ln2_gain, layer.ln2_bias);
  const Tensor f = affine(relu(affine(y, layer.w1, layer.b1)), layer.w2,
                          layer.b2);
  return add(a, f);
}

Tensor encode(const Encoder& encoder, const QuerySet& qs) {
  validate_encoder_config(encoder.config);
  validate_query_set(qs);
  if (qs.features.cols() != encoder.config.model_dim) {
    fail("encode: query features have " + std::to_string(qs.features.cols()) +
         " channels, encoder expects " +
         std::to_string(encoder.config.model_dim));
  }
  if (encoder.config.layers == 0) return qs.features;
  if (encoder.layers.size() != encoder.config.layers) {
    fail("encode: encoder holds " + std::to_string(encoder.layers.size()) +
         " layers, config says " + std::to_string(encoder.config.layers));
  }

  Tensor x = qs.features;
  if (encoder.config.use_positional_encoding) {
    std::vector<double> flat;
    flat.reserve(qs.centers.size() * 3);
    for (const auto& c : qs.centers) {
      flat.push_back(c[0]);
      flat.push_back(c[1]);
      flat.push_back(c[2]);
    }
    const Tensor centers = Tensor::from({qs.centers.size(), 3}, std::move(flat));
    x = add(x, affine(centers, encoder.pe_w, encoder.pe_b));
  }

  const std::vector<int> order = canonical_order(x);
  std::vector<int> inverse(order.size());
  for (std::size_t p = 0; p < order.size(); ++p) inverse[order[p]] = static_cast<int>(p);

  Tensor sorted = gather_rows(x, order);
  for (const EncoderLayer& layer : encoder.layers) {
    sorted = encoder_block(sorted, layer, encoder.config.heads);
  }
  return gather_rows(sorted, inverse);
}

std::vector<std::pair<std::string, Tensor>> encoder_parameters(
    const Encoder& encoder) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < encoder.layers.size(); ++l) {
    append_layer_params("layer" + std::to_string(l), encoder.layers[l], out);
  }
  if (encoder.config.use_positional_encoding) {
    out.emplace_back("pe.weight", encoder.pe_w);
    out.emplace_back("pe.bias", encoder.pe_b);
  }
  return out;
}

}  // namespace unidet
