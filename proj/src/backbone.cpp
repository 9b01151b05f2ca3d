#include "unidet/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "unidet/random.hpp"

namespace unidet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

bool coord_less(const std::array<int, 3>& a, const std::array<int, 3>& b) {
  return a < b;
}

int floor_div2(int x) { return x >> 1; }

std::size_t expected_taps(ConvMode mode) {
  return mode == ConvMode::submanifold ? 27 : 8;
}

void validate_layer(const SparseConvLayer& layer) {
  if (layer.in_channels == 0 || layer.out_channels == 0) {
    fail("sparse_conv: channel counts must be positive");
  }
  if (layer.taps.size() != expected_taps(layer.mode)) {
    fail("sparse_conv: layer has " + std::to_string(layer.taps.size()) +
         " taps, expected " + std::to_string(expected_taps(layer.mode)));
  }
  for (const Tensor& t : layer.taps) {
    if (t.ndim() != 2 || t.rows() != layer.in_channels ||
        t.cols() != layer.out_channels) {
      fail("sparse_conv: tap shape does not match the layer channels");
    }
  }
  if (layer.bias.ndim() != 1 || layer.bias.numel() != layer.out_channels) {
    fail("sparse_conv: bias length does not match out_channels");
  }
}

// Gather -> matmul -> scatter-add per tap, then a broadcast bias. Tap
// rulebooks are built over sorted coordinates, so accumulation order is a
// pure function of the input.
Tensor apply_taps(const Tensor& in_feats, const SparseConvLayer& layer,
                  const std::vector<std::vector<int>>& tap_in,
                  const std::vector<std::vector<int>>& tap_out,
                  std::size_t out_count) {
  Tensor ones_gain = Tensor::full({layer.out_channels}, 1.0);
  Tensor acc = Tensor::zeros({out_count, layer.out_channels});
  for (std::size_t t = 0; t < layer.taps.size(); ++t) {
    if (tap_in[t].empty()) continue;
    Tensor rows = gather_rows(in_feats, tap_in[t]);
    Tensor contrib = matmul(rows, layer.taps[t]);
    acc = add(acc, scatter_add_rows(contrib, tap_out[t], out_count));
  }
  return rowwise_affine(acc, ones_gain, layer.bias);
}

SparseTensor conv_submanifold(const SparseTensor& input,
                              const SparseConvLayer& layer) {
  const std::size_t k = input.coords.size();
  std::vector<std::vector<int>> tap_in(27), tap_out(27);
  for (std::size_t o = 0; o < k; ++o) {
    for (int tx = -1; tx <= 1; ++tx) {
      for (int ty = -1; ty <= 1; ++ty) {
        for (int tz = -1; tz <= 1; ++tz) {
          const std::array<int, 3> nb = {input.coords[o][0] + tx,
                                         input.coords[o][1] + ty,
                                         input.coords[o][2] + tz};
          const auto it = std::lower_bound(input.coords.begin(),
                                           input.coords.end(), nb, coord_less);
          if (it == input.coords.end() || *it != nb) continue;
          const std::size_t tap =
              static_cast<std::size_t>((tx + 1) * 9 + (ty + 1) * 3 + (tz + 1));
          tap_in[tap].push_back(static_cast<int>(it - input.coords.begin()));
          tap_out[tap].push_back(static_cast<int>(o));
        }
      }
    }
  }
  SparseTensor out;
  out.coords = input.coords;
  out.stride = input.stride;
  out.feats = apply_taps(input.feats, layer, tap_in, tap_out, k);
  return out;
}

SparseTensor conv_strided(const SparseTensor& input, const SparseConvLayer& layer,
                          StrideMap* record) {
  const std::size_t k = input.coords.size();
  std::vector<std::array<int, 3>> coarse;
  coarse.reserve(k);
  for (const auto& c : input.coords) {
    coarse.push_back({floor_div2(c[0]), floor_div2(c[1]), floor_div2(c[2])});
  }
  std::vector<std::array<int, 3>> unique_coarse = coarse;
  std::sort(unique_coarse.begin(), unique_coarse.end());
  unique_coarse.erase(std::unique(unique_coarse.begin(), unique_coarse.end()),
                      unique_coarse.end());

  std::vector<int> fine_to_coarse(k);
  std::vector<std::vector<int>> tap_in(8), tap_out(8);
  for (std::size_t f = 0; f < k; ++f) {
    const auto it = std::lower_bound(unique_coarse.begin(), unique_coarse.end(),
                                     coarse[f], coord_less);
    const int o = static_cast<int>(it - unique_coarse.begin());
    fine_to_coarse[f] = o;
    const int dx = input.coords[f][0] - 2 * coarse[f][0];
    const int dy = input.coords[f][1] - 2 * coarse[f][1];
    const int dz = input.coords[f][2] - 2 * coarse[f][2];
    const std::size_t tap = static_cast<std::size_t>(dx * 4 + dy * 2 + dz);
    tap_in[tap].push_back(static_cast<int>(f));
    tap_out[tap].push_back(o);
  }
  if (record != nullptr) {
    record->fine_coords = input.coords;
    record->coarse_coords = unique_coarse;
    record->fine_to_coarse = fine_to_coarse;
    record->fine_stride = input.stride;
  }
  SparseTensor out;
  out.coords = std::move(unique_coarse);
  for (int c = 0; c < 3; ++c) out.stride[c] = input.stride[c] * 2;
  out.feats = apply_taps(input.feats, layer, tap_in, tap_out, out.coords.size());
  return out;
}

SparseTensor conv_transposed(const SparseTensor& input,
                             const SparseConvLayer& layer,
                             const StrideMap* replay) {
  if (replay == nullptr || replay->fine_coords.empty()) {
    fail("sparse_conv: transposed mode needs the coordinate map recorded by "
         "the matching strided step");
  }
  if (input.coords != replay->coarse_coords) {
    fail("sparse_conv: transposed input coordinates do not match the recorded "
         "coarse grid");
  }
  for (int c = 0; c < 3; ++c) {
    if (input.stride[c] != replay->fine_stride[c] * 2) {
      fail("sparse_conv: transposed input stride does not match the recorded "
           "map");
    }
  }
  const std::size_t fine_count = replay->fine_coords.size();
  std::vector<std::vector<int>> tap_in(8), tap_out(8);
  for (std::size_t f = 0; f < fine_count; ++f) {
    const int o = replay->fine_to_coarse[f];
    const int dx = replay->fine_coords[f][0] - 2 * replay->coarse_coords[o][0];
    const int dy = replay->fine_coords[f][1] - 2 * replay->coarse_coords[o][1];
    const int dz = replay->fine_coords[f][2] - 2 * replay->coarse_coords[o][2];
    const std::size_t tap = static_cast<std::size_t>(dx * 4 + dy * 2 + dz);
    tap_in[tap].push_back(o);
    tap_out[tap].push_back(static_cast<int>(f));
  }
  SparseTensor out;
  out.coords = replay->fine_coords;
  out.stride = replay->fine_stride;
  out.feats = apply_taps(input.feats, layer, tap_in, tap_out, fine_count);
  return out;
}

std::string tap_name(std::size_t t) {
  std::ostringstream s;
  s << "tap" << (t < 10 ? "0" : "") << t;
  return s.str();
}

void append_layer_params(const std::string& prefix, const SparseConvLayer& layer,
                         std::vector<std::pair<std::string, Tensor>>& out) {
  for (std::size_t t = 0; t < layer.taps.size(); ++t) {
    out.emplace_back(prefix + "." + tap_name(t) + ".weight", layer.taps[t]);
  }
  out.emplace_back(prefix + ".bias", layer.bias);
}

}  // namespace

void validate_sparse(const SparseTensor& t) {
  if (t.coords.empty()) fail("sparse tensor: no active coordinates");
  if (!t.feats.defined() || t.feats.ndim() != 2 ||
      t.feats.rows() != t.coords.size()) {
    fail("sparse tensor: feature rows do not match the coordinate count");
  }
  for (int c = 0; c < 3; ++c) {
    if (t.stride[c] <= 0) fail("sparse tensor: stride must be positive");
  }
  for (std::size_t i = 1; i < t.coords.size(); ++i) {
    if (!(t.coords[i - 1] < t.coords[i])) {
      fail("sparse tensor: coordinates must be sorted and unique");
    }
  }
}

SparseTensor sparse_from_grid(const VoxelGrid& grid) {
  if (grid.coords.empty()) fail("sparse_from_grid: empty grid");
  SparseTensor t;
  t.coords.reserve(grid.coords.size());
  for (const auto& c : grid.coords) t.coords.push_back({c[0], c[1], c[2]});
  t.feats = Tensor::from({grid.coords.size(), 6}, grid.features);
  validate_sparse(t);
  return t;
}

SparseConvLayer make_conv_layer(ConvMode mode, std::size_t in_channels,
                                std::size_t out_channels, Rng& rng) {
  if (in_channels == 0 || out_channels == 0) {
    fail("make_conv_layer: channel counts must be positive");
  }
  SparseConvLayer layer;
  layer.mode = mode;
  layer.in_channels = in_channels;
  layer.out_channels = out_channels;
  const std::size_t taps = expected_taps(mode);
  const std::size_t fan_in = taps * in_channels;
  for (std::size_t t = 0; t < taps; ++t) {
    layer.taps.push_back(init_uniform({in_channels, out_channels}, fan_in, rng));
  }
  layer.bias = init_uniform({out_channels}, fan_in, rng);
  return layer;
}

SparseTensor sparse_conv(const SparseTensor& input, const SparseConvLayer& layer,
                         StrideMap* record, const StrideMap* replay) {
  validate_sparse(input);
  validate_layer(layer);
  if (input.feats.cols() != layer.in_channels) {
    fail("sparse_conv: input has " + std::to_string(input.feats.cols()) +
         " channels, layer expects " + std::to_string(layer.in_channels));
  }
  switch (layer.mode) {
    case ConvMode::submanifold:
      return conv_submanifold(input, layer);
    case ConvMode::strided2:
      return conv_strided(input, layer, record);
    case ConvMode::transposed2:
      return conv_transposed(input, layer, replay);
  }
  fail("sparse_conv: unknown mode");
}

SparseUnet make_sparse_unet(const UnetConfig& config, Rng& rng) {
  if (config.in_channels == 0 || config.stem_channels == 0 ||
      config.out_channels == 0) {
    fail("make_sparse_unet: channel counts must be positive");
  }
  for (std::size_t c : config.stage_channels) {
    if (c == 0) fail("make_sparse_unet: channel counts must be positive");
  }
  SparseUnet net;
  net.config = config;
  net.stem = make_conv_layer(ConvMode::submanifold, config.in_channels,
                             config.stem_channels, rng);
  std::size_t prev = config.stem_channels;
  for (std::size_t c : config.stage_channels) {
    net.down.push_back(make_conv_layer(ConvMode::strided2, prev, c, rng));
    net.down_refine.push_back(make_conv_layer(ConvMode::submanifold, c, c, rng));
    prev = c;
  }
  prev = config.stem_channels;
  for (std::size_t i = 0; i < config.stage_channels.size(); ++i) {
    const std::size_t c = config.stage_channels[i];
    net.up.push_back(make_conv_layer(ConvMode::transposed2, c, prev, rng));
    net.up_refine.push_back(
        make_conv_layer(ConvMode::submanifold, 2 * prev, prev, rng));
    prev = c;
  }
  net.proj_w = init_uniform({config.stem_channels, config.out_channels},
                            config.stem_channels, rng);
  net.proj_b = init_uniform({config.out_channels}, config.stem_channels, rng);
  return net;
}

Tensor unet_voxel_features(const SparseUnet& net, const SparseTensor& input) {
  validate_sparse(input);
  SparseTensor x = sparse_conv(input, net.stem);

  const std::size_t depth = net.config.stage_channels.size();
  std::vector<SparseTensor> skips;
  std::vector<StrideMap> maps(depth);
  std::size_t ran = 0;
  for (std::size_t i = 0; i < depth; ++i) {
    if (x.coords.size() <= 1) {
      std::cerr << "unet_forward: grid supports " << ran << " of " << depth
                << " down stages; deeper levels would act on a single voxel\n";
      break;
    }
    skips.push_back(x);
    x = sparse_conv(x, net.down[i], &maps[i]);
    x.feats = relu(x.feats);
    x = sparse_conv(x, net.down_refine[i]);
    x.feats = relu(x.feats);
    ++ran;
  }
  for (std::size_t i = ran; i-- > 0;) {
    x = sparse_conv(x, net.up[i], nullptr, &maps[i]);
    x.feats = relu(x.feats);
    x.feats = concat_cols({x.feats, skips[i].feats});
    x = sparse_conv(x, net.up_refine[i]);
    x.feats = relu(x.feats);
  }
  return affine(x.feats, net.proj_w, net.proj_b);
}

Tensor unet_forward(const SparseUnet& net, const VoxelGrid& grid) {
  const Tensor voxel_feats = unet_voxel_features(net, sparse_from_grid(grid));
  return gather_rows(voxel_feats, grid.point_to_voxel);
}

std::vector<std::pair<std::string, Tensor>> unet_parameters(const SparseUnet& net) {
  std::vector<std::pair<std::string, Tensor>> out;
  append_layer_params("stem", net.stem, out);
  for (std::size_t i = 0; i < net.down.size(); ++i) {
    append_layer_params("down" + std::to_string(i), net.down[i], out);
    append_layer_params("down_refine" + std::to_string(i), net.down_refine[i], out);
  }
  for (std::size_t i = 0; i < net.up.size(); ++i) {
    append_layer_params("up" + std::to_string(i), net.up[i], out);
    append_layer_params("up_refine" + std::to_string(i), net.up_refine[i], out);
  }
  out.emplace_back("proj.weight", net.proj_w);
  out.emplace_back("proj.bias", net.proj_b);
  return out;
}

PointwiseMlp make_pointwise_mlp(const PointwiseMlpConfig& config, Rng& rng) {
  if (config.in_channels == 0 || config.out_channels == 0) {
    fail("make_pointwise_mlp: channel counts must be positive");
  }
  for (std::size_t h : config.hidden) {
    if (h == 0) fail("make_pointwise_mlp: channel counts must be positive");
  }
  PointwiseMlp net;
  net.config = config;
  std::size_t prev = config.in_channels;
  for (std::size_t h : config.hidden) {
    net.weights.push_back(init_uniform({prev, h}, prev, rng));
    net.biases.push_back(init_uniform({h}, prev, rng));
    prev = h;
  }
  net.weights.push_back(init_uniform({prev, config.out_channels}, prev, rng));
  net.biases.push_back(init_uniform({config.out_channels}, prev, rng));
  return net;
}

Tensor pointwise_forward_features(const PointwiseMlp& net, const Tensor& points) {
  if (!points.defined() || points.ndim() != 2 ||
      points.cols() != net.config.in_channels) {
    fail("pointwise_mlp_forward: input must be N x " +
         std::to_string(net.config.in_channels));
  }
  Tensor h = points;
  for (std::size_t i = 0; i + 1 < net.weights.size(); ++i) {
    h = relu(affine(h, net.weights[i], net.biases[i]));
  }
  return affine(h, net.weights.back(), net.biases.back());
}

Tensor pointwise_mlp_forward(const PointwiseMlp& net, const Scene& scene) {
  return pointwise_forward_features(net, scene_points_tensor(scene));
}

std::vector<std::pair<std::string, Tensor>> pointwise_parameters(
    const PointwiseMlp& net) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    out.emplace_back("layer" + std::to_string(i) + ".weight", net.weights[i]);
    out.emplace_back("layer" + std::to_string(i) + ".bias", net.biases[i]);
  }
  return out;
}

Tensor scene_points_tensor(const Scene& scene) {
  if (scene.points.empty()) fail("scene_points_tensor: scene has no points");
  std::vector<double> data;
  data.reserve(scene.points.size() * 6);
  for (const auto& p : scene.points) {
    for (int c = 0; c < 6; ++c) data.push_back(p[c]);
  }
  return Tensor::from({scene.points.size(), 6}, std::move(data));
}

}  // namespace unidet
