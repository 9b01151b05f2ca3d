#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "unidet/scene.hpp"
#include "unidet/tensor.hpp"

namespace unidet {

class Rng;

// Voxel occupancy with feature rows. Coordinates are unique and sorted
// lexicographically; every accumulation below walks them in that order, so
// results never depend on container iteration order.
struct SparseTensor {
  std::vector<std::array<int, 3>> coords;
  Tensor feats;                         // coords.size() x C
  std::array<int, 3> stride = {1, 1, 1};
};

void validate_sparse(const SparseTensor& t);
SparseTensor sparse_from_grid(const VoxelGrid& grid);

enum class ConvMode { submanifold, strided2, transposed2 };

// One sparse 3-D convolution. Submanifold layers hold a 3x3x3 tap grid;
// stride-2 layers (down or up) hold the 2x2x2 taps that a floor(coord/2)
// coordinate map can ever touch. Taps are stored as C_in x C_out matrices
// in lexicographic offset order.
struct SparseConvLayer {
  ConvMode mode = ConvMode::submanifold;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::vector<Tensor> taps;
  Tensor bias;  // [C_out]
};

SparseConvLayer make_conv_layer(ConvMode mode, std::size_t in_channels,
                                std::size_t out_channels, Rng& rng);

// Fine-to-coarse coordinate map recorded by a stride-2 downsampling run and
// replayed by the matching transposed run.
struct StrideMap {
  std::vector<std::array<int, 3>> fine_coords;
  std::vector<std::array<int, 3>> coarse_coords;
  std::vector<int> fine_to_coarse;
  std::array<int, 3> fine_stride = {1, 1, 1};
};

// Submanifold: output coordinates equal input coordinates and each output row
// sums kernel taps over the occupied neighbors. Strided: output coordinates
// are the unique floor(coords/2), contributions summed per coarse cell, and
// the coordinate map is recorded into `record` when given. Transposed:
// requires `replay` from the matching strided run and maps features back to
// its fine coordinates. Differentiable through feats, taps, and bias.
SparseTensor sparse_conv(const SparseTensor& input, const SparseConvLayer& layer,
                         StrideMap* record = nullptr,
                         const StrideMap* replay = nullptr);

// Hourglass over the sparse grid: a stem convolution at full resolution,
// stage_channels.size() stride-2 stages down, the mirrored transposed stages
// back up with skip concatenation, then a linear head to out_channels.
struct UnetConfig {
  std::size_t in_channels = 6;
  std::size_t stem_channels = 16;
  std::vector<std::size_t> stage_channels = {16, 32, 64};
  std::size_t out_channels = 32;
};

struct SparseUnet {
  UnetConfig config;
  SparseConvLayer stem;
  std::vector<SparseConvLayer> down;
  std::vector<SparseConvLayer> down_refine;
  std::vector<SparseConvLayer> up;
  std::vector<SparseConvLayer> up_refine;
  Tensor proj_w;  // stem_channels x out_channels
  Tensor proj_b;  // [out_channels]
};

SparseUnet make_sparse_unet(const UnetConfig& config, Rng& rng);

// Per-voxel features after the full down/up pass. Stages that would act on a
// single remaining voxel are skipped with a warning on stderr, and the
// decoder mirrors only the stages that ran.
Tensor unet_voxel_features(const SparseUnet& net, const SparseTensor& input);

// Per-point features: voxel features broadcast to every member point.
Tensor unet_forward(const SparseUnet& net, const VoxelGrid& grid);

// Name -> parameter handle pairs for optimizers and checkpoints. Names are
// stable and unique; handles share storage with the network.
std::vector<std::pair<std::string, Tensor>> unet_parameters(const SparseUnet& net);

// Per-point MLP on raw (x, y, z, r, g, b) rows; the fast fallback backbone.
struct PointwiseMlpConfig {
  std::size_t in_channels = 6;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t out_channels = 32;
};

struct PointwiseMlp {
  PointwiseMlpConfig config;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
};

PointwiseMlp make_pointwise_mlp(const PointwiseMlpConfig& config, Rng& rng);
Tensor pointwise_forward_features(const PointwiseMlp& net, const Tensor& points);
Tensor pointwise_mlp_forward(const PointwiseMlp& net, const Scene& scene);
std::vector<std::pair<std::string, Tensor>> pointwise_parameters(
    const PointwiseMlp& net);

// N x 6 tensor of scene point rows (no gradient tracking).
Tensor scene_points_tensor(const Scene& scene);

}  // namespace unidet
