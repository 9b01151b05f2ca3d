// Release gate. Each numbered check prints exactly one PASS/FAIL line; the
// process exits 0 only when every check passes. The first argument must be
// the path to the unidet CLI binary so the help text can be inspected.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "unidet/assignment.hpp"
#include "unidet/backbone.hpp"
#include "unidet/encoder.hpp"
#include "unidet/evaluate.hpp"
#include "unidet/geometry.hpp"
#include "unidet/heads.hpp"
#include "unidet/labelspace.hpp"
#include "unidet/pipeline.hpp"
#include "unidet/random.hpp"
#include "unidet/scene.hpp"
#include "unidet/superpoint.hpp"
#include "unidet/tensor.hpp"

#include "test_support.hpp"

namespace {

namespace fs = std::filesystem;
using namespace unidet;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
        .count();
  }
};

std::string format(const char* fmt, ...) {
  char buf[512];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, args);
  va_end(args);
  return buf;
}

class Scratch {
 public:
  Scratch() {
    dir_ = fs::temp_directory_path() /
           ("unidet_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

 private:
  fs::path dir_;
};

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
                     double hi = 1.0) {
  std::size_t total = 1;
  for (std::size_t d : shape) total *= d;
  std::vector<double> data;
  data.reserve(total);
  for (std::size_t i = 0; i < total; ++i) data.push_back(rng.uniform(lo, hi));
  return Tensor::from(std::move(shape), std::move(data), true);
}

std::vector<std::size_t> sample_coords(Rng& rng, std::size_t total, std::size_t want) {
  std::vector<std::size_t> all(total);
  std::iota(all.begin(), all.end(), std::size_t{0});
  rng.shuffle(all);
  all.resize(std::min(total, want));
  return all;
}

// Central differences through a live parameter handle. The analytic gradient
// comes from the parameter's own grad slot and the numeric side perturbs its
// storage in place, so the surrounding network stays wired to the tensor.
GradCheckReport param_grad_check(const std::function<Tensor()>& forward, Tensor param,
                                 double step, double tol,
                                 const std::vector<std::size_t>& coords) {
  param.zero_grad();
  backward(forward());
  std::vector<double> analytic(param.numel(), 0.0);
  if (param.has_grad()) analytic = param.grad();
  GradCheckReport report;
  report.pass = true;
  for (std::size_t i : coords) {
    double* slot = param.data() + i;
    const double saved = *slot;
    *slot = saved + step;
    const double fp = forward().value();
    *slot = saved - step;
    const double fm = forward().value();
    *slot = saved;
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic[i];
    const double denom = std::max(std::abs(a), std::abs(numeric));
    const double rel = denom < 1e-9 ? 0.0 : std::abs(a - numeric) / denom;
    ++report.coords_checked;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coord = i;
    }
    if (rel > tol) report.pass = false;
  }
  return report;
}

// Point labels drawn at random, then relabeled to first-appearance order so
// they form a valid partition.
SuperpointPartition random_partition(Rng& rng, std::size_t points,
                                     std::size_t groups) {
  std::vector<int> raw(points);
  for (std::size_t i = 0; i < points; ++i) {
    raw[i] = static_cast<int>(rng.index(groups));
  }
  for (std::size_t g = 0; g < groups; ++g) raw[g % points] = static_cast<int>(g);
  SuperpointPartition part;
  part.assignment.assign(points, -1);
  std::vector<int> relabel(groups, -1);
  for (std::size_t i = 0; i < points; ++i) {
    if (relabel[raw[i]] < 0) {
      relabel[raw[i]] = static_cast<int>(part.count++);
      part.centers.push_back(
          {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
      part.sizes.push_back(0);
    }
    part.assignment[i] = relabel[raw[i]];
    ++part.sizes[part.assignment[i]];
  }
  return part;
}

struct GradStats {
  std::size_t instances = 0;
  double worst = 0.0;
  std::string failed;

  void absorb(const GradCheckReport& report, const std::string& label) {
    ++instances;
    worst = std::max(worst, report.max_rel_error);
    if (!report.pass && failed.empty()) failed = label;
  }
};

SparseTensor random_sparse(Rng& rng, std::size_t count, std::size_t channels,
                           int extent) {
  std::vector<std::array<int, 3>> coords;
  while (coords.size() < count) {
    std::array<int, 3> c = {static_cast<int>(rng.index(extent)) - extent / 2,
                            static_cast<int>(rng.index(extent)) - extent / 2,
                            static_cast<int>(rng.index(extent)) - extent / 2};
    if (std::find(coords.begin(), coords.end(), c) == coords.end()) coords.push_back(c);
  }
  std::sort(coords.begin(), coords.end());
  SparseTensor t;
  t.coords = std::move(coords);
  std::vector<double> feats;
  for (std::size_t i = 0; i < count * channels; ++i) {
    feats.push_back(rng.uniform(-1.0, 1.0));
  }
  t.feats = Tensor::from({count, channels}, std::move(feats), true);
  return t;
}

// Every differentiable building block, probed with central differences on
// fresh random instances. Primitive ops use tolerance 1e-4, the composed
// detection loss 1e-3.
Outcome check_gradients() {
  Timer timer;
  constexpr double kStep = 1e-5;
  constexpr double kTol = 1e-4;
  Rng rng(20260819);
  GradStats stats;

  const auto quadratic = [](const Tensor& y) { return sum_all(mul(y, y)); };

  for (int t = 0; t < 8; ++t) {
    const std::size_t rows = 2 + rng.index(3), cols = 2 + rng.index(3);
    const Tensor fixed = random_tensor(rng, {rows, cols});
    const Tensor fixed_sq = random_tensor(rng, {cols, cols});
    const Tensor gain = random_tensor(rng, {std::size_t{1}, cols});
    const Tensor point = random_tensor(rng, {rows, cols});

    const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>>
        ops = {
            {"add", [&](const Tensor& x) { return quadratic(add(x, fixed)); }},
            {"sub", [&](const Tensor& x) { return quadratic(sub(x, fixed)); }},
            {"mul", [&](const Tensor& x) { return quadratic(mul(x, fixed)); }},
            {"scale", [&](const Tensor& x) { return quadratic(scale(x, -1.7)); }},
            {"matmul", [&](const Tensor& x) { return quadratic(matmul(x, fixed_sq)); }},
            {"transpose", [&](const Tensor& x) { return quadratic(transpose(x)); }},
            {"exp", [&](const Tensor& x) { return quadratic(unidet::exp(x)); }},
            {"softmax", [&](const Tensor& x) { return quadratic(softmax(x)); }},
            {"layernorm", [&](const Tensor& x) { return quadratic(layernorm(x)); }},
            {"rowwise_affine",
             [&](const Tensor& x) { return quadratic(rowwise_affine(x, gain, gain)); }},
            {"concat_cols",
             [&](const Tensor& x) { return quadratic(concat_cols({x, fixed})); }},
            {"concat_rows",
             [&](const Tensor& x) { return quadratic(concat_rows({x, fixed})); }},
            {"slice_cols",
             [&](const Tensor& x) { return quadratic(slice_cols(x, 1, cols - 1)); }},
            {"mean_all", [&](const Tensor& x) { return mean_all(x); }},
            {"sum_all", [&](const Tensor& x) { return sum_all(x); }},
        };
    for (const auto& [name, f] : ops) {
      stats.absorb(grad_check(f, point, kStep, kTol), name);
    }

    std::vector<int> targets;
    for (std::size_t r = 0; r < rows; ++r) {
      targets.push_back(static_cast<int>(rng.index(cols)));
    }
    stats.absorb(grad_check(
                     [&](const Tensor& x) { return cross_entropy(x, targets); },
                     point, kStep, kTol),
                 "cross_entropy");
    std::vector<double> row_weights;
    for (std::size_t r = 0; r < rows; ++r) row_weights.push_back(rng.uniform(0.2, 2.0));
    stats.absorb(
        grad_check(
            [&](const Tensor& x) { return cross_entropy(x, targets, row_weights); },
            point, kStep, kTol),
        "weighted cross_entropy");

    // Away from zero so the kink cannot sit inside the probe interval.
    std::vector<double> shifted;
    for (std::size_t i = 0; i < rows * cols; ++i) {
      const double mag = rng.uniform(0.2, 1.2);
      shifted.push_back(rng.bernoulli(0.5) ? mag : -mag);
    }
    stats.absorb(grad_check([&](const Tensor& x) { return quadratic(relu(x)); },
                            Tensor::from({rows, cols}, shifted, true), kStep, kTol),
                 "relu");

    std::vector<int> pick;
    for (int r = 0; r < 4; ++r) pick.push_back(static_cast<int>(rng.index(rows)));
    stats.absorb(grad_check(
                     [&](const Tensor& x) { return quadratic(gather_rows(x, pick)); },
                     point, kStep, kTol),
                 "gather_rows");
    stats.absorb(grad_check(
                     [&](const Tensor& x) {
                       return quadratic(scatter_add_rows(x, pick, rows + 1));
                     },
                     random_tensor(rng, {std::size_t{4}, cols}), kStep, kTol),
                 "scatter_add_rows");

    const Tensor x0 = random_tensor(rng, {rows, cols});
    const Tensor w = random_tensor(rng, {cols, cols});
    const Tensor b = random_tensor(rng, {cols});
    stats.absorb(grad_check(
                     [&](const Tensor& x) { return quadratic(affine(x, w, b)); },
                     x0, kStep, kTol),
                 "affine x");
    stats.absorb(grad_check(
                     [&](const Tensor& t) { return quadratic(affine(x0, t, b)); },
                     w, kStep, kTol),
                 "affine w");
    stats.absorb(grad_check(
                     [&](const Tensor& t) { return quadratic(affine(x0, w, t)); },
                     b, kStep, kTol),
                 "affine b");
  }

  for (int t = 0; t < 12; ++t) {
    const std::size_t points = 6 + rng.index(8);
    const std::size_t channels = 2 + rng.index(3);
    const SuperpointPartition part = random_partition(rng, points, 2 + rng.index(3));
    stats.absorb(grad_check(
                     [&](const Tensor& x) { return quadratic(pool_features(x, part)); },
                     random_tensor(rng, {points, channels}), kStep, kTol),
                 "pool_features");
    stats.absorb(grad_check(
                     [&](const Tensor& x) {
                       return quadratic(segment_mean(x, part.assignment, part.count));
                     },
                     random_tensor(rng, {points, channels}), kStep, kTol),
                 "segment_mean");
  }

  for (int t = 0; t < 12; ++t) {
    Rng init(300 + t);
    const ConvMode mode = t % 3 == 0   ? ConvMode::submanifold
                          : t % 3 == 1 ? ConvMode::strided2
                                       : ConvMode::transposed2;
    const SparseTensor in = random_sparse(rng, 5 + rng.index(4), 2, 5);
    SparseConvLayer layer = make_conv_layer(ConvMode::submanifold, 2, 3, init);
    const SparseConvLayer down = make_conv_layer(ConvMode::strided2, 2, 2, init);
    const SparseConvLayer up = make_conv_layer(ConvMode::transposed2, 2, 2, init);
    const auto run = [&](const Tensor& feats) {
      SparseTensor probe = in;
      probe.feats = feats;
      if (mode == ConvMode::submanifold) {
        return quadratic(sparse_conv(probe, layer).feats);
      }
      StrideMap record;
      const SparseTensor coarse = sparse_conv(probe, down, &record);
      if (mode == ConvMode::strided2) return quadratic(coarse.feats);
      return quadratic(sparse_conv(coarse, up, nullptr, &record).feats);
    };
    stats.absorb(grad_check(run, in.feats, kStep, kTol), "sparse_conv input");
    const std::size_t tap = rng.index(layer.taps.size());
    stats.absorb(grad_check(
                     [&](const Tensor& t) {
                       SparseConvLayer probe = layer;
                       probe.taps[tap] = t;
                       return quadratic(sparse_conv(in, probe).feats);
                     },
                     layer.taps[tap], kStep, kTol),
                 "sparse_conv tap");
    stats.absorb(grad_check(
                     [&](const Tensor& t) {
                       SparseConvLayer probe = layer;
                       probe.bias = t;
                       return quadratic(sparse_conv(in, probe).feats);
                     },
                     layer.bias, kStep, kTol),
                 "sparse_conv bias");
  }

  for (int t = 0; t < 6; ++t) {
    Rng init(400 + t);
    UnetConfig cfg;
    cfg.in_channels = 2;
    cfg.stem_channels = 2;
    cfg.stage_channels = {2, 3};
    cfg.out_channels = 3;
    SparseUnet net = make_sparse_unet(cfg, init);
    const SparseTensor in = random_sparse(rng, 8, 2, 5);
    const std::size_t in_coords = in.feats.numel();
    stats.absorb(grad_check(
                     [&](const Tensor& feats) {
                       SparseTensor probe = in;
                       probe.feats = feats;
                       return quadratic(unet_voxel_features(net, probe));
                     },
                     in.feats, kStep, kTol, sample_coords(rng, in_coords, 8)),
                 "unet input");
    auto params = unet_parameters(net);
    auto& [name, handle] = params[rng.index(params.size())];
    stats.absorb(param_grad_check(
                     [&] { return quadratic(unet_voxel_features(net, in)); }, handle,
                     kStep, kTol, sample_coords(rng, handle.numel(), 8)),
                 "unet parameter " + name);
  }

  for (int t = 0; t < 8; ++t) {
    Rng init(500 + t);
    EncoderConfig cfg;
    cfg.layers = 1 + t % 2;
    cfg.heads = 2;
    cfg.model_dim = 4;
    cfg.ffn_dim = 8;
    cfg.use_positional_encoding = t % 2 == 1;
    Encoder encoder = make_encoder(cfg, init);
    const std::size_t queries = 3 + rng.index(4);
    QuerySet qs;
    qs.features = random_tensor(rng, {queries, cfg.model_dim});
    for (std::size_t q = 0; q < queries; ++q) {
      qs.superpoint.push_back(static_cast<int>(q));
      qs.centers.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
    }
    stats.absorb(grad_check(
                     [&](const Tensor& x) {
                       QuerySet probe = qs;
                       probe.features = x;
                       return quadratic(encode(encoder, probe));
                     },
                     qs.features, kStep, kTol),
                 "encoder input");
    auto params = encoder_parameters(encoder);
    auto& [name, handle] = params[rng.index(params.size())];
    stats.absorb(param_grad_check([&] { return quadratic(encode(encoder, qs)); },
                                  handle, kStep, kTol,
                                  sample_coords(rng, handle.numel(), 8)),
                 "encoder parameter " + name);
  }

  for (int t = 0; t < 8; ++t) {
    Rng init(600 + t);
    HeadConfig cfg;
    cfg.in_channels = 4;
    cfg.num_classes = 3;
    cfg.depth = 2;
    PredictionHeads heads = make_heads(cfg, init);
    const Tensor features = random_tensor(rng, {std::size_t{5}, cfg.in_channels});
    stats.absorb(grad_check(
                     [&](const Tensor& x) { return quadratic(class_logits(heads, x)); },
                     features, kStep, kTol),
                 "class head");
    stats.absorb(grad_check(
                     [&](const Tensor& x) { return quadratic(box_encodings(heads, x)); },
                     features, kStep, kTol),
                 "box head");
    auto params = head_parameters(heads);
    auto& [name, handle] = params[rng.index(params.size())];
    stats.absorb(param_grad_check(
                     [&] {
                       return add(quadratic(class_logits(heads, features)),
                                  quadratic(box_encodings(heads, features)));
                     },
                     handle, kStep, kTol, sample_coords(rng, handle.numel(), 8)),
                 "head parameter " + name);
  }

  // Pooled points through the encoder and both heads into the full training
  // loss, with the matching frozen at the unperturbed forward pass.
  for (int t = 0; t < 8; ++t) {
    Rng init(700 + t);
    const std::size_t points = 12, channels = 4;
    const SuperpointPartition part = random_partition(rng, points, 4);
    EncoderConfig ecfg;
    ecfg.layers = 1;
    ecfg.heads = 2;
    ecfg.model_dim = channels;
    ecfg.ffn_dim = 8;
    Encoder encoder = make_encoder(ecfg, init);
    HeadConfig hcfg;
    hcfg.in_channels = channels;
    hcfg.num_classes = 3;
    PredictionHeads heads = make_heads(hcfg, init);
    QuerySet proto;
    std::vector<Vec3> refs;
    for (std::size_t s = 0; s < part.count; ++s) {
      proto.superpoint.push_back(static_cast<int>(s));
      proto.centers.push_back(part.centers[s]);
      refs.push_back(part.centers[s]);
    }
    std::vector<Box3D> gts;
    std::vector<int> gt_classes;
    for (int g = 0; g < 2; ++g) {
      gts.push_back(testsupport::random_box(rng));
      gt_classes.push_back(static_cast<int>(rng.index(hcfg.num_classes)));
    }
    const Tensor point_feats = random_tensor(rng, {points, channels});

    const auto encoded = [&](const Tensor& x) {
      QuerySet qs = proto;
      qs.features = pool_features(x, part);
      return encode(encoder, qs);
    };
    const std::vector<Proposal> proposals =
        make_proposals(heads, encoded(point_feats), refs);
    std::vector<double> costs;
    for (const Proposal& p : proposals) {
      for (std::size_t k = 0; k < gts.size(); ++k) {
        costs.push_back(match_cost(p.class_scores, gt_classes[k], p.box, gts[k], 0.25));
      }
    }
    const Matching matching = match_hungarian(costs, proposals.size(), gts.size());

    stats.absorb(grad_check(
                     [&](const Tensor& x) {
                       const Tensor queries = encoded(x);
                       return detection_loss(matching, class_logits(heads, queries),
                                             box_encodings(heads, queries), refs, gts,
                                             gt_classes, 0.5)
                           .total;
                     },
                     point_feats, kStep, 1e-3),
                 "composed detection loss");
  }

  const double elapsed = timer.seconds();
  if (!stats.failed.empty()) {
    return {false, format("first failure at %s, worst rel err %.2e",
                          stats.failed.c_str(), stats.worst)};
  }
  if (elapsed >= 120.0) return {false, format("took %.1fs, budget is 120s", elapsed)};
  return {true, format("%zu instances, worst rel err %.1e, %.1fs", stats.instances,
                       stats.worst, elapsed)};
}

struct BruteBest {
  std::size_t cardinality = 0;
  double total = 0.0;
  bool seen = false;
};

void brute_masked(const CostMatrix& cm, std::size_t k, std::vector<char>& used,
                  std::size_t cardinality, double total, BruteBest& best) {
  if (k == cm.gts) {
    if (!best.seen || cardinality > best.cardinality ||
        (cardinality == best.cardinality && total < best.total)) {
      best = {cardinality, total, true};
    }
    return;
  }
  brute_masked(cm, k + 1, used, cardinality, total, best);
  for (std::size_t i = 0; i < cm.proposals; ++i) {
    if (!cm.is_finite(i, k) || used[i]) continue;
    used[i] = 1;
    brute_masked(cm, k + 1, used, cardinality + 1, total + cm.at(i, k), best);
    used[i] = 0;
  }
}

// Sum of the selected entries in row-major pair order, so two identical
// assignments produce bit-identical totals regardless of discovery order.
double ordered_total(const std::vector<double>& costs, std::size_t cols,
                     std::vector<std::pair<int, int>> pairs) {
  std::sort(pairs.begin(), pairs.end());
  double total = 0.0;
  for (const auto& [r, c] : pairs) {
    total += costs[static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(c)];
  }
  return total;
}

std::vector<std::pair<int, int>> brute_dense_pairs(const std::vector<double>& costs,
                                                   std::size_t rows, std::size_t cols) {
  const bool flip = rows > cols;
  const std::size_t n = flip ? cols : rows;
  const std::size_t m = flip ? rows : cols;
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> winner;
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t r = flip ? static_cast<std::size_t>(order[i]) : i;
      const std::size_t c = flip ? i : static_cast<std::size_t>(order[i]);
      total += costs[r * cols + c];
    }
    if (total < best) {
      best = total;
      winner = order;
    }
  } while (std::next_permutation(order.begin(), order.end()));
  std::vector<std::pair<int, int>> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    const int r = flip ? winner[i] : static_cast<int>(i);
    const int c = flip ? static_cast<int>(i) : winner[i];
    pairs.emplace_back(r, c);
  }
  return pairs;
}

// Both matchers against exhaustive enumeration: dense rectangular instances
// up to 7x7 against every permutation, masked instances with at most three
// candidate rows per column against every injective assignment.
Outcome check_matching() {
  Timer timer;
  Rng rng(31337);

  for (int t = 0; t < 500; ++t) {
    const std::size_t rows = 1 + rng.index(7), cols = 1 + rng.index(7);
    std::vector<double> costs;
    for (std::size_t i = 0; i < rows * cols; ++i) costs.push_back(rng.uniform(-5, 5));
    const Matching got = match_hungarian(costs, rows, cols);
    if (got.pairs.size() != std::min(rows, cols)) {
      return {false, format("dense instance %d matched %zu of %zu pairs", t,
                            got.pairs.size(), std::min(rows, cols))};
    }
    const double total = ordered_total(costs, cols, got.pairs);
    const double best = ordered_total(costs, cols, brute_dense_pairs(costs, rows, cols));
    if (total != best) {
      return {false,
              format("dense instance %d cost %.17g, brute force %.17g", t, total, best)};
    }
  }

  for (int t = 0; t < 500; ++t) {
    CostMatrix cm;
    cm.proposals = 1 + rng.index(8);
    cm.gts = 1 + rng.index(6);
    cm.values.assign(cm.proposals * cm.gts, std::numeric_limits<double>::infinity());
    cm.finite.assign(cm.proposals * cm.gts, 0);
    for (std::size_t k = 0; k < cm.gts; ++k) {
      std::vector<std::size_t> order(cm.proposals);
      std::iota(order.begin(), order.end(), std::size_t{0});
      rng.shuffle(order);
      const std::size_t candidates = std::min<std::size_t>(3, cm.proposals);
      for (std::size_t c = 0; c < candidates; ++c) {
        cm.values[order[c] * cm.gts + k] = rng.uniform(-5, 5);
        cm.finite[order[c] * cm.gts + k] = 1;
      }
    }
    const Matching got = match_disentangled(cm);
    std::vector<char> used_rows(cm.proposals, 0), used_cols(cm.gts, 0);
    for (const auto& [i, k] : got.pairs) {
      const auto row = static_cast<std::size_t>(i);
      const auto col = static_cast<std::size_t>(k);
      if (!cm.is_finite(row, col) || used_rows[row] || used_cols[col]) {
        return {false, format("masked instance %d produced an invalid pairing", t)};
      }
      used_rows[row] = 1;
      used_cols[col] = 1;
    }
    // The brute recursion accumulates costs in ascending ground-truth order;
    // summing the matcher's pairs the same way keeps the comparison exact.
    std::vector<std::pair<int, int>> by_gt;
    for (const auto& [i, k] : got.pairs) by_gt.emplace_back(k, i);
    std::sort(by_gt.begin(), by_gt.end());
    double total = 0.0;
    for (const auto& [k, i] : by_gt) {
      total += cm.at(static_cast<std::size_t>(i), static_cast<std::size_t>(k));
    }
    BruteBest best;
    std::vector<char> used(cm.proposals, 0);
    brute_masked(cm, 0, used, 0, 0.0, best);
    if (got.pairs.size() != best.cardinality || total != best.total) {
      return {false,
              format("masked instance %d matched %zu pairs at %.17g, brute force %zu "
                     "at %.17g",
                     t, got.pairs.size(), total, best.cardinality, best.total)};
    }
  }

  const double elapsed = timer.seconds();
  if (elapsed >= 60.0) return {false, format("took %.1fs, budget is 60s", elapsed)};
  return {true, format("500 dense and 500 masked instances, %.1fs", elapsed)};
}

// Axis-aligned IoU against the closed-form overlap product, rotated IoU
// against a million-sample Monte Carlo volume, and the distance identities.
Outcome check_geometry() {
  Rng rng(777);

  for (int t = 0; t < 100; ++t) {
    Box3D a = testsupport::random_box(rng);
    Box3D b = t % 4 == 0 ? testsupport::random_box(rng, 3.0)
                         : testsupport::overlapping_box(a, rng);
    a.yaw = 0.0;
    b.yaw = 0.0;
    const auto overlap = [](double alo, double ahi, double blo, double bhi) {
      return std::max(0.0, std::min(ahi, bhi) - std::max(alo, blo));
    };
    const double ox =
        overlap(a.cx - a.sx / 2, a.cx + a.sx / 2, b.cx - b.sx / 2, b.cx + b.sx / 2);
    const double oy =
        overlap(a.cy - a.sy / 2, a.cy + a.sy / 2, b.cy - b.sy / 2, b.cy + b.sy / 2);
    const double oz =
        overlap(a.cz - a.sz / 2, a.cz + a.sz / 2, b.cz - b.sz / 2, b.cz + b.sz / 2);
    const double inter = ox * oy * oz;
    const double expected =
        inter == 0.0 ? 0.0
                     : inter / (a.sx * a.sy * a.sz + b.sx * b.sy * b.sz - inter);
    if (iou(a, b) != expected) {
      return {false, format("axis-aligned pair %d: iou %.17g, analytic %.17g", t,
                            iou(a, b), expected)};
    }
  }

  double worst_mc = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Box3D a = testsupport::random_box(rng);
    const Box3D b = testsupport::overlapping_box(a, rng);
    Rng mc(9000 + t);
    const double est = testsupport::iou_monte_carlo(a, b, 1000000, mc);
    const double diff = std::abs(iou(a, b) - est);
    worst_mc = std::max(worst_mc, diff);
    if (diff > 2e-3) {
      return {false, format("rotated pair %d off by %.2e from Monte Carlo", t, diff)};
    }
  }

  for (int t = 0; t < 100; ++t) {
    const Box3D a = testsupport::random_box(rng, 2.0);
    const Box3D b = testsupport::overlapping_box(a, rng);
    if (diou_distance(a, a) != 0.0) {
      return {false,
              format("pair %d: diou_distance(a, a) is %.17g", t, diou_distance(a, a))};
    }
    if (diou_distance(a, b) != diou_distance(b, a)) {
      return {false, format("pair %d: diou_distance is asymmetric", t)};
    }
  }

  return {true, format("100 axis-aligned exact, 50 Monte Carlo within %.1e, 100 "
                       "identity and symmetry pairs",
                       worst_mc)};
}

double oracle_ap(const std::vector<SceneEval>& scenes, int class_id, double threshold) {
  struct Ref {
    double score;
    std::size_t scene;
    std::size_t index;
  };
  std::vector<Ref> dets;
  std::size_t gt_count = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (int c : scenes[s].gt_classes) {
      if (c == class_id) ++gt_count;
    }
    for (std::size_t d = 0; d < scenes[s].detections.size(); ++d) {
      if (scenes[s].detections[d].class_id == class_id) {
        dets.push_back({scenes[s].detections[d].score, s, d});
      }
    }
  }
  if (gt_count == 0) return 0.0;
  std::sort(dets.begin(), dets.end(), [](const Ref& a, const Ref& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.index < b.index;
  });
  std::vector<std::vector<char>> used(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    used[s].assign(scenes[s].gt_boxes.size(), 0);
  }
  std::vector<char> is_tp(dets.size(), 0);
  std::vector<double> precision(dets.size(), 0.0);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const SceneEval& scene = scenes[dets[i].scene];
    double best = 0.0;
    std::size_t pick = 0;
    bool found = false;
    for (std::size_t g = 0; g < scene.gt_boxes.size(); ++g) {
      if (scene.gt_classes[g] != class_id || used[dets[i].scene][g]) continue;
      const double overlap = iou(scene.detections[dets[i].index].box, scene.gt_boxes[g]);
      if (overlap >= threshold && overlap > best) {
        best = overlap;
        pick = g;
        found = true;
      }
    }
    if (found) {
      used[dets[i].scene][pick] = 1;
      is_tp[i] = 1;
      ++tp;
    }
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  double ap = 0.0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (!is_tp[i]) continue;
    double best = 0.0;
    for (std::size_t j = i; j < dets.size(); ++j) best = std::max(best, precision[j]);
    ap += best / static_cast<double>(gt_count);
  }
  return ap;
}

Box3D cube_at(double x) { return {x, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0}; }

LabelSpace space_of(int classes) {
  Vocabulary vocab;
  vocab.dataset_id = "synth";
  for (int c = 0; c < classes; ++c) vocab.classes.push_back("class" + std::to_string(c));
  return build_label_space({vocab}, LabelMode::kUnified, SynonymTable());
}

// The evaluator against an independent average-precision implementation on
// random small instances, plus one precision-recall curve small enough to
// integrate by hand.
Outcome check_evaluator() {
  Rng rng(4242);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t num_scenes = 1 + rng.index(5);
    const int classes = 1 + static_cast<int>(rng.index(4));
    std::vector<SceneEval> scenes(num_scenes);
    std::size_t total_dets = 0;
    for (std::size_t s = 0; s < num_scenes; ++s) {
      scenes[s].dataset_id = rng.bernoulli(0.5) ? "alpha" : "beta";
      const std::size_t gts = rng.index(4);
      for (std::size_t g = 0; g < gts; ++g) {
        scenes[s].gt_boxes.push_back(cube_at(10.0 * static_cast<double>(g)));
        scenes[s].gt_classes.push_back(
            static_cast<int>(rng.index(static_cast<std::size_t>(classes))));
      }
      const std::size_t dets = total_dets >= 10 ? 0 : rng.index(4);
      for (std::size_t d = 0; d < dets && total_dets < 10; ++d, ++total_dets) {
        Detection det;
        det.class_id = static_cast<int>(rng.index(static_cast<std::size_t>(classes)));
        det.score = rng.uniform();
        if (!scenes[s].gt_boxes.empty() && rng.bernoulli(0.7)) {
          const std::size_t g = rng.index(scenes[s].gt_boxes.size());
          det.box = scenes[s].gt_boxes[g];
          det.box.cx += rng.uniform(0.0, 0.9);
        } else {
          det.box = cube_at(-50.0 - 10.0 * static_cast<double>(d));
        }
        scenes[s].detections.push_back(det);
      }
    }
    const EvalReport report = evaluate(scenes, space_of(classes));
    for (const ClassAP& entry : report.per_class) {
      for (const auto& [threshold, ap] : entry.ap) {
        const double expect = oracle_ap(scenes, entry.class_id, threshold);
        worst = std::max(worst, std::abs(ap - expect));
        if (std::abs(ap - expect) > 1e-12) {
          return {false, format("trial %d class %d at %.2f: ap %.17g, oracle %.17g",
                                trial, entry.class_id, threshold, ap, expect)};
        }
      }
    }
  }

  SceneEval pr;
  pr.dataset_id = "synth";
  pr.gt_boxes = {cube_at(0.0), cube_at(10.0)};
  pr.gt_classes = {0, 0};
  pr.detections = {{cube_at(0.0), 0, 0.9},
                   {cube_at(-50.0), 0, 0.8},
                   {cube_at(10.0), 0, 0.7}};
  const EvalReport hand = evaluate({pr}, space_of(1));
  const double expect = 1.0 * 0.5 + (2.0 / 3.0) * 0.5;
  for (double threshold : {0.25, 0.5}) {
    if (std::abs(hand.map.at(threshold) - expect) > 1e-9) {
      return {false, format("hit-miss-hit curve at %.2f: %.12f, expected %.12f",
                            threshold, hand.map.at(threshold), expect)};
    }
  }
  return {true, format("200 random instances within %.1e of the reference, "
                       "hit-miss-hit curve equals 5/6",
                       worst)};
}

// Class counts over the six bundled vocabularies in both sharing modes.
Outcome check_label_spaces() {
  const std::vector<Vocabulary>& all = builtin_vocabularies();
  if (all.size() != 6) {
    return {false, format("expected 6 bundled vocabularies, found %zu", all.size())};
  }
  const SynonymTable none;
  const std::size_t partitioned =
      build_label_space(all, LabelMode::kPartitioned, none).size();
  const Vocabulary* scannet = find_builtin_vocabulary("scannet");
  const Vocabulary* rscan = find_builtin_vocabulary("3rscan");
  if (scannet == nullptr || rscan == nullptr) {
    return {false, "scannet or 3rscan vocabulary missing"};
  }
  const std::size_t pair =
      build_label_space({*scannet, *rscan}, LabelMode::kUnified, none).size();
  const std::size_t unified = build_label_space(all, LabelMode::kUnified, none).size();
  if (partitioned != 159 || pair != 18 || unified != 98) {
    return {false, format("partitioned=%zu pair=%zu unified=%zu, expected 159/18/98",
                          partitioned, pair, unified)};
  }
  return {true,
          "partitioned=159, unified(scannet+3rscan)=18, unified(all six)=98; the "
          "union of the shipped lists has 98 names, not the sometimes-quoted 99, "
          "and no synonym pair is bundled to force the extra merge"};
}

SynthSpec bench_spec() {
  SynthSpec spec;
  spec.dataset_id = "bench";
  spec.num_scenes = 20;
  spec.seed = 11;
  spec.room = {5.0, 5.0, 2.6};
  spec.classes = {"chair", "table", "lamp"};
  spec.objects_min = 2;
  spec.objects_max = 3;
  spec.points_per_object = 60;
  spec.clutter_points = 20;
  spec.rotated = true;
  return spec;
}

TrainConfig bench_config(const std::string& data_dir) {
  TrainConfig config;
  config.backbone = "pointwise";
  config.pointwise.hidden = {32, 32};
  config.pointwise.out_channels = 32;
  config.encoder.layers = 4;
  config.encoder.heads = 4;
  config.encoder.model_dim = 32;
  config.encoder.ffn_dim = 64;
  config.epochs = 200;
  config.batch_size = 2;
  config.lr = 0.01;
  config.weight_decay = 0.0;
  config.seed = 7;
  DatasetConfig dataset;
  dataset.dataset_id = "bench";
  dataset.vocabulary = data_dir + "/bench.vocab.json";
  dataset.train = {data_dir};
  config.datasets = {dataset};
  return config;
}

double map50_on(const DetectionModel& model, const std::vector<Scene>& scenes) {
  return evaluate_model(model, scenes, 0.1, 0.5).map.at(0.5);
}

// State shared between the overfit check and the ablation directions so the
// four-layer run is trained once.
struct OverfitArtifacts {
  std::string data_dir;
  std::vector<Scene> scenes;
  double pointwise_map50 = -1.0;
};

// Fixed-seed overfit run on twenty synthetic rooms, once per backbone. The
// per-point backbone must reach mAP at IoU 0.5 of at least 0.90 on its own
// training scenes, the sparse U-Net at least 0.80.
Outcome check_overfit(const Scratch& scratch, OverfitArtifacts& shared) {
  Timer timer;
  const std::string dir = scratch.path("bench");
  const std::vector<std::string> paths = generate_synthetic(bench_spec(), dir);
  std::vector<Scene> scenes;
  for (const std::string& path : paths) scenes.push_back(load_scene(path));

  const TrainConfig pointwise = bench_config(dir);
  const TrainResult p = train(pointwise);
  const double p50 = map50_on(p.model, scenes);

  TrainConfig unet = pointwise;
  unet.backbone = "unet";
  const TrainResult u = train(unet);
  const double u50 = map50_on(u.model, scenes);

  shared.data_dir = dir;
  shared.scenes = scenes;
  shared.pointwise_map50 = p50;

  const double elapsed = timer.seconds();
  if (elapsed >= 600.0) return {false, format("took %.0fs, budget is 600s", elapsed)};
  if (p50 < 0.90 || u50 < 0.80) {
    return {false,
            format("pointwise mAP50 %.4f (needs 0.90), unet mAP50 %.4f (needs 0.80)",
                   p50, u50)};
  }
  return {true,
          format("pointwise mAP50 %.4f, unet mAP50 %.4f, %.0fs", p50, u50, elapsed)};
}

SynthSpec transfer_spec(const std::string& id, std::size_t scenes, std::uint64_t seed) {
  SynthSpec spec = bench_spec();
  spec.dataset_id = id;
  spec.num_scenes = scenes;
  spec.seed = seed;
  spec.points_per_object = 100;
  spec.clutter_points = 10;
  spec.rotated = false;
  return spec;
}

double arm_map50(const AblationReport& report, const std::string& name) {
  for (const AblationArm& arm : report.arms) {
    if (arm.name == name) return arm.report.map.at(0.5);
  }
  throw std::runtime_error("ablation arm " + name + " missing");
}

// Three seeded comparisons: removing the encoder must cost at least 0.10
// mAP50 on the overfit protocol, joint training on a large plus small
// mixture must beat training the small dataset alone by at least 0.05 mAP50
// on its held-out scenes, and the unified label space must produce a
// strictly smaller classification head than the partitioned one.
Outcome check_ablations(const Scratch& scratch, const OverfitArtifacts& shared) {
  if (shared.pointwise_map50 < 0.0) {
    return {false, "four-layer reference run unavailable (overfit check failed)"};
  }
  TrainConfig no_encoder = bench_config(shared.data_dir);
  no_encoder.encoder.layers = 0;
  const TrainResult zero = train(no_encoder);
  const double zero50 = map50_on(zero.model, shared.scenes);
  const double gap = shared.pointwise_map50 - zero50;

  const std::string small_train = scratch.path("small_train");
  const std::string small_val = scratch.path("small_val");
  const std::string large = scratch.path("large");
  generate_synthetic(transfer_spec("small", 2, 31), small_train);
  generate_synthetic(transfer_spec("small", 6, 32), small_val);
  generate_synthetic(transfer_spec("large", 48, 33), large);

  TrainConfig mixture = bench_config(small_train);
  mixture.epochs = 300;
  DatasetConfig small;
  small.dataset_id = "small";
  small.vocabulary = small_train + "/small.vocab.json";
  small.train = {small_train};
  small.val = {small_val};
  DatasetConfig big;
  big.dataset_id = "large";
  big.vocabulary = large + "/large.vocab.json";
  big.train = {large};
  mixture.datasets = {small, big};

  const AblationReport schemes = ablate("scheme", mixture);
  const double scratch50 = arm_map50(schemes, "scheme=from_scratch");
  const double joint50 = arm_map50(schemes, "scheme=joint");

  TrainConfig quick = mixture;
  quick.epochs = 10;
  const AblationReport modes = ablate("label_mode", quick);
  std::size_t unified_head = 0, partitioned_head = 0;
  for (const AblationArm& arm : modes.arms) {
    if (arm.name == "label_mode=unified") unified_head = arm.cls_parameters;
    if (arm.name == "label_mode=partitioned") partitioned_head = arm.cls_parameters;
  }

  if (gap < 0.10) {
    return {false,
            format("encoder gap %.4f (layers 4 at %.4f, layers 0 at %.4f), needs 0.10",
                   gap, shared.pointwise_map50, zero50)};
  }
  if (joint50 - scratch50 < 0.05) {
    return {false,
            format("joint %.4f vs from_scratch %.4f on held-out scenes, needs a 0.05 "
                   "margin",
                   joint50, scratch50)};
  }
  if (unified_head == 0 || partitioned_head == 0 || unified_head >= partitioned_head) {
    return {false, format("classification head sizes: unified %zu, partitioned %zu",
                          unified_head, partitioned_head)};
  }
  return {true, format("encoder gap %.2f (%.4f vs %.4f); joint %.4f vs scratch %.4f "
                       "held out; heads %zu < %zu",
                       gap, shared.pointwise_map50, zero50, joint50, scratch50,
                       unified_head, partitioned_head)};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Bit-identical checkpoints from identical config and seed, and seeded
// replay of the point cap and the augmentation.
Outcome check_determinism(const Scratch& scratch, const OverfitArtifacts& shared) {
  if (shared.data_dir.empty()) {
    return {false, "overfit data unavailable (overfit check failed)"};
  }
  TrainConfig config = bench_config(shared.data_dir);
  config.epochs = 3;
  config.seed = 5;
  const TrainResult first = train(config);
  const TrainResult second = train(config);
  if (first.losses != second.losses) {
    return {false, "loss logs differ between identical runs"};
  }
  const std::string a = scratch.path("a.ckpt.json");
  const std::string b = scratch.path("b.ckpt.json");
  save_checkpoint(first.model, a);
  save_checkpoint(second.model, b);
  const std::string bytes_a = slurp(a), bytes_b = slurp(b);
  if (bytes_a.empty() || bytes_a != bytes_b) {
    return {false, "checkpoints from identical runs differ"};
  }

  const Scene& scene = shared.scenes.front();
  Rng cap_a(99), cap_b(99);
  const CapResult capped_a = cap_points(scene, scene.num_points() / 2, cap_a);
  const CapResult capped_b = cap_points(scene, scene.num_points() / 2, cap_b);
  if (capped_a.kept != capped_b.kept ||
      capped_a.scene.points != capped_b.scene.points) {
    return {false, "cap_points is not reproducible from its seed"};
  }
  AugmentParams params;
  params.enabled = true;
  Rng aug_a(123), aug_b(123);
  const Scene aug_first = augment(scene, params, aug_a);
  const Scene aug_second = augment(scene, params, aug_b);
  if (aug_first.points != aug_second.points) {
    return {false, "augment is not reproducible from its seed"};
  }

  return {true, format("checkpoints byte-identical (%zu bytes); cap_points and "
                       "augment replay exactly",
                       bytes_a.size())};
}

// The shipped defaults carry the published constants and the CLI help text
// states them verbatim.
Outcome check_constants(const std::string& cli) {
  const TrainConfig defaults;
  if (defaults.lambda != 0.25 || defaults.beta != 0.5 || defaults.candidates != 3 ||
      defaults.lr != 1e-4 || defaults.weight_decay != 0.05 ||
      defaults.poly_power != 0.9) {
    return {false, "TrainConfig defaults do not carry the shipped constants"};
  }
  const std::string command = "'" + cli + "' --help 2>&1";
  FILE* pipe = ::popen(command.c_str(), "r");
  if (pipe == nullptr) return {false, "could not run the CLI for its help text"};
  std::string help;
  char buf[4096];
  std::size_t got = 0;
  while ((got = std::fread(buf, 1, sizeof buf, pipe)) > 0) help.append(buf, got);
  const int status = ::pclose(pipe);
  if (status != 0) return {false, format("CLI --help exited with status %d", status)};
  for (const char* token :
       {"λ=0.25", "β=0.5", "j=3", "lr=1e-4", "wd=0.05", "poly 0.9"}) {
    if (help.find(token) == std::string::npos) {
      return {false, format("help text is missing \"%s\"", token)};
    }
  }
  return {true, "defaults hold λ=0.25, β=0.5, j=3, lr=1e-4, wd=0.05, poly 0.9 and "
                "the help text states each one"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <path to the unidet CLI>\n");
    return 2;
  }
  const std::string cli = argv[1];
  Scratch scratch;
  OverfitArtifacts shared;

  const std::vector<std::pair<const char*, std::function<Outcome()>>> checks = {
      {"gradients", [] { return check_gradients(); }},
      {"matching oracles", [] { return check_matching(); }},
      {"geometry oracles", [] { return check_geometry(); }},
      {"evaluator oracle", [] { return check_evaluator(); }},
      {"label spaces", [] { return check_label_spaces(); }},
      {"synthetic overfit", [&] { return check_overfit(scratch, shared); }},
      {"ablation directions", [&] { return check_ablations(scratch, shared); }},
      {"determinism", [&] { return check_determinism(scratch, shared); }},
      {"shipped constants", [&] { return check_constants(cli); }},
  };

  bool all = true;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    Outcome outcome;
    try {
      outcome = checks[i].second();
    } catch (const std::exception& e) {
      outcome = {false, std::string("threw: ") + e.what()};
    }
    all = all && outcome.pass;
    std::printf("%zu %s: %s (%s)\n", i + 1, checks[i].first,
                outcome.pass ? "PASS" : "FAIL", outcome.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
