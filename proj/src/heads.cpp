#include "unidet/heads.hpp"

#include <array>
#include <stdexcept>
#include <string>

#include "unidet/boxmath.hpp"

namespace unidet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void validate_config(const HeadConfig& config) {
  if (config.in_channels == 0) fail("heads: in_channels must be positive");
  if (config.num_classes == 0) fail("heads: num_classes must be positive");
  if (config.depth == 0) fail("heads: depth must be positive");
}

void validate_features(const PredictionHeads& heads, const Tensor& features,
                       const char* who) {
  if (!features.defined() || features.ndim() != 2) {
    fail(std::string(who) + ": features must be a 2-D tensor");
  }
  if (features.cols() != heads.config.in_channels) {
    fail(std::string(who) + ": features have " + std::to_string(features.cols()) +
         " channels, heads expect " + std::to_string(heads.config.in_channels));
  }
}

void init_branch(std::vector<Tensor>& ws, std::vector<Tensor>& bs,
                 const HeadConfig& config, std::size_t out_channels, Rng& rng) {
  for (std::size_t i = 0; i < config.depth; ++i) {
    const std::size_t out = i + 1 == config.depth ? out_channels : config.in_channels;
    ws.push_back(init_uniform({config.in_channels, out}, config.in_channels, rng));
    bs.push_back(init_uniform({out}, config.in_channels, rng));
  }
}

Tensor run_branch(const Tensor& features, const std::vector<Tensor>& ws,
                  const std::vector<Tensor>& bs) {
  Tensor x = features;
  for (std::size_t i = 0; i < ws.size(); ++i) {
    x = affine(x, ws[i], bs[i]);
    if (i + 1 < ws.size()) x = relu(x);
  }
  return x;
}

boxmath::BoxT<boxmath::Dual<8>> constant_box(const Box3D& box) {
  using D = boxmath::Dual<8>;
  return {D(box.cx), D(box.cy), D(box.cz), D(box.sx), D(box.sy), D(box.sz), D(box.yaw)};
}

}  // namespace

PredictionHeads make_heads(const HeadConfig& config, Rng& rng) {
  validate_config(config);
  PredictionHeads heads;
  heads.config = config;
  init_branch(heads.cls_w, heads.cls_b, config, config.num_classes + 1, rng);
  init_branch(heads.box_w, heads.box_b, config, 8, rng);
  return heads;
}

Tensor class_logits(const PredictionHeads& heads, const Tensor& features) {
  validate_features(heads, features, "class_logits");
  return run_branch(features, heads.cls_w, heads.cls_b);
}

Tensor class_head(const PredictionHeads& heads, const Tensor& features) {
  return softmax(slice_cols(class_logits(heads, features), 0, heads.config.num_classes));
}

Tensor box_encodings(const PredictionHeads& heads, const Tensor& features) {
  validate_features(heads, features, "box_encodings");
  const Tensor raw = run_branch(features, heads.box_w, heads.box_b);
  return concat_cols({exp(slice_cols(raw, 0, 6)), slice_cols(raw, 6, 2)});
}

std::vector<Box3D> decode_boxes(const Tensor& encodings, const std::vector<Vec3>& refs) {
  if (!encodings.defined() || encodings.ndim() != 2 || encodings.cols() != 8) {
    fail("decode_boxes: encodings must be M x 8");
  }
  if (refs.size() != encodings.rows()) {
    fail("decode_boxes: got " + std::to_string(refs.size()) + " reference points for " +
         std::to_string(encodings.rows()) + " encodings");
  }
  std::vector<Box3D> boxes;
  boxes.reserve(refs.size());
  for (std::size_t r = 0; r < refs.size(); ++r) {
    BoxEncoding enc;
    for (std::size_t j = 0; j < 8; ++j) enc[j] = encodings.at(r, j);
    boxes.push_back(decode_box(enc, refs[r]));
  }
  return boxes;
}

std::vector<Box3D> box_head(const PredictionHeads& heads, const Tensor& features,
                            const std::vector<Vec3>& refs) {
  return decode_boxes(box_encodings(heads, features), refs);
}

std::vector<Proposal> make_proposals(const PredictionHeads& heads, const Tensor& features,
                                     const std::vector<Vec3>& refs) {
  const Tensor probs = class_head(heads, features);
  const std::vector<Box3D> boxes = box_head(heads, features, refs);
  std::vector<Proposal> proposals(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    Proposal& p = proposals[i];
    p.box = boxes[i];
    p.query_index = static_cast<int>(i);
    p.class_scores.assign(probs.data() + i * probs.cols(),
                          probs.data() + (i + 1) * probs.cols());
  }
  return proposals;
}

Tensor diou_matched(const Tensor& encodings, const std::vector<Vec3>& refs,
                    const std::vector<int>& rows, const std::vector<Box3D>& targets) {
  using D = boxmath::Dual<8>;
  if (!encodings.defined() || encodings.ndim() != 2 || encodings.cols() != 8) {
    fail("diou_matched: encodings must be M x 8");
  }
  if (refs.size() != encodings.rows()) {
    fail("diou_matched: got " + std::to_string(refs.size()) + " reference points for " +
         std::to_string(encodings.rows()) + " encodings");
  }
  if (rows.size() != targets.size()) {
    fail("diou_matched: " + std::to_string(rows.size()) + " rows vs " +
         std::to_string(targets.size()) + " target boxes");
  }
  if (rows.empty()) fail("diou_matched: no pairs");
  const std::size_t count = rows.size();
  std::vector<double> values(count);
  std::vector<std::array<double, 8>> partials(count);
  for (std::size_t p = 0; p < count; ++p) {
    const int r = rows[p];
    if (r < 0 || static_cast<std::size_t>(r) >= encodings.rows()) {
      fail("diou_matched: row " + std::to_string(r) + " out of range");
    }
    validate_box(targets[p]);
    std::array<D, 8> enc;
    for (std::size_t j = 0; j < 8; ++j) {
      enc[j] = D::seed(encodings.at(static_cast<std::size_t>(r), j), j);
    }
    const auto pred = boxmath::decode_box_general(enc, refs[static_cast<std::size_t>(r)]);
    const D dist = boxmath::diou_general(pred, constant_box(targets[p]));
    values[p] = dist.v;
    partials[p] = dist.d;
  }
  Tensor parent = encodings;
  std::vector<int> saved_rows = rows;
  return make_op("diou_matched", {count, 1}, std::move(values), {encodings},
                 [parent, saved_rows, partials](const std::vector<double>& g) mutable {
                   if (!parent.requires_grad()) return;
                   double* ge = parent.grad_buffer();
                   for (std::size_t p = 0; p < saved_rows.size(); ++p) {
                     const std::size_t base = static_cast<std::size_t>(saved_rows[p]) * 8;
                     for (std::size_t j = 0; j < 8; ++j) {
                       ge[base + j] += g[p] * partials[p][j];
                     }
                   }
                 });
}

std::vector<std::pair<std::string, Tensor>> head_parameters(const PredictionHeads& heads) {
  std::vector<std::pair<std::string, Tensor>> params;
  auto push = [&params](const std::string& branch, const std::vector<Tensor>& ws,
                        const std::vector<Tensor>& bs) {
    for (std::size_t i = 0; i < ws.size(); ++i) {
      params.emplace_back(branch + ".layer" + std::to_string(i) + ".weight", ws[i]);
      params.emplace_back(branch + ".layer" + std::to_string(i) + ".bias", bs[i]);
    }
  };
  push("cls", heads.cls_w, heads.cls_b);
  push("box", heads.box_w, heads.box_b);
  return params;
}

}  // namespace unidet
