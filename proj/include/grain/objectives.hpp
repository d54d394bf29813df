#pragma once

// Training objectives: global image-caption contrast, matched box regression,
// and region-description contrast, summed with equal weight.

#include <nlohmann/json.hpp>

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "grain/assignment.hpp"
#include "grain/autodiff.hpp"
#include "grain/box_geometry.hpp"
#include "grain/errors.hpp"

namespace grain {

enum class IouLossKind { kGeneralized, kPlain };

// A loss value together with the number of terms it averages; a weight of 0
// marks a loss that had nothing to average over.
struct WeightedLoss {
  ad::Var value;
  std::size_t weight = 0;
};

namespace objectives_detail {
inline ad::Var symmetric_infonce(const ad::Var& a, const ad::Var& b, const ad::Var& logit_scale) {
  const auto logits = ad::matmul(a, ad::transpose(b)) * logit_scale;
  std::vector<ad::Index> diag(static_cast<std::size_t>(a.rows()));
  std::iota(diag.begin(), diag.end(), ad::Index{0});
  return (ad::cross_entropy_rows(logits, diag) + ad::cross_entropy_rows(ad::transpose(logits), diag)) * 0.5;
}
}  // namespace objectives_detail

// Symmetric cross-entropy over the B x B scaled cosine-similarity matrix with
// matched pairs on the diagonal.
inline ad::Var image_caption_loss(const ad::Var& image_embeds, const ad::Var& caption_embeds,
                                  const ad::Var& logit_scale) {
  if (image_embeds.rows() != caption_embeds.rows() || image_embeds.cols() != caption_embeds.cols())
    throw ShapeError("image and caption batches differ in shape");
  if (image_embeds.rows() == 0) throw ShapeError("empty batch");
  return objectives_detail::symmetric_infonce(image_embeds, caption_embeds, logit_scale);
}

inline double image_caption_loss(const ad::Matrix& image_embeds, const ad::Matrix& caption_embeds,
                                 double logit_scale) {
  return image_caption_loss(ad::constant(image_embeds), ad::constant(caption_embeds), ad::Var::scalar(logit_scale))
      .item();
}

// Differentiable (1 - IoU-term) + L1 for one matched pair.
inline ad::Var matched_box_loss(const NormBox& gt, const ad::Var& pred_boxes, int query,
                                IouLossKind kind = IouLossKind::kGeneralized) {
  using ad::Var;
  const BasicBox<Var> target{Var::scalar(gt.cx), Var::scalar(gt.cy), Var::scalar(gt.w), Var::scalar(gt.h)};
  const BasicBox<Var> pred{ad::element(pred_boxes, query, 0), ad::element(pred_boxes, query, 1),
                           ad::element(pred_boxes, query, 2), ad::element(pred_boxes, query, 3)};
  const Var overlap = kind == IouLossKind::kGeneralized ? generalized_iou(target, pred) : iou(target, pred);
  return (1.0 - overlap) + l1_distance(target, pred);
}

// Mean over every matched pair in the batch. Images without ground truth add
// no terms.
inline WeightedLoss box_loss(std::span<const std::vector<NormBox>> gt_boxes, std::span<const ad::Var> pred_boxes,
                             std::span<const Assignment> assignments,
                             IouLossKind kind = IouLossKind::kGeneralized) {
  if (gt_boxes.size() != pred_boxes.size() || gt_boxes.size() != assignments.size())
    throw ShapeError("box_loss inputs differ in batch size");
  std::vector<ad::Var> terms;
  for (std::size_t b = 0; b < gt_boxes.size(); ++b) {
    if (assignments[b].pairs.size() != gt_boxes[b].size()) throw ShapeError("assignment does not cover ground truth");
    for (const auto& [gt, q] : assignments[b].pairs)
      terms.push_back(matched_box_loss(gt_boxes[b][static_cast<std::size_t>(gt)], pred_boxes[b], q, kind));
  }
  if (terms.empty()) return {ad::Var::scalar(0.0), 0};
  return {ad::mean(ad::concat_rows(terms)), terms.size()};
}

// InfoNCE over all matched (region, description) pairs pooled across the
// batch: each region is scored against every matched description and vice
// versa, the two directions averaged.
inline WeightedLoss region_description_loss(std::span<const ad::Var> region_embeds,
                                            std::span<const ad::Var> description_embeds,
                                            std::span<const Assignment> assignments, const ad::Var& logit_scale) {
  if (region_embeds.size() != description_embeds.size() || region_embeds.size() != assignments.size())
    throw ShapeError("region_description_loss inputs differ in batch size");
  std::vector<ad::Var> regions, descriptions;
  for (std::size_t b = 0; b < region_embeds.size(); ++b) {
    if (assignments[b].pairs.empty()) continue;
    std::vector<ad::Index> queries, gts;
    for (const auto& [gt, q] : assignments[b].pairs) {
      gts.push_back(gt);
      queries.push_back(q);
    }
    if (description_embeds[b].rows() != static_cast<ad::Index>(gts.size()))
      throw ShapeError("each matched region needs exactly one description");
    regions.push_back(ad::gather_rows(region_embeds[b], queries));
    descriptions.push_back(ad::gather_rows(description_embeds[b], gts));
  }
  if (regions.empty()) return {ad::Var::scalar(0.0), 0};
  const auto r = ad::concat_rows(regions);
  const auto d = ad::concat_rows(descriptions);
  return {objectives_detail::symmetric_infonce(r, d, logit_scale), static_cast<std::size_t>(r.rows())};
}

// Pooled-pair form over already-gathered matched rows.
inline double region_description_loss(const ad::Matrix& matched_regions, const ad::Matrix& matched_descriptions,
                                      double logit_scale) {
  if (matched_regions.rows() != matched_descriptions.rows()) throw ShapeError("pair count mismatch");
  if (matched_regions.rows() == 0) return 0.0;
  return objectives_detail::symmetric_infonce(ad::constant(matched_regions), ad::constant(matched_descriptions),
                                              ad::Var::scalar(logit_scale))
      .item();
}

struct LossBreakdown {
  double l_ic = 0.0;
  double l_box = 0.0;
  double l_rd = 0.0;
  double l_total = 0.0;

  bool finite() const {
    return std::isfinite(l_ic) && std::isfinite(l_box) && std::isfinite(l_rd) && std::isfinite(l_total);
  }
};

inline void to_json(nlohmann::json& j, const LossBreakdown& l) {
  j = {{"l_ic", l.l_ic}, {"l_box", l.l_box}, {"l_rd", l.l_rd}, {"l_total", l.l_total}};
}

struct LossSwitches {
  bool use_box_loss = true;
  bool use_rd_loss = true;
};

// Unweighted sum of the enabled components. Disabled components are
// reported as 0.
inline LossBreakdown total_loss(double l_ic, double l_box, double l_rd, LossSwitches switches = {}) {
  LossBreakdown out;
  out.l_ic = l_ic;
  out.l_box = switches.use_box_loss ? l_box : 0.0;
  out.l_rd = switches.use_rd_loss ? l_rd : 0.0;
  out.l_total = out.l_ic + out.l_box + out.l_rd;
  return out;
}

}  // namespace grain
