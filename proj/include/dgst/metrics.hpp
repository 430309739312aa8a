#pragma once

#include <vector>

#include "dgst/tensor.hpp"
#include "dgst/unet.hpp"

namespace dgst {

// One segmentation case: image [1,H,W] in [0,1], label [H,W] class ids.
struct SegSample {
  Tensor image;
  IntTensor label;
};

// Dice similarity of binary HxW masks; both empty -> 1.
double dsc(const IntTensor& pred, const IntTensor& gt);

// Normalized surface dice at a pixel tolerance. Boundary pixels are mask
// pixels with a background 4-neighbour or on the image border; distances are
// Euclidean between pixel centers. Both masks empty -> 1, exactly one -> 0.
double nsd(const IntTensor& pred, const IntTensor& gt, double tol_px);

struct CaseMetrics {
  double dsc = 0;
  double nsd = 0;
};

// argmax logits -> foreground mask (any class != 0), metrics vs the label.
CaseMetrics evaluate_case(const Model& model, const SegSample& sample,
                          double tol_px = 1.0);

struct MetricsReport {
  std::vector<double> case_dsc, case_nsd;
  double dsc_mean = 0, dsc_std = 0, nsd_mean = 0, nsd_std = 0;  // sample std

  static MetricsReport from_cases(std::vector<double> dsc_vals,
                                  std::vector<double> nsd_vals);
};

MetricsReport evaluate_dataset(const Model& model,
                               const std::vector<SegSample>& cases,
                               double tol_px = 1.0);

double mean_of(const std::vector<double>& v);
double sample_std_of(const std::vector<double>& v);

}  // namespace dgst
