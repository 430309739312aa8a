#include "dgst/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace dgst {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0;
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

double sample_std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

double dsc(const IntTensor& pred, const IntTensor& gt) {
  if (!pred.same_shape(gt))
    throw shape_error("dsc: mask shapes differ, " + shape_str(pred.shape) +
                      " vs " + shape_str(gt.shape));
  int64_t a = 0, b = 0, inter = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const bool pa = pred.data[i] != 0, pb = gt.data[i] != 0;
    a += pa;
    b += pb;
    inter += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * double(inter) / double(a + b);
}

namespace {

std::vector<std::pair<int32_t, int32_t>> boundary_4(const IntTensor& m) {
  const int64_t h = m.dim(0), w = m.dim(1);
  std::vector<std::pair<int32_t, int32_t>> out;
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c) {
      if (m.data[size_t(r * w + c)] == 0) continue;
      const bool on_border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
      if (on_border || m.data[size_t((r - 1) * w + c)] == 0 ||
          m.data[size_t((r + 1) * w + c)] == 0 ||
          m.data[size_t(r * w + c - 1)] == 0 ||
          m.data[size_t(r * w + c + 1)] == 0)
        out.emplace_back(int32_t(r), int32_t(c));
    }
  return out;
}

int64_t covered_within(const std::vector<std::pair<int32_t, int32_t>>& from,
                       const std::vector<std::pair<int32_t, int32_t>>& to,
                       double tol2) {
  int64_t n = 0;
  for (const auto& p : from) {
    for (const auto& q : to) {
      const double dr = double(p.first - q.first);
      const double dc = double(p.second - q.second);
      if (dr * dr + dc * dc <= tol2) {
        ++n;
        break;
      }
    }
  }
  return n;
}

}  // namespace

double nsd(const IntTensor& pred, const IntTensor& gt, double tol_px) {
  if (!pred.same_shape(gt))
    throw shape_error("nsd: mask shapes differ, " + shape_str(pred.shape) +
                      " vs " + shape_str(gt.shape));
  if (tol_px < 0) throw config_error("nsd: tolerance must be non-negative");
  const auto bp = boundary_4(pred);
  const auto bg = boundary_4(gt);
  if (bp.empty() && bg.empty()) return 1.0;
  if (bp.empty() || bg.empty()) return 0.0;
  const double tol2 = tol_px * tol_px + 1e-12;
  const int64_t k = covered_within(bp, bg, tol2) + covered_within(bg, bp, tol2);
  return double(k) / double(bp.size() + bg.size());
}

CaseMetrics evaluate_case(const Model& model, const SegSample& sample,
                          double tol_px) {
  const int64_t h = sample.image.dim(1), w = sample.image.dim(2);
  Tensor batch(std::vector<int64_t>{1, sample.image.dim(0), h, w},
               sample.image.data);
  Tensor logits = model.forward(batch);
  const int64_t c = logits.dim(1), hw = h * w;

  IntTensor pred = IntTensor::zeros({h, w});
  for (int64_t j = 0; j < hw; ++j) {
    int best = 0;
    real bv = logits.data[size_t(j)];
    for (int64_t k = 1; k < c; ++k) {
      const real v = logits.data[size_t(k * hw + j)];
      if (v > bv) {
        bv = v;
        best = int(k);
      }
    }
    pred.data[size_t(j)] = best != 0 ? 1 : 0;
  }
  IntTensor gtmask = IntTensor::zeros({h, w});
  for (int64_t j = 0; j < hw; ++j)
    gtmask.data[size_t(j)] = sample.label.data[size_t(j)] != 0 ? 1 : 0;

  return CaseMetrics{dsc(pred, gtmask), nsd(pred, gtmask, tol_px)};
}

MetricsReport MetricsReport::from_cases(std::vector<double> dsc_vals,
                                        std::vector<double> nsd_vals) {
  MetricsReport r;
  r.case_dsc = std::move(dsc_vals);
  r.case_nsd = std::move(nsd_vals);
  r.dsc_mean = mean_of(r.case_dsc);
  r.dsc_std = sample_std_of(r.case_dsc);
  r.nsd_mean = mean_of(r.case_nsd);
  r.nsd_std = sample_std_of(r.case_nsd);
  return r;
}

MetricsReport evaluate_dataset(const Model& model,
                               const std::vector<SegSample>& cases,
                               double tol_px) {
  std::vector<double> d, s;
  d.reserve(cases.size());
  s.reserve(cases.size());
  for (const auto& c : cases) {
    const CaseMetrics m = evaluate_case(model, c, tol_px);
    d.push_back(m.dsc);
    s.push_back(m.nsd);
  }
  return MetricsReport::from_cases(std::move(d), std::move(s));
}

}  // namespace dgst
