#include "dgst/synth.hpp"

#include <algorithm>
#include <cmath>

namespace dgst {

void DomainSpec::validate() const {
  if (image_size < 8) throw config_error("domain: image size too small");
  if (blob_min < 1 || blob_max < blob_min)
    throw config_error("domain '" + name + "': degenerate blob count range");
  if (families.empty())
    throw config_error("domain '" + name + "': no shape families");
  if (contrast_polarity != 1 && contrast_polarity != -1)
    throw config_error("domain '" + name + "': polarity must be +1 or -1");
  if ((fg_mean > bg_mean) != (contrast_polarity > 0))
    throw config_error("domain '" + name +
                       "': intensity means contradict the polarity flag");
}

DomainSpec source_domain() {
  DomainSpec s;
  s.name = "source";
  s.blob_min = 1;
  s.blob_max = 3;
  s.families = {ShapeFamily::ellipse};
  s.fg_mean = 0.72;
  s.fg_std = 0.05;
  s.bg_mean = 0.28;
  s.bg_std = 0.05;
  s.texture_amp = 0.04;
  s.contrast_polarity = +1;
  return s;
}

DomainSpec near_domain() {
  DomainSpec s;
  s.name = "near";
  s.blob_min = 1;
  s.blob_max = 3;
  s.families = {ShapeFamily::ellipse};
  s.fg_mean = 0.60;
  s.fg_std = 0.06;
  s.bg_mean = 0.38;
  s.bg_std = 0.06;
  s.texture_amp = 0.08;
  s.contrast_polarity = +1;
  return s;
}

DomainSpec far_domain() {
  DomainSpec s;
  s.name = "far";
  s.blob_min = 1;
  s.blob_max = 4;
  s.families = {ShapeFamily::lobulated, ShapeFamily::ring};
  s.fg_mean = 0.30;
  s.fg_std = 0.06;
  s.bg_mean = 0.70;
  s.bg_std = 0.06;
  s.texture_amp = 0.08;
  s.contrast_polarity = -1;
  return s;
}

namespace {

struct Blob {
  ShapeFamily family;
  double cx, cy;      // center
  double ax, ay;      // semi-axes
  double phi;         // rotation
  double lobes;       // lobulated: count
  double lobe_amp;    // lobulated: radial modulation
  double inner_frac;  // ring: inner radius fraction
  double intensity;
};

bool inside(const Blob& b, double x, double y) {
  const double dx = x - b.cx, dy = y - b.cy;
  const double c = std::cos(b.phi), s = std::sin(b.phi);
  const double u = (c * dx + s * dy) / b.ax;
  const double v = (-s * dx + c * dy) / b.ay;
  const double r = std::sqrt(u * u + v * v);
  switch (b.family) {
    case ShapeFamily::ellipse:
      return r <= 1.0;
    case ShapeFamily::lobulated: {
      const double theta = std::atan2(v, u);
      const double rim = 1.0 + b.lobe_amp * std::sin(b.lobes * theta);
      return r <= rim;
    }
    case ShapeFamily::ring:
      return r <= 1.0 && r >= b.inner_frac;
  }
  return false;
}

SegSample generate_sample(const DomainSpec& spec, uint64_t sample_seed) {
  const int n = spec.image_size;
  Rng rng(sample_seed);
  SegSample s;
  s.image = Tensor::zeros({1, n, n});
  s.label = IntTensor::zeros({n, n});

  const double bg_base = rng.normal(spec.bg_mean, spec.bg_std);

  // retry until the union mask is non-empty; bounded and deterministic
  for (int attempt = 0; attempt < 16; ++attempt) {
    const int blobs = spec.blob_min +
                      int(rng.uniform_int(spec.blob_max - spec.blob_min + 1));
    std::vector<Blob> placed;
    for (int i = 0; i < blobs; ++i) {
      Blob b;
      b.family = spec.families[size_t(rng.uniform_int(int64_t(spec.families.size())))];
      const double margin = double(n) * 0.18;
      b.cx = rng.uniform(margin, double(n) - margin);
      b.cy = rng.uniform(margin, double(n) - margin);
      b.ax = rng.uniform(double(n) * 0.07, double(n) * 0.18);
      b.ay = rng.uniform(double(n) * 0.07, double(n) * 0.18);
      b.phi = rng.uniform(0.0, 3.14159265358979323846);
      b.lobes = double(3 + rng.uniform_int(3));
      b.lobe_amp = rng.uniform(0.18, 0.32);
      b.inner_frac = rng.uniform(0.40, 0.62);
      b.intensity = rng.normal(spec.fg_mean, spec.fg_std);
      placed.push_back(b);
    }

    std::fill(s.label.data.begin(), s.label.data.end(), 0);
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < n; ++c) {
        real v = real(bg_base);
        bool fg = false;
        for (const auto& b : placed)
          if (inside(b, double(c), double(r))) {
            v = real(b.intensity);
            fg = true;
          }
        s.image.data[size_t(r * n + c)] = v;
        s.label.data[size_t(r * n + c)] = fg ? 1 : 0;
      }

    int64_t area = 0;
    for (int32_t v : s.label.data) area += v;
    if (area >= 8) break;
  }

  for (auto& v : s.image.data) {
    v += real(spec.texture_amp * rng.normal());
    v = std::clamp(v, real(0), real(1));
  }
  return s;
}

}  // namespace

Dataset generate_domain(const DomainSpec& spec, int n, uint64_t seed) {
  spec.validate();
  if (n < 1) throw config_error("generate_domain: n must be >= 1");
  Dataset d;
  d.domain = spec.name;
  d.seed = seed;
  d.samples.reserve(size_t(n));
  for (int i = 0; i < n; ++i)
    d.samples.push_back(
        generate_sample(spec, derive_seed(seed, spec.name, uint64_t(i))));
  return d;
}

Split few_shot_split(const Dataset& data, int shots, uint64_t seed) {
  const int n = int(data.samples.size());
  const int n_test = n / 5;
  const int pool = n - n_test;
  if (shots < 1 || shots > pool)
    throw config_error("few_shot_split: shots=" + std::to_string(shots) +
                       " exceeds the 80% pool of " + std::to_string(pool));
  // test partition depends only on (dataset, seed), never on k
  std::vector<int> perm = permutation(n, derive_seed(seed, "split", data.seed));
  Split sp;
  sp.test_idx.assign(perm.begin(), perm.begin() + n_test);
  std::vector<int> rest(perm.begin() + n_test, perm.end());
  Rng shot_rng(derive_seed(seed, "shots", data.seed));
  shot_rng.shuffle(rest);
  sp.train_idx.assign(rest.begin(), rest.begin() + shots);
  std::sort(sp.test_idx.begin(), sp.test_idx.end());
  return sp;
}

std::vector<SegSample> gather(const Dataset& data, const std::vector<int>& idx) {
  std::vector<SegSample> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(data.samples[size_t(i)]);
  return out;
}

AugDraws draw_augmentation(Rng& rng) {
  AugDraws d;
  d.flip_h = rng.bernoulli(0.5);
  d.flip_v = rng.bernoulli(0.5);
  d.angle_deg = rng.uniform(-15.0, 15.0);
  d.scale = rng.uniform(0.85, 1.25);
  d.noise_sigma = rng.uniform(0.0, 0.05);
  d.brightness = rng.uniform(-0.1, 0.1);
  d.contrast = rng.uniform(0.9, 1.1);
  return d;
}

SegSample flip_horizontal(const SegSample& s) {
  const int64_t h = s.image.dim(1), w = s.image.dim(2);
  SegSample out = s;
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c) {
      out.image.data[size_t(r * w + c)] = s.image.data[size_t(r * w + (w - 1 - c))];
      out.label.data[size_t(r * w + c)] = s.label.data[size_t(r * w + (w - 1 - c))];
    }
  return out;
}

SegSample flip_vertical(const SegSample& s) {
  const int64_t h = s.image.dim(1), w = s.image.dim(2);
  SegSample out = s;
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c) {
      out.image.data[size_t(r * w + c)] = s.image.data[size_t((h - 1 - r) * w + c)];
      out.label.data[size_t(r * w + c)] = s.label.data[size_t((h - 1 - r) * w + c)];
    }
  return out;
}

SegSample augment_apply(const SegSample& s, const AugDraws& d, Rng& noise_rng) {
  SegSample out = s;
  if (d.flip_h) out = flip_horizontal(out);
  if (d.flip_v) out = flip_vertical(out);

  const int64_t h = out.image.dim(1), w = out.image.dim(2);
  if (d.angle_deg != 0.0 || d.scale != 1.0) {
    // inverse affine about the center; bilinear image, nearest label,
    // clamp-to-edge sampling
    const double theta = d.angle_deg * 3.14159265358979323846 / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double cy = double(h - 1) / 2.0, cx = double(w - 1) / 2.0;
    Tensor img = Tensor::zeros(out.image.shape);
    IntTensor lab = IntTensor::zeros(out.label.shape);
    for (int64_t r = 0; r < h; ++r)
      for (int64_t c = 0; c < w; ++c) {
        const double dy = (double(r) - cy) / d.scale;
        const double dx = (double(c) - cx) / d.scale;
        const double sy = cy + (-st * dx + ct * dy);
        const double sx = cx + (ct * dx + st * dy);
        const double fy = std::clamp(sy, 0.0, double(h - 1));
        const double fx = std::clamp(sx, 0.0, double(w - 1));
        const int64_t y0 = int64_t(std::floor(fy)), x0 = int64_t(std::floor(fx));
        const int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        const double wy = fy - double(y0), wx = fx - double(x0);
        auto px = [&](int64_t yy, int64_t xx) {
          return double(out.image.data[size_t(yy * w + xx)]);
        };
        img.data[size_t(r * w + c)] =
            real((1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                 wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1)));
        const int64_t ny = int64_t(std::lround(fy)), nx = int64_t(std::lround(fx));
        lab.data[size_t(r * w + c)] = out.label.data[size_t(ny * w + nx)];
      }
    out.image = std::move(img);
    out.label = std::move(lab);
  }

  if (d.noise_sigma > 0.0)
    for (auto& v : out.image.data) v += real(noise_rng.normal(0.0, d.noise_sigma));

  if (d.brightness != 0.0 || d.contrast != 1.0)
    for (auto& v : out.image.data)
      v = real(d.contrast * (double(v) - 0.5) + 0.5 + d.brightness);

  for (auto& v : out.image.data) v = std::clamp(v, real(0), real(1));
  return out;
}

SegSample augment(const SegSample& s, Rng& rng) {
  const AugDraws d = draw_augmentation(rng);
  return augment_apply(s, d, rng);
}

}  // namespace dgst
