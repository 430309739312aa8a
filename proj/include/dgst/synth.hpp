#pragma once

#include <string>
#include <vector>

#include "dgst/metrics.hpp"
#include "dgst/rng.hpp"

namespace dgst {

enum class ShapeFamily : uint8_t { ellipse, lobulated, ring };

// Deterministic synthetic segmentation domain: blobs of one shape family on
// a textured background. The three built-in specs emulate a pretraining
// corpus plus near- and far-shifted downstream tasks.
struct DomainSpec {
  std::string name;
  int image_size = 64;
  int blob_min = 1, blob_max = 3;
  std::vector<ShapeFamily> families{ShapeFamily::ellipse};
  double fg_mean = 0.72, fg_std = 0.05;
  double bg_mean = 0.28, bg_std = 0.05;
  double texture_amp = 0.03;
  int contrast_polarity = +1;  // +1 fg brighter than bg, -1 inverted

  void validate() const;
};

DomainSpec source_domain();  // pretraining corpus analog
DomainSpec near_domain();    // same shapes, shifted intensities/texture
DomainSpec far_domain();     // different shapes, inverted contrast

struct Dataset {
  std::string domain;
  uint64_t seed = 0;
  std::vector<SegSample> samples;
};

Dataset generate_domain(const DomainSpec& spec, int n, uint64_t seed);

// Fixed 20% test partition depending only on (dataset, seed); train is the
// first k of a seeded shuffle of the remaining pool, so shot settings nest
// and share one test set.
struct Split {
  std::vector<int> train_idx;
  std::vector<int> test_idx;
};
Split few_shot_split(const Dataset& data, int shots, uint64_t seed);

std::vector<SegSample> gather(const Dataset& data, const std::vector<int>& idx);

// Augmentation draw, separated from the transform so identity draws are
// exactly representable.
struct AugDraws {
  bool flip_h = false, flip_v = false;
  double angle_deg = 0.0;
  double scale = 1.0;
  double noise_sigma = 0.0;
  double brightness = 0.0;
  double contrast = 1.0;
};

AugDraws draw_augmentation(Rng& rng);
SegSample augment_apply(const SegSample& s, const AugDraws& d, Rng& noise_rng);
SegSample augment(const SegSample& s, Rng& rng);

SegSample flip_horizontal(const SegSample& s);
SegSample flip_vertical(const SegSample& s);

}  // namespace dgst
