#pragma once

#include "dgst/tape.hpp"
#include "dgst/tensor.hpp"

namespace dgst {

// Combined cross-entropy + soft-Dice training loss.
//   CE: mean over batch and pixels of -log softmax at the true class.
//   Dice: 1 - (2*intersection + eps) / (|p| + |y| + eps) per foreground
//   class with sums over batch and pixels, averaged over foreground classes.
// labels: [N,H,W] class ids in [0, C).
NodeId ce_dice_loss(GradientTape& tape, NodeId logits, const IntTensor& labels,
                    real dice_eps = real(1e-5));

}  // namespace dgst
