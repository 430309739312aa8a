#include "dgst/loss.hpp"

#include <string>

namespace dgst {

NodeId ce_dice_loss(GradientTape& tape, NodeId logits, const IntTensor& labels,
                    real dice_eps) {
  const Tensor& lg = tape.value(logits);
  if (lg.rank() != 4)
    throw shape_error("ce_dice_loss: logits must be [N,C,H,W], got " +
                      shape_str(lg.shape));
  const int64_t n = lg.dim(0), c = lg.dim(1), h = lg.dim(2), w = lg.dim(3);
  if (c < 2) throw shape_error("ce_dice_loss: need at least 2 classes");
  if (labels.shape != std::vector<int64_t>{n, h, w})
    throw shape_error("ce_dice_loss: labels shape " + shape_str(labels.shape) +
                      " does not match logits " + shape_str(lg.shape));

  Tensor onehot = Tensor::zeros({n, c, h, w});
  const int64_t hw = h * w;
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t j = 0; j < hw; ++j) {
      const int32_t y = labels.data[size_t(ni * hw + j)];
      if (y < 0 || y >= c)
        throw config_error("ce_dice_loss: label " + std::to_string(y) +
                           " out of range [0," + std::to_string(c) + ")");
      onehot.data[size_t((ni * c + y) * hw + j)] = real(1);
    }

  // cross-entropy over all pixels
  NodeId log_p = tape.log_softmax_channel(logits);
  NodeId onehot_node = tape.constant(onehot);
  NodeId picked = tape.sum(tape.mul(log_p, onehot_node));
  NodeId ce = tape.scale_add(picked, real(-1) / real(n * hw), real(0));

  // soft dice over foreground classes, sums joint over batch and pixels
  NodeId probs = tape.exp(log_p);
  NodeId dice_acc = -1;
  for (int64_t k = 1; k < c; ++k) {
    NodeId pk = tape.channel_slice(probs, int(k), int(k + 1));
    Tensor yk = Tensor::zeros({n, 1, h, w});
    real ysum = 0;
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t j = 0; j < hw; ++j) {
        const real v = onehot.data[size_t((ni * c + k) * hw + j)];
        yk.data[size_t(ni * hw + j)] = v;
        ysum += v;
      }
    NodeId inter = tape.sum(tape.mul(pk, tape.constant(std::move(yk))));
    NodeId num = tape.scale_add(inter, real(2), dice_eps);
    NodeId den = tape.scale_add(tape.sum(pk), real(1), ysum + dice_eps);
    NodeId dice_loss_k = tape.scale_add(tape.divide(num, den), real(-1), real(1));
    dice_acc = dice_acc < 0 ? dice_loss_k : tape.add(dice_acc, dice_loss_k);
  }
  NodeId dice_mean = tape.scale_add(dice_acc, real(1) / real(c - 1), real(0));

  return tape.add(ce, dice_mean);
}

}  // namespace dgst
