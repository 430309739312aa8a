#pragma once

#include "dgst/tensor.hpp"

// Raw op kernels behind the tape. Forward kernels write fresh outputs;
// backward kernels accumulate (+=) into caller-zeroed gradient buffers so
// multiple consumers of one node merge naturally.
namespace dgst::kern {

void conv2d_shape_check(const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride, int pad, int64_t& ho, int64_t& wo);
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                      int stride, int pad);
void conv2d_backward(const Tensor& x, const Tensor& w, int stride, int pad,
                     const Tensor& gy, Tensor* gx, Tensor* gw, Tensor* gb);

void tconv2d_shape_check(const Tensor& x, const Tensor& w, const Tensor& b,
                         int stride, int pad, int64_t& ho, int64_t& wo);
Tensor tconv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                       int stride, int pad);
void tconv2d_backward(const Tensor& x, const Tensor& w, int stride, int pad,
                      const Tensor& gy, Tensor* gx, Tensor* gw, Tensor* gb);

Tensor instance_norm_forward(const Tensor& x, const Tensor& scale,
                             const Tensor& shift, real eps, Tensor& mean_out,
                             Tensor& inv_std_out);
void instance_norm_backward(const Tensor& x, const Tensor& scale,
                            const Tensor& mean, const Tensor& inv_std,
                            const Tensor& gy, Tensor* gx, Tensor* gscale,
                            Tensor* gshift);

Tensor max_pool2d_forward(const Tensor& x, Tensor& argmax_out);
void max_pool2d_backward(const Tensor& argmax, const Tensor& gy, Tensor& gx);

Tensor softmax_channel_forward(const Tensor& x);
void softmax_channel_backward(const Tensor& y, const Tensor& gy, Tensor& gx);

Tensor log_softmax_channel_forward(const Tensor& x);
void log_softmax_channel_backward(const Tensor& y, const Tensor& gy,
                                  Tensor& gx);

Tensor matmul_forward(const Tensor& a, const Tensor& b);
void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& gc,
                     Tensor* ga, Tensor* gb);

}  // namespace dgst::kern
