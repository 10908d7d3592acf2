// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "motifdiff/denoiser.hpp"

namespace motifdiff {

/// Adam over the flat parameter ordering of visit_params.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }

  void step(ModelParams& params, const ParamGrads& grads) {
    std::vector<Mat*> tensors;
    visit_params(params, [&](const std::string&, Mat& m) { tensors.push_back(&m); });
    if (tensors.size() != grads.grads.size()) {
      fail("NonFiniteLoss", "gradient/parameter shape mismatch");
    }
    if (m_.empty()) {
      for (auto* t : tensors) {
        m_.push_back(Mat::Zero(t->rows(), t->cols()));
        v_.push_back(Mat::Zero(t->rows(), t->cols()));
      }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      const Mat& g = grads.grads[k];
      m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * g;
      v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * g.cwiseProduct(g);
      Mat mhat = m_[k] / bc1;
      Mat vhat = v_[k] / bc2;
      tensors[k]->array() -= lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

}  // namespace motifdiff
