// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense matrices.
// A tape is built once per objective evaluation, runs forward on creation,
// and is swept backward to accumulate exact gradients into its leaves.
#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "motifdiff/common.hpp"

namespace motifdiff::ad {

using Mat = Eigen::MatrixXd;

struct Val {
  int id = -1;
};

class Tape {
 public:
  Val constant(Mat v) { return push(std::move(v), {}); }

  /// Leaf whose gradient is accumulated during backward().
  Val param(const Mat& v) { return push(v, {}); }

  const Mat& val(Val v) const { return nodes_[v.id].value; }
  const Mat& grad(Val v) const { return nodes_[v.id].grad; }

  void backward(Val root) {
    if (val(root).rows() != 1 || val(root).cols() != 1) {
      fail("NonFiniteLoss", "backward root must be scalar");
    }
    for (auto& n : nodes_) n.grad.setZero(n.value.rows(), n.value.cols());
    nodes_[root.id].grad(0, 0) = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      if (nodes_[i].back) nodes_[i].back(*this, nodes_[i].grad);
    }
  }

  // ---- elementwise and linear ops ----

  Val add(Val a, Val b) {
    return push(val(a) + val(b), [a, b](Tape& t, const Mat& go) {
      t.g(a) += go;
      t.g(b) += go;
    });
  }

  Val sub(Val a, Val b) {
    return push(val(a) - val(b), [a, b](Tape& t, const Mat& go) {
      t.g(a) += go;
      t.g(b) -= go;
    });
  }

  Val mul(Val a, Val b) {
    return push(val(a).cwiseProduct(val(b)), [a, b](Tape& t, const Mat& go) {
      t.g(a) += go.cwiseProduct(t.val(b));
      t.g(b) += go.cwiseProduct(t.val(a));
    });
  }

  Val matmul(Val a, Val b) {
    return push(val(a) * val(b), [a, b](Tape& t, const Mat& go) {
      t.g(a) += go * t.val(b).transpose();
      t.g(b) += t.val(a).transpose() * go;
    });
  }

  Val scale(Val a, double k) {
    return push(k * val(a), [a, k](Tape& t, const Mat& go) { t.g(a) += k * go; });
  }

  Val transpose(Val a) {
    return push(val(a).transpose(),
                [a](Tape& t, const Mat& go) { t.g(a) += go.transpose(); });
  }

  /// Broadcast-add a 1 x C row to every row of a.
  Val add_rows(Val a, Val row) {
    Mat out = val(a);
    out.rowwise() += val(row).row(0);
    return push(std::move(out), [a, row](Tape& t, const Mat& go) {
      t.g(a) += go;
      t.g(row) += go.colwise().sum();
    });
  }

  /// Broadcast-multiply every row of a by a 1 x C row.
  Val mul_rows(Val a, Val row) {
    Mat out = val(a);
    out.array().rowwise() *= val(row).row(0).array();
    return push(std::move(out), [a, row](Tape& t, const Mat& go) {
      t.g(a) += (go.array().rowwise() * t.val(row).row(0).array()).matrix();
      t.g(row) += go.cwiseProduct(t.val(a)).colwise().sum();
    });
  }

  // ---- nonlinearities ----

  Val silu(Val a) {
    Mat s = sigmoid(val(a));
    return push(val(a).cwiseProduct(s), [a, s](Tape& t, const Mat& go) {
      const Mat& x = t.val(a);
      Mat ones = Mat::Ones(x.rows(), x.cols());
      Mat d = s.cwiseProduct(ones + x.cwiseProduct(ones - s));
      t.g(a) += go.cwiseProduct(d);
    });
  }

  Val log(Val a) {
    return push(val(a).array().log().matrix(), [a](Tape& t, const Mat& go) {
      t.g(a) += go.cwiseQuotient(t.val(a));
    });
  }

  Val exp(Val a) {
    Mat e = val(a).array().exp().matrix();
    return push(e, [a, e](Tape& t, const Mat& go) { t.g(a) += go.cwiseProduct(e); });
  }

  /// Row-wise layer normalization without learned affine.
  Val layernorm_rows(Val a, double eps = 1e-6) {
    const Mat& x = val(a);
    Mat y(x.rows(), x.cols());
    Eigen::VectorXd inv_std(x.rows());
    for (int r = 0; r < x.rows(); ++r) {
      double mean = x.row(r).mean();
      double var = (x.row(r).array() - mean).square().mean();
      inv_std[r] = 1.0 / std::sqrt(var + eps);
      y.row(r) = ((x.row(r).array() - mean) * inv_std[r]).matrix();
    }
    return push(y, [a, y, inv_std](Tape& t, const Mat& go) {
      Mat da(go.rows(), go.cols());
      for (int r = 0; r < go.rows(); ++r) {
        double gm = go.row(r).mean();
        double gym = go.row(r).cwiseProduct(y.row(r)).mean();
        da.row(r) =
            (inv_std[r] * (go.row(r).array() - gm - y.row(r).array() * gym)).matrix();
      }
      t.g(a) += da;
    });
  }

  /// Row-wise softmax with max subtraction.
  Val softmax_rows(Val a) {
    Mat s = softmax_rows_value(val(a));
    return push(s, [a, s](Tape& t, const Mat& go) {
      Mat da(go.rows(), go.cols());
      for (int r = 0; r < go.rows(); ++r) {
        double dot = go.row(r).dot(s.row(r));
        da.row(r) = s.row(r).cwiseProduct((go.row(r).array() - dot).matrix());
      }
      t.g(a) += da;
    });
  }

  /// Rows rescaled to sum to 1 (inputs must be strictly positive).
  Val normalize_rows(Val a) {
    const Mat& x = val(a);
    Eigen::VectorXd sums = x.rowwise().sum();
    Mat y = (x.array().colwise() / sums.array()).matrix();
    return push(y, [a, sums](Tape& t, const Mat& go) {
      const Mat& x = t.val(a);
      Mat da(go.rows(), go.cols());
      for (int r = 0; r < go.rows(); ++r) {
        double s = sums[r];
        double dot = go.row(r).dot(x.row(r));
        da.row(r) = go.row(r) / s - Mat::Constant(1, go.cols(), dot / (s * s));
      }
      t.g(a) += da;
    });
  }

  // ---- clipping / min (PPO surrogate) ----

  Val clamp(Val a, double lo, double hi) {
    Mat out = val(a).array().max(lo).min(hi).matrix();
    return push(out, [a, lo, hi](Tape& t, const Mat& go) {
      const Mat& x = t.val(a);
      Mat mask = ((x.array() > lo) && (x.array() < hi)).cast<double>().matrix();
      t.g(a) += go.cwiseProduct(mask);
    });
  }

  Val minimum(Val a, Val b) {
    Mat out = val(a).cwiseMin(val(b));
    return push(out, [a, b](Tape& t, const Mat& go) {
      const Mat& xa = t.val(a);
      const Mat& xb = t.val(b);
      Mat take_a = (xa.array() <= xb.array()).cast<double>().matrix();
      t.g(a) += go.cwiseProduct(take_a);
      t.g(b) += go.cwiseProduct(Mat::Ones(xa.rows(), xa.cols()) - take_a);
    });
  }

  // ---- shape ops ----

  Val hcat(Val a, Val b) {
    Mat out(val(a).rows(), val(a).cols() + val(b).cols());
    out << val(a), val(b);
    int ca = static_cast<int>(val(a).cols());
    return push(std::move(out), [a, b, ca](Tape& t, const Mat& go) {
      t.g(a) += go.leftCols(ca);
      t.g(b) += go.rightCols(go.cols() - ca);
    });
  }

  Val block(Val a, int r0, int c0, int rows, int cols) {
    return push(val(a).block(r0, c0, rows, cols),
                [a, r0, c0, rows, cols](Tape& t, const Mat& go) {
                  t.g(a).block(r0, c0, rows, cols) += go;
                });
  }

  Val sum(Val a) {
    return push(Mat::Constant(1, 1, val(a).sum()),
                [a](Tape& t, const Mat& go) { t.g(a).array() += go(0, 0); });
  }

  /// Mean over a subset of rows -> 1 x C.
  Val mean_rows_subset(Val a, std::vector<int> rows) {
    Mat out = Mat::Zero(1, val(a).cols());
    for (int r : rows) out += val(a).row(r);
    out /= static_cast<double>(rows.size());
    return push(std::move(out), [a, rows](Tape& t, const Mat& go) {
      double w = 1.0 / static_cast<double>(rows.size());
      for (int r : rows) t.g(a).row(r) += w * go.row(0);
    });
  }

  /// Selected entries stacked into an m x 1 column.
  Val gather_entries(Val a, std::vector<std::pair<int, int>> idx) {
    Mat out(idx.size(), 1);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out(k, 0) = val(a)(idx[k].first, idx[k].second);
    }
    return push(std::move(out), [a, idx](Tape& t, const Mat& go) {
      for (std::size_t k = 0; k < idx.size(); ++k) {
        t.g(a)(idx[k].first, idx[k].second) += go(k, 0);
      }
    });
  }

  /// Stacks width-wide row segments (row, col0) into an m x width matrix.
  Val gather_blocks(Val a, std::vector<std::pair<int, int>> at, int width) {
    Mat out(at.size(), width);
    for (std::size_t k = 0; k < at.size(); ++k) {
      out.row(k) = val(a).block(at[k].first, at[k].second, 1, width);
    }
    return push(std::move(out), [a, at, width](Tape& t, const Mat& go) {
      for (std::size_t k = 0; k < at.size(); ++k) {
        t.g(a).block(at[k].first, at[k].second, 1, width) += go.row(k);
      }
    });
  }

  /// Symmetrizes block-structured pair logits: input is N x (N*d) with the
  /// (i, j) block at columns [j*d, (j+1)*d); output block (i, j) is the mean
  /// of input blocks (i, j) and (j, i).
  Val sym_pair_avg(Val a, int n, int d) {
    const Mat& x = val(a);
    Mat out(n, n * d);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        out.block(i, j * d, 1, d) =
            0.5 * (x.block(i, j * d, 1, d) + x.block(j, i * d, 1, d));
      }
    }
    return push(std::move(out), [a, n, d](Tape& t, const Mat& go) {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          t.g(a).block(i, j * d, 1, d) += 0.5 * go.block(i, j * d, 1, d);
          t.g(a).block(j, i * d, 1, d) += 0.5 * go.block(i, j * d, 1, d);
        }
      }
    });
  }

  // Shared kernels, also used by non-tape callers that must match the tape
  // arithmetic bit for bit.
  static Mat softmax_rows_value(const Mat& x) {
    Mat s(x.rows(), x.cols());
    for (int r = 0; r < x.rows(); ++r) {
      double mx = x.row(r).maxCoeff();
      Eigen::ArrayXd e = (x.row(r).array() - mx).exp();
      s.row(r) = (e / e.sum()).matrix();
    }
    return s;
  }

  static Mat sigmoid(const Mat& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Tape&, const Mat&)> back;
  };

  Val push(Mat value, std::function<void(Tape&, const Mat&)> back) {
    nodes_.push_back({std::move(value), {}, std::move(back)});
    return {static_cast<int>(nodes_.size()) - 1};
  }

  Mat& g(Val v) { return nodes_[v.id].grad; }

  std::vector<Node> nodes_;
};

}  // namespace motifdiff::ad
