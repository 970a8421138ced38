#pragma once

// Bidirectional GRU with gates ordered [update z; reset r; candidate] in the
// stacked weight rows. The reset gate multiplies the previous state before the
// recurrent product of the candidate.

#include "uniphynet/nn/ops.hpp"

namespace uniphynet::nn {

template <typename T>
struct GruWeights {
  Tensor<T> w;  // [3H, n]
  Tensor<T> u;  // [3H, H]
  Tensor<T> b;  // [3H]
};

// One direction over x [B, L, n] with zero initial state -> [B, L, H]. With
// `reverse` the sequence is scanned from t = L-1 down to 0 and outputs stay
// indexed by t.
template <typename T>
Tensor<T> gru_direction(const Tensor<T>& x, const GruWeights<T>& p, bool reverse) {
  detail::expect_rank(x.shape(), 3, "gru input");
  detail::expect_rank(p.w.shape(), 2, "gru W");
  detail::expect_rank(p.u.shape(), 2, "gru U");
  const Index batch = x.dim(0), len = x.dim(1), n = x.dim(2);
  const Index h = p.u.dim(1);
  if (len < 1) throw ShapeError("gru: empty sequence");
  if (p.w.dim(0) != 3 * h || p.w.dim(1) != n || p.u.dim(0) != 3 * h || p.b.numel() != 3 * h)
    throw ShapeError("gru: weights do not match input width " + std::to_string(n) + " and hidden " +
                     std::to_string(h));

  using Mat = RowMat<T>;
  // Input projections for every (b, t) row at once.
  Mat g = ConstMatMap<T>(x.data(), batch * len, n) * ConstMatMap<T>(p.w.data(), 3 * h, n).transpose();
  g.rowwise() += p.b.value().transpose();

  const ConstMatMap<T> u(p.u.data(), 3 * h, h);
  const auto uz = u.topRows(h), ur = u.middleRows(h, h), uh = u.bottomRows(h);

  // Saved per step (in scan order): previous state, z, r, candidate.
  std::vector<Mat> hp(len), zs(len), rs(len), cs(len);
  Vec<T> out(batch * len * h);
  Mat hprev = Mat::Zero(batch, h);
  Mat gt(batch, 3 * h);
  for (Index s = 0; s < len; ++s) {
    const Index t = reverse ? len - 1 - s : s;
    for (Index b = 0; b < batch; ++b) gt.row(b) = g.row(b * len + t);
    Mat z = (gt.leftCols(h) + hprev * uz.transpose()).unaryExpr([](T v) { return detail::sigmoid(v); });
    Mat r = (gt.middleCols(h, h) + hprev * ur.transpose()).unaryExpr([](T v) { return detail::sigmoid(v); });
    Mat c = (gt.rightCols(h) + r.cwiseProduct(hprev) * uh.transpose()).array().tanh().matrix();
    Mat hn = (hprev.array() * (T(1) - z.array()) + z.array() * c.array()).matrix();
    for (Index b = 0; b < batch; ++b) out.segment((b * len + t) * h, h) = hn.row(b).transpose();
    hp[s] = std::move(hprev);
    zs[s] = std::move(z);
    rs[s] = std::move(r);
    cs[s] = std::move(c);
    hprev = std::move(hn);
  }

  auto xn = x.node(), wn = p.w.node(), un = p.u.node(), bn = p.b.node();
  return make_result<T>(
      {batch, len, h}, std::move(out), {x, p.w, p.u, p.b},
      [=, hp = std::move(hp), zs = std::move(zs), rs = std::move(rs), cs = std::move(cs)](Node<T>& self) {
        const ConstMatMap<T> um(un->value.data(), 3 * h, h);
        const auto uzm = um.topRows(h), urm = um.middleRows(h, h), uhm = um.bottomRows(h);
        Mat dg(batch * len, 3 * h);
        Mat du = Mat::Zero(3 * h, h);
        Mat dh = Mat::Zero(batch, h);
        for (Index s = len - 1; s >= 0; --s) {
          const Index t = reverse ? len - 1 - s : s;
          for (Index b = 0; b < batch; ++b) dh.row(b) += self.grad.segment((b * len + t) * h, h).transpose();
          const Mat& hprev = hp[s];
          const auto z = zs[s].array(), r = rs[s].array(), c = cs[s].array();
          const Mat dac = (dh.array() * z * (T(1) - c.square())).matrix();
          const Mat daz = (dh.array() * (c - hprev.array()) * z * (T(1) - z)).matrix();
          const Mat rh = (r * hprev.array()).matrix();
          const Mat drh = dac * uhm;
          const Mat dar = (drh.array() * hprev.array() * r * (T(1) - r)).matrix();
          du.bottomRows(h).noalias() += dac.transpose() * rh;
          du.topRows(h).noalias() += daz.transpose() * hprev;
          du.middleRows(h, h).noalias() += dar.transpose() * hprev;
          Mat dprev = (dh.array() * (T(1) - z) + drh.array() * r).matrix();
          dprev.noalias() += daz * uzm + dar * urm;
          for (Index b = 0; b < batch; ++b) {
            dg.row(b * len + t).leftCols(h) = daz.row(b);
            dg.row(b * len + t).middleCols(h, h) = dar.row(b);
            dg.row(b * len + t).rightCols(h) = dac.row(b);
          }
          dh = std::move(dprev);
        }
        if (Vec<T>* gu = detail::grad_of(un)) MatMap<T>(gu->data(), 3 * h, h) += du;
        if (Vec<T>* gb = detail::grad_of(bn)) *gb += dg.colwise().sum().transpose();
        if (Vec<T>* gw = detail::grad_of(wn))
          MatMap<T>(gw->data(), 3 * h, n).noalias() += dg.transpose() * ConstMatMap<T>(xn->value.data(), batch * len, n);
        if (Vec<T>* gx = detail::grad_of(xn))
          MatMap<T>(gx->data(), batch * len, n).noalias() += dg * ConstMatMap<T>(wn->value.data(), 3 * h, n);
      });
}

template <typename T>
struct BiGruOutput {
  Tensor<T> outputs;  // [B, L, 2H]
  Tensor<T> final;    // [B, 2H]: forward state at t = L-1, backward state at t = 0
};

template <typename T>
BiGruOutput<T> bigru(const Tensor<T>& x, const GruWeights<T>& forward, const GruWeights<T>& backward) {
  Tensor<T> f = gru_direction(x, forward, false);
  Tensor<T> b = gru_direction(x, backward, true);
  const Index len = x.dim(1);
  return {concat<T>({f, b}, 2), concat<T>({select_time(f, len - 1), select_time(b, 0)}, 1)};
}

}  // namespace uniphynet::nn
