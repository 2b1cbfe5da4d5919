#include "ncs/scorenet.hpp"

#include <cmath>
#include <numbers>

#include "ncs/error.hpp"

namespace ncs {

namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RMat>;
using GMap = Eigen::Map<RMat>;
using Index = Eigen::Index;

constexpr std::uint64_t kFourierStream = 0x466f7572696572ULL;

inline double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

template <class M>
M silu(const M& a) {
  M out(a.rows(), a.cols());
  const Index n = a.size();
  const double* src = a.data();
  double* dst = out.data();
  for (Index i = 0; i < n; ++i) dst[i] = src[i] * sigmoid(src[i]);
  return out;
}

// dx = dy * silu'(a), in place on dy
template <class M>
void silu_backward(const M& a, M& dy) {
  const Index n = a.size();
  const double* pa = a.data();
  double* pd = dy.data();
  for (Index i = 0; i < n; ++i) {
    const double s = sigmoid(pa[i]);
    pd[i] *= s * (1.0 + pa[i] * (1.0 - s));
  }
}

RMat im2col(const RMat& in, int h) {
  const Index hw = static_cast<Index>(h) * h;
  const Index n = in.cols();
  const Index b = n / hw;
  RMat col = RMat::Zero(in.rows() * 9, n);
  for (Index c = 0; c < in.rows(); ++c) {
    const double* src = in.row(c).data();
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        double* dst = col.row(c * 9 + ky * 3 + kx).data();
        const int dy = ky - 1, dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(h, h - dx);
        for (Index j = 0; j < b; ++j)
          for (int y = 0; y < h; ++y) {
            const int ys = y + dy;
            if (ys < 0 || ys >= h) continue;
            const double* s = src + j * hw + static_cast<Index>(ys) * h + dx;
            double* d = dst + j * hw + static_cast<Index>(y) * h;
            for (int x = x0; x < x1; ++x) d[x] = s[x];
          }
      }
  }
  return col;
}

RMat col2im(const RMat& col, Index channels, int h) {
  const Index hw = static_cast<Index>(h) * h;
  const Index n = col.cols();
  const Index b = n / hw;
  RMat out = RMat::Zero(channels, n);
  for (Index c = 0; c < channels; ++c) {
    double* dst = out.row(c).data();
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const double* src = col.row(c * 9 + ky * 3 + kx).data();
        const int dy = ky - 1, dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(h, h - dx);
        for (Index j = 0; j < b; ++j)
          for (int y = 0; y < h; ++y) {
            const int ys = y + dy;
            if (ys < 0 || ys >= h) continue;
            const double* s = src + j * hw + static_cast<Index>(y) * h;
            double* d = dst + j * hw + static_cast<Index>(ys) * h + dx;
            for (int x = x0; x < x1; ++x) d[x] += s[x];
          }
      }
  }
  return out;
}

RMat avg_pool(const RMat& in, int h) {
  const int ho = h / 2;
  const Index hw = static_cast<Index>(h) * h, hwo = static_cast<Index>(ho) * ho;
  const Index b = in.cols() / hw;
  RMat out(in.rows(), b * hwo);
  for (Index c = 0; c < in.rows(); ++c) {
    const double* s = in.row(c).data();
    double* d = out.row(c).data();
    for (Index j = 0; j < b; ++j)
      for (int y = 0; y < ho; ++y)
        for (int x = 0; x < ho; ++x) {
          const double* p = s + j * hw + static_cast<Index>(2 * y) * h + 2 * x;
          d[j * hwo + y * ho + x] = 0.25 * (p[0] + p[1] + p[h] + p[h + 1]);
        }
  }
  return out;
}

RMat avg_pool_backward(const RMat& dout, int h) {
  const int ho = h / 2;
  const Index hw = static_cast<Index>(h) * h, hwo = static_cast<Index>(ho) * ho;
  const Index b = dout.cols() / hwo;
  RMat din(dout.rows(), b * hw);
  for (Index c = 0; c < dout.rows(); ++c) {
    const double* s = dout.row(c).data();
    double* d = din.row(c).data();
    for (Index j = 0; j < b; ++j)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < h; ++x) d[j * hw + y * h + x] = 0.25 * s[j * hwo + (y / 2) * ho + x / 2];
  }
  return din;
}

// nearest-neighbour upsampling from side h to 2h
RMat upsample(const RMat& in, int h) {
  const int hu = 2 * h;
  const Index hw = static_cast<Index>(h) * h, hwu = static_cast<Index>(hu) * hu;
  const Index b = in.cols() / hw;
  RMat out(in.rows(), b * hwu);
  for (Index c = 0; c < in.rows(); ++c) {
    const double* s = in.row(c).data();
    double* d = out.row(c).data();
    for (Index j = 0; j < b; ++j)
      for (int y = 0; y < hu; ++y)
        for (int x = 0; x < hu; ++x) d[j * hwu + y * hu + x] = s[j * hw + (y / 2) * h + x / 2];
  }
  return out;
}

RMat upsample_backward(const RMat& dout, int h) {
  const int hu = 2 * h;
  const Index hw = static_cast<Index>(h) * h, hwu = static_cast<Index>(hu) * hu;
  const Index b = dout.cols() / hwu;
  RMat din = RMat::Zero(dout.rows(), b * hw);
  for (Index c = 0; c < dout.rows(); ++c) {
    const double* s = dout.row(c).data();
    double* d = din.row(c).data();
    for (Index j = 0; j < b; ++j)
      for (int y = 0; y < hu; ++y)
        for (int x = 0; x < hu; ++x) d[j * hw + (y / 2) * h + x / 2] += s[j * hwu + y * hu + x];
  }
  return din;
}

CMap pmat(const ModelParams& p, std::size_t k) {
  const auto& e = p.layout.at(k);
  return CMap(p.values.data() + e.offset, static_cast<Index>(e.rows), static_cast<Index>(e.cols));
}

GMap gmat(const ModelParams& p, double* grad, std::size_t k) {
  const auto& e = p.layout.at(k);
  return GMap(grad + e.offset, static_cast<Index>(e.rows), static_cast<Index>(e.cols));
}

RMat conv3x3(const ModelParams& p, std::size_t w, std::size_t bias, const RMat& in, int h) {
  const RMat col = im2col(in, h);
  RMat out = pmat(p, w) * col;
  const auto bv = pmat(p, bias);
  for (Index c = 0; c < out.rows(); ++c) out.row(c).array() += bv(c, 0);
  return out;
}

// accumulates weight/bias gradients, returns d_in when wanted
RMat conv3x3_backward(const ModelParams& p, double* grad, std::size_t w, std::size_t bias, const RMat& in, int h,
                      const RMat& d_out, bool want_input) {
  const RMat col = im2col(in, h);
  gmat(p, grad, w).noalias() += d_out * col.transpose();
  gmat(p, grad, bias) += d_out.rowwise().sum();
  if (!want_input) return {};
  const RMat dcol = pmat(p, w).transpose() * d_out;
  return col2im(dcol, in.rows(), h);
}

void add_time_bias(RMat& a, const Eigen::MatrixXd& tb, Index hw) {
  for (Index j = 0; j < tb.cols(); ++j)
    for (Index c = 0; c < a.rows(); ++c) a.row(c).segment(j * hw, hw).array() += tb(c, j);
}

Eigen::MatrixXd time_bias_grad(const RMat& da, Index hw, Index b) {
  Eigen::MatrixXd out(da.rows(), b);
  for (Index j = 0; j < b; ++j)
    for (Index c = 0; c < da.rows(); ++c) out(c, j) = da.row(c).segment(j * hw, hw).sum();
  return out;
}

}  // namespace

const char* to_string(ConditioningMode m) {
  return m == ConditioningMode::MaskOnly ? "mask" : "theta_mask";
}

ConditioningMode conditioning_from_string(const std::string& s) {
  if (s == "mask") return ConditioningMode::MaskOnly;
  if (s == "theta_mask") return ConditioningMode::ThetaScaledMask;
  throw config_error("unknown conditioning mode '" + s + "' (expected mask or theta_mask)");
}

void NetConfig::validate() const {
  if (side < 1) throw config_error("net: side must be positive");
  if (depth < 1) throw config_error("net: depth must be >= 1");
  if (depth > 8 || side % (1 << depth) != 0)
    throw config_error("net: side " + std::to_string(side) + " is not divisible by 2^depth");
  if (base_width < 1 || embed_width < 1) throw config_error("net: widths must be positive");
  if (fourier_features < 2 || fourier_features % 2 != 0)
    throw config_error("net: fourier_features must be a positive even number");
  if (!(fourier_scale > 0.0) || !std::isfinite(fourier_scale)) throw config_error("net: fourier_scale must be positive");
  if (micro_batch < 1) throw config_error("net: micro_batch must be positive");
}

std::size_t ParamLayout::add(const std::string& name, std::size_t rows, std::size_t cols) {
  entries_.push_back({name, total_, rows, cols});
  total_ += rows * cols;
  return entries_.size() - 1;
}

const LayoutEntry& ParamLayout::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw invalid_argument("no parameter block named '" + name + "'");
}

void ModelParams::validate() const {
  if (values.size() != layout.total())
    throw invalid_argument("parameter vector length " + std::to_string(values.size()) + " differs from layout total " +
                           std::to_string(layout.total()));
  for (double v : values)
    if (!std::isfinite(v)) throw numerical_error("non-finite network parameter");
}

struct ScoreNet::Cache {
  Index b = 0;
  RMat input;
  Eigen::MatrixXd fourier, e1_pre, e1, e2_pre, e2;
  std::vector<RMat> down_in, down_pre;
  std::vector<RMat> skip;
  RMat mid_in, mid_pre;
  std::vector<RMat> up_in, up_pre;
  RMat out_in;
};

ScoreNet::ScoreNet(NetConfig cfg, const Schedule& sched) : cfg_(std::move(cfg)), sched_(sched) {
  cfg_.validate();
  const auto E = static_cast<std::size_t>(cfg_.embed_width);
  const auto F = static_cast<std::size_t>(cfg_.fourier_features);
  const int D = cfg_.depth;
  auto w = [&](int l) { return static_cast<std::size_t>(cfg_.width(l)); };

  l_in_w_ = layout_.add("in.w", w(0), 2 * 9);
  l_in_b_ = layout_.add("in.b", w(0), 1);
  l_e1_w_ = layout_.add("temb.1.w", E, F);
  l_e1_b_ = layout_.add("temb.1.b", E, 1);
  l_e2_w_ = layout_.add("temb.2.w", E, E);
  l_e2_b_ = layout_.add("temb.2.b", E, 1);
  for (int l = 0; l < D; ++l) {
    const std::string pre = "down." + std::to_string(l);
    const std::size_t cin = l == 0 ? w(0) : w(l - 1);
    l_down_w_.push_back(layout_.add(pre + ".w", w(l), cin * 9));
    l_down_b_.push_back(layout_.add(pre + ".b", w(l), 1));
    l_down_t_.push_back(layout_.add(pre + ".t.w", w(l), E));
    l_down_tb_.push_back(layout_.add(pre + ".t.b", w(l), 1));
  }
  l_mid_w_ = layout_.add("mid.w", w(D), w(D - 1) * 9);
  l_mid_b_ = layout_.add("mid.b", w(D), 1);
  l_mid_t_ = layout_.add("mid.t.w", w(D), E);
  l_mid_tb_ = layout_.add("mid.t.b", w(D), 1);
  l_up_w_.assign(D, 0);
  l_up_b_.assign(D, 0);
  l_up_t_.assign(D, 0);
  l_up_tb_.assign(D, 0);
  for (int l = D - 1; l >= 0; --l) {
    const std::string pre = "up." + std::to_string(l);
    const std::size_t cin = w(l + 1) + w(l);
    l_up_w_[l] = layout_.add(pre + ".w", w(l), cin * 9);
    l_up_b_[l] = layout_.add(pre + ".b", w(l), 1);
    l_up_t_[l] = layout_.add(pre + ".t.w", w(l), E);
    l_up_tb_[l] = layout_.add(pre + ".t.b", w(l), 1);
  }
  l_out_w_ = layout_.add("out.w", 1, w(0) * 9);
  l_out_b_ = layout_.add("out.b", 1, 1);

  RngStream rng(cfg_.fourier_seed, kFourierStream);
  freqs_.resize(cfg_.fourier_features / 2);
  for (Index k = 0; k < freqs_.size(); ++k) freqs_[k] = cfg_.fourier_scale * rng.normal();
}

ModelParams ScoreNet::init_params(RngStream& rng) const {
  ModelParams p;
  p.layout = layout_;
  p.values.assign(layout_.total(), 0.0);
  const auto& es = layout_.entries();
  for (std::size_t k = 0; k < es.size(); ++k) {
    if (k == l_out_w_ || k == l_out_b_) continue;
    // biases share the fan-in of the weight block that precedes them
    const auto& weight = es[k].cols == 1 && k > 0 ? es[k - 1] : es[k];
    const double bound = 1.0 / std::sqrt(static_cast<double>(weight.cols));
    for (std::size_t i = 0; i < es[k].size(); ++i) p.values[es[k].offset + i] = rng.uniform(-bound, bound);
  }
  return p;
}

void ScoreNet::check_query(const ModelParams& p, const Eigen::MatrixXd& states, const Eigen::MatrixXd& masks,
                           std::span<const double> thetas, std::span<const int> steps) const {
  if (!(p.layout == layout_)) throw invalid_argument("parameter layout does not match the network configuration");
  if (p.values.size() != layout_.total()) throw invalid_argument("parameter vector has the wrong length");
  const auto n = static_cast<Index>(pixels());
  if (states.rows() != n || masks.rows() != n)
    throw invalid_argument("network input has " + std::to_string(states.rows()) + " rows, expected " +
                           std::to_string(n));
  if (masks.cols() != states.cols() || static_cast<Index>(steps.size()) != states.cols())
    throw invalid_argument("network input column counts disagree");
  if (cfg_.mode == ConditioningMode::ThetaScaledMask && static_cast<Index>(thetas.size()) != states.cols())
    throw invalid_argument("theta_1 is required for every example in theta_mask mode");
  for (int t : steps)
    if (t < 1 || t > sched_.steps()) throw invalid_argument("network step " + std::to_string(t) + " out of range");
}

Eigen::MatrixXd ScoreNet::forward(const ModelParams& p, const Eigen::MatrixXd& states, const Eigen::MatrixXd& masks,
                                  std::span<const double> thetas, std::span<const int> steps, Cache* cache) const {
  const int G = cfg_.side;
  const int D = cfg_.depth;
  const Index n = states.rows();
  const Index b = states.cols();
  const bool theta_mode = cfg_.mode == ConditioningMode::ThetaScaledMask;

  RMat input(2, b * n);
  for (Index j = 0; j < b; ++j)
    for (Index i = 0; i < n; ++i) {
      input(0, j * n + i) = states(i, j);
      input(1, j * n + i) = theta_mode ? thetas[j] * masks(i, j) : masks(i, j);
    }

  const Index F2 = freqs_.size();
  Eigen::MatrixXd four(2 * F2, b);
  for (Index j = 0; j < b; ++j) {
    const double tau = static_cast<double>(steps[j]) / sched_.steps();
    for (Index k = 0; k < F2; ++k) {
      const double a = 2.0 * std::numbers::pi * freqs_[k] * tau;
      four(k, j) = std::sin(a);
      four(F2 + k, j) = std::cos(a);
    }
  }
  Eigen::MatrixXd e1_pre = pmat(p, l_e1_w_) * four;
  e1_pre.colwise() += pmat(p, l_e1_b_).col(0);
  Eigen::MatrixXd e1 = silu(e1_pre);
  Eigen::MatrixXd e2_pre = pmat(p, l_e2_w_) * e1;
  e2_pre.colwise() += pmat(p, l_e2_b_).col(0);
  Eigen::MatrixXd e2 = silu(e2_pre);

  auto tproj = [&](std::size_t w, std::size_t bias) {
    Eigen::MatrixXd t = pmat(p, w) * e2;
    t.colwise() += pmat(p, bias).col(0);
    return t;
  };

  if (cache) {
    cache->b = b;
    cache->down_in.assign(D, {});
    cache->down_pre.assign(D, {});
    cache->skip.assign(D, {});
    cache->up_in.assign(D, {});
    cache->up_pre.assign(D, {});
  }

  RMat h = conv3x3(p, l_in_w_, l_in_b_, input, G);
  std::vector<RMat> skips(D);
  for (int l = 0; l < D; ++l) {
    const int hl = G >> l;
    RMat a = conv3x3(p, l_down_w_[l], l_down_b_[l], h, hl);
    add_time_bias(a, tproj(l_down_t_[l], l_down_tb_[l]), static_cast<Index>(hl) * hl);
    RMat s = silu(a);
    RMat pooled = avg_pool(s, hl);
    if (cache) {
      cache->down_in[l] = std::move(h);
      cache->down_pre[l] = std::move(a);
    }
    skips[l] = std::move(s);
    h = std::move(pooled);
  }
  {
    const int hd = G >> D;
    RMat a = conv3x3(p, l_mid_w_, l_mid_b_, h, hd);
    add_time_bias(a, tproj(l_mid_t_, l_mid_tb_), static_cast<Index>(hd) * hd);
    RMat s = silu(a);
    if (cache) {
      cache->mid_in = std::move(h);
      cache->mid_pre = std::move(a);
    }
    h = std::move(s);
  }
  for (int l = D - 1; l >= 0; --l) {
    const int hl = G >> l;
    RMat u = upsample(h, hl / 2);
    RMat cat(u.rows() + skips[l].rows(), u.cols());
    cat << u, skips[l];
    RMat a = conv3x3(p, l_up_w_[l], l_up_b_[l], cat, hl);
    add_time_bias(a, tproj(l_up_t_[l], l_up_tb_[l]), static_cast<Index>(hl) * hl);
    h = silu(a);
    if (cache) {
      cache->up_in[l] = std::move(cat);
      cache->up_pre[l] = std::move(a);
    }
  }
  const RMat o = conv3x3(p, l_out_w_, l_out_b_, h, G);

  Eigen::MatrixXd eps(n, b);
  for (Index j = 0; j < b; ++j)
    for (Index i = 0; i < n; ++i) eps(i, j) = masks(i, j) == 0.0 ? o(0, j * n + i) : 0.0;

  if (cache) {
    cache->input = std::move(input);
    cache->fourier = std::move(four);
    cache->e1_pre = std::move(e1_pre);
    cache->e1 = std::move(e1);
    cache->e2_pre = std::move(e2_pre);
    cache->e2 = std::move(e2);
    cache->skip = std::move(skips);
    cache->out_in = std::move(h);
  }
  return eps;
}

void ScoreNet::backward(const ModelParams& p, const Cache& c, const Eigen::MatrixXd& d_eps, double* grad) const {
  const int G = cfg_.side;
  const int D = cfg_.depth;
  const Index n = d_eps.rows();
  const Index b = c.b;

  RMat d_o(1, b * n);
  for (Index j = 0; j < b; ++j)
    for (Index i = 0; i < n; ++i) d_o(0, j * n + i) = d_eps(i, j);

  Eigen::MatrixXd de2 = Eigen::MatrixXd::Zero(c.e2.rows(), b);
  auto tproj_back = [&](std::size_t w, std::size_t bias, const RMat& da, Index hw) {
    const Eigen::MatrixXd dt = time_bias_grad(da, hw, b);
    gmat(p, grad, w).noalias() += dt * c.e2.transpose();
    gmat(p, grad, bias) += dt.rowwise().sum();
    de2.noalias() += pmat(p, w).transpose() * dt;
  };

  RMat dh = conv3x3_backward(p, grad, l_out_w_, l_out_b_, c.out_in, G, d_o, true);
  std::vector<RMat> dskip(D);
  for (int l = 0; l < D; ++l) {
    const int hl = G >> l;
    RMat da = std::move(dh);
    silu_backward(c.up_pre[l], da);
    tproj_back(l_up_t_[l], l_up_tb_[l], da, static_cast<Index>(hl) * hl);
    RMat dcat = conv3x3_backward(p, grad, l_up_w_[l], l_up_b_[l], c.up_in[l], hl, da, true);
    const Index cu = dcat.rows() - static_cast<Index>(cfg_.width(l));
    dskip[l] = dcat.bottomRows(cfg_.width(l));
    dh = upsample_backward(RMat(dcat.topRows(cu)), hl / 2);
  }
  {
    const int hd = G >> D;
    RMat da = std::move(dh);
    silu_backward(c.mid_pre, da);
    tproj_back(l_mid_t_, l_mid_tb_, da, static_cast<Index>(hd) * hd);
    dh = conv3x3_backward(p, grad, l_mid_w_, l_mid_b_, c.mid_in, hd, da, true);
  }
  for (int l = D - 1; l >= 0; --l) {
    const int hl = G >> l;
    RMat ds = avg_pool_backward(dh, hl);
    ds += dskip[l];
    silu_backward(c.down_pre[l], ds);
    tproj_back(l_down_t_[l], l_down_tb_[l], ds, static_cast<Index>(hl) * hl);
    dh = conv3x3_backward(p, grad, l_down_w_[l], l_down_b_[l], c.down_in[l], hl, ds, true);
  }
  conv3x3_backward(p, grad, l_in_w_, l_in_b_, c.input, G, dh, false);

  silu_backward(c.e2_pre, de2);
  gmat(p, grad, l_e2_w_).noalias() += de2 * c.e1.transpose();
  gmat(p, grad, l_e2_b_) += de2.rowwise().sum();
  Eigen::MatrixXd de1 = pmat(p, l_e2_w_).transpose() * de2;
  silu_backward(c.e1_pre, de1);
  gmat(p, grad, l_e1_w_).noalias() += de1 * c.fourier.transpose();
  gmat(p, grad, l_e1_b_) += de1.rowwise().sum();
}

Eigen::MatrixXd ScoreNet::predict_noise(const ModelParams& p, const ScoreQuery& q) const {
  check_query(p, q.states, q.masks, q.thetas, q.steps);
  const Index total = q.states.cols();
  Eigen::MatrixXd out(q.states.rows(), total);
  const Index mb = cfg_.micro_batch;
  const bool theta_mode = cfg_.mode == ConditioningMode::ThetaScaledMask;
  for (Index c0 = 0; c0 < total; c0 += mb) {
    const Index b = std::min(mb, total - c0);
    const auto s0 = static_cast<std::size_t>(c0), sb = static_cast<std::size_t>(b);
    out.middleCols(c0, b) =
        forward(p, q.states.middleCols(c0, b), q.masks.middleCols(c0, b),
                theta_mode ? q.thetas.subspan(s0, sb) : std::span<const double>{}, q.steps.subspan(s0, sb), nullptr);
  }
  return out;
}

Eigen::MatrixXd ScoreNet::score(const ModelParams& p, const ScoreQuery& q) const {
  Eigen::MatrixXd s = predict_noise(p, q);
  for (Index j = 0; j < s.cols(); ++j) s.col(j) *= -1.0 / sched_.sigma_bar(q.steps[j]);
  for (Index j = 0; j < s.cols(); ++j)
    for (Index i = 0; i < s.rows(); ++i)
      if (q.masks(i, j) != 0.0) s(i, j) = 0.0;
  return s;
}

std::vector<double> ScoreNet::loss_per_example(const ModelParams& p, const DiffusionBatch& batch) const {
  batch.validate(sched_);
  const Eigen::MatrixXd eps = predict_noise(p, ScoreQuery{batch.states, batch.masks, batch.thetas, batch.steps});
  std::vector<double> out(batch.size());
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto c = static_cast<Index>(j);
    double acc = 0.0;
    for (Index i = 0; i < eps.rows(); ++i)
      if (batch.masks(i, c) == 0.0) {
        const double r = eps(i, c) - batch.noise(i, c);
        acc += r * r;
      }
    if (!std::isfinite(acc)) throw numerical_error("non-finite loss at batch element " + std::to_string(j));
    out[j] = acc;
  }
  return out;
}

double ScoreNet::loss(const ModelParams& p, const DiffusionBatch& batch, std::vector<double>* grad) const {
  if (batch.size() == 0) throw invalid_argument("loss: empty batch");
  batch.validate(sched_);
  if (!grad) {
    const auto per = loss_per_example(p, batch);
    double acc = 0.0;
    for (double v : per) acc += v;
    return acc / static_cast<double>(per.size());
  }
  check_query(p, batch.states, batch.masks, batch.thetas, batch.steps);
  grad->assign(layout_.total(), 0.0);
  const Index total = static_cast<Index>(batch.size());
  const double scale = 1.0 / static_cast<double>(total);
  const Index mb = cfg_.micro_batch;
  const bool theta_mode = cfg_.mode == ConditioningMode::ThetaScaledMask;
  double acc = 0.0;
  Cache cache;
  for (Index c0 = 0; c0 < total; c0 += mb) {
    const Index b = std::min(mb, total - c0);
    const auto s0 = static_cast<std::size_t>(c0), sb = static_cast<std::size_t>(b);
    const std::span<const double> th(batch.thetas);
    const std::span<const int> st(batch.steps);
    const Eigen::MatrixXd masks = batch.masks.middleCols(c0, b);
    const Eigen::MatrixXd eps = forward(p, batch.states.middleCols(c0, b), masks,
                                        theta_mode ? th.subspan(s0, sb) : std::span<const double>{},
                                        st.subspan(s0, sb), &cache);
    Eigen::MatrixXd d_eps(eps.rows(), b);
    for (Index j = 0; j < b; ++j) {
      double l = 0.0;
      for (Index i = 0; i < eps.rows(); ++i) {
        if (masks(i, j) != 0.0) {
          d_eps(i, j) = 0.0;
          continue;
        }
        const double r = eps(i, j) - batch.noise(i, c0 + j);
        l += r * r;
        d_eps(i, j) = 2.0 * scale * r;
      }
      if (!std::isfinite(l)) throw numerical_error("non-finite loss at batch element " + std::to_string(c0 + j));
      acc += l;
    }
    backward(p, cache, d_eps, grad->data());
  }
  return acc * scale;
}

}  // namespace ncs
