#include "c2sti/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "c2sti/ops.hpp"

namespace c2sti {

Tensor loss_sim(const std::vector<Tensor>& preds, const std::vector<Tensor>& targets) {
  if (preds.size() != targets.size())
    throw Error("loss_sim: " + std::to_string(preds.size()) + " predictions for " + std::to_string(targets.size()) +
                " targets");
  if (preds.empty()) throw Error("loss_sim: no slices");
  Tensor total;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].shape() != targets[i].shape())
      throw ShapeError("loss_sim: " + shape_str(preds[i].shape()) + " vs " + shape_str(targets[i].shape()));
    Tensor term = mean(abs(sub(preds[i], targets[i])));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

namespace {

Tensor gradient_l1(const Tensor& f) {
  if (f.ndim() != 4) throw ShapeError("loss_smooth: expected [B,C,H,W], got " + shape_str(f.shape()));
  const std::int64_t h = f.dim(2), w = f.dim(3);
  Tensor out;
  if (w > 1) out = mean(abs(sub(narrow(f, 3, 1, w - 1), narrow(f, 3, 0, w - 1))));
  if (h > 1) {
    Tensor v = mean(abs(sub(narrow(f, 2, 1, h - 1), narrow(f, 2, 0, h - 1))));
    out = out.defined() ? add(out, v) : v;
  }
  return out.defined() ? out : scale(mean(f), 0.0);
}

}  // namespace

Tensor loss_smooth(const Tensor& f01, const Tensor& f10) { return add(gradient_l1(f01), gradient_l1(f10)); }

void to_json(nlohmann::json& j, const MetricReport& m) {
  j = {{"psnr", m.psnr}, {"ssim", m.ssim}, {"pcc", m.pcc}, {"rmse", m.rmse}};
  if (m.pcc_undefined) j["pcc_undefined"] = true;
}

double psnr_from_mse(double mse) {
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace {

std::vector<double> as_chw(const Tensor& t, std::int64_t& c, std::int64_t& h, std::int64_t& w) {
  if (t.ndim() == 4 && t.dim(0) == 1) {
    c = t.dim(1), h = t.dim(2), w = t.dim(3);
  } else if (t.ndim() == 3) {
    c = t.dim(0), h = t.dim(1), w = t.dim(2);
  } else {
    throw ShapeError("metrics: expected [C,H,W] or [1,C,H,W], got " + shape_str(t.shape()));
  }
  return t.to_vector();
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  std::int64_t c, h, w, c2, h2, w2;
  const std::vector<double> x = as_chw(a, c, h, w), y = as_chw(b, c2, h2, w2);
  if (c != c2 || h != h2 || w != w2) throw ShapeError("ssim: shapes differ");
  const std::int64_t wy = std::min<std::int64_t>(11, h), wx = std::min<std::int64_t>(11, w);
  std::vector<double> gy(wy), gx(wx);
  auto gauss = [](std::vector<double>& g) {
    const double mid = (static_cast<double>(g.size()) - 1) / 2;
    double s = 0;
    for (std::size_t i = 0; i < g.size(); ++i) s += g[i] = std::exp(-(i - mid) * (i - mid) / (2 * 1.5 * 1.5));
    for (double& v : g) v /= s;
  };
  gauss(gy);
  gauss(gx);
  const double c1 = 0.01 * 0.01, c2c = 0.03 * 0.03;
  double total = 0.0;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* px = x.data() + ch * h * w;
    const double* py = y.data() + ch * h * w;
    double acc = 0.0;
    std::int64_t count = 0;
    for (std::int64_t oy = 0; oy + wy <= h; ++oy)
      for (std::int64_t ox = 0; ox + wx <= w; ++ox) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::int64_t i = 0; i < wy; ++i)
          for (std::int64_t j = 0; j < wx; ++j) {
            const double g = gy[i] * gx[j];
            const double u = px[(oy + i) * w + ox + j], v = py[(oy + i) * w + ox + j];
            mx += g * u;
            my += g * v;
            sxx += g * u * u;
            syy += g * v * v;
            sxy += g * u * v;
          }
        const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
        acc += ((2 * mx * my + c1) * (2 * cov + c2c)) / ((mx * mx + my * my + c1) * (vx + vy + c2c));
        ++count;
      }
    total += acc / static_cast<double>(count);
  }
  return total / static_cast<double>(c);
}

double pcc(const Tensor& a, const Tensor& b, bool* undefined) {
  if (a.numel() != b.numel()) throw ShapeError("pcc: element counts differ");
  const std::vector<double> x = a.to_vector(), y = b.to_vector();
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  // a constant input leaves only rounding residue around its mean
  auto flat = [&](double m, double ss) { return ss <= n * 1e-24 * std::max(1.0, m * m); };
  if (undefined) *undefined = false;
  if (flat(mx, sxx) || flat(my, syy)) {
    if (undefined) *undefined = true;
    return 0.0;
  }
  return sxy / std::sqrt(sxx * syy);
}

MetricReport metric_suite(const Tensor& pred, const Tensor& target) {
  if (pred.numel() != target.numel()) throw ShapeError("metric_suite: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const std::vector<double> x = pred.to_vector(), y = target.to_vector();
  double mse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mse += (x[i] - y[i]) * (x[i] - y[i]);
  mse /= static_cast<double>(x.size());
  MetricReport m;
  m.rmse = std::sqrt(mse);
  m.psnr = psnr_from_mse(mse);
  m.ssim = ssim(pred, target);
  m.pcc = pcc(pred, target, &m.pcc_undefined);
  return m;
}

MetricReport mean_report(const std::vector<MetricReport>& reports) {
  MetricReport m;
  if (reports.empty()) return m;
  for (const auto& r : reports) {
    m.psnr += r.psnr;
    m.ssim += r.ssim;
    m.pcc += r.pcc;
    m.rmse += r.rmse;
    m.pcc_undefined = m.pcc_undefined || r.pcc_undefined;
  }
  const double n = static_cast<double>(reports.size());
  m.psnr /= n;
  m.ssim /= n;
  m.pcc /= n;
  m.rmse /= n;
  return m;
}

std::vector<Tensor> baseline_linear(const Tensor& i0, const Tensor& i1, const PositionSet& positions) {
  if (i0.shape() != i1.shape()) throw ShapeError("baseline_linear: anchor shapes differ");
  NoGradGuard guard;
  std::vector<Tensor> out;
  for (double p : positions.p) out.push_back(add(scale(i0, 1.0 - p), scale(i1, p)));
  return out;
}

}  // namespace c2sti
