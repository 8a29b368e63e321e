#pragma once

#include <vector>

#include <json.hpp>

#include "c2sti/dlsm.hpp"
#include "c2sti/tensor.hpp"

namespace c2sti {

/// Sum over positions of the per-patch mean absolute error.
Tensor loss_sim(const std::vector<Tensor>& preds, const std::vector<Tensor>& targets);

/// Mean |forward difference| along W plus along H, for each of the two
/// features, summed.
Tensor loss_smooth(const Tensor& f01, const Tensor& f10);

struct LossReport {
  double l_sim = 0.0;
  double l_smo = 0.0;
  double total = 0.0;
  double lambda_sim = 1.0;
  double lambda_smo = 1.0;
};

inline constexpr double kPsnrCap = 100.0;

struct MetricReport {
  double psnr = 0.0;
  double ssim = 0.0;
  double pcc = 0.0;
  double rmse = 0.0;
  /// Set when either side had zero variance and pcc was reported as 0.
  bool pcc_undefined = false;
};

void to_json(nlohmann::json& j, const MetricReport& m);

double psnr_from_mse(double mse);
/// Mean SSIM over channels of [C,H,W] (or [1,C,H,W]) images with MAX = 1:
/// 11x11 Gaussian window (sigma 1.5) over valid positions, K1 = 0.01, K2 = 0.03.
/// Images smaller than the window use a window as large as the image.
double ssim(const Tensor& a, const Tensor& b);
/// Pearson correlation of the flattened tensors; 0 with `undefined` set when
/// either side is constant.
double pcc(const Tensor& a, const Tensor& b, bool* undefined = nullptr);

MetricReport metric_suite(const Tensor& pred, const Tensor& target);

/// Unweighted mean of reports.
MetricReport mean_report(const std::vector<MetricReport>& reports);

/// (1-p) I0 + p I1 for every position.
std::vector<Tensor> baseline_linear(const Tensor& i0, const Tensor& i1, const PositionSet& positions);

}  // namespace c2sti
