#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "c2sti/data.hpp"
#include "c2sti/metrics.hpp"
#include "c2sti/model.hpp"
#include "c2sti/optim.hpp"

namespace c2sti {

struct RunConfig {
  int epochs = 40;
  int batch_size = 6;
  double lr0 = 1e-4;
  double lr_min = 1e-6;
  double weight_decay = 1e-4;
  double lambda = 0.5;
  double alpha = 1.0;
  /// Slices per training tuple; with mix_s, tuples for every s' in 1..s are pooled.
  int s = 1;
  bool mix_s = false;
  std::uint64_t seed = 7;
  std::string dataset;
  std::string checkpoint;
  /// Defaults to <checkpoint>/train_log.jsonl.
  std::string log;
  double lambda_sim = 1.0;
  double lambda_smo = 1.0;
  std::string dtype = "f32";
  /// Periodic checkpoints every this many steps (0: final only).
  int checkpoint_every = 0;
  /// Caps the schedule horizon; 0 means epochs x batches-per-epoch.
  std::int64_t max_steps = 0;
  /// Caps the number of training tuples (0: all), taken in volume order.
  int max_tuples = 0;
  int channels = 32;
  int backbone_channels = 16;
  Variant variant = Variant::Full;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, RunConfig& c);

DType parse_dtype(const std::string& name);
ModelConfig model_config(const RunConfig& run, int genes);

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  LossReport loss;
};

struct TrainOptions {
  int epochs = 1;
  int batch_size = 6;
  AdamWConfig adamw;
  double lambda_sim = 1.0;
  double lambda_smo = 1.0;
  std::uint64_t shuffle_seed = 7;
  std::int64_t max_steps = 0;
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  nlohmann::json checkpoint_extra = nlohmann::json::object();
  /// Line-delimited JSON log; may be null.
  std::ostream* log = nullptr;
  std::function<void(const StepRecord&)> on_step;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::int64_t step, const std::string& what) : Error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct TrainSummary {
  std::int64_t steps = 0;
  std::int64_t total_steps = 0;
  std::vector<StepRecord> history;
};

/// Per-sample loss of one tuple: lambda_sim * L_sim + lambda_smo * L_smo.
Tensor tuple_loss(const Model& model, const SliceTuple& tuple, double lambda_sim, double lambda_smo,
                  LossReport* report = nullptr);

/// Mini-batch AdamW over `tuples`, reshuffled every epoch. A batch's gradient
/// is the mean of per-sample gradients. Throws TrainingDiverged on a
/// non-finite loss.
TrainSummary train_tuples(Model& model, const std::vector<SliceTuple>& tuples, const TrainOptions& options);

/// Tuples of every volume in a split for one s.
std::vector<SliceTuple> split_tuples(const std::vector<Volume>& volumes, int s);

/// Trains on the dataset's train split and writes <checkpoint>/final.
TrainSummary train(const RunConfig& config);

Model load_model(const std::filesystem::path& checkpoint_dir, std::optional<Variant> variant = std::nullopt);

struct TupleMetrics {
  int tuple = 0;
  int anchor = 0;  // slice index of the first anchor
  MetricReport model;
  MetricReport baseline;
  std::vector<double> positions;
};

struct EvalRow {
  int s = 0;
  int tuples = 0;
  MetricReport model;
  MetricReport baseline;
  std::vector<TupleMetrics> per_tuple;
};

/// Model and linear baseline on every tuple; the baseline blends at the true
/// (uniform) depths of the targets. Metrics are averaged over positions, then
/// over tuples.
EvalRow evaluate_tuples(const Model& model, const std::vector<SliceTuple>& tuples);

struct EvalReport {
  std::string method;
  std::vector<EvalRow> rows;
};

EvalReport evaluate(const std::filesystem::path& checkpoint_dir, const std::filesystem::path& dataset,
                    const std::string& split, const std::vector<int>& s_values,
                    std::optional<Variant> variant = std::nullopt);

/// Aligned-column text with a model row and a baseline row per s.
std::string format_report(const std::vector<EvalReport>& reports);
nlohmann::json report_json(const std::vector<EvalReport>& reports);

/// Trains `variant` from scratch with `config` (checkpoint under
/// <checkpoint>/<variant>) and evaluates it on the test split.
EvalReport ablate(RunConfig config, Variant variant, const std::vector<int>& s_values);

}  // namespace c2sti
