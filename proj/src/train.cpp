#include "c2sti/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "c2sti/ops.hpp"
#include "c2sti/parallel.hpp"
#include "c2sti/rng.hpp"

namespace c2sti {

namespace fs = std::filesystem;
using nlohmann::json;

void to_json(json& j, const RunConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr0", c.lr0},
       {"lr_min", c.lr_min},
       {"weight_decay", c.weight_decay},
       {"lambda", c.lambda},
       {"alpha", c.alpha},
       {"s", c.s},
       {"mix_s", c.mix_s},
       {"seed", c.seed},
       {"dataset", c.dataset},
       {"checkpoint", c.checkpoint},
       {"log", c.log},
       {"lambda_sim", c.lambda_sim},
       {"lambda_smo", c.lambda_smo},
       {"dtype", c.dtype},
       {"checkpoint_every", c.checkpoint_every},
       {"max_steps", c.max_steps},
       {"max_tuples", c.max_tuples},
       {"channels", c.channels},
       {"backbone_channels", c.backbone_channels},
       {"variant", variant_name(c.variant)}};
}

void from_json(const json& j, RunConfig& c) {
  const json defaults = RunConfig{};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw Error("config: unknown key '" + it.key() + "'");
  json merged = defaults;
  merged.update(j);
  c.epochs = merged.at("epochs").get<int>();
  c.batch_size = merged.at("batch_size").get<int>();
  c.lr0 = merged.at("lr0").get<double>();
  c.lr_min = merged.at("lr_min").get<double>();
  c.weight_decay = merged.at("weight_decay").get<double>();
  c.lambda = merged.at("lambda").get<double>();
  c.alpha = merged.at("alpha").get<double>();
  c.s = merged.at("s").get<int>();
  c.mix_s = merged.at("mix_s").get<bool>();
  c.seed = merged.at("seed").get<std::uint64_t>();
  c.dataset = merged.at("dataset").get<std::string>();
  c.checkpoint = merged.at("checkpoint").get<std::string>();
  c.log = merged.at("log").get<std::string>();
  c.lambda_sim = merged.at("lambda_sim").get<double>();
  c.lambda_smo = merged.at("lambda_smo").get<double>();
  c.dtype = merged.at("dtype").get<std::string>();
  c.checkpoint_every = merged.at("checkpoint_every").get<int>();
  c.max_steps = merged.at("max_steps").get<std::int64_t>();
  c.max_tuples = merged.at("max_tuples").get<int>();
  c.channels = merged.at("channels").get<int>();
  c.backbone_channels = merged.at("backbone_channels").get<int>();
  c.variant = parse_variant(merged.at("variant").get<std::string>());
}

DType parse_dtype(const std::string& name) {
  if (name == "f32" || name == "float32") return DType::F32;
  if (name == "f64" || name == "float64") return DType::F64;
  throw Error("unknown dtype '" + name + "' (expected f32 or f64)");
}

ModelConfig model_config(const RunConfig& run, int genes) {
  ModelConfig m;
  m.genes = genes;
  m.channels = run.channels;
  m.backbone_channels = run.backbone_channels;
  m.lambda = run.lambda;
  m.alpha = run.alpha;
  m.variant = run.variant;
  return m;
}

namespace {

Tensor as_batch(const Tensor& t, DType dt) {
  Tensor x = t.ndim() == 3 ? reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)}) : t;
  return x.dtype() == dt ? x : x.to(dt);
}

void write_line(std::ostream* os, const json& j) {
  if (!os) return;
  *os << j.dump() << "\n";
  os->flush();
}

}  // namespace

Tensor tuple_loss(const Model& model, const SliceTuple& tuple, double lambda_sim, double lambda_smo,
                  LossReport* report) {
  const ForwardResult out = model.forward(tuple);
  std::vector<Tensor> targets;
  for (const STPatch& t : tuple.targets) targets.push_back(as_batch(t.genes, model.dtype()));
  Tensor l_sim = loss_sim(out.slices, targets);
  Tensor l_smo = loss_smooth(out.f01, out.f10);
  Tensor total = add(scale(l_sim, lambda_sim), scale(l_smo, lambda_smo));
  if (report) {
    report->l_sim = l_sim.item();
    report->l_smo = l_smo.item();
    report->total = total.item();
    report->lambda_sim = lambda_sim;
    report->lambda_smo = lambda_smo;
  }
  return total;
}

TrainSummary train_tuples(Model& model, const std::vector<SliceTuple>& tuples, const TrainOptions& opt) {
  if (tuples.empty()) throw Error("train: no training tuples");
  if (opt.batch_size < 1 || opt.epochs < 1) throw Error("train: batch_size and epochs must be positive");
  const std::int64_t n = static_cast<std::int64_t>(tuples.size());
  const std::int64_t per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  TrainSummary summary;
  summary.total_steps = per_epoch * opt.epochs;
  if (opt.max_steps > 0) summary.total_steps = std::min(summary.total_steps, opt.max_steps);

  AdamWConfig acfg = opt.adamw;
  acfg.total_steps = summary.total_steps;
  OptimizerState state(acfg);
  const std::vector<std::string> active = model.active_paths();
  ModelParams& params = model.params();

  std::vector<std::int64_t> order(n);
  for (std::int64_t epoch = 0; summary.steps < summary.total_steps; ++epoch) {
    for (std::int64_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(opt.shuffle_seed, static_cast<std::uint64_t>(epoch)));
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

    for (std::int64_t b = 0; b < per_epoch && summary.steps < summary.total_steps; ++b) {
      const std::int64_t lo = b * opt.batch_size, hi = std::min(n, lo + opt.batch_size);
      const double inv = 1.0 / static_cast<double>(hi - lo);
      params.zero_grad();
      StepRecord rec;
      rec.step = summary.steps + 1;
      rec.lr = state.lr();
      rec.loss.lambda_sim = opt.lambda_sim;
      rec.loss.lambda_smo = opt.lambda_smo;
      for (std::int64_t k = lo; k < hi; ++k) {
        LossReport r;
        Tensor loss = tuple_loss(model, tuples[order[k]], opt.lambda_sim, opt.lambda_smo, &r);
        if (!std::isfinite(r.total)) {
          write_line(opt.log, {{"step", rec.step}, {"error", "non-finite loss"}});
          throw TrainingDiverged(rec.step, "train: non-finite loss at step " + std::to_string(rec.step));
        }
        scale(loss, inv).backward();
        rec.loss.l_sim += r.l_sim * inv;
        rec.loss.l_smo += r.l_smo * inv;
        rec.loss.total += r.total * inv;
      }
      adamw_step(params, active, state);
      ++summary.steps;
      write_line(opt.log, {{"step", rec.step},
                           {"lr", rec.lr},
                           {"l_sim", rec.loss.l_sim},
                           {"l_smo", rec.loss.l_smo},
                           {"total", rec.loss.total}});
      summary.history.push_back(rec);
      if (opt.on_step) opt.on_step(rec);
      if (opt.checkpoint_every > 0 && !opt.checkpoint_dir.empty() && summary.steps % opt.checkpoint_every == 0 &&
          summary.steps < summary.total_steps) {
        std::ostringstream name;
        name << "step_" << std::setw(6) << std::setfill('0') << summary.steps;
        save_checkpoint(params, opt.checkpoint_dir / name.str(), summary.steps, opt.checkpoint_extra);
      }
    }
  }
  if (!opt.checkpoint_dir.empty())
    save_checkpoint(params, opt.checkpoint_dir / "final", summary.steps, opt.checkpoint_extra);
  return summary;
}

std::vector<SliceTuple> split_tuples(const std::vector<Volume>& volumes, int s) {
  std::vector<SliceTuple> out;
  for (const Volume& v : volumes) {
    auto t = make_tuples(v, s);
    out.insert(out.end(), std::make_move_iterator(t.begin()), std::make_move_iterator(t.end()));
  }
  return out;
}

namespace {

json checkpoint_config(const RunConfig& c, const ModelConfig& m) {
  // no paths here: runs that differ only in output location must produce
  // byte-identical checkpoints
  return {{"model", m},
          {"dtype", c.dtype},
          {"train",
           {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr0", c.lr0},
            {"lr_min", c.lr_min},
            {"weight_decay", c.weight_decay},
            {"s", c.s},
            {"mix_s", c.mix_s},
            {"seed", c.seed},
            {"lambda_sim", c.lambda_sim},
            {"lambda_smo", c.lambda_smo},
            {"max_steps", c.max_steps},
            {"max_tuples", c.max_tuples}}}};
}

}  // namespace

TrainSummary train(const RunConfig& config) {
  if (config.dataset.empty()) throw Error("train: dataset path is required");
  if (config.checkpoint.empty()) throw Error("train: checkpoint path is required");
  if (config.s < 1) throw Error("train: s must be >= 1");
  const DatasetManifest manifest = read_dataset_manifest(config.dataset);
  const std::vector<Volume> volumes = load_split(config.dataset, "train");
  std::vector<SliceTuple> tuples;
  for (int s = config.mix_s ? 1 : config.s; s <= config.s; ++s) {
    auto t = split_tuples(volumes, s);
    tuples.insert(tuples.end(), t.begin(), t.end());
  }
  if (config.max_tuples > 0 && static_cast<int>(tuples.size()) > config.max_tuples) tuples.resize(config.max_tuples);

  const ModelConfig mc = model_config(config, manifest.generator.genes);
  Model model(mc, config.seed, parse_dtype(config.dtype));

  fs::create_directories(config.checkpoint);
  const fs::path log_path = config.log.empty() ? fs::path(config.checkpoint) / "train_log.jsonl" : fs::path(config.log);
  if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw Error("train: cannot open log " + log_path.string());

  TrainOptions opt;
  opt.epochs = config.epochs;
  opt.batch_size = config.batch_size;
  opt.adamw.lr0 = config.lr0;
  opt.adamw.lr_min = config.lr_min;
  opt.adamw.weight_decay = config.weight_decay;
  opt.lambda_sim = config.lambda_sim;
  opt.lambda_smo = config.lambda_smo;
  opt.shuffle_seed = config.seed;
  opt.max_steps = config.max_steps;
  opt.checkpoint_every = config.checkpoint_every;
  opt.checkpoint_dir = config.checkpoint;
  opt.checkpoint_extra = checkpoint_config(config, mc);
  opt.log = &log;
  return train_tuples(model, tuples, opt);
}

Model load_model(const fs::path& dir, std::optional<Variant> variant) {
  const json manifest = read_checkpoint_manifest(dir);
  const json& cfg = manifest.at("config");
  if (!cfg.contains("model")) throw Error("checkpoint " + dir.string() + " has no model configuration");
  ModelConfig mc = cfg.at("model").get<ModelConfig>();
  if (variant) mc.variant = *variant;
  Model model(mc, 0, parse_dtype(cfg.value("dtype", std::string("f32"))));
  load_checkpoint(model.params(), dir);
  return model;
}

EvalRow evaluate_tuples(const Model& model, const std::vector<SliceTuple>& tuples) {
  EvalRow row;
  row.tuples = static_cast<int>(tuples.size());
  if (tuples.empty()) return row;
  row.s = tuples.front().s();
  row.per_tuple.resize(tuples.size());
  parallel_for(static_cast<std::int64_t>(tuples.size()), [&](std::int64_t lo, std::int64_t hi) {
    NoGradGuard guard;
    for (std::int64_t i = lo; i < hi; ++i) {
      const SliceTuple& t = tuples[i];
      const ForwardResult out = model.forward(t);
      const auto base = baseline_linear(t.anchors[0].genes.to(DType::F64), t.anchors[1].genes.to(DType::F64),
                                        uniform_positions(t.s()));
      std::vector<MetricReport> m, b;
      for (int k = 0; k < t.s(); ++k) {
        m.push_back(metric_suite(out.slices[k], t.targets[k].genes));
        b.push_back(metric_suite(base[k], t.targets[k].genes));
      }
      TupleMetrics& tm = row.per_tuple[i];
      tm.tuple = static_cast<int>(i);
      tm.anchor = t.anchors[0].slice_index;
      tm.model = mean_report(m);
      tm.baseline = mean_report(b);
      tm.positions = out.positions.p;
    }
  });
  std::vector<MetricReport> m, b;
  for (const auto& tm : row.per_tuple) {
    m.push_back(tm.model);
    b.push_back(tm.baseline);
  }
  row.model = mean_report(m);
  row.baseline = mean_report(b);
  return row;
}

EvalReport evaluate(const fs::path& checkpoint_dir, const fs::path& dataset, const std::string& split,
                    const std::vector<int>& s_values, std::optional<Variant> variant) {
  const Model model = load_model(checkpoint_dir, variant);
  const DatasetManifest manifest = read_dataset_manifest(dataset);
  if (manifest.generator.genes != model.config().genes)
    throw ShapeError("evaluate: checkpoint expects " + std::to_string(model.config().genes) + " genes, dataset has " +
                     std::to_string(manifest.generator.genes));
  const std::vector<Volume> volumes = load_split(dataset, split);
  EvalReport report;
  report.method = variant_name(model.config().variant);
  for (int s : s_values) {
    EvalRow row = evaluate_tuples(model, split_tuples(volumes, s));
    row.s = s;
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string format_report(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "method" << std::right << std::setw(4) << "s" << std::setw(8) << "tuples"
     << std::setw(10) << "PSNR" << std::setw(10) << "RMSE" << std::setw(10) << "PCC" << std::setw(10) << "SSIM"
     << "\n";
  auto line = [&](const std::string& name, const EvalRow& r, const MetricReport& m) {
    os << std::left << std::setw(18) << name << std::right << std::setw(4) << r.s << std::setw(8) << r.tuples
       << std::fixed << std::setprecision(4) << std::setw(10) << m.psnr << std::setw(10) << m.rmse << std::setw(10)
       << m.pcc << std::setw(10) << m.ssim << "\n";
  };
  for (const EvalReport& rep : reports)
    for (const EvalRow& r : rep.rows) line(rep.method, r, r.model);
  if (!reports.empty())
    for (const EvalRow& r : reports.front().rows) line("linear_baseline", r, r.baseline);
  return os.str();
}

json report_json(const std::vector<EvalReport>& reports) {
  json rows = json::array();
  json tuples = json::array();
  for (const EvalReport& rep : reports)
    for (const EvalRow& r : rep.rows) {
      json m = r.model;
      m["method"] = rep.method;
      m["s"] = r.s;
      m["tuples"] = r.tuples;
      rows.push_back(m);
      for (const TupleMetrics& t : r.per_tuple)
        tuples.push_back({{"method", rep.method},
                          {"s", r.s},
                          {"tuple", t.tuple},
                          {"anchor", t.anchor},
                          {"positions", t.positions},
                          {"model", t.model},
                          {"baseline", t.baseline}});
    }
  if (!reports.empty())
    for (const EvalRow& r : reports.front().rows) {
      json b = r.baseline;
      b["method"] = "linear_baseline";
      b["s"] = r.s;
      b["tuples"] = r.tuples;
      rows.push_back(b);
    }
  return {{"columns", {"PSNR", "RMSE", "PCC", "SSIM"}}, {"rows", rows}, {"per_tuple", tuples}};
}

EvalReport ablate(RunConfig config, Variant variant, const std::vector<int>& s_values) {
  config.variant = variant;
  const fs::path root = config.checkpoint.empty() ? fs::path("ablation") : fs::path(config.checkpoint);
  config.checkpoint = (root / variant_name(variant)).string();
  config.log.clear();
  train(config);
  return evaluate(fs::path(config.checkpoint) / "final", config.dataset, "test", s_values);
}

}  // namespace c2sti
