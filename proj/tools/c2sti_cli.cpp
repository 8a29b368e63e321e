#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "c2sti/data.hpp"
#include "c2sti/io.hpp"
#include "c2sti/ops.hpp"
#include "c2sti/parallel.hpp"
#include "c2sti/pyramid.hpp"
#include "c2sti/suite.hpp"
#include "c2sti/train.hpp"

using namespace c2sti;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return json::parse(in);
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

struct TrainArgs {
  std::string config;
  std::optional<std::string> dataset, checkpoint, log, dtype, variant;
  std::optional<int> epochs, batch_size, s, channels, checkpoint_every, max_tuples;
  std::optional<double> lr0, lr_min, weight_decay, lambda, alpha, lambda_sim, lambda_smo;
  std::optional<std::int64_t> max_steps;
  std::optional<std::uint64_t> seed;
  bool mix_s = false;
};

void add_train_options(CLI::App* app, TrainArgs& a) {
  app->add_option("--config", a.config, "JSON file with RunConfig fields");
  app->add_option("--dataset", a.dataset);
  app->add_option("--checkpoint", a.checkpoint);
  app->add_option("--log", a.log);
  app->add_option("--dtype", a.dtype, "f32 or f64");
  app->add_option("--epochs", a.epochs);
  app->add_option("--batch-size", a.batch_size);
  app->add_option("--lr0", a.lr0);
  app->add_option("--lr-min", a.lr_min);
  app->add_option("--weight-decay", a.weight_decay);
  app->add_option("--lambda", a.lambda, "GCN blend");
  app->add_option("--alpha", a.alpha, "gradient scaling of positions");
  app->add_option("--lambda-sim", a.lambda_sim);
  app->add_option("--lambda-smo", a.lambda_smo);
  app->add_option("--s", a.s);
  app->add_flag("--mix-s", a.mix_s, "pool tuples for every s' <= s");
  app->add_option("--seed", a.seed);
  app->add_option("--channels", a.channels);
  app->add_option("--checkpoint-every", a.checkpoint_every);
  app->add_option("--max-steps", a.max_steps);
  app->add_option("--max-tuples", a.max_tuples);
  app->add_option("--variant", a.variant, "full, no_cross_modal, no_mgc_graph or no_dlsm");
}

RunConfig resolve(const TrainArgs& a) {
  RunConfig c;
  if (!a.config.empty()) c = read_json(a.config).get<RunConfig>();
  auto set = [](auto& field, const auto& opt) {
    if (opt) field = *opt;
  };
  set(c.dataset, a.dataset);
  set(c.checkpoint, a.checkpoint);
  set(c.log, a.log);
  set(c.dtype, a.dtype);
  set(c.epochs, a.epochs);
  set(c.batch_size, a.batch_size);
  set(c.lr0, a.lr0);
  set(c.lr_min, a.lr_min);
  set(c.weight_decay, a.weight_decay);
  set(c.lambda, a.lambda);
  set(c.alpha, a.alpha);
  set(c.lambda_sim, a.lambda_sim);
  set(c.lambda_smo, a.lambda_smo);
  set(c.s, a.s);
  set(c.seed, a.seed);
  set(c.channels, a.channels);
  set(c.checkpoint_every, a.checkpoint_every);
  set(c.max_steps, a.max_steps);
  set(c.max_tuples, a.max_tuples);
  if (a.variant) c.variant = parse_variant(*a.variant);
  if (a.mix_s) c.mix_s = true;
  return c;
}

void emit_reports(const std::vector<EvalReport>& reports, const std::string& json_out) {
  std::cout << format_report(reports);
  if (!json_out.empty()) write_json(json_out, report_json(reports));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal cross-slice spatial transcriptomics interpolation"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (default: C2STI_THREADS or 1)");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "generate a synthetic ST/H&E dataset");
  GeneratorConfig gen;
  std::string synth_out;
  std::uint64_t synth_seed = 7;
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--genes", gen.genes)->capture_default_str();
  synth->add_option("--size", gen.size)->capture_default_str();
  synth->add_option("--slices", gen.slices)->capture_default_str();
  synth->add_option("--volumes", gen.volumes)->capture_default_str();
  synth->add_option("--deformation", gen.deformation)->capture_default_str();
  synth->add_option("--drift", gen.drift)->capture_default_str();
  synth->add_option("--sparsity", gen.sparsity)->capture_default_str();
  synth->add_option("--seed", synth_seed)->capture_default_str();

  // train
  auto* train_cmd = app.add_subcommand("train", "train on the dataset's train split");
  TrainArgs train_args;
  add_train_options(train_cmd, train_args);

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "metrics of a checkpoint against the linear baseline");
  std::string eval_ckpt, eval_data, eval_split = "test", eval_json, eval_variant;
  std::vector<int> eval_s{1};
  eval_cmd->add_option("--ckpt", eval_ckpt)->required();
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--split", eval_split)->capture_default_str();
  eval_cmd->add_option("--s", eval_s, "slice counts")->delimiter(',');
  eval_cmd->add_option("--variant", eval_variant);
  eval_cmd->add_option("--json", eval_json, "machine-readable report");

  // interpolate
  auto* interp = app.add_subcommand("interpolate", "synthesize intermediate slices for one anchor pair");
  std::string interp_ckpt, interp_tuple, interp_out;
  int interp_s = 1;
  std::optional<double> interp_alpha;
  interp->add_option("--ckpt", interp_ckpt)->required();
  interp->add_option("--tuple", interp_tuple, "JSON {st0, st1, he0, he1} naming CTF files")->required();
  interp->add_option("--s", interp_s)->capture_default_str();
  interp->add_option("--alpha", interp_alpha);
  interp->add_option("--out", interp_out)->required();

  // ablate
  auto* abl = app.add_subcommand("ablate", "train and evaluate ablation variants");
  TrainArgs abl_args;
  add_train_options(abl, abl_args);
  std::vector<std::string> abl_variants{"no_cross_modal", "no_mgc_graph", "no_dlsm"};
  std::vector<int> abl_s{1};
  std::string abl_json;
  abl->add_option("--variants", abl_variants)->delimiter(',');
  abl->add_option("--eval-s", abl_s)->delimiter(',');
  abl->add_option("--json", abl_json);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite (64-bit)");
  GradSuiteOptions gc_opt;
  bool gc_ops_only = false;
  gc->add_option("--seed", gc_opt.seed)->capture_default_str();
  gc->add_option("--fraction", gc_opt.end_to_end_fraction, "share of parameters probed end to end")
      ->capture_default_str();
  gc->add_flag("--ops-only", gc_ops_only, "skip the end-to-end check");

  // dump-graph
  auto* dump = app.add_subcommand("dump-graph", "write the co-expression matrix of one tuple");
  std::string dump_data, dump_split = "train", dump_out;
  int dump_tuple = 0, dump_s = 1;
  dump->add_option("--data", dump_data)->required();
  dump->add_option("--split", dump_split)->capture_default_str();
  dump->add_option("--tuple", dump_tuple)->capture_default_str();
  dump->add_option("--s", dump_s)->capture_default_str();
  dump->add_option("--out", dump_out)->required();

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) set_num_threads(threads);

  try {
    if (synth->parsed()) {
      const DatasetManifest m = write_dataset(gen, synth_seed, synth_out);
      std::cout << "wrote " << synth_out << ": train " << m.counts.train << ", val " << m.counts.val << ", test "
                << m.counts.test << " volumes\n";
    } else if (train_cmd->parsed()) {
      const RunConfig c = resolve(train_args);
      const TrainSummary s = train(c);
      const auto& last = s.history.back().loss;
      std::cout << "trained " << s.steps << " steps; final l_sim " << last.l_sim << ", l_smo " << last.l_smo
                << "; checkpoint " << (fs::path(c.checkpoint) / "final").string() << "\n";
    } else if (eval_cmd->parsed()) {
      std::optional<Variant> v;
      if (!eval_variant.empty()) v = parse_variant(eval_variant);
      emit_reports({evaluate(eval_ckpt, eval_data, eval_split, eval_s, v)}, eval_json);
    } else if (interp->parsed()) {
      const json t = read_json(interp_tuple);
      const fs::path base = fs::path(interp_tuple).parent_path();
      auto load = [&](const char* key) {
        fs::path p = t.at(key).get<std::string>();
        return load_ctf(p.is_absolute() ? p : base / p);
      };
      const Tensor st0 = load("st0"), st1 = load("st1"), he0 = load("he0"), he1 = load("he1");
      const Model model = load_model(interp_ckpt);
      const double alpha = interp_alpha.value_or(model.config().alpha);
      const PositionSet pos = model.config().variant == Variant::NoDlsm ? uniform_positions(interp_s)
                                                                        : compute_positions(he0, he1, interp_s, alpha);
      ForwardResult r;
      {
        NoGradGuard no_grad;
        r = model.forward(st0, st1, he0, he1, pos);
      }
      fs::create_directories(interp_out);
      json manifest = {{"s", interp_s}, {"alpha", alpha}, {"positions", pos.p}, {"files", json::array()}};
      for (int i = 0; i < interp_s; ++i) {
        const std::string name = "st_" + std::to_string(i) + ".ctf";
        save_ctf(reshape(r.slices[i], {r.slices[i].dim(1), r.slices[i].dim(2), r.slices[i].dim(3)}),
                 fs::path(interp_out) / name);
        manifest["files"].push_back(name);
      }
      write_json(fs::path(interp_out) / "positions.json", manifest);
      std::cout << "positions";
      for (double p : pos.p) std::cout << " " << p;
      std::cout << "\n";
    } else if (abl->parsed()) {
      const RunConfig c = resolve(abl_args);
      std::vector<EvalReport> reports;
      for (const std::string& name : abl_variants) reports.push_back(ablate(c, parse_variant(name), abl_s));
      emit_reports(reports, abl_json);
    } else if (gc->parsed()) {
      gc_opt.end_to_end = !gc_ops_only;
      bool ok = true;
      for (const GradSuiteRow& row : gradient_suite(gc_opt)) {
        std::printf("%-20s max_rel %.3e  tol %.0e  probed %6ld  refined %4ld  %6.1fs  %s\n", row.name.c_str(),
                    row.result.max_rel_error, row.tolerance, static_cast<long>(row.result.probed),
                    static_cast<long>(row.result.refined), row.seconds, row.passed() ? "ok" : "FAIL");
        ok = ok && row.passed();
      }
      return ok ? 0 : 1;
    } else if (dump->parsed()) {
      const auto volumes = load_split(dump_data, dump_split);
      const auto tuples = split_tuples(volumes, dump_s);
      if (dump_tuple < 0 || dump_tuple >= static_cast<int>(tuples.size()))
        throw Error("dump-graph: tuple " + std::to_string(dump_tuple) + " out of range (" +
                    std::to_string(tuples.size()) + " tuples)");
      const SliceTuple& t = tuples[dump_tuple];
      const CoexpressionGraph g = build_graph(t.anchors[0].genes, t.anchors[1].genes);
      save_ctf(g.a, dump_out);
      std::cout << "A " << shape_str(g.a.shape()) << " -> " << dump_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
