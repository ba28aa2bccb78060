// Command-line front end: score, eval, simulate, serve.
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stvg/config.hpp"
#include "stvg/dataset_io.hpp"
#include "stvg/service.hpp"
#include "stvg/sim_harness.hpp"

namespace {

constexpr int kUsageError = 1;
constexpr int kDataError = 2;

struct Options {
  std::string predictions;
  std::string annotations;
  std::string format{"native"};
  std::string config;
  std::string out;
  std::optional<unsigned> jobs;
  std::vector<double> thresholds;
  bool json{false};
  std::string log;
  std::string summary;
  std::optional<std::uint64_t> seed;
  bool stdio{false};
  std::string socket;
  std::size_t max_connections{0};
};

stvg::ToolConfig tool_config(const Options& o) {
  stvg::ToolConfig cfg = o.config.empty() ? stvg::ToolConfig{} : stvg::load_config(o.config);
  if (o.jobs) cfg.jobs = *o.jobs;
  if (!o.thresholds.empty()) cfg.thresholds = o.thresholds;
  if (o.seed) cfg.harness.seed = *o.seed;
  return cfg;
}

stvg::AnnotationFile annotations(const Options& o, const stvg::ToolConfig& cfg) {
  return stvg::load_annotations(o.annotations, stvg::parse_annotation_format(o.format), cfg.fps);
}

// Writes to `path`, or stdout when empty.
template <class F>
void with_output(const std::string& path, F&& f) {
  if (path.empty()) {
    f(std::cout);
    return;
  }
  std::ofstream out(path);
  if (!out) throw stvg::DataError("cannot write '" + path + "'");
  f(out);
}

int run_score(const Options& o) {
  const auto cfg = tool_config(o);
  const auto ann = annotations(o, cfg);
  const auto preds = stvg::load_predictions(o.predictions);
  const std::string text = stvg::score_batch(preds, ann, cfg.reward, cfg.jobs);
  with_output(o.out, [&](std::ostream& os) { os << text; });
  return 0;
}

int run_eval(const Options& o) {
  const auto cfg = tool_config(o);
  const auto ann = annotations(o, cfg);
  const auto preds = stvg::load_predictions(o.predictions);
  const auto report = stvg::eval_metrics(preds, ann, cfg.thresholds);
  with_output(o.out, [&](std::ostream& os) {
    if (o.json) {
      os << stvg::metrics_to_json(report).dump() << '\n';
    } else {
      os << stvg::format_table(report);
    }
  });
  return 0;
}

int run_simulate(const Options& o) {
  const auto cfg = tool_config(o);
  std::ofstream log_file;
  std::ostream* log = nullptr;
  if (!o.log.empty()) {
    log_file.open(o.log);
    if (!log_file) throw stvg::DataError("cannot write '" + o.log + "'");
    log = &log_file;
  }
  const auto report = stvg::train_with_log(cfg.harness, log);
  with_output(o.summary, [&](std::ostream& os) {
    os << stvg::training_summary_json(report, cfg.harness).dump() << '\n';
  });
  return 0;
}

int run_serve(const Options& o) {
  const auto cfg = tool_config(o);
  stvg::AnnotationFile ann;
  ann.fps = cfg.fps;
  if (!o.annotations.empty()) ann = annotations(o, cfg);
  stvg::ScoringService service(std::move(ann), cfg.reward, cfg.grpo.delta, cfg.grpo.group_size);
  if (o.stdio) {
    service.serve(std::cin, std::cout);
  } else {
    stvg::serve_unix_socket(service, o.socket, o.max_connections);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reward scoring, metrics and GRPO simulation for spatio-temporal grounding outputs"};
  app.require_subcommand(1);
  Options o;

  const auto common = [&](CLI::App* sub, bool need_data) {
    sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    if (need_data) {
      sub->add_option("--predictions", o.predictions, "predictions JSON-lines file")->required();
      sub->add_option("--annotations", o.annotations, "annotation file")->required();
    }
    sub->add_option("--format", o.format, "annotation format: native, hcstvg or vidstg")
        ->check(CLI::IsMember({"native", "hcstvg", "vidstg"}));
  };

  auto* score = app.add_subcommand("score", "score predictions against annotations, one line per prediction");
  common(score, true);
  score->add_option("--out", o.out, "output file (default stdout)");
  score->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "grounding metrics over a predictions file");
  common(eval, true);
  eval->add_option("--thresholds", o.thresholds, "vIoU thresholds, comma separated")->delimiter(',');
  eval->add_flag("--json", o.json, "print the report as JSON instead of a table");
  eval->add_option("--out", o.out, "output file (default stdout)");

  auto* sim = app.add_subcommand("simulate", "train the toy policy and report");
  sim->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  sim->add_option("--seed", o.seed, "override the config seed");
  sim->add_option("--log", o.log, "per-iteration JSON-lines log");
  sim->add_option("--summary", o.summary, "final JSON summary (default stdout)");

  auto* serve = app.add_subcommand("serve", "line-delimited JSON scoring service");
  serve->add_option("--annotations", o.annotations, "annotation file for sample_id lookups");
  serve->add_option("--format", o.format, "annotation format")->check(CLI::IsMember({"native", "hcstvg", "vidstg"}));
  serve->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  auto* stdio = serve->add_flag("--stdio", o.stdio, "serve stdin/stdout");
  auto* sock = serve->add_option("--socket", o.socket, "unix socket path");
  serve->add_option("--max-connections", o.max_connections, "stop after this many clients (0: never)");
  stdio->excludes(sock);
  sock->excludes(stdio);

  try {
    app.parse(argc, argv);
    if (serve->parsed() && !o.stdio && o.socket.empty()) {
      throw CLI::ValidationError("serve needs --stdio or --socket");
    }
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsageError;
  }

  try {
    if (score->parsed()) return run_score(o);
    if (eval->parsed()) return run_eval(o);
    if (sim->parsed()) return run_simulate(o);
    return run_serve(o);
  } catch (const stvg::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const stvg::ReportingError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const stvg::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }
}
