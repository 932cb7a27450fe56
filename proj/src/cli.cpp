#include "hicl/cli.hpp"

#include <fstream>
#include <sstream>
#include <vector>

#include "CLI11.hpp"
#include "hicl/analysis.hpp"
#include "hicl/config.hpp"

namespace hicl {

namespace {

struct LoadedCheckpoint {
  HiclModel model;
  std::size_t tasks_seen = 0;
};

LoadedCheckpoint open_checkpoint(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  const nlohmann::json header = nlohmann::json::parse(ckpt.header, nullptr, false);
  std::size_t tasks = 0;
  if (header.is_object() && header.contains("metadata") && header["metadata"].contains("task")) {
    tasks = header["metadata"]["task"].get<std::size_t>() + 1;
  }
  return {HiclModel::from_checkpoint(ckpt), tasks};
}

void emit(const std::string& text, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot write " + path);
  file << text;
}

std::size_t resolve_tasks(std::size_t requested, std::size_t from_checkpoint, const TaskStream& stream) {
  std::size_t tasks = requested ? requested : from_checkpoint ? from_checkpoint : stream.tasks.size();
  if (tasks > stream.tasks.size()) throw DataError("checkpoint has seen more tasks than the data provides");
  return tasks;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hippocampal mixture-of-experts continual learner"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, output, out_path;
  std::size_t tasks = 0, pairs = 200;
  std::uint64_t seed = 0;
  std::vector<std::size_t> buffer_sizes;
  std::string analysis;

  CLI::App* train = app.add_subcommand("train", "Train on a task stream and write metrics, checkpoints and a report");
  train->add_option("--config", config_path, "Run config (JSON)")->required();
  train->add_option("--output", output, "Output directory; overrides the config's output_dir");

  CLI::App* eval = app.add_subcommand("eval", "Re-evaluate a checkpoint on the config's data");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  eval->add_option("--config", config_path, "Run config providing the data")->required();
  eval->add_option("--tasks", tasks, "Number of seen tasks; defaults to the checkpoint's");

  CLI::App* analyze = app.add_subcommand("analyze", "Emit a diagnostic matrix as CSV");
  analyze->add_option("kind", analysis, "jaccard, prototypes or routing")
      ->required()
      ->check(CLI::IsMember({"jaccard", "prototypes", "routing"}));
  analyze->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  analyze->add_option("--config", config_path, "Run config providing the data (jaccard, routing)");
  analyze->add_option("--tasks", tasks, "Number of seen tasks; defaults to the checkpoint's");
  analyze->add_option("--pairs", pairs, "Sampled pairs per Jaccard cell");
  analyze->add_option("--seed", seed, "Seed of the Jaccard pair sampler");
  analyze->add_option("--out", out_path, "Write the CSV here instead of stdout");

  CLI::App* sweep = app.add_subcommand("sweep", "Train once per replay buffer size and tabulate the results");
  sweep->add_option("--config", config_path, "Run config (JSON)")->required();
  sweep->add_option("--buffer-sizes", buffer_sizes, "Comma-separated per-task buffer sizes")
      ->required()
      ->delimiter(',');
  sweep->add_option("--output", output, "Directory for one run directory per buffer size");
  sweep->add_option("--out", out_path, "Write the CSV here instead of stdout");

  CLI::App* flops = app.add_subcommand("flops", "Print the analytic FLOPs report of a config's model");
  flops->add_option("--config", config_path, "Run config (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    if (*train) {
      RunConfig config = load_run_config(config_path);
      const TaskStream stream = prepare(config);
      const std::filesystem::path dir = output.empty() ? config.output_dir : std::filesystem::path(output);
      if (dir.empty()) throw ConfigError("no output directory: pass --output or set output_dir");
      std::filesystem::create_directories(dir);
      std::ofstream(dir / "config.json") << to_json(config).dump(2) << '\n';
      const RunResult result = run_stream(config.trainer, stream, RunOutputs{dir});
      out << result.report.to_json().dump(2) << '\n';
    } else if (*eval) {
      RunConfig config = load_run_config(config_path);
      const TaskStream stream = prepare(config);
      const LoadedCheckpoint ckpt = open_checkpoint(checkpoint_path);
      const std::size_t seen = resolve_tasks(tasks, ckpt.tasks_seen, stream);
      out << evaluate(ckpt.model, stream, seen, config.trainer.gate_mode).to_json().dump(2) << '\n';
    } else if (*analyze) {
      const LoadedCheckpoint ckpt = open_checkpoint(checkpoint_path);
      if (analysis == "prototypes") {
        emit(matrix_csv(prototype_similarity_matrix(ckpt.model), "expert", "e", "e"), out_path, out);
      } else {
        if (config_path.empty()) throw CLI::RequiredError("--config");
        RunConfig config = load_run_config(config_path);
        const TaskStream stream = prepare(config);
        const std::size_t seen = resolve_tasks(tasks, ckpt.tasks_seen, stream);
        if (analysis == "jaccard") {
          emit(matrix_csv(jaccard_analysis(ckpt.model, stream, seen, pairs, seed).matrix, "task", "t", "t"), out_path,
               out);
        } else {
          emit(matrix_csv(routing_matrix(ckpt.model, stream, seen).normalized, "task", "t", "e"), out_path, out);
        }
      }
    } else if (*sweep) {
      RunConfig config = load_run_config(config_path);
      const TaskStream stream = prepare(config);
      std::ostringstream csv;
      csv.precision(17);
      csv << "buffer_per_task,task_il,class_il,routing_accuracy,mean_forgetting\n";
      for (std::size_t b : buffer_sizes) {
        TrainerConfig trainer = config.trainer;
        trainer.buffer_per_task = b;
        RunOutputs outputs;
        if (!output.empty()) outputs.dir = std::filesystem::path(output) / ("buffer_" + std::to_string(b));
        const MetricsReport r = run_stream(trainer, stream, outputs).report;
        csv << b << ',' << r.task_il << ',' << r.class_il << ',' << r.routing_accuracy << ',' << r.mean_forgetting
            << '\n';
      }
      emit(csv.str(), out_path, out);
    } else if (*flops) {
      RunConfig config = load_run_config(config_path);
      if (config.infer_input_dim || config.infer_num_classes) prepare(config);
      out << count_flops(config.trainer.model).to_json().dump(2) << '\n';
    }
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace hicl
