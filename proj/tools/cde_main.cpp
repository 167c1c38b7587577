// Command-line entry point: train experiments, run the component ablation,
// evaluate checkpoints, render heatmaps, and serve the mask protocol for
// remote-mode integration testing.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <iostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cde/exp_config.hpp"
#include "cde/runner.hpp"
#include "cde/seg_server.hpp"

namespace {

/// One worker process per seed: each child trains its seed into the usual
/// per-seed directory and reports its outcome back over a pipe; the parent
/// aggregates and writes summary.csv exactly as the sequential path does.
/// Seeds share nothing — separate processes, separate RNG roots, separate
/// output directories.
cde::ExperimentOutcome run_experiment_parallel(const cde::ExperimentConfig& cfg,
                                               const std::string& out_root) {
  cde::ExperimentOutcome out;
  out.dir = out_root + "/" + cfg.name;
  std::filesystem::create_directories(out.dir);

  struct Worker {
    pid_t pid = -1;
    int fd = -1;
    std::uint64_t seed = 0;
  };
  std::vector<Worker> workers;
  for (std::uint64_t seed : cfg.seeds) {
    int pipe_fd[2];
    if (pipe(pipe_fd) != 0) throw std::runtime_error("parallel: pipe failed");
    const pid_t pid = fork();
    if (pid < 0) throw std::runtime_error("parallel: fork failed");
    if (pid == 0) {
      close(pipe_fd[0]);
      int code = 1;
      try {
        const cde::SeedOutcome s =
            cde::run_seed<float>(cfg, seed, out.dir + "/" + std::to_string(seed));
        nlohmann::json j;
        j["seed"] = s.seed;
        j["aborted"] = s.aborted;
        j["abort_reason"] = s.abort_reason;
        j["final_eval_success"] = s.final_eval_success;
        j["oracle_calls_train"] = s.oracle_calls_train;
        j["oracle_calls_eval"] = s.oracle_calls_eval;
        j["gate_positive"] = s.gate_positive;
        j["gate_negative"] = s.gate_negative;
        j["dir"] = s.dir;
        const std::string line = j.dump();
        std::size_t off = 0;
        while (off < line.size()) {
          const ssize_t n = write(pipe_fd[1], line.data() + off, line.size() - off);
          if (n <= 0) break;
          off += static_cast<std::size_t>(n);
        }
        code = off == line.size() ? 0 : 1;
      } catch (const std::exception& e) {
        std::fprintf(stderr, "seed %llu worker: %s\n", static_cast<unsigned long long>(seed),
                     e.what());
      }
      close(pipe_fd[1]);
      _exit(code);
    }
    close(pipe_fd[1]);
    workers.push_back({pid, pipe_fd[0], seed});
  }

  for (const Worker& w : workers) {
    std::string text;
    char buf[4096];
    ssize_t n;
    while ((n = read(w.fd, buf, sizeof(buf))) > 0) text.append(buf, static_cast<std::size_t>(n));
    close(w.fd);
    int status = 0;
    waitpid(w.pid, &status, 0);

    cde::SeedOutcome s;
    s.seed = w.seed;
    const bool clean = WIFEXITED(status) && WEXITSTATUS(status) == 0 && !text.empty();
    if (clean) {
      const nlohmann::json j = nlohmann::json::parse(text);
      s.seed = j.at("seed").get<std::uint64_t>();
      s.aborted = j.at("aborted").get<bool>();
      s.abort_reason = j.at("abort_reason").get<std::string>();
      s.final_eval_success = j.at("final_eval_success").get<double>();
      s.oracle_calls_train = j.at("oracle_calls_train").get<std::int64_t>();
      s.oracle_calls_eval = j.at("oracle_calls_eval").get<std::int64_t>();
      s.gate_positive = j.at("gate_positive").get<std::int64_t>();
      s.gate_negative = j.at("gate_negative").get<std::int64_t>();
      s.dir = j.at("dir").get<std::string>();
    } else {
      s.aborted = true;
      s.abort_reason = "worker process failed";
      s.dir = out.dir + "/" + std::to_string(w.seed);
    }
    out.seeds.push_back(s);
  }

  cde::aggregate_experiment(out);
  return out;
}

void print_experiment(const cde::ExperimentOutcome& r) {
  for (const cde::SeedOutcome& s : r.seeds) {
    if (s.aborted)
      std::printf("  seed %llu: ABORTED (%s)\n", static_cast<unsigned long long>(s.seed),
                  s.abort_reason.c_str());
    else
      std::printf("  seed %llu: final eval success %.3f  (oracle calls: train %lld, eval %lld)\n",
                  static_cast<unsigned long long>(s.seed), s.final_eval_success,
                  static_cast<long long>(s.oracle_calls_train),
                  static_cast<long long>(s.oracle_calls_eval));
  }
  std::printf("  mean %.3f +/- %.3f (stderr), bundle: %s\n", r.mean_success, r.stderr_success,
              r.dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Concept-driven exploration workbench: visual actor-critic agents on the WristWorld "
      "simulator, with mask-based intrinsic rewards and baselines."};
  app.require_subcommand(1);

  // train
  std::string train_config, train_out = "out";
  std::vector<std::uint64_t> train_seeds;
  CLI::App* train = app.add_subcommand(
      "train", "Train one experiment (every configured seed) from a JSON config");
  train->add_option("--config", train_config, "experiment config JSON path")->required();
  train->add_option("--seed", train_seeds,
                    "override the config's seed list (repeatable)");
  train->add_option("--out", train_out, "output root directory (default: out)");
  bool train_parallel = false;
  train->add_flag("--parallel", train_parallel,
                  "run seeds concurrently, one worker process per seed");

  // ablate
  std::string ablate_config, ablate_out = "out";
  CLI::App* ablate = app.add_subcommand(
      "ablate", "Run the five-row component ablation around a base config");
  ablate->add_option("--config", ablate_config, "base experiment config JSON path")->required();
  ablate->add_option("--out", ablate_out, "output root directory (default: out)");

  // eval
  std::string eval_config, eval_ckpt;
  std::uint64_t eval_seed = 1;
  int eval_episodes = 0;
  CLI::App* evalc = app.add_subcommand("eval", "Evaluate a saved checkpoint greedily");
  evalc->add_option("--config", eval_config, "experiment config JSON path")->required();
  evalc->add_option("--checkpoint", eval_ckpt, "checkpoint file to load")->required();
  evalc->add_option("--seed", eval_seed, "evaluation seed (default: 1)");
  evalc->add_option("--episodes", eval_episodes,
                    "episode count (default: the config's eval_episodes)");

  // heatmap
  std::string heat_bundle;
  CLI::App* heat = app.add_subcommand(
      "heatmap", "Render a seed bundle's visit heatmaps to PGM and print entropies");
  heat->add_option("--bundle", heat_bundle, "seed result directory holding heatmap_*.csv")
      ->required();

  // mock-segserver
  std::string mock_config, mock_host = "127.0.0.1";
  int mock_port = 8090;
  double mock_flip = 0.0;
  std::uint64_t mock_seed = 0;
  std::int64_t mock_max_requests = 0;
  CLI::App* mock = app.add_subcommand(
      "mock-segserver",
      "Serve the mask-segmentation HTTP protocol from world colors, optionally corrupted");
  mock->add_option("--config", mock_config,
                   "experiment config JSON (for world colors and object names; "
                   "defaults used when omitted)");
  mock->add_option("--host", mock_host, "bind address (default: 127.0.0.1)");
  mock->add_option("--port", mock_port, "port to listen on (default: 8090)");
  mock->add_option("--flip-prob", mock_flip, "per-pixel flip probability (default: 0)");
  mock->add_option("--noise-seed", mock_seed, "seed for the injected noise (default: 0)");
  mock->add_option("--max-requests", mock_max_requests,
                   "stop after serving this many requests (default: serve forever)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    app.exit(e);
    return 2;
  }

  try {
    if (*train) {
      cde::ExperimentConfig cfg = cde::ExperimentConfig::from_file(train_config);
      if (!train_seeds.empty()) {
        cfg.seeds = train_seeds;
        cfg.validate();
      }
      std::printf("training '%s' (%s agent, %s masks, %lld steps, %zu seeds)\n",
                  cfg.name.c_str(), cde::agent_kind_name(cfg.kind),
                  cde::mask_mode_name(cfg.mask.mode), static_cast<long long>(cfg.total_steps),
                  cfg.seeds.size());
      const cde::ExperimentOutcome r = train_parallel
                                           ? run_experiment_parallel(cfg, train_out)
                                           : cde::run_experiment<float>(cfg, train_out);
      print_experiment(r);
      return 0;
    }

    if (*ablate) {
      cde::ExperimentConfig cfg = cde::ExperimentConfig::from_file(ablate_config);
      const cde::AblationOutcome r = cde::run_ablation_matrix<float>(cfg, ablate_out);
      for (const cde::AblationRow& row : r.rows) {
        std::printf("%-10s NE=%d RR=%d PR=%d\n", row.label.c_str(),
                    row.negative_embedding ? 1 : 0, row.reconstruction_reward ? 1 : 0,
                    row.pixel_reward ? 1 : 0);
        print_experiment(row.outcome);
      }
      std::printf("table: %s\n", r.table_path.c_str());
      return 0;
    }

    if (*evalc) {
      cde::ExperimentConfig cfg = cde::ExperimentConfig::from_file(eval_config);
      if (eval_episodes > 0) cfg.eval_episodes = eval_episodes;
      cde::Agent<float> agent(cfg.agent, eval_seed);
      agent.load(eval_ckpt);
      cde::ConceptSource source = cde::make_concept_source(cfg, eval_seed);
      const double s = cde::evaluate(agent, cfg, eval_seed, 0, source);
      std::printf("success rate: %.3f over %d episodes (oracle calls: %lld)\n", s,
                  cfg.eval_episodes, static_cast<long long>(source.calls()));
      return 0;
    }

    if (*heat) {
      for (const char* stage : {"early", "middle", "late"}) {
        const std::string csv = heat_bundle + "/heatmap_" + stage + ".csv";
        const cde::HeatmapRecord r = cde::read_heatmap_csv(csv);
        const std::string pgm = heat_bundle + "/heatmap_" + stage + ".pgm";
        cde::write_heatmap_pgm(pgm, r);
        std::printf("%-6s: %lld positions, entropy %.4f nats -> %s\n", stage,
                    static_cast<long long>(r.total), r.entropy(), pgm.c_str());
      }
      return 0;
    }

    if (*mock) {
      cde::ExperimentConfig cfg;
      if (!mock_config.empty()) cfg = cde::ExperimentConfig::from_file(mock_config);
      else cfg.finalize();
      cde::SegServer server(cde::make_color_table(cfg.concept_spec, cfg.world));
      if (mock_flip > 0.0) server.set_noise(mock_flip, mock_seed);
      std::printf("serving /segment on %s:%d (flip-prob %.3f)\n", mock_host.c_str(), mock_port,
                  mock_flip);
      std::fflush(stdout);
      if (mock_max_requests > 0) {
        std::thread t([&server, &mock_host, mock_port] { server.listen(mock_host, mock_port); });
        server.wait_until_ready();
        while (server.requests_served() < mock_max_requests)
          std::this_thread::sleep_for(std::chrono::milliseconds(20));
        server.stop();
        t.join();
        std::printf("served %lld requests, exiting\n",
                    static_cast<long long>(server.requests_served()));
      } else {
        server.listen(mock_host, mock_port);
      }
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
