#include <cstdio>
#include <unistd.h>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "dalir/bench.hpp"
#include "dalir/checkpoint.hpp"
#include "dalir/report.hpp"
#include "dalir/rng.hpp"
#include "json.hpp"

using namespace dalir;
using nlohmann::json;
namespace fsys = std::filesystem;

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return buf;
}

json spec_to_json(const TaskSpec& s) {
  return json{{"task", task_name(s.task)},
              {"action_dim", s.action_dim},
              {"state_dim", s.state_dim},
              {"num_points", s.num_points},
              {"max_steps", s.max_steps},
              {"goal_radius", s.goal_radius},
              {"workspace_lo", {s.lo[0], s.lo[1], s.lo[2]}},
              {"workspace_hi", {s.hi[0], s.hi[1], s.hi[2]}},
              {"reward_floor", s.reward_floor}};
}

std::vector<Task> resolve_tasks(const RunConfig& cfg, bool every_task) {
  if (every_task) return all_tasks();
  return {cfg.task_enum()};
}

void write_summary_json(const std::string& path, const RunConfig& cfg,
                        const std::vector<CellResult>& cells) {
  json j;
  j["config"] = json::parse(cfg.to_json_text());
  j["config_hash"] = hex64(cfg.config_hash());
  j["cells"] = json::array();
  for (const auto& c : cells) {
    j["cells"].push_back({{"task", task_name(c.task)},
                          {"method", rerank_method_name(c.method)},
                          {"n_cand", c.n_cand},
                          {"seed_idx", c.seed_idx},
                          {"episodes", c.episodes},
                          {"successes", c.successes},
                          {"success_rate", c.success_rate}});
  }
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

int run_selftest() {
  int failures = 0;
  auto check = [&](const char* name, bool ok) {
    std::printf("%s  %s\n", ok ? "ok  " : "FAIL", name);
    if (!ok) failures++;
  };

  RunConfig cfg;
  cfg.seed = 7;
  cfg.task = "reach";
  cfg.data.n_expert = 2;
  cfg.data.n_mixed = 6;
  cfg.data.n_holdout = 3;
  cfg.policy.train_steps = 40;
  cfg.policy.batch = 8;
  cfg.imagination.train_steps = 40;
  cfg.imagination.batch = 8;
  cfg.bench.episodes = 2;
  cfg.bench.n_seeds = 1;
  cfg.rerank.n_cand = 4;
  fsys::path tmp = fsys::temp_directory_path() / ("dalir_selftest_" + hex64(Rng::substream(
                                                      uint64_t(::getpid()), "selftest")
                                                      .next_u64()));
  cfg.out_dir = tmp.string();

  try {
    try {
      RunConfig::from_json_text("{\"no_such_key\": 1}");
      check("config rejects unknown keys", false);
    } catch (const ConfigError&) {
      check("config rejects unknown keys", true);
    }

    Env env(Task::reach);
    EnvState a = env.reset(11), b = env.reset(11);
    check("env reset deterministic", env.observe(a).points == env.observe(b).points);

    EnvState s = env.reset(3);
    std::vector<float> act(size_t(env.spec().action_dim));
    for (int t = 0; t < env.spec().max_steps && !s.done; ++t) {
      env.expert_action(s, act);
      env.step(s, act);
    }
    check("scripted expert solves reach", s.success);

    Dataset expert1, expert2;
    prepare_task_datasets(cfg, Task::reach, nullptr, &expert1, nullptr, nullptr);
    fsys::remove_all(tmp);
    prepare_task_datasets(cfg, Task::reach, nullptr, &expert2, nullptr, nullptr);
    check("dataset generation deterministic", expert1.content_hash() == expert2.content_hash());

    TaskArtifacts art = prepare_task_artifacts(cfg, Task::reach, nullptr);
    check("policy checkpoint written", fsys::exists(art.policy_path));

    Observation obs = env.observe(env.reset(5));
    Tensor cloud = Tensor::from({env.spec().num_points, 3}, obs.points);
    Tensor state = Tensor::from({1, env.spec().state_dim}, obs.state);
    NoGrad ng;
    Tensor pf = art.policy->frame_features(cloud, state);
    Tensor mf = art.imag->encode(cloud, state);
    bool close = pf.numel() == mf.numel();
    check("imagination latent matches encoder width", close);

    RerankConfig rc = cfg.rerank;
    rc.method = RerankMethod::latent;
    EnvState es = env.reset(9);
    Observation o = env.observe(es);
    ChunkChoice choice = select_chunk(*art.policy, art.imag.get(), rc, o, o, 123);
    bool in_range = true;
    for (float v : choice.chunk) in_range = in_range && v >= -1.0f && v <= 1.0f;
    check("latent rerank returns a clipped chunk", in_range &&
                                                       int(choice.info.scores.size()) == rc.n_cand);

    RerankConfig oc = cfg.rerank;
    oc.method = RerankMethod::oracle;
    oc.n_cand = 4;
    CellResult cell = eval_cell(env, *art.policy, art.imag.get(), oc, 2, cfg.seed, 0);
    check("oracle evaluation runs", cell.episodes == 2);

    ParamMap before = load_checkpoint(art.policy_path);
    art.policy->save(art.policy_path);
    check("checkpoint save is stable", hash_file(art.policy_path) == art.policy_file_hash &&
                                           before.items.size() > 0);
  } catch (const std::exception& e) {
    std::printf("FAIL  unexpected error: %s\n", e.what());
    failures++;
  }
  std::error_code ec;
  fsys::remove_all(tmp, ec);
  std::printf("%s\n", failures == 0 ? "selftest passed" : "selftest FAILED");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"data-asymmetric imitation learning pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  bool paper_scale = false;
  uint64_t seed_flag = 0;
  std::string out_flag, task_flag;
  app.add_option("--config", config_path, "JSON config file");
  app.add_flag("--paper-scale", paper_scale, "use reference-scale model sizes");
  auto* seed_opt = app.add_option("--seed", seed_flag, "global seed");
  auto* out_opt = app.add_option("--out", out_flag, "output directory");
  auto* task_opt = app.add_option("--task", task_flag, "task name");

  auto* sc_spec = app.add_subcommand("env-spec", "print task specifications");
  auto* sc_gen = app.add_subcommand("gen-data", "generate expert/mixed/holdout datasets");
  int experts_flag = -1, mixed_flag = -1, holdout_flag = -1;
  sc_gen->add_option("--experts", experts_flag, "expert demo count");
  sc_gen->add_option("--mixed", mixed_flag, "mixed trajectory count");
  sc_gen->add_option("--holdout", holdout_flag, "holdout trajectory count");

  auto* sc_pol = app.add_subcommand("train-policy", "train the generative policy");
  auto* sc_imag = app.add_subcommand("train-imagination", "train world model and scorer");

  auto* sc_eval = app.add_subcommand("eval", "evaluate success rates");
  std::vector<std::string> method_names = {"none", "latent"};
  bool eval_all_tasks = false;
  int n_cand_flag = -1, episodes_flag = -1;
  sc_eval->add_option("--methods", method_names, "reranking methods")->delimiter(',');
  sc_eval->add_flag("--all-tasks", eval_all_tasks, "evaluate every task");
  sc_eval->add_option("--n-cand", n_cand_flag, "candidate count");
  sc_eval->add_option("--episodes", episodes_flag, "episodes per cell");

  auto* sc_abl = app.add_subcommand("ablate", "run an ablation study");
  std::string which = "all";
  bool abl_all_tasks = true;
  sc_abl->add_option("--which", which,
                     "data-scale | action-cond | supervision | variation | candidates | "
                     "diagnostics | all");

  auto* sc_lat = app.add_subcommand("bench-latency", "per-decision latency sweep");
  auto* sc_rep = app.add_subcommand("report", "render markdown + SVG report from CSVs");
  std::string results_dir, report_out;
  sc_rep->add_option("--results", results_dir, "directory with CSV results");
  sc_rep->add_option("--report-out", report_out, "report output directory");
  auto* sc_self = app.add_subcommand("selftest", "fast end-to-end smoke test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
    if (paper_scale) cfg.apply_paper_scale();
    if (seed_opt->count()) cfg.seed = seed_flag;
    if (out_opt->count()) cfg.out_dir = out_flag;
    if (task_opt->count()) {
      task_from_name(task_flag);
      cfg.task = task_flag;
    }

    if (*sc_self) return run_selftest();

    if (*sc_spec) {
      json j = json::array();
      for (Task t : all_tasks()) j.push_back(spec_to_json(task_spec(t)));
      std::cout << j.dump(2) << "\n";
      return 0;
    }

    if (*sc_gen) {
      if (experts_flag >= 0) cfg.data.n_expert = experts_flag;
      if (mixed_flag >= 0) cfg.data.n_mixed = mixed_flag;
      if (holdout_flag >= 0) cfg.data.n_holdout = holdout_flag;
      Dataset expert, mixed, holdout;
      prepare_task_datasets(cfg, cfg.task_enum(), &std::cout, &expert, &mixed, &holdout);
      std::cout << "expert_hash " << hex64(expert.content_hash()) << "\n"
                << "mixed_hash " << hex64(mixed.content_hash()) << "\n"
                << "holdout_hash " << hex64(holdout.content_hash()) << "\n";
      return 0;
    }

    if (*sc_pol) {
      TaskArtifacts art = prepare_task_artifacts(cfg, cfg.task_enum(), &std::cout, false);
      std::cout << "policy_hash " << hex64(art.policy_file_hash) << "\n";
      return 0;
    }

    if (*sc_imag) {
      TaskArtifacts art = prepare_task_artifacts(cfg, cfg.task_enum(), &std::cout);
      std::cout << "imagination_hash " << hex64(art.imag_file_hash) << "\n";
      return 0;
    }

    if (*sc_eval) {
      if (n_cand_flag > 0) cfg.rerank.n_cand = n_cand_flag;
      if (episodes_flag > 0) cfg.bench.episodes = episodes_flag;
      std::vector<RerankMethod> methods;
      for (const auto& m : method_names) {
        try {
          methods.push_back(rerank_method_from_name(m));
        } catch (const std::exception& e) {
          throw ConfigError(e.what());
        }
      }
      std::vector<CellResult> cells;
      for (Task t : resolve_tasks(cfg, eval_all_tasks)) {
        TaskArtifacts art = prepare_task_artifacts(cfg, t, &std::cout);
        Env env(t);
        for (RerankMethod m : methods) {
          RerankConfig rc = cfg.rerank;
          rc.method = m;
          if (m == RerankMethod::none) rc.n_cand = 1;
          for (int si = 0; si < cfg.bench.n_seeds; ++si) {
            CellResult c = eval_cell(env, *art.policy, art.imag.get(), rc, cfg.bench.episodes,
                                     cfg.seed, si);
            c.policy_hash = art.policy_file_hash;
            c.imag_hash = art.imag_file_hash;
            c.config_hash = cfg.config_hash();
            cells.push_back(c);
            std::cout << task_name(t) << " " << rerank_method_name(m) << " seed " << si << ": "
                      << c.successes << "/" << c.episodes << "\n";
          }
        }
      }
      std::string rdir = cfg.out_dir + "/results";
      fsys::create_directories(rdir);
      write_metrics_csv(rdir + "/metrics.csv", cells);
      write_summary_json(rdir + "/summary.json", cfg, cells);
      std::cout << "metrics_hash " << hex64(file_content_hash(rdir + "/metrics.csv")) << "\n";
      return 0;
    }

    if (*sc_abl) {
      std::string rdir = cfg.out_dir + "/results";
      fsys::create_directories(rdir);
      std::vector<Task> tasks = resolve_tasks(cfg, abl_all_tasks);
      std::vector<TaskArtifacts> arts;
      for (Task t : tasks) arts.push_back(prepare_task_artifacts(cfg, t, &std::cout));
      std::vector<const TaskArtifacts*> art_ptrs;
      for (auto& a : arts) art_ptrs.push_back(&a);
      const TaskArtifacts* push_art = &arts[0];
      for (auto& a : arts)
        if (a.task == Task::push_box) push_art = &a;

      bool failed = false;
      auto verdict = [&](const char* name, bool ok, bool asserted) {
        std::printf("%s  %s%s\n", ok ? "ok  " : "FAIL", name, asserted ? "" : " (soft)");
        if (!ok && asserted) failed = true;
      };

      if (which == "data-scale" || which == "all") {
        DataScaleResult r = ablate_mixed_data(cfg, *push_art, &std::cout);
        write_data_scale_csv(rdir + "/data_scale.csv", r);
        verdict("held-out latent MSE decreases with mixed data", r.trend_ok, true);
      }
      if (which == "action-cond" || which == "all") {
        ActionCondResult r = ablate_action_conditioning(cfg, art_ptrs, &std::cout);
        write_action_cond_csv(rdir + "/action_cond.csv", r);
        verdict("action conditioning lowers latent MSE (ratio <= 0.8)", r.trend_ok, true);
      }
      if (which == "supervision" || which == "all") {
        SupervisionResult r = ablate_supervision(cfg, art_ptrs, &std::cout);
        write_supervision_csv(rdir + "/supervision.csv", r);
        verdict("sparse scorer beats no-scorer by 2 points", r.sparse_ok, true);
        verdict("dense scorer within 2 points of sparse", r.dense_ok, false);
      }
      if (which == "variation" || which == "all") {
        VariationResult r = ablate_variation_target(cfg, art_ptrs, &std::cout);
        write_metrics_csv(rdir + "/variation.csv", r.cells);
        verdict("latent >= obs-noise >= base ordering", r.ordering_ok, true);
      }
      if (which == "candidates" || which == "all") {
        CandScaleResult r = ablate_candidate_scaling(cfg, *push_art, &std::cout);
        write_cand_scale_csv(rdir + "/cand_scale.csv", r);
        verdict("success at N=4 is no worse than N=1", r.n4_ge_n1, true);
      }
      if (which == "diagnostics" || which == "all") {
        double auc_sum = 0, r_sum = 0;
        for (const auto* a : art_ptrs) {
          ScorerDiag d = scorer_diagnostics(*a->imag, a->holdout, cfg.imagination.gamma);
          std::printf("  %s auc %.3f pearson %.3f fail-score %.3f\n", task_name(a->task).c_str(), d.auc,
                      d.mean_pearson, d.mean_fail_score);
          auc_sum += d.auc;
          r_sum += d.mean_pearson;
        }
        write_score_traj_csv(rdir + "/score_traj.csv", *art_ptrs[0]->imag, art_ptrs[0]->holdout,
                             cfg.imagination.gamma, 4);
        verdict("terminal-score AUC >= 0.85", auc_sum / double(art_ptrs.size()) >= 0.85, true);
        verdict("mean score/target correlation >= 0.7",
                r_sum / double(art_ptrs.size()) >= 0.7, true);
      }
      return failed ? 1 : 0;
    }

    if (*sc_lat) {
      TaskArtifacts art = prepare_task_artifacts(cfg, cfg.task_enum(), &std::cout);
      std::vector<LatencyRow> rows = bench_latency(cfg, art, &std::cout);
      std::string rdir = cfg.out_dir + "/results";
      fsys::create_directories(rdir);
      write_latency_csv(rdir + "/latency.csv", rows);
      auto find_row = [&](const std::string& bk, const std::string& m, int n) -> const LatencyRow& {
        for (const auto& r : rows)
          if (r.backbone == bk && r.method == m && r.n_cand == n) return r;
        throw std::runtime_error("missing latency row");
      };
      double l1 = find_row("fm", "latent", 1).mean_ms;
      double l32 = find_row("fm", "latent", 32).mean_ms;
      double base = find_row("fm", "none", 1).mean_ms;
      bool ratio_ok = l32 / l1 < 3.0;
      bool overhead_ok = (l32 - base) / base < 1.0;
      bool fm_faster = true;
      for (int n : {1, 4, 8, 16, 32})
        fm_faster = fm_faster &&
                    find_row("fm", "latent", n).mean_ms < find_row("dp", "latent", n).mean_ms;
      std::printf("latency(32)/latency(1) = %.2f\n", l32 / l1);
      std::printf("rerank overhead vs base = %.2fx\n", (l32 - base) / base);
      std::printf("fm faster than dp at every N: %s\n", fm_faster ? "yes" : "no");
      return (ratio_ok && overhead_ok && fm_faster) ? 0 : 1;
    }

    if (*sc_rep) {
      if (results_dir.empty()) results_dir = cfg.out_dir + "/results";
      if (report_out.empty()) report_out = cfg.out_dir + "/report";
      emit_report(results_dir, report_out);
      std::cout << "report written to " << report_out << "/report.md\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
