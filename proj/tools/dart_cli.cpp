// SPDX-License-Identifier: Apache-2.0
//
// dart: schedule tables, masks, training, sampling, evaluation and the
// schedule verifier. Reports are JSON on stdout or in --out.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "dart/harness.hpp"

using namespace dart;

namespace {

void emit(const nlohmann::json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(out);
  if (!f) {
    throw std::runtime_error("cannot write " + out);
  }
  f << j.dump(2) << "\n";
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw std::runtime_error("cannot read " + path);
  }
  return nlohmann::json::parse(f);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DART: non-Markovian autoregressive diffusion on toy data"};
  app.require_subcommand(1);

  int T = 8;
  std::string base = "cosine", weighting = "snr", out;
  auto* schedule = app.add_subcommand("schedule", "per-level schedule table");
  schedule->add_option("--T", T, "noise levels")->check(CLI::PositiveNumber);
  schedule->add_option("--base", base, "base schedule");
  schedule->add_option("--weighting", weighting, "snr or snr+1");
  schedule->add_option("--out", out, "output file");

  int K = 4;
  std::string variant = "dart";
  auto* masks = app.add_subcommand("masks", "attention mask as rows of 0/1");
  masks->add_option("--T", T, "noise levels")->check(CLI::PositiveNumber);
  masks->add_option("--K", K, "tokens per level")->check(CLI::PositiveNumber);
  masks->add_option("--variant", variant, "dart, dart-ar or dart-fm");

  std::string config, log_path;
  std::int64_t steps = -1;
  auto* train = app.add_subcommand("train", "train from a JSON config");
  train->add_option("--config", config, "training config")->required()->check(CLI::ExistingFile);
  train->add_option("--steps", steps, "override the step count");
  train->add_option("--out", out, "override the output directory");
  train->add_option("--resume", log_path, "checkpoint to continue from");

  std::string ckpt_path, which = "ema", ppm_dir, cfg_schedule = "constant";
  SampleOptions so;
  int markov_steps = 0;
  std::vector<std::int64_t> prompt;
  auto* sample_cmd = app.add_subcommand("sample", "generate from a checkpoint");
  sample_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  sample_cmd->add_option("--params", which, "ema or raw");
  sample_cmd->add_option("--num", so.num, "samples")->check(CLI::NonNegativeNumber);
  sample_cmd->add_option("--seed", so.seed, "noise seed");
  sample_cmd->add_option("--cls", so.cls, "class, -1 for unconditional");
  sample_cmd->add_option("--cfg", so.guidance.scale, "guidance scale");
  sample_cmd->add_option("--cfg-schedule", cfg_schedule, "constant or linear");
  sample_cmd->add_option("--fm-steps", so.fm_steps, "Euler steps of the flow head");
  sample_cmd->add_option("--markov-steps", markov_steps, "ancestral steps of the baseline");
  sample_cmd->add_option("--temperature", so.temperature, "text temperature, 0 is greedy");
  sample_cmd->add_option("--prompt", prompt, "forced text tokens");
  sample_cmd->add_flag("--no-cache", "recompute the prefix at every call");
  sample_cmd->add_option("--ppm", ppm_dir, "also write one PPM per sample into this directory");
  sample_cmd->add_option("--out", out, "output file");

  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "sample a checkpoint and score it");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--metric", eo.metrics, "swd and/or mse")->check(CLI::IsMember({"swd", "mse"}));
  eval->add_option("--num", eo.num, "samples")->check(CLI::NonNegativeNumber);
  eval->add_option("--seed", eo.seed, "seed");
  eval->add_option("--markov-steps", eo.markov_steps, "ancestral steps of the baseline");
  eval->add_option("--fm-steps", eo.sampling.fm_steps, "Euler steps of the flow head");
  eval->add_option("--out", out, "output file");

  std::int64_t N = 200000;
  std::uint64_t seed = 0;
  PerturbSpec perturb;
  auto* verify = app.add_subcommand("verify", "Monte-Carlo and exact checks of a schedule");
  verify->add_option("--T", T, "noise levels")->check(CLI::PositiveNumber);
  verify->add_option("--N", N, "Monte-Carlo samples");
  verify->add_option("--seed", seed, "seed");
  verify->add_option("--base", base, "base schedule");
  verify->add_option("--perturb-level", perturb.level, "level whose gamma is shifted");
  verify->add_option("--perturb-delta", perturb.delta, "shift added to gamma");
  verify->add_option("--out", out, "output file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*schedule) {
      if (base != "cosine") {
        throw ConfigError("unknown schedule base '" + base + "'");
      }
      const auto m = cosine_markov(T);
      emit(schedule_table(m, markov_to_gamma(m, parse_weighting(weighting))), out);
    } else if (*masks) {
      const auto mask = build_mask(T, K, parse_variant(variant));
      for (std::int64_t r = 0; r < mask.rows(); ++r) {
        for (std::int64_t c = 0; c < mask.cols(); ++c) {
          std::cout << (c ? " " : "") << (mask(r, c) ? 1 : 0);
        }
        std::cout << "\n";
      }
    } else if (*train) {
      auto tc = TrainConfig::from_json(read_json(config));
      if (steps >= 0) {
        tc.steps = steps;
      }
      if (!out.empty()) {
        tc.out = out;
      }
      auto trainer = log_path.empty() ? Trainer(tc) : Trainer(tc, load_checkpoint(log_path));
      std::ofstream log;
      if (!tc.out.empty()) {
        std::filesystem::create_directories(tc.out);
        log.open(std::filesystem::path(tc.out) / "loss.jsonl", log_path.empty() ? std::ios::trunc : std::ios::app);
      }
      trainer.run(tc.out.empty() ? &std::cout : &log);
      const Dataset held = make_dataset(tc.data, 1);
      std::cout << nlohmann::json{{"steps", trainer.steps_done()},
                                  {"params", count_parameters(trainer.params())},
                                  {"heldout_loss_ema", trainer.evaluate(trainer.ema(), held, 8, tc.seed)},
                                  {"out", tc.out},
                                  {"config", tc.to_json()}}
                       .dump(2)
                << "\n";
    } else if (*sample_cmd) {
      const Checkpoint ck = load_checkpoint(ckpt_path);
      const auto tc = TrainConfig::from_json(ck.meta.at("train"));
      so.guidance.schedule = parse_cfg_schedule(cfg_schedule);
      so.use_cache = sample_cmd->count("--no-cache") == 0;
      so.prompt = prompt;
      std::vector<GammaSchedule> scheds;
      if (tc.model.variant != Variant::markov) {
        scheds = make_schedules(tc.model, tc.schedule, tc.weighting);
      }
      const auto res = sample(checkpoint_parameters(ck, which), tc.model, scheds, so, markov_steps);
      const auto images = res.images(tc.model, tc.model.num_resolutions() - 1);
      nlohmann::json j = {{"seed", so.seed}, {"num", so.num}, {"calls", res.calls.size()}, {"samples", nlohmann::json::array()}};
      for (std::size_t n = 0; n < images.size(); ++n) {
        nlohmann::json s = {{"shape", images[n].shape}, {"data", images[n].data}};
        if (n < res.text.size()) {
          s["text"] = res.text[n];
          s["truncated"] = static_cast<bool>(res.truncated[n]);
        }
        j["samples"].push_back(std::move(s));
        if (!ppm_dir.empty()) {
          std::filesystem::create_directories(ppm_dir);
          // Undo the dataset normalization before mapping [0, 1] to pixels.
          auto img = images[n];
          const auto mean = ck.meta.at("data_mean").get<std::vector<double>>();
          const auto scale = ck.meta.at("data_scale").get<std::vector<double>>();
          const auto hw = img.shape[1] * img.shape[2];
          for (std::size_t i = 0; i < img.data.size(); ++i) {
            const auto c = static_cast<std::size_t>(static_cast<std::int64_t>(i) / hw);
            img.data[i] = static_cast<float>(img.data[i] * scale[c] + mean[c]);
          }
          write_ppm((std::filesystem::path(ppm_dir) / ("sample_" + std::to_string(n) + ".ppm")).string(), img);
        }
      }
      emit(j, out);
    } else if (*eval) {
      emit(eval_suite(load_checkpoint(ckpt_path), eo), out);
    } else if (*verify) {
      const auto r = verify_prop1(T, base, N, seed, perturb);
      emit(r, out);
      return r.at("pass").get<bool>() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
