// Command-line driver: train, sample, flops, gradcheck, make-synth.
// Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric failure,
// 5 assertion/tolerance failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "udit/analysis.hpp"
#include "udit/gradcheck_registry.hpp"
#include "udit/io.hpp"
#include "udit/run_config.hpp"
#include "udit/train.hpp"

namespace {

using namespace udit;

struct LatentDims {
  std::int64_t h = 0, w = 0, c = 0;
};

LatentDims parse_latent(const std::string& s) {
  long long h = 0, w = 0, c = 0;
  char extra = 0;
  if (std::sscanf(s.c_str(), "%lldx%lldx%lld%c", &h, &w, &c, &extra) != 3 || h < 1 || w < 1 ||
      c < 1)
    throw ConfigError("latent spec must be HxWxC with positive extents, got \"" + s + "\"");
  return {h, w, c};
}

std::string in_dir(const std::string& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  return (std::filesystem::path(dir) / name).string();
}

void cmd_train(const std::string& config_path, const std::string& resume,
               const std::string& out_dir, bool force) {
  const auto rc = load_run_config(config_path);
  const auto ns = NoiseSchedule::linear(rc.diffusion.timesteps, rc.diffusion.beta_start,
                                        rc.diffusion.beta_end);
  TrainHp hp;
  hp.lr = rc.train.lr;
  hp.weight_decay = rc.train.weight_decay;
  hp.ema = rc.train.ema;
  hp.ema_decay = rc.train.ema_decay;
  auto st = init_train_state<float>(rc.model, ns, hp, rc.train.seed);

  if (!resume.empty()) {
    const auto ck = load_checkpoint(resume);
    if (ck.find("diffusion.fields")) {
      const auto stored = unpack_schedule(ck, rc.diffusion.timesteps);
      if (static_cast<float>(stored.betas.front()) !=
              static_cast<float>(ns.betas.front()) ||
          static_cast<float>(stored.betas.back()) != static_cast<float>(ns.betas.back()))
        throw ConfigError("resume: checkpoint was trained under a different beta schedule");
    }
    restore_train_state(ck, st, force);
    std::printf("resumed=%s step=%lld\n", resume.c_str(), static_cast<long long>(st.step));
  }

  const auto& mc = rc.model;
  const LatentDataset ds =
      rc.data.kind == "synthetic"
          ? make_mixture_dataset(rc.data.synth_n, rc.data.classes, mc.latent_channels,
                                 mc.latent_h, mc.latent_w, rc.data.spread, rc.data.seed)
          : load_dataset(rc.data.path);

  TrainRunOptions opt;
  opt.steps = rc.train.steps;
  opt.batch = rc.train.batch;
  opt.log_every = rc.train.log_every;
  opt.checkpoint_every = rc.train.checkpoint_every;
  opt.checkpoint_path = in_dir(out_dir, "last.udck");
  opt.data_seed = rc.train.seed;
  opt.log = [](const std::string& line) { std::puts(line.c_str()); };
  const auto res = run_training(st, ds, opt);
  std::printf("done steps=%lld checkpoints=%lld checkpoint=%s dropped_labels=%lld\n",
              static_cast<long long>(st.step), static_cast<long long>(res.checkpoints_written),
              opt.checkpoint_path.c_str(), static_cast<long long>(st.dropped_labels));
}

void cmd_sample(const std::string& ckpt_path, std::int64_t n, std::int64_t cls, double cfg_scale,
                std::int64_t steps, const std::string& out_dir, std::uint64_t seed, bool ppm,
                bool force) {
  const auto ck = load_checkpoint(ckpt_path);
  const auto cfg = unpack_config(ck);
  if (cls < 0 || cls >= cfg.num_classes)
    throw ConfigError("class " + std::to_string(cls) + " outside [0, " +
                      std::to_string(cfg.num_classes) + ")");
  if (cfg_scale != 1.0 && !cfg.cfg)
    throw ConfigError("checkpoint was trained without a null label; guidance unavailable");
  auto m = build_model<float>(cfg, 0);
  restore_model(ck, m, force);
  const auto ns = unpack_schedule(ck, cfg.timesteps);

  const std::vector<std::int64_t> y(static_cast<std::size_t>(n), cls);
  const auto x = sample(m, ns, n, y, cfg_scale, steps, seed);
  for (const float v : x.data())
    if (!std::isfinite(v)) throw NumericError("sampled latents are not finite");

  LatentDataset out;
  out.channels = static_cast<std::uint32_t>(cfg.latent_channels);
  out.height = static_cast<std::uint32_t>(cfg.latent_h);
  out.width = static_cast<std::uint32_t>(cfg.latent_w);
  out.num_classes = static_cast<std::uint32_t>(cfg.num_classes);
  out.labels.assign(static_cast<std::size_t>(n), static_cast<std::uint32_t>(cls));
  out.latents = x.data();
  const auto latents_path = in_dir(out_dir, "samples.udlt");
  save_dataset(latents_path, out);
  if (ppm)
    for (std::int64_t i = 0; i < n; ++i)
      save_ppm(in_dir(out_dir, "sample_" + std::to_string(i) + ".ppm"), out.sample(i),
               cfg.latent_channels, cfg.latent_h, cfg.latent_w);
  std::printf("wrote=%s n=%lld class=%lld cfg=%.3f steps=%lld forward_calls=%lld\n",
              latents_path.c_str(), static_cast<long long>(n), static_cast<long long>(cls),
              cfg_scale, static_cast<long long>(steps),
              static_cast<long long>(m.forward_calls));
}

void check_within(const char* what, double got, double want, double tol_frac) {
  const double rel = std::fabs(got - want) / want;
  std::printf("check %s got=%.4g want=%.4g rel_err=%.3f tol=%.2f %s\n", what, got, want, rel,
              tol_frac, rel <= tol_frac ? "pass" : "FAIL");
  if (rel > tol_frac)
    throw ToleranceError(std::string(what) + " off by " + std::to_string(rel * 100) + "%");
}

void cmd_flops(const std::string& arch, const std::string& latent, bool check) {
  const bool custom_latent = !latent.empty();
  LatentDims dims;
  if (custom_latent) dims = parse_latent(latent);

  CostReport report;
  if (arch == "dit-s2") {
    auto cfg = dit_s2_config();
    if (custom_latent) {
      cfg.latent_h = dims.h;
      cfg.latent_w = dims.w;
      cfg.latent_channels = dims.c;
    }
    cfg.validate();
    report = count(cfg, arch);
  } else if (arch == "udit-s" || arch == "udit-b" || arch == "udit-l" || arch == "udit-t") {
    UDiTConfig cfg = arch == "udit-s"   ? udit_s_config()
                     : arch == "udit-b" ? udit_b_config()
                     : arch == "udit-l" ? udit_l_config()
                                        : udit_t_config();
    if (custom_latent) {
      cfg.latent_h = dims.h;
      cfg.latent_w = dims.w;
      cfg.latent_channels = dims.c;
    }
    cfg.validate();
    report = count(cfg, arch);
  } else {
    throw ConfigError("unknown arch \"" + arch +
                      "\"; known: udit-s udit-b udit-l udit-t dit-s2");
  }
  std::fputs(report_kv(report).c_str(), stdout);

  if (!check) return;
  if (custom_latent)
    throw ConfigError("reference values are defined at the default latent; drop --latent");
  if (arch == "udit-s") {
    check_within("params", static_cast<double>(report.params()), 52.05e6, 0.05);
    check_within("flops", static_cast<double>(report.flops()), 6.04e9, 0.10);
  } else if (arch == "udit-b") {
    check_within("params", static_cast<double>(report.params()), 204.43e6, 0.05);
    check_within("flops", static_cast<double>(report.flops()), 22.22e9, 0.10);
  } else if (arch == "udit-l") {
    check_within("params", static_cast<double>(report.params()), 810.19e6, 0.05);
    check_within("flops", static_cast<double>(report.flops()), 85.00e9, 0.10);
  } else if (arch == "dit-s2") {
    check_within("madds", static_cast<double>(report.madds()), 6.06e9, 0.10);
  } else {
    throw ConfigError("no published reference for " + arch);
  }
}

void cmd_gradcheck(const std::string& module) {
  if (module != "all" && module != "tensor" && module != "attention" && module != "blocks" &&
      module != "model")
    throw ConfigError("unknown module \"" + module +
                      "\"; known: all tensor attention blocks model");
  const auto reg = gradcheck_registry();
  std::int64_t ran = 0, failed = 0;
  double worst = 0.0;
  for (const auto& c : reg) {
    if (module != "all" && c.module != module) continue;
    const auto rep = c.run();
    const bool ok = rep.worst_rel_err < 1e-6;
    std::printf("op=%s.%s worst_rel_err=%.3e coords=%lld status=%s\n", c.module.c_str(),
                c.name.c_str(), rep.worst_rel_err, static_cast<long long>(rep.coords_checked),
                ok ? "pass" : "FAIL");
    ++ran;
    failed += ok ? 0 : 1;
    worst = std::max(worst, rep.worst_rel_err);
  }
  std::printf("checked=%lld registry=%zu failed=%lld worst=%.3e\n", static_cast<long long>(ran),
              reg.size(), static_cast<long long>(failed), worst);
  if (failed > 0)
    throw ToleranceError(std::to_string(failed) + " op(s) above the 1e-6 gradient tolerance");
}

void cmd_make_synth(const std::string& out, std::int64_t n, const std::string& mixture,
                    const std::string& latent, std::uint64_t seed) {
  long long classes = 0;
  double spread = 0.0;
  char extra = 0;
  if (std::sscanf(mixture.c_str(), "%lld:%lf%c", &classes, &spread, &extra) != 2 || classes < 1 ||
      spread < 0.0)
    throw ConfigError("mixture spec must be CLASSES:SPREAD, got \"" + mixture + "\"");
  const auto dims = parse_latent(latent);
  const auto ds = make_mixture_dataset(n, classes, dims.c, dims.h, dims.w, spread, seed);
  save_dataset(out, ds);
  std::printf("wrote=%s n=%lld classes=%lld latent=%lldx%lldx%lld spread=%g bytes=%lld\n",
              out.c_str(), static_cast<long long>(n), static_cast<long long>(classes),
              static_cast<long long>(dims.h), static_cast<long long>(dims.w),
              static_cast<long long>(dims.c), spread,
              static_cast<long long>(32 + ds.count() * (4 + 4 * ds.sample_numel())));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"U-DiT denoiser: training, sampling and cost accounting"};
  app.require_subcommand(1);

  std::string config_path, resume, out_dir = ".", ckpt_path, arch, latent_spec;
  std::string module = "all", synth_out, mixture = "2:1.0", synth_latent = "8x8x4";
  std::int64_t n = 4, cls = 0, steps = 50;
  double cfg_scale = 1.0;
  std::uint64_t seed = 0;
  bool force = false, check = false, ppm = false;

  auto* train = app.add_subcommand("train", "Run the training loop from a config file");
  train->add_option("--config", config_path, "Run-config JSON path")->required();
  train->add_option("--resume", resume, "Checkpoint to continue from");
  train->add_option("--out", out_dir, "Output directory (default .)");
  train->add_flag("--force", force, "Ignore a config digest mismatch on resume");
  train->callback([&] { cmd_train(config_path, resume, out_dir, force); });

  auto* smp = app.add_subcommand("sample", "Draw samples from a checkpoint");
  smp->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  smp->add_option("--n", n, "Number of samples (default 4)");
  smp->add_option("--class", cls, "Class label (default 0)");
  smp->add_option("--cfg", cfg_scale, "Guidance scale (default 1.0)");
  smp->add_option("--steps", steps, "Denoising steps (default 50)");
  smp->add_option("--out", out_dir, "Output directory (default .)");
  smp->add_option("--seed", seed, "Sampling seed (default 0)");
  smp->add_flag("--ppm", ppm, "Also write one PPM image per sample");
  smp->add_flag("--force", force, "Ignore a config digest mismatch");
  smp->callback(
      [&] { cmd_sample(ckpt_path, n, cls, cfg_scale, steps, out_dir, seed, ppm, force); });

  auto* fl = app.add_subcommand("flops", "Print the analytical cost report for an architecture");
  fl->add_option("--arch", arch, "udit-s | udit-b | udit-l | udit-t | dit-s2")->required();
  fl->add_option("--latent", latent_spec, "Override latent as HxWxC");
  fl->add_flag("--check", check, "Assert the published totals and exit nonzero on violation");
  fl->callback([&] { cmd_flops(arch, latent_spec, check); });

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks for every op");
  gc->add_option("--module", module, "all | tensor | attention | blocks | model");
  gc->callback([&] { cmd_gradcheck(module); });

  auto* ms = app.add_subcommand("make-synth", "Write a Gaussian-mixture latent dataset");
  ms->add_option("--out", synth_out, "Destination path")->required();
  ms->add_option("--n", n, "Sample count (default 4)");
  ms->add_option("--mixture", mixture, "CLASSES:SPREAD (default 2:1.0)");
  ms->add_option("--latent", synth_latent, "Latent extents HxWxC (default 8x8x4)");
  ms->add_option("--seed", seed, "Generator seed (default 0)");
  ms->callback([&] { cmd_make_synth(synth_out, n, mixture, synth_latent, seed); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const ToleranceError& e) {
    std::fprintf(stderr, "tolerance error: %s\n", e.what());
    return 5;
  }
  return 0;
}
