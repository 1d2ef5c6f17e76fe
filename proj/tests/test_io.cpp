#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "udit/diffusion.hpp"
#include "udit/io.hpp"
#include "udit/model.hpp"

using namespace udit;

namespace {

std::string tmp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "udit_io_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spew(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

UDiTConfig toy_config() {
  auto cfg = udit_t_config();
  cfg.latent_h = 8;
  cfg.latent_w = 8;
  return cfg;
}

}  // namespace

TEST_CASE("dataset round trip preserves every field and byte") {
  auto ds = make_mixture_dataset(12, 3, 4, 2, 2, 1.5, 99);
  const auto path = tmp_path("roundtrip.udlt");
  save_dataset(path, ds);

  const auto bytes = slurp(path);
  const std::size_t expect = 32 + 12 * (4 + 4 * 4 * 2 * 2);
  CHECK(bytes.size() == expect);

  const auto back = load_dataset(path);
  CHECK(back.channels == ds.channels);
  CHECK(back.height == ds.height);
  CHECK(back.width == ds.width);
  CHECK(back.num_classes == ds.num_classes);
  CHECK(back.labels == ds.labels);
  REQUIRE(back.latents.size() == ds.latents.size());
  for (std::size_t i = 0; i < ds.latents.size(); ++i) CHECK(back.latents[i] == ds.latents[i]);
}

TEST_CASE("mixture synthesis is seeded and labels cycle") {
  const auto a = make_mixture_dataset(8, 2, 1, 2, 2, 1.0, 7);
  const auto b = make_mixture_dataset(8, 2, 1, 2, 2, 1.0, 7);
  const auto c = make_mixture_dataset(8, 2, 1, 2, 2, 1.0, 8);
  CHECK(a.latents == b.latents);
  CHECK(a.latents != c.latents);
  for (std::int64_t i = 0; i < a.count(); ++i)
    CHECK(a.labels[static_cast<std::size_t>(i)] == static_cast<std::uint32_t>(i % 2));
}

TEST_CASE("mixture class means are evenly spaced and empirically recovered") {
  CHECK(mixture_class_mean(0, 1, 2.0) == 0.0);
  CHECK(mixture_class_mean(0, 2, 1.0) == -1.0);
  CHECK(mixture_class_mean(1, 2, 1.0) == 1.0);
  CHECK(mixture_class_mean(1, 3, 2.0) == 0.0);

  const auto ds = make_mixture_dataset(2000, 2, 4, 2, 2, 1.0, 123);
  double sum[2] = {0, 0};
  std::int64_t cnt[2] = {0, 0};
  for (std::int64_t i = 0; i < ds.count(); ++i) {
    const auto s = ds.sample(i);
    for (const float v : s) sum[ds.labels[static_cast<std::size_t>(i)]] += v;
    cnt[ds.labels[static_cast<std::size_t>(i)]] += s.size();
  }
  // 16k unit-variance draws per class: standard error about 0.008
  CHECK(std::abs(sum[0] / cnt[0] - (-1.0)) < 0.05);
  CHECK(std::abs(sum[1] / cnt[1] - 1.0) < 0.05);
}

TEST_CASE("dataset loader rejects damaged files") {
  const auto ds = make_mixture_dataset(4, 2, 2, 2, 2, 1.0, 5);
  const auto path = tmp_path("damage.udlt");
  save_dataset(path, ds);
  const auto good = slurp(path);

  SUBCASE("bad magic") {
    auto bad = good;
    bad[0] ^= 0xFF;
    spew(path, bad);
    CHECK_THROWS_AS(load_dataset(path), IoError);
  }
  SUBCASE("truncated") {
    auto bad = good;
    bad.resize(bad.size() - 10);
    spew(path, bad);
    CHECK_THROWS_AS(load_dataset(path), IoError);
  }
  SUBCASE("trailing garbage") {
    auto bad = good;
    bad.push_back(0);
    spew(path, bad);
    CHECK_THROWS_AS(load_dataset(path), IoError);
  }
  SUBCASE("label out of range") {
    auto bad = good;
    bad[32] = 0xFF;  // first record's label word
    spew(path, bad);
    CHECK_THROWS_AS(load_dataset(path), IoError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_dataset(tmp_path("nope.udlt")), IoError); }
}

TEST_CASE("writes into a nonexistent directory fail cleanly") {
  const auto ds = make_mixture_dataset(1, 1, 1, 1, 1, 0.0, 1);
  CHECK_THROWS_AS(save_dataset("no_such_dir_xyz/a.udlt", ds), IoError);
  Checkpoint ck;
  CHECK_THROWS_AS(save_checkpoint("no_such_dir_xyz/a.udck", ck), IoError);
}

TEST_CASE("checkpoint serialization is deterministic byte for byte") {
  const auto cfg = toy_config();
  auto m = build_model<float>(cfg, 42);
  const auto ck = pack_model(m, 17);

  const auto p1 = tmp_path("det1.udck");
  const auto p2 = tmp_path("det2.udck");
  save_checkpoint(p1, ck);
  const auto loaded = load_checkpoint(p1);
  CHECK(loaded.version == ck.version);
  CHECK(loaded.digest == cfg.digest());
  CHECK(loaded.step == 17);
  REQUIRE(loaded.entries.size() == ck.entries.size());
  for (std::size_t i = 0; i < ck.entries.size(); ++i) {
    CHECK(loaded.entries[i].first == ck.entries[i].first);
    CHECK(loaded.entries[i].second.shape() == ck.entries[i].second.shape());
  }
  save_checkpoint(p2, loaded);
  CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("restored model reproduces the original forward pass bit for bit") {
  const auto cfg = toy_config();
  auto m1 = build_model<float>(cfg, 42);
  const auto path = tmp_path("weights.udck");
  save_checkpoint(path, pack_model(m1, 0));

  auto m2 = build_model<float>(cfg, 777);  // different init, same shapes
  restore_model(load_checkpoint(path), m2);

  auto x = Tensor<float>::zeros({2, cfg.latent_channels, cfg.latent_h, cfg.latent_w});
  Rng rng(3);
  rng.fill_normal(std::span<float>(x.data_mut()));
  const auto y1 = forward(m1, x, {3, 8}, {0, 1});
  const auto y2 = forward(m2, x, {3, 8}, {0, 1});
  REQUIRE(y1.numel() == y2.numel());
  for (std::int64_t i = 0; i < y1.numel(); ++i)
    CHECK(y1.data()[static_cast<std::size_t>(i)] == y2.data()[static_cast<std::size_t>(i)]);
}

TEST_CASE("restore refuses a mismatched config digest unless forced") {
  const auto cfg = toy_config();
  auto m = build_model<float>(cfg, 1);
  const auto ck = pack_model(m, 5);

  auto other = cfg;
  other.cfg_dropout_prob = 0.25;  // same parameter shapes, different fingerprint
  auto m2 = build_model<float>(other, 2);
  CHECK_THROWS_AS(restore_model(ck, m2), ConfigError);
  CHECK_NOTHROW(restore_model(ck, m2, true));
  CHECK(m2.w_in.data() == m.w_in.data());
}

TEST_CASE("restore rejects missing entries and shape mismatches") {
  const auto cfg = toy_config();
  auto m = build_model<float>(cfg, 1);
  auto ck = pack_model(m, 0);

  SUBCASE("dropped entry") {
    ck.entries.erase(ck.entries.begin() + 3);
    auto m2 = build_model<float>(cfg, 2);
    CHECK_THROWS_AS(restore_model(ck, m2), IoError);
  }
  SUBCASE("reshaped entry") {
    ck.entries[1].second = Tensor<float>::zeros({1, 2, 3});  // first weight slot
    auto m2 = build_model<float>(cfg, 2);
    CHECK_THROWS_AS(restore_model(ck, m2), IoError);
  }
}

TEST_CASE("checkpoint loader rejects payload corruption and truncation") {
  const auto cfg = toy_config();
  auto m = build_model<float>(cfg, 9);
  const auto path = tmp_path("corrupt.udck");
  save_checkpoint(path, pack_model(m, 1));
  const auto good = slurp(path);

  SUBCASE("crc catches a payload flip") {
    auto bad = good;
    bad[bad.size() - 5] ^= 0x01;  // last payload byte, just before the checksum
    spew(path, bad);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
  }
  SUBCASE("truncated") {
    auto bad = good;
    bad.resize(bad.size() - 1);
    spew(path, bad);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
  }
  SUBCASE("bad magic") {
    auto bad = good;
    bad[1] ^= 0xFF;
    spew(path, bad);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
  }
  SUBCASE("trailing garbage") {
    auto bad = good;
    bad.push_back(7);
    spew(path, bad);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
  }
}

TEST_CASE("train state round trip restores weights, moments and step exactly") {
  const auto cfg = toy_config();
  NoiseSchedule ns = NoiseSchedule::linear(100);
  TrainHp hp;
  hp.ema = true;
  auto st = init_train_state<float>(cfg, ns, hp, 11);

  const auto ds = make_mixture_dataset(8, 2, cfg.latent_channels, cfg.latent_h, cfg.latent_w,
                                       1.0, 21);
  auto x0 = Tensor<float>::from_vector(
      {ds.count(), cfg.latent_channels, cfg.latent_h, cfg.latent_w}, ds.latents);
  std::vector<std::int64_t> y(ds.labels.begin(), ds.labels.end());
  for (int i = 0; i < 3; ++i) training_step(st, x0, y);

  const auto path = tmp_path("train.udck");
  save_checkpoint(path, pack_train_state(st));

  auto st2 = init_train_state<float>(cfg, ns, hp, 999);
  restore_train_state(load_checkpoint(path), st2);
  CHECK(st2.step == st.step);

  auto p1 = collect_params(st.model);
  auto p2 = collect_params(st2.model);
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i]->data() == p2[i]->data());
    CHECK(p2[i]->requires_grad());
    CHECK(st.adam_m[i].data() == st2.adam_m[i].data());
    CHECK(st.adam_v[i].data() == st2.adam_v[i].data());
    CHECK(st.ema[i].data() == st2.ema[i].data());
  }
}

TEST_CASE("weights-only checkpoint leaves fresh moments at zero") {
  const auto cfg = toy_config();
  NoiseSchedule ns = NoiseSchedule::linear(50);
  auto st = init_train_state<float>(cfg, ns, TrainHp{}, 4);
  const auto path = tmp_path("weights_only.udck");
  save_checkpoint(path, pack_model(st.model, 12));

  auto st2 = init_train_state<float>(cfg, ns, TrainHp{}, 5);
  restore_train_state(load_checkpoint(path), st2);
  CHECK(st2.step == 12);
  for (const auto& mo : st2.adam_m)
    for (const float v : mo.data()) CHECK(v == 0.0f);
}

TEST_CASE("packing snapshots the weights instead of aliasing them") {
  const auto cfg = toy_config();
  auto m = build_model<float>(cfg, 6);
  auto ck = pack_model(m, 0);
  REQUIRE(ck.entries[1].first == "in.w");
  const float before = ck.entries[1].second.data()[0];
  m.w_in.data_mut()[0] = before + 42.0f;
  CHECK(ck.entries[1].second.data()[0] == before);
}

TEST_CASE("a checkpoint can rebuild its own architecture and schedule") {
  auto cfg = toy_config();
  cfg.cfg_dropout_prob = 0.15;
  cfg.attn_stride = {2, 1, 2};
  cfg.predict_sigma = true;
  cfg.timesteps = 250;
  auto st = init_train_state<float>(cfg, NoiseSchedule::linear(250, 2e-4, 1e-2), TrainHp{}, 8);
  const auto path = tmp_path("selfdesc.udck");
  save_checkpoint(path, pack_train_state(st));
  const auto ck = load_checkpoint(path);

  const auto back = unpack_config(ck);
  CHECK(back.digest() == cfg.digest());
  CHECK(back.base_channels == cfg.base_channels);
  CHECK(back.depths == cfg.depths);
  CHECK(back.attn_stride == cfg.attn_stride);
  CHECK(back.cfg_dropout_prob == cfg.cfg_dropout_prob);
  CHECK(back.predict_sigma == cfg.predict_sigma);
  CHECK(back.timesteps == 250);

  const auto ns = unpack_schedule(ck, back.timesteps);
  CHECK(ns.steps == 250);
  CHECK(ns.betas.front() == doctest::Approx(2e-4).epsilon(1e-6));
  CHECK(ns.betas.back() == doctest::Approx(1e-2).epsilon(1e-6));

  // a model rebuilt purely from the file accepts the stored weights
  auto m = build_model<float>(back, 99);
  CHECK_NOTHROW(restore_model(ck, m));

  Checkpoint bare;
  CHECK_THROWS_AS(unpack_config(bare), IoError);
  const auto fallback = unpack_schedule(bare, 100);
  CHECK(fallback.steps == 100);
  CHECK(fallback.betas.front() == 1e-4);
}

TEST_CASE("ppm output is normalized rgb with a fixed header") {
  SUBCASE("single channel replicates to gray") {
    const std::vector<float> img = {0.0f, 1.0f, 2.0f, 3.0f};
    const auto path = tmp_path("gray.ppm");
    save_ppm(path, img, 1, 2, 2);
    const auto bytes = slurp(path);
    const std::string header = "P6\n2 2\n255\n";
    REQUIRE(bytes.size() == header.size() + 12);
    CHECK(std::equal(header.begin(), header.end(), bytes.begin()));
    const unsigned char* px = bytes.data() + header.size();
    const unsigned char expect[4] = {0, 85, 170, 255};
    for (int i = 0; i < 4; ++i)
      for (int ch = 0; ch < 3; ++ch) CHECK(px[3 * i + ch] == expect[i]);
  }
  SUBCASE("channels past the third do not affect scaling") {
    // ch3 holds extremes; they must not stretch the range of ch0..2
    const std::vector<float> img = {0, 1, 0, 1, 0, 1, -100, 100};
    const auto path = tmp_path("rgba.ppm");
    save_ppm(path, img, 4, 1, 2);
    const auto bytes = slurp(path);
    const std::string header = "P6\n2 1\n255\n";
    const unsigned char* px = bytes.data() + header.size();
    for (int ch = 0; ch < 3; ++ch) {
      CHECK(px[ch] == 0);
      CHECK(px[3 + ch] == 255);
    }
  }
  SUBCASE("constant image maps to black") {
    const std::vector<float> img(4, 7.5f);
    const auto path = tmp_path("flat.ppm");
    save_ppm(path, img, 1, 2, 2);
    const auto bytes = slurp(path);
    for (std::size_t i = bytes.size() - 12; i < bytes.size(); ++i) CHECK(bytes[i] == 0);
  }
  SUBCASE("mismatched extents are rejected") {
    const std::vector<float> img(3, 0.0f);
    CHECK_THROWS_AS(save_ppm(tmp_path("bad.ppm"), img, 1, 2, 2), IoError);
  }
}

TEST_CASE("crc32 matches the standard reference vector") {
  const std::string s = "123456789";
  const auto v = crc32({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
  CHECK(v == 0xCBF43926u);
  CHECK(crc32({}) == 0u);
}

TEST_CASE("save then rename leaves no temp file behind") {
  const auto ds = make_mixture_dataset(2, 1, 1, 2, 2, 0.0, 3);
  const auto path = tmp_path("atomic.udlt");
  save_dataset(path, ds);
  CHECK(std::filesystem::exists(path));
  CHECK_FALSE(std::filesystem::exists(path + ".tmp"));
}

#include "udit/run_config.hpp"

TEST_CASE("empty run config yields the documented defaults") {
  const auto rc = parse_run_config("{}");
  CHECK(rc.model.base_channels == 96);
  CHECK(rc.model.timesteps == 1000);
  CHECK(rc.diffusion.beta_start == 1e-4);
  CHECK(rc.diffusion.beta_end == 2e-2);
  CHECK(rc.diffusion.schedule == "linear");
  CHECK(rc.diffusion.objective == "eps");
  CHECK(rc.train.lr == 1e-4);
  CHECK(rc.train.weight_decay == 0.0);
  CHECK(rc.train.batch == 64);
  CHECK(rc.data.kind == "synthetic");
  CHECK(rc.sample.cfg_scale == 1.0);
}

TEST_CASE("run config fields parse into every section") {
  const char* text = R"({
    "model": {"base_channels": 32, "heads": 2, "depths": [1,1,2,1,1],
              "latent_h": 8, "latent_w": 8, "num_classes": 2,
              "cfg_dropout_prob": 0.2, "attn_stride": [2,1,2]},
    "diffusion": {"timesteps": 400, "beta_end": 0.01},
    "train": {"steps": 20, "batch": 8, "lr": 3e-4, "seed": 9, "ema": true},
    "data": {"kind": "latent-file", "path": "x.udlt"},
    "sample": {"n": 2, "steps": 5, "cfg_scale": 1.5, "class": 1}
  })";
  const auto rc = parse_run_config(text);
  CHECK(rc.model.base_channels == 32);
  CHECK(rc.model.depths[2] == 2);
  CHECK(rc.model.attn_stride[1] == 1);
  CHECK(rc.model.timesteps == 400);  // follows the diffusion section
  CHECK(rc.diffusion.beta_end == 0.01);
  CHECK(rc.train.seed == 9);
  CHECK(rc.train.ema);
  CHECK(rc.data.path == "x.udlt");
  CHECK(rc.sample.cfg_scale == 1.5);
  CHECK(rc.sample.cls == 1);
}

TEST_CASE("run config rejects unknown keys by name at every level") {
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"modle": {}})"),
                       doctest::Contains("modle"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"model": {"basechannels": 32}})"),
                       doctest::Contains("model.basechannels"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"train": {"learning_rate": 1e-4}})"),
                       doctest::Contains("train.learning_rate"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"sample": {"cls": 0}})"),
                       doctest::Contains("sample.cls"), ConfigError);
}

TEST_CASE("run config rejects malformed and out-of-range values") {
  CHECK_THROWS_AS(parse_run_config("not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"depths": [1,1,2]}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"attn_stride": [2,2,2,2]}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"base_channels": "big"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"diffusion": {"objective": "v"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"diffusion": {"schedule": "cosine"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"diffusion": {"timesteps": 0}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"batch": 0}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"lr": -1.0}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"data": {"kind": "postgres"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"data": {"kind": "latent-file"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"num_classes": 2}, "sample": {"class": 5}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"heads": 7}})"), ConfigError);
}

TEST_CASE("run config loads from a file") {
  const auto path = tmp_path("run.json");
  {
    std::ofstream out(path);
    out << R"({"train": {"steps": 3}})";
  }
  CHECK(load_run_config(path).train.steps == 3);
  CHECK_THROWS_AS(load_run_config(tmp_path("missing.json")), IoError);
}
