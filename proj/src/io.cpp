#include "udit/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace udit {

namespace {

void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v));
  b.push_back(static_cast<unsigned char>(v >> 8));
  b.push_back(static_cast<unsigned char>(v >> 16));
  b.push_back(static_cast<unsigned char>(v >> 24));
}

void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
  put_u32(b, static_cast<std::uint32_t>(v));
  put_u32(b, static_cast<std::uint32_t>(v >> 32));
}

void put_f32(std::vector<unsigned char>& b, float v) {
  put_u32(b, std::bit_cast<std::uint32_t>(v));
}

// sequential reader over a fully loaded file
struct Cursor {
  const unsigned char* p;
  std::size_t left;
  std::string what;

  void need(std::size_t n) const {
    if (left < n) throw IoError(what + ": truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
                      static_cast<std::uint32_t>(p[2]) << 16 |
                      static_cast<std::uint32_t>(p[3]) << 24;
    p += 4;
    left -= 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | static_cast<std::uint64_t>(u32()) << 32;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, p, n);
    p += n;
    left -= n;
  }
};

std::vector<unsigned char> read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(std::string(what) + ": cannot open " + path);
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0);
  std::vector<unsigned char> buf(static_cast<std::size_t>(size));
  in.read(reinterpret_cast<char*>(buf.data()), size);
  if (!in) throw IoError(std::string(what) + ": read failed on " + path);
  return buf;
}

void atomic_write(const std::string& path, const std::vector<unsigned char>& bytes,
                  const char* what) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(std::string(what) + ": cannot open " + tmp + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::remove(tmp.c_str());
      throw IoError(std::string(what) + ": write failed on " + tmp);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError(std::string(what) + ": cannot move " + tmp + " to " + path);
  }
}

constexpr char kDatasetMagic[4] = {'U', 'D', 'L', 'T'};
constexpr char kCheckpointMagic[4] = {'U', 'D', 'C', 'K'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint32_t kDtypeF32 = 0;

}  // namespace

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xFFFFFFFFu;
  for (const unsigned char b : bytes) c = table[(c ^ b) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void save_dataset(const std::string& path, const LatentDataset& ds) {
  if (ds.latents.size() != ds.labels.size() * static_cast<std::size_t>(ds.sample_numel()))
    throw IoError("dataset: latent buffer does not match count * sample size");
  std::vector<unsigned char> b;
  b.reserve(32 + 4 * (ds.labels.size() + ds.latents.size()));
  b.insert(b.end(), kDatasetMagic, kDatasetMagic + 4);
  put_u32(b, kFormatVersion);
  put_u32(b, static_cast<std::uint32_t>(ds.labels.size()));
  put_u32(b, ds.channels);
  put_u32(b, ds.height);
  put_u32(b, ds.width);
  put_u32(b, ds.num_classes);
  put_u32(b, 0);  // reserved
  const std::int64_t numel = ds.sample_numel();
  for (std::int64_t i = 0; i < ds.count(); ++i) {
    const std::uint32_t label = ds.labels[static_cast<std::size_t>(i)];
    if (label >= ds.num_classes)
      throw IoError("dataset: label " + std::to_string(label) + " >= num_classes " +
                    std::to_string(ds.num_classes));
    put_u32(b, label);
    for (std::int64_t j = 0; j < numel; ++j)
      put_f32(b, ds.latents[static_cast<std::size_t>(i * numel + j)]);
  }
  atomic_write(path, b, "dataset");
}

LatentDataset load_dataset(const std::string& path) {
  const auto buf = read_file(path, "dataset");
  Cursor c{buf.data(), buf.size(), "dataset"};
  char magic[4];
  c.bytes(magic, 4);
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw IoError("dataset: bad magic in " + path);
  const std::uint32_t version = c.u32();
  if (version != kFormatVersion)
    throw IoError("dataset: unsupported version " + std::to_string(version));
  LatentDataset ds;
  const std::uint32_t count = c.u32();
  ds.channels = c.u32();
  ds.height = c.u32();
  ds.width = c.u32();
  ds.num_classes = c.u32();
  c.u32();  // reserved
  const std::uint64_t numel = static_cast<std::uint64_t>(ds.channels) * ds.height * ds.width;
  const std::uint64_t expect = 32 + static_cast<std::uint64_t>(count) * (4 + 4 * numel);
  if (buf.size() != expect)
    throw IoError("dataset: file length " + std::to_string(buf.size()) + " != expected " +
                  std::to_string(expect));
  ds.labels.resize(count);
  ds.latents.resize(count * numel);
  for (std::uint32_t i = 0; i < count; ++i) {
    ds.labels[i] = c.u32();
    if (ds.labels[i] >= ds.num_classes)
      throw IoError("dataset: label " + std::to_string(ds.labels[i]) + " >= num_classes " +
                    std::to_string(ds.num_classes));
    for (std::uint64_t j = 0; j < numel; ++j) ds.latents[i * numel + j] = c.f32();
  }
  return ds;
}

double mixture_class_mean(std::int64_t k, std::int64_t classes, double spread) {
  if (classes <= 1) return 0.0;
  return -spread + 2.0 * spread * static_cast<double>(k) / static_cast<double>(classes - 1);
}

LatentDataset make_mixture_dataset(std::int64_t n, std::int64_t classes, std::int64_t c,
                                   std::int64_t h, std::int64_t w, double spread,
                                   std::uint64_t seed) {
  if (n < 1 || classes < 1 || c < 1 || h < 1 || w < 1)
    throw ConfigError("mixture: all extents must be positive");
  LatentDataset ds;
  ds.channels = static_cast<std::uint32_t>(c);
  ds.height = static_cast<std::uint32_t>(h);
  ds.width = static_cast<std::uint32_t>(w);
  ds.num_classes = static_cast<std::uint32_t>(classes);
  const std::int64_t numel = c * h * w;
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.latents.resize(static_cast<std::size_t>(n * numel));
  Rng rng(seed);
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t k = i % classes;
    ds.labels[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(k);
    const float mean = static_cast<float>(mixture_class_mean(k, classes, spread));
    std::span<float> row{ds.latents.data() + i * numel, static_cast<std::size_t>(numel)};
    rng.fill_normal(row);
    for (auto& v : row) v += mean;
  }
  return ds;
}

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::vector<unsigned char> head;
  head.insert(head.end(), kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(head, ck.version);
  put_u64(head, ck.digest);
  put_u64(head, ck.step);
  put_u32(head, static_cast<std::uint32_t>(ck.entries.size()));

  std::vector<unsigned char> payload;
  for (const auto& [name, t] : ck.entries) {
    put_u32(head, static_cast<std::uint32_t>(name.size()));
    head.insert(head.end(), name.begin(), name.end());
    put_u32(head, kDtypeF32);
    put_u32(head, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d)
      put_u64(head, static_cast<std::uint64_t>(t.dim(d)));
    put_u64(head, payload.size());
    for (const float v : t.data()) put_f32(payload, v);
  }
  put_u64(head, payload.size());
  head.insert(head.end(), payload.begin(), payload.end());
  put_u32(head, crc32(payload));
  atomic_write(path, head, "checkpoint");
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto buf = read_file(path, "checkpoint");
  Cursor c{buf.data(), buf.size(), "checkpoint"};
  char magic[4];
  c.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  Checkpoint ck;
  ck.version = c.u32();
  if (ck.version != kFormatVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(ck.version));
  ck.digest = c.u64();
  ck.step = c.u64();
  const std::uint32_t n = c.u32();
  struct Meta {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Meta> metas;
  metas.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Meta m;
    const std::uint32_t len = c.u32();
    m.name.resize(len);
    c.bytes(m.name.data(), len);
    const std::uint32_t dtype = c.u32();
    if (dtype != kDtypeF32)
      throw IoError("checkpoint: unsupported dtype tag " + std::to_string(dtype));
    const std::uint32_t rank = c.u32();
    m.shape.resize(rank);
    for (std::uint32_t d = 0; d < rank; ++d)
      m.shape[d] = static_cast<std::int64_t>(c.u64());
    m.offset = c.u64();
    metas.push_back(std::move(m));
  }
  const std::uint64_t payload_size = c.u64();
  c.need(payload_size + 4);
  std::span<const unsigned char> payload{c.p, static_cast<std::size_t>(payload_size)};
  c.p += payload_size;
  c.left -= payload_size;
  const std::uint32_t want = c.u32();
  if (c.left != 0) throw IoError("checkpoint: trailing bytes after checksum");
  if (crc32(payload) != want) throw IoError("checkpoint: payload checksum mismatch");

  for (auto& m : metas) {
    const std::uint64_t numel = static_cast<std::uint64_t>(numel_of(m.shape));
    if (m.offset + numel * 4 > payload_size)
      throw IoError("checkpoint: entry " + m.name + " overruns the payload");
    Cursor ec{payload.data() + m.offset, static_cast<std::size_t>(numel * 4), "checkpoint"};
    std::vector<float> data(numel);
    for (auto& v : data) v = ec.f32();
    ck.entries.emplace_back(m.name, Tensor<float>::from_vector(m.shape, std::move(data)));
  }
  return ck;
}

namespace {

// tensors share their storage on copy; a checkpoint must be a snapshot
Tensor<float> snapshot(const Tensor<float>& t) {
  return Tensor<float>::from_vector(t.shape(), t.data());
}

constexpr const char* kCfgEntry = "cfg.fields";
constexpr const char* kDiffEntry = "diffusion.fields";
constexpr std::size_t kCfgFieldCount = 25;

Tensor<float> encode_config(const UDiTConfig& c) {
  std::vector<float> f;
  f.reserve(kCfgFieldCount);
  f.push_back(1.0f);  // field-layout version
  f.push_back(static_cast<float>(c.base_channels));
  f.push_back(static_cast<float>(c.heads));
  for (const auto d : c.depths) f.push_back(static_cast<float>(d));
  f.push_back(static_cast<float>(c.latent_channels));
  f.push_back(static_cast<float>(c.latent_h));
  f.push_back(static_cast<float>(c.latent_w));
  f.push_back(static_cast<float>(c.num_classes));
  f.push_back(static_cast<float>(c.timesteps));
  f.push_back(static_cast<float>(c.emb_ratio));
  f.push_back(static_cast<float>(c.ffn_ratio));
  f.push_back(static_cast<float>(c.time_freq_dim));
  f.push_back(c.predict_sigma ? 1.0f : 0.0f);
  f.push_back(c.cosine ? 1.0f : 0.0f);
  f.push_back(c.rope ? 1.0f : 0.0f);
  f.push_back(c.dwconv_ffn ? 1.0f : 0.0f);
  f.push_back(c.cfg ? 1.0f : 0.0f);
  // scaled to keep the probability exact through the f32 round trip
  f.push_back(static_cast<float>(std::lround(c.cfg_dropout_prob * 1e6)));
  for (const auto s : c.attn_stride) f.push_back(static_cast<float>(s));
  const auto n = static_cast<std::int64_t>(f.size());
  return Tensor<float>::from_vector({n}, std::move(f));
}

}  // namespace

UDiTConfig unpack_config(const Checkpoint& ck) {
  const auto* t = ck.find(kCfgEntry);
  if (!t) throw IoError("checkpoint: no architecture entry; cannot rebuild the model");
  const auto& f = t->data();
  if (f.size() != kCfgFieldCount || f[0] != 1.0f)
    throw IoError("checkpoint: unrecognized architecture entry layout");
  auto i64 = [&f](std::size_t i) { return static_cast<std::int64_t>(f[i]); };
  UDiTConfig c;
  c.base_channels = i64(1);
  c.heads = i64(2);
  for (std::size_t k = 0; k < c.depths.size(); ++k) c.depths[k] = i64(3 + k);
  c.latent_channels = i64(8);
  c.latent_h = i64(9);
  c.latent_w = i64(10);
  c.num_classes = i64(11);
  c.timesteps = i64(12);
  c.emb_ratio = i64(13);
  c.ffn_ratio = i64(14);
  c.time_freq_dim = i64(15);
  c.predict_sigma = f[16] != 0.0f;
  c.cosine = f[17] != 0.0f;
  c.rope = f[18] != 0.0f;
  c.dwconv_ffn = f[19] != 0.0f;
  c.cfg = f[20] != 0.0f;
  c.cfg_dropout_prob = static_cast<double>(f[21]) / 1e6;
  for (std::size_t k = 0; k < c.attn_stride.size(); ++k) c.attn_stride[k] = i64(22 + k);
  c.validate();
  return c;
}

NoiseSchedule unpack_schedule(const Checkpoint& ck, std::int64_t expected_T) {
  const auto* t = ck.find(kDiffEntry);
  if (!t) return NoiseSchedule::linear(expected_T);
  const auto& f = t->data();
  if (f.size() != 3) throw IoError("checkpoint: malformed schedule entry");
  const auto T = static_cast<std::int64_t>(f[0]);
  if (T != expected_T)
    throw IoError("checkpoint: stored schedule spans " + std::to_string(T) +
                  " steps, the architecture says " + std::to_string(expected_T));
  return NoiseSchedule::linear(T, static_cast<double>(f[1]), static_cast<double>(f[2]));
}

Checkpoint pack_model(const ModelParams<float>& m, std::uint64_t step) {
  Checkpoint ck;
  ck.digest = m.cfg.digest();
  ck.step = step;
  ck.entries.emplace_back(kCfgEntry, encode_config(m.cfg));
  visit_params(const_cast<ModelParams<float>&>(m),
               [&ck](const std::string& name, Tensor<float>& t, const Shape&, SlotInit) {
                 ck.entries.emplace_back(name, snapshot(t));
               });
  return ck;
}

Checkpoint pack_train_state(TrainState<float>& st) {
  Checkpoint ck = pack_model(st.model, static_cast<std::uint64_t>(st.step));
  const auto& b = st.schedule.betas;
  ck.entries.emplace_back(
      kDiffEntry, Tensor<float>::from_vector(
                      {3}, {static_cast<float>(st.schedule.steps),
                            static_cast<float>(b.front()), static_cast<float>(b.back())}));
  std::size_t i = 0;
  visit_params(st.model, [&](const std::string& name, Tensor<float>&, const Shape&, SlotInit) {
    ck.entries.emplace_back("adam.m." + name, snapshot(st.adam_m[i]));
    ck.entries.emplace_back("adam.v." + name, snapshot(st.adam_v[i]));
    if (st.hp.ema) ck.entries.emplace_back("ema." + name, snapshot(st.ema[i]));
    ++i;
  });
  return ck;
}

void restore_model(const Checkpoint& ck, ModelParams<float>& m, bool force) {
  if (!force && ck.digest != m.cfg.digest())
    throw ConfigError("checkpoint: config digest " + std::to_string(ck.digest) +
                      " does not match this model (" + std::to_string(m.cfg.digest()) +
                      "); pass force to override");
  visit_params(m, [&ck](const std::string& name, Tensor<float>& t, const Shape& shape,
                        SlotInit) {
    const auto* src = ck.find(name);
    if (!src) throw IoError("checkpoint: missing entry " + name);
    if (src->shape() != shape)
      throw IoError("checkpoint: entry " + name + " has shape " + shape_str(src->shape()) +
                    ", model wants " + shape_str(shape));
    t = Tensor<float>::from_vector(shape, src->data());
  });
}

void restore_train_state(const Checkpoint& ck, TrainState<float>& st, bool force) {
  restore_model(ck, st.model, force);
  for (auto* p : collect_params(st.model)) p->set_requires_grad(true);
  st.step = static_cast<std::int64_t>(ck.step);
  std::size_t i = 0;
  visit_params(st.model, [&](const std::string& name, Tensor<float>&, const Shape& shape,
                             SlotInit) {
    auto restore_into = [&](const std::string& key, Tensor<float>& dst, bool required) {
      const auto* src = ck.find(key);
      if (!src) {
        if (required) throw IoError("checkpoint: missing entry " + key);
        return;
      }
      if (src->shape() != shape)
        throw IoError("checkpoint: entry " + key + " has shape " + shape_str(src->shape()) +
                      ", model wants " + shape_str(shape));
      dst = Tensor<float>::from_vector(shape, src->data());
    };
    // moments may be absent in a weights-only checkpoint; keep zeros then
    restore_into("adam.m." + name, st.adam_m[i], false);
    restore_into("adam.v." + name, st.adam_v[i], false);
    if (st.hp.ema) restore_into("ema." + name, st.ema[i], false);
    ++i;
  });
}

void save_ppm(const std::string& path, std::span<const float> img, std::int64_t c,
              std::int64_t h, std::int64_t w) {
  if (c < 1 || h < 1 || w < 1 || img.size() != static_cast<std::size_t>(c * h * w))
    throw IoError("ppm: image buffer does not match its extents");
  const std::int64_t used = c >= 3 ? 3 : 1;
  float lo = img[0], hi = img[0];
  for (std::int64_t ch = 0; ch < used; ++ch)
    for (std::int64_t i = 0; i < h * w; ++i) {
      const float v = img[static_cast<std::size_t>(ch * h * w + i)];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const float span = hi - lo;
  std::vector<unsigned char> b;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  b.insert(b.end(), header.begin(), header.end());
  for (std::int64_t i = 0; i < h * w; ++i)
    for (std::int64_t ch = 0; ch < 3; ++ch) {
      const std::int64_t src = used == 3 ? ch : 0;
      const float v = img[static_cast<std::size_t>(src * h * w + i)];
      const float norm = span > 0 ? (v - lo) / span : 0.0f;
      b.push_back(static_cast<unsigned char>(std::lround(norm * 255.0f)));
    }
  atomic_write(path, b, "ppm");
}

}  // namespace udit
