#include "udit/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace udit {

namespace {

using nlohmann::json;

// One JSON object; get() marks keys consumed, finish() names any leftover.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& into) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    try {
      into = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name_ + "." + key + " has the wrong type");
    }
  }

  template <std::size_t N>
  void get_array(const char* key, std::array<std::int64_t, N>& into) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    std::vector<std::int64_t> v;
    try {
      v = it->get<std::vector<std::int64_t>>();
    } catch (const json::exception&) {
      throw ConfigError(name_ + "." + key + " must be an array of integers");
    }
    if (v.size() != N)
      throw ConfigError(name_ + "." + key + " needs exactly " + std::to_string(N) +
                        " entries, got " + std::to_string(v.size()));
    std::copy(v.begin(), v.end(), into.begin());
  }

  const json* sub(const char* key) {
    const auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + name_ + "." + it.key());
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void parse_model(const json& j, UDiTConfig& m) {
  Section s(j, "model");
  s.get("base_channels", m.base_channels);
  s.get("heads", m.heads);
  s.get_array("depths", m.depths);
  s.get("latent_channels", m.latent_channels);
  s.get("latent_h", m.latent_h);
  s.get("latent_w", m.latent_w);
  s.get("num_classes", m.num_classes);
  s.get("emb_ratio", m.emb_ratio);
  s.get("ffn_ratio", m.ffn_ratio);
  s.get("time_freq_dim", m.time_freq_dim);
  s.get("predict_sigma", m.predict_sigma);
  s.get("cosine", m.cosine);
  s.get("rope", m.rope);
  s.get("dwconv_ffn", m.dwconv_ffn);
  s.get("cfg", m.cfg);
  s.get("cfg_dropout_prob", m.cfg_dropout_prob);
  s.get_array("attn_stride", m.attn_stride);
  s.finish();
}

void parse_diffusion(const json& j, RunConfig::Diffusion& d) {
  Section s(j, "diffusion");
  s.get("timesteps", d.timesteps);
  s.get("beta_start", d.beta_start);
  s.get("beta_end", d.beta_end);
  s.get("schedule", d.schedule);
  s.get("objective", d.objective);
  s.finish();
  if (d.schedule != "linear")
    throw ConfigError("diffusion.schedule: only \"linear\" is supported, got \"" + d.schedule +
                      "\"");
  if (d.objective != "eps")
    throw ConfigError("diffusion.objective: only \"eps\" is supported, got \"" + d.objective +
                      "\"");
  if (d.timesteps < 1) throw ConfigError("diffusion.timesteps must be at least 1");
  if (!(d.beta_start > 0.0) || !(d.beta_end > 0.0) || d.beta_end >= 1.0 ||
      d.beta_start > d.beta_end)
    throw ConfigError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1");
}

void parse_train(const json& j, RunConfig::Train& t) {
  Section s(j, "train");
  s.get("steps", t.steps);
  s.get("batch", t.batch);
  s.get("lr", t.lr);
  s.get("weight_decay", t.weight_decay);
  s.get("seed", t.seed);
  s.get("ema", t.ema);
  s.get("ema_decay", t.ema_decay);
  s.get("checkpoint_every", t.checkpoint_every);
  s.get("log_every", t.log_every);
  s.finish();
  if (t.steps < 1) throw ConfigError("train.steps must be at least 1");
  if (t.batch < 1) throw ConfigError("train.batch must be at least 1");
  if (!(t.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (t.weight_decay < 0.0) throw ConfigError("train.weight_decay must be nonnegative");
  if (t.ema_decay <= 0.0 || t.ema_decay >= 1.0)
    throw ConfigError("train.ema_decay must lie in (0, 1)");
  if (t.checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be nonnegative");
  if (t.log_every < 1) throw ConfigError("train.log_every must be at least 1");
}

void parse_data(const json& j, RunConfig::Data& d) {
  Section s(j, "data");
  s.get("kind", d.kind);
  s.get("path", d.path);
  s.get("synth_n", d.synth_n);
  s.get("classes", d.classes);
  s.get("spread", d.spread);
  s.get("seed", d.seed);
  s.finish();
  if (d.kind != "synthetic" && d.kind != "latent-file")
    throw ConfigError("data.kind must be \"synthetic\" or \"latent-file\", got \"" + d.kind +
                      "\"");
  if (d.kind == "latent-file" && d.path.empty())
    throw ConfigError("data.path is required when data.kind is \"latent-file\"");
  if (d.synth_n < 1) throw ConfigError("data.synth_n must be at least 1");
  if (d.classes < 1) throw ConfigError("data.classes must be at least 1");
  if (d.spread < 0.0) throw ConfigError("data.spread must be nonnegative");
}

void parse_sample(const json& j, RunConfig::Sample& sm) {
  Section s(j, "sample");
  s.get("n", sm.n);
  s.get("steps", sm.steps);
  s.get("cfg_scale", sm.cfg_scale);
  s.get("class", sm.cls);
  s.finish();
  if (sm.n < 1) throw ConfigError("sample.n must be at least 1");
  if (sm.steps < 1) throw ConfigError("sample.steps must be at least 1");
  if (sm.cfg_scale < 0.0) throw ConfigError("sample.cfg_scale must be nonnegative");
  if (sm.cls < 0) throw ConfigError("sample.class must be nonnegative");
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }

  RunConfig rc;
  Section top(root, "config");
  if (const auto* j = top.sub("model")) parse_model(*j, rc.model);
  if (const auto* j = top.sub("diffusion")) parse_diffusion(*j, rc.diffusion);
  if (const auto* j = top.sub("train")) parse_train(*j, rc.train);
  if (const auto* j = top.sub("data")) parse_data(*j, rc.data);
  if (const auto* j = top.sub("sample")) parse_sample(*j, rc.sample);
  top.finish();

  rc.model.timesteps = rc.diffusion.timesteps;
  rc.model.validate();
  if (rc.sample.cls >= rc.model.num_classes)
    throw ConfigError("sample.class " + std::to_string(rc.sample.cls) + " >= num_classes " +
                      std::to_string(rc.model.num_classes));
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (!in.good() && !in.eof()) throw IoError("config: read failed on " + path);
  return parse_run_config(ss.str());
}

}  // namespace udit
