#include "motok/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "motok/rng.hpp"

namespace motok {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class T>
Field bind(T& ref, const std::string& key) {
  Field f;
  if constexpr (std::is_same_v<T, std::string>) {
    f.set = [&ref](const std::string& v) { ref = v; };
    f.get = [&ref] { return ref; };
  } else if constexpr (std::is_same_v<T, bool>) {
    f.set = [&ref, key](const std::string& v) {
      if (v == "true" || v == "1") ref = true;
      else if (v == "false" || v == "0") ref = false;
      else throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
    };
    f.get = [&ref] { return std::string(ref ? "true" : "false"); };
  } else if constexpr (std::is_same_v<T, double>) {
    f.set = [&ref, key](const std::string& v) {
      std::size_t used = 0;
      try {
        ref = std::stod(v, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != v.size())
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    };
    f.get = [&ref] { return fmt_double(ref); };
  } else {
    f.set = [&ref, key](const std::string& v) {
      T out{};
      const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("config key '" + key + "': expected a nonnegative integer, got '" + v + "'");
      ref = out;
    };
    f.get = [&ref] { return std::to_string(ref); };
  }
  return f;
}

std::map<std::string, Field> field_table(RunConfig& c) {
  std::map<std::string, Field> m;
  auto add = [&m](const std::string& key, auto& ref) { m.emplace(key, bind(ref, key)); };
  add("seed", c.seed);
  add("out_dir", c.out_dir);

  add("data.dir", c.data.dir);
  add("data.classes", c.data.classes);
  add("data.per_class", c.data.per_class);
  add("data.length", c.data.length);
  add("data.fps", c.data.fps);
  add("data.train_pct", c.data.train_pct);
  add("data.val_pct", c.data.val_pct);

  add("rvq.layers", c.rvq.layers);
  add("rvq.codes", c.rvq.codes);
  add("rvq.dim", c.rvq.dim);
  add("rvq.dropout", c.rvq.dropout);
  add("rvq.reset_window", c.rvq.reset_window);

  // tcc.variant is an enum; handled by hand.
  m.emplace("tcc.variant",
            Field{[&c](const std::string& v) {
                    try {
                      c.tcc.variant = tcc::parse_variant(v);
                    } catch (const std::invalid_argument& e) {
                      throw ConfigError(std::string("config key 'tcc.variant': ") + e.what());
                    }
                  },
                  [&c] { return tcc::to_string(c.tcc.variant); }});
  add("tcc.lambda", c.tcc.lambda);
  add("tcc.delta", c.tcc.delta);
  add("tcc.cycle_length", c.tcc.cycle_length);
  add("tcc.weight", c.tcc.weight);
  add("tcc.sigma_floor", c.tcc.sigma_floor);

  add("kcb.enabled", c.kcb.enabled);
  add("kcb.height_thresh", c.kcb.height_thresh);
  add("kcb.speed_thresh", c.kcb.speed_thresh);
  add("kcb.sigmoid_temp", c.kcb.sigmoid_temp);
  add("kcb.heads", c.kcb.heads);
  add("kcb.width", c.kcb.width);

  add("train.enc_width", c.train.enc_width);
  add("train.res_blocks", c.train.res_blocks);
  add("train.down_stages", c.train.down_stages);
  add("train.steps", c.train.steps);
  add("train.batch", c.train.batch);
  add("train.optimizer", c.train.optimizer);
  add("train.lr", c.train.lr);
  add("train.momentum", c.train.momentum);
  add("train.clip", c.train.clip);
  add("train.warmup", c.train.warmup);
  add("train.min_lr_frac", c.train.min_lr_frac);
  add("train.gamma", c.train.gamma);
  add("train.beta_r", c.train.beta_r);
  add("train.log_every", c.train.log_every);
  add("train.ckpt_every", c.train.ckpt_every);
  add("train.resume", c.train.resume);

  add("gen.layers", c.gen.layers);
  add("gen.heads", c.gen.heads);
  add("gen.d_model", c.gen.d_model);
  add("gen.ff", c.gen.ff);
  add("gen.steps", c.gen.steps);
  add("gen.batch", c.gen.batch);
  add("gen.optimizer", c.gen.optimizer);
  add("gen.lr", c.gen.lr);
  add("gen.clip", c.gen.clip);
  add("gen.warmup", c.gen.warmup);
  add("gen.iters", c.gen.iters);
  add("gen.text_dropout", c.gen.text_dropout);
  add("gen.guidance", c.gen.guidance);
  add("gen.temperature", c.gen.temperature);
  add("gen.max_len", c.gen.max_len);
  add("gen.length", c.gen.length);
  add("gen.transition", c.gen.transition);
  add("gen.text_buckets", c.gen.text_buckets);

  add("metrics.pool", c.metrics.pool);
  add("metrics.top_k", c.metrics.top_k);
  add("metrics.diversity_pairs", c.metrics.diversity_pairs);
  add("metrics.mmodality_samples", c.metrics.mmodality_samples);
  add("metrics.mm_mode", c.metrics.mm_mode);
  add("metrics.feature_dim", c.metrics.feature_dim);
  add("metrics.extractor_steps", c.metrics.extractor_steps);
  return m;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  auto table = field_table(*this);
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(value);
}

std::vector<std::string> RunConfig::keys() const {
  auto table = field_table(const_cast<RunConfig&>(*this));
  std::vector<std::string> k;
  for (const auto& [name, f] : table) k.push_back(name);
  return k;
}

std::string RunConfig::dump() const {
  auto table = field_table(const_cast<RunConfig&>(*this));
  std::string out;
  for (const auto& [name, f] : table) out += name + " = " + f.get() + "\n";
  return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a64(dump()); }

std::string RunConfig::hash_hex() const {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash();
  return os.str();
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (data.classes < 2 || data.classes > 4) fail("data.classes must be between 2 and 4");
  if (data.per_class < 2) fail("data.per_class must be at least 2");
  if (data.length < 16) fail("data.length must be at least 16");
  if (!(data.fps > 0.0)) fail("data.fps must be positive");
  if (data.train_pct <= 0.0 || data.val_pct < 0.0 || data.train_pct + data.val_pct >= 100.0)
    fail("data split percentages must leave room for a test split");
  if (rvq.layers == 0 || rvq.codes == 0 || rvq.dim == 0) fail("rvq sizes must be positive");
  if (rvq.codes > 65535) fail("rvq.codes must fit 16-bit token files");
  if (rvq.dropout < 0.0 || rvq.dropout >= 1.0) fail("rvq.dropout must be in [0, 1)");
  try {
    tcc.validate();
    kcb::KcbConfig k = kcb;
    if (k.height_thresh <= 0.0) k.height_thresh = 1.0;  // resolved from the skeleton later
    k.validate();
    nk::parse_optim_kind(train.optimizer);
    nk::parse_optim_kind(gen.optimizer);
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (train.enc_width == 0 || train.down_stages == 0 || train.down_stages > 4)
    fail("train.enc_width must be positive and train.down_stages in 1..4");
  if (train.batch == 0 || gen.batch == 0) fail("batch sizes must be positive");
  if (train.gamma < 0.0 || train.beta_r < 0.0) fail("loss weights must be nonnegative");
  if (!(train.lr > 0.0) || !(gen.lr > 0.0)) fail("learning rates must be positive");
  if (gen.d_model == 0 || gen.heads == 0 || gen.d_model % gen.heads != 0)
    fail("gen.d_model must be a positive multiple of gen.heads");
  if (gen.iters == 0) fail("gen.iters must be at least 1");
  if (gen.text_dropout < 0.0 || gen.text_dropout >= 1.0) fail("gen.text_dropout must be in [0, 1)");
  if (!(gen.temperature > 0.0)) fail("gen.temperature must be positive");
  if (gen.length == 0 || gen.length > gen.max_len) fail("gen.length must be in 1..gen.max_len");
  if (gen.text_buckets == 0) fail("gen.text_buckets must be positive");
  if (metrics.mm_mode != "euclidean" && metrics.mm_mode != "cosine")
    fail("metrics.mm_mode must be euclidean or cosine");
  if (metrics.pool < 2 || metrics.top_k == 0 || metrics.top_k > metrics.pool)
    fail("metrics.pool must be >= 2 and metrics.top_k in 1..pool");
}

nk::OptimConfig RunConfig::stage1_optim() const {
  nk::OptimConfig o;
  o.kind = nk::parse_optim_kind(train.optimizer);
  o.lr = train.lr;
  o.momentum = train.momentum;
  o.clip_norm = train.clip;
  o.warmup_steps = train.warmup;
  o.min_lr_frac = train.min_lr_frac;
  o.total_steps = train.steps;
  return o;
}

nk::OptimConfig RunConfig::stage2_optim() const {
  nk::OptimConfig o;
  o.kind = nk::parse_optim_kind(gen.optimizer);
  o.lr = gen.lr;
  o.clip_norm = gen.clip;
  o.warmup_steps = gen.warmup;
  o.total_steps = gen.steps;
  if (o.kind == nk::OptimConfig::Kind::SgdMomentum) o.momentum = 0.9;
  return o;
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

RunConfig config_from_text(const std::string& text) {
  RunConfig c;
  for (const auto& [k, v] : parse_config_text(text)) c.set(k, v);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_text(ss.str());
}

}  // namespace motok
