#include "sitsmamba/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace sitsmamba {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("config: " + key + "=" + value + " is not " + what);
}

template <typename I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  bad_value(key, v, "a boolean (true/false)");
}

std::string fmt(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string fmt(bool b) { return b ? "true" : "false"; }

std::string fmt(const std::set<std::size_t>& s) {
  std::string out;
  for (auto v : s) {
    if (!out.empty()) out += ',';
    out += std::to_string(v);
  }
  return out;
}

struct Entry {
  const char* key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Field binders keep the table one line per key.
template <typename F>
Entry size_key(const char* key, F field) {
  return {key, [field](RunConfig& c, const std::string& k, const std::string& v) {
            field(c) = parse_int<std::size_t>(k, v);
          },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <typename F>
Entry u64_key(const char* key, F field) {
  return {key, [field](RunConfig& c, const std::string& k, const std::string& v) {
            field(c) = parse_int<std::uint64_t>(k, v);
          },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <typename F>
Entry real_key(const char* key, F field) {
  return {key, [field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_real(k, v); },
          [field](const RunConfig& c) { return fmt(field(const_cast<RunConfig&>(c))); }};
}

template <typename F>
Entry bool_key(const char* key, F field) {
  return {key, [field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_bool(k, v); },
          [field](const RunConfig& c) { return fmt(static_cast<bool>(field(const_cast<RunConfig&>(c)))); }};
}

template <typename F>
Entry set_key(const char* key, F field) {
  return {key, [field](RunConfig& c, const std::string&, const std::string& v) { field(c) = parse_index_set(v); },
          [field](const RunConfig& c) { return fmt(field(const_cast<RunConfig&>(c))); }};
}

#define FIELD(expr) [](RunConfig& c) -> auto& { return expr; }

const std::vector<Entry>& table() {
  static const std::vector<Entry> t = [] {
    std::vector<Entry> e;
    // seed drives data generation, initialization and shuffling alike
    e.push_back({"seed",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.train.seed = parse_int<std::uint64_t>(k, v);
                   c.data.seed = c.train.seed;
                 },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    e.push_back(u64_key("curve_seed", FIELD(c.data.curve_seed)));
    e.push_back(size_key("samples", FIELD(c.data.samples)));
    e.push_back(size_key("valid_samples", FIELD(c.valid_samples)));
    e.push_back(size_key("test_samples", FIELD(c.test_samples)));
    // class / band counts are shared by the generator and the model
    e.push_back({"classes",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.data.classes = c.model.num_classes = parse_int<std::size_t>(k, v);
                 },
                 [](const RunConfig& c) { return std::to_string(c.model.num_classes); }});
    e.push_back({"channels",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.data.channels = c.model.input_channels = parse_int<std::size_t>(k, v);
                 },
                 [](const RunConfig& c) { return std::to_string(c.model.input_channels); }});
    e.push_back(size_key("length", FIELD(c.data.length)));
    e.push_back(size_key("height", FIELD(c.data.height)));
    e.push_back(size_key("width", FIELD(c.data.width)));
    e.push_back(real_key("noise", FIELD(c.data.noise)));
    e.push_back(real_key("jitter", FIELD(c.data.jitter)));
    e.push_back(bool_key("variable_length", FIELD(c.data.variable_length)));
    e.push_back(size_key("min_parcels", FIELD(c.data.min_parcels)));
    e.push_back(size_key("max_parcels", FIELD(c.data.max_parcels)));
    e.push_back(size_key("hidden", FIELD(c.model.hidden)));
    e.push_back(size_key("d_state", FIELD(c.model.mamba.d_state)));
    e.push_back(size_key("expand", FIELD(c.model.mamba.expand)));
    e.push_back(size_key("d_conv", FIELD(c.model.mamba.d_conv)));
    e.push_back(size_key("dt_rank", FIELD(c.model.mamba.dt_rank)));
    e.push_back(bool_key("residual_norm", FIELD(c.model.mamba.residual_norm)));
    e.push_back({"mode",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   try {
                     c.model.mode = parse_temporal_mode(v);
                   } catch (const std::exception&) {
                     bad_value(k, v, "pad or sample30");
                   }
                 },
                 [](const RunConfig& c) { return to_string(c.model.mode); }});
    e.push_back(real_key("w0", FIELD(c.model.loss.w0)));
    e.push_back(bool_key("use_pw", FIELD(c.model.loss.use_pw)));
    e.push_back(bool_key("use_w1", FIELD(c.model.loss.use_w1)));
    e.push_back(bool_key("use_rbranch", FIELD(c.model.loss.use_rbranch)));
    e.push_back(set_key("ignore_labels", FIELD(c.model.loss.ignore_labels)));
    e.push_back(size_key("epochs", FIELD(c.train.epochs)));
    e.push_back(real_key("lr", FIELD(c.train.learning_rate)));
    e.push_back(size_key("batch_size", FIELD(c.train.batch_size)));
    e.push_back(size_key("eval_batch_size", FIELD(c.eval_batch_size)));
    e.push_back(bool_key("eval_every_epoch", FIELD(c.train.eval_every_epoch)));
    e.push_back(set_key("eval_classes", FIELD(c.train.eval_classes)));
    e.push_back(real_key("stop_oa", FIELD(c.train.stop_oa)));
    e.push_back(real_key("stop_mf1", FIELD(c.train.stop_mf1)));
    return e;
  }();
  return t;
}

#undef FIELD

const Entry& find(const std::string& key) {
  for (const auto& e : table()) {
    if (key == e.key) return e;
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

std::set<std::size_t> parse_index_set(const std::string& text) {
  std::set<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.insert(parse_int<std::size_t>("index list", item));
  }
  return out;
}

RunConfig::RunConfig() {
  data.samples = 200;
  model.input_channels = data.channels;
  model.num_classes = data.classes;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  find(key).set(*this, key, trim(value));
  explicit_.insert(key);
}

std::string RunConfig::get(const std::string& key) const { return find(key).get(*this); }

bool RunConfig::explicitly_set(const std::string& key) const { return explicit_.count(key) > 0; }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& e : table()) out.emplace_back(e.key);
    return out;
  }();
  return k;
}

void RunConfig::parse(std::istream& in, const std::string& origin) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  parse(in, path.string());
}

void RunConfig::write(std::ostream& out) const {
  for (const auto& e : table()) out << e.key << '=' << e.get(*this) << '\n';
}

void RunConfig::write_manifest(const std::filesystem::path& path, const std::string& command) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# effective configuration of `" << command << "`\n";
  write(out);
}

void RunConfig::finalize() {
  if (!explicitly_set("curve_seed")) data.curve_seed = data.seed;
  if (model.num_classes == 20) {
    // PASTIS-shaped task: 0 background, 19 void
    if (!explicitly_set("ignore_labels")) model.loss.ignore_labels = {19};
    if (!explicitly_set("eval_classes")) {
      train.eval_classes.clear();
      for (std::size_t k = 1; k <= 18; ++k) train.eval_classes.insert(k);
    }
  }
  for (auto k : train.eval_classes) {
    if (k >= model.num_classes) throw ConfigError("config: eval class " + std::to_string(k) + " out of range");
  }
  if (data.classes < 2 || data.length < 1 || data.channels < 1 || data.height < 1 || data.width < 1) {
    throw ConfigError("config: degenerate data extents");
  }
  if (data.noise < 0 || data.jitter < 0) throw ConfigError("config: noise and jitter must be >= 0");
  if (eval_batch_size == 0) throw ConfigError("config: eval_batch_size must be >= 1");
  try {
    model.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace sitsmamba
