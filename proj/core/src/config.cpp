// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <system_error>

namespace qmem {

namespace detail {
struct PresetSource {
  const char* name;
  const char* text;
};
// Generated at configure time from presets/*.toml.
extern const PresetSource kPresets[];
extern const std::size_t kPresetCount;
}  // namespace detail

namespace {

struct Token {
  std::string text;
  bool quoted = false;
};

struct Value {
  bool list = false;
  std::vector<Token> items;
};

[[noreturn]] void fail(std::string_view origin, int line, const std::string& msg) {
  std::ostringstream os;
  os << origin;
  if (line > 0) os << ":" << line;
  os << ": " << msg;
  throw ConfigError(os.str());
}

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

// Strips a trailing comment outside of quotes.
std::string strip_comment(std::string_view line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
    if (line[i] == '#' && !in_str) return std::string(line.substr(0, i));
  }
  return std::string(line);
}

Token parse_scalar(const std::string& s, std::string_view origin, int line) {
  if (s.empty()) fail(origin, line, "missing value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') fail(origin, line, "unterminated string");
    std::string out;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
      if (s[i] == '\\' && i + 2 < s.size()) {
        const char c = s[++i];
        out += c == 'n' ? '\n' : c == 't' ? '\t' : c;
      } else if (s[i] == '"') {
        fail(origin, line, "stray quote in string");
      } else {
        out += s[i];
      }
    }
    return {out, true};
  }
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c)) || c == '[' || c == ']' || c == ',') {
      fail(origin, line, "malformed value '" + s + "'");
    }
  }
  return {s, false};
}

Value parse_value(const std::string& s, std::string_view origin, int line) {
  Value v;
  if (!s.empty() && s.front() == '[') {
    if (s.back() != ']') fail(origin, line, "unterminated array");
    v.list = true;
    const std::string body = s.substr(1, s.size() - 2);
    std::string cur;
    bool in_str = false;
    auto flush = [&](bool final) {
      const std::string t = trim(cur);
      if (t.empty()) {
        if (!final) fail(origin, line, "empty array element");
      } else {
        v.items.push_back(parse_scalar(t, origin, line));
      }
      cur.clear();
    };
    for (std::size_t i = 0; i < body.size(); ++i) {
      const char c = body[i];
      if (c == '"' && (i == 0 || body[i - 1] != '\\')) in_str = !in_str;
      if (c == ',' && !in_str) {
        flush(false);
      } else {
        cur += c;
      }
    }
    if (in_str) fail(origin, line, "unterminated string");
    flush(true);
    return v;
  }
  v.items.push_back(parse_scalar(s, origin, line));
  return v;
}

// --- typed conversions -------------------------------------------------------

const Token& scalar(const Value& v, const std::string& key) {
  if (v.list || v.items.size() != 1) throw ConfigError(key + ": expected a single value");
  return v.items[0];
}

long long to_int(const Token& t, const std::string& key) {
  if (t.quoted) throw ConfigError(key + ": expected an integer, got a string");
  long long x = 0;
  const char* end = t.text.data() + t.text.size();
  const auto [p, ec] = std::from_chars(t.text.data(), end, x);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected an integer, got '" + t.text + "'");
  return x;
}

int to_int32(const Token& t, const std::string& key) {
  const long long x = to_int(t, key);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
    throw ConfigError(key + ": integer out of range");
  }
  return static_cast<int>(x);
}

double to_double(const Token& t, const std::string& key) {
  if (t.quoted) throw ConfigError(key + ": expected a number, got a string");
  if (t.text == "inf" || t.text == "+inf") return std::numeric_limits<double>::infinity();
  if (t.text == "-inf") return -std::numeric_limits<double>::infinity();
  double x = 0.0;
  const char* begin = t.text.data();
  if (!t.text.empty() && t.text.front() == '+') ++begin;
  const char* end = t.text.data() + t.text.size();
  const auto [p, ec] = std::from_chars(begin, end, x);
  if (ec != std::errc() || p != end || std::isnan(x)) {
    throw ConfigError(key + ": expected a number, got '" + t.text + "'");
  }
  return x;
}

bool to_bool(const Token& t, const std::string& key) {
  if (!t.quoted && t.text == "true") return true;
  if (!t.quoted && t.text == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + t.text + "'");
}

std::string to_string(const Token& t, const std::string& key) {
  if (!t.quoted) throw ConfigError(key + ": expected a quoted string, got '" + t.text + "'");
  return t.text;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F fmt) {
  std::string out = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ", ";
    out += fmt(xs[i]);
  }
  return out + "]";
}

// --- key table ---------------------------------------------------------------

struct Field {
  std::string key;
  std::function<void(RunConfig&, const Value&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Acc>
Field int_field(std::string key, Acc acc) {
  return {std::move(key),
          [acc](RunConfig& c, const Value& v, const std::string& k) { acc(c) = to_int32(scalar(v, k), k); },
          [acc](const RunConfig& c) { return std::to_string(acc(const_cast<RunConfig&>(c))); }};
}

template <typename Acc>
Field double_field(std::string key, Acc acc) {
  return {std::move(key),
          [acc](RunConfig& c, const Value& v, const std::string& k) { acc(c) = to_double(scalar(v, k), k); },
          [acc](const RunConfig& c) { return format_double(acc(const_cast<RunConfig&>(c))); }};
}

template <typename Acc>
Field bool_field(std::string key, Acc acc) {
  return {std::move(key),
          [acc](RunConfig& c, const Value& v, const std::string& k) { acc(c) = to_bool(scalar(v, k), k); },
          [acc](const RunConfig& c) { return std::string(acc(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <typename Acc>
Field int_list_field(std::string key, Acc acc) {
  return {std::move(key),
          [acc](RunConfig& c, const Value& v, const std::string& k) {
            std::vector<int> xs;
            for (const Token& t : v.items) xs.push_back(to_int32(t, k));
            acc(c) = std::move(xs);
          },
          [acc](const RunConfig& c) {
            return join(acc(const_cast<RunConfig&>(c)), [](int x) { return std::to_string(x); });
          }};
}

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

template <typename Acc, typename E, std::size_t N>
Field enum_field(std::string key, Acc acc, const EnumName<E> (&names)[N]) {
  std::vector<EnumName<E>> table(names, names + N);
  return {std::move(key),
          [acc, table](RunConfig& c, const Value& v, const std::string& k) {
            const std::string s = to_string(scalar(v, k), k);
            for (const auto& e : table) {
              if (s == e.name) {
                acc(c) = e.value;
                return;
              }
            }
            throw ConfigError(k + ": unknown value '" + s + "'");
          },
          [acc, table](const RunConfig& c) {
            const E cur = acc(const_cast<RunConfig&>(c));
            for (const auto& e : table) {
              if (e.value == cur) return quote(e.name);
            }
            return quote("?");
          }};
}

constexpr EnumName<BackboneKind> kBackbones[] = {{BackboneKind::kMlp, "mlp"},
                                                 {BackboneKind::kTinyTransformer, "transformer"}};
constexpr EnumName<RoutingMode> kRoutings[] = {{RoutingMode::kPerExample, "per_example"},
                                               {RoutingMode::kBatchMean, "batch_mean"}};

#define QMEM_ACC(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    // model
    f.push_back(enum_field("model.backbone", QMEM_ACC(protocol.model.backbone), kBackbones));
    f.push_back(enum_field("model.routing", QMEM_ACC(protocol.model.routing), kRoutings));
    f.push_back(int_field("model.depth", QMEM_ACC(protocol.model.depth)));
    f.push_back(int_field("model.width", QMEM_ACC(protocol.model.width)));
    f.push_back(int_field("model.rank", QMEM_ACC(protocol.model.rank)));
    f.push_back(int_field("model.atoms", QMEM_ACC(protocol.model.atoms)));
    f.push_back(int_field("model.k_active", QMEM_ACC(protocol.model.k_active)));
    f.push_back(int_field("model.blocks", QMEM_ACC(protocol.model.blocks)));
    f.push_back(int_field("model.d_k", QMEM_ACC(protocol.model.d_k)));
    f.push_back(int_field("model.d_c", QMEM_ACC(protocol.model.d_c)));
    f.push_back(double_field("model.alpha_L", QMEM_ACC(protocol.model.alpha_L)));
    f.push_back(double_field("model.T_attn", QMEM_ACC(protocol.model.T_attn)));
    f.push_back(double_field("model.T_lang", QMEM_ACC(protocol.model.T_lang)));
    f.push_back(double_field("model.T_dep", QMEM_ACC(protocol.model.T_dep)));
    f.push_back(double_field("model.tau_lang", QMEM_ACC(protocol.model.tau_lang)));
    f.push_back(double_field("model.lambda_ctx", QMEM_ACC(protocol.model.lambda_ctx)));
    f.push_back(double_field("model.eta_init", QMEM_ACC(protocol.model.eta_init)));
    f.push_back(double_field("model.dropout", QMEM_ACC(protocol.model.dropout)));
    f.push_back(bool_field("model.gate_clamped", QMEM_ACC(protocol.model.gate_clamped)));
    f.push_back(double_field("model.atom_clip", QMEM_ACC(protocol.model.atom_clip)));
    // schedule
    f.push_back(int_field("schedule.pretrain_epochs", QMEM_ACC(protocol.schedule.pretrain_epochs)));
    f.push_back(double_field("schedule.pretrain_lr", QMEM_ACC(protocol.schedule.pretrain_lr)));
    f.push_back(int_field("schedule.post_epochs", QMEM_ACC(protocol.schedule.post_epochs)));
    f.push_back(double_field("schedule.post_lr", QMEM_ACC(protocol.schedule.post_lr)));
    f.push_back(int_field("schedule.batch_size", QMEM_ACC(protocol.schedule.batch_size)));
    f.push_back(double_field("schedule.weight_decay", QMEM_ACC(protocol.schedule.weight_decay)));
    f.push_back(int_field("schedule.eval_every", QMEM_ACC(protocol.schedule.eval_every)));
    f.push_back(double_field("schedule.divergence", QMEM_ACC(protocol.schedule.divergence)));
    f.push_back(double_field("schedule.grad_clip", QMEM_ACC(protocol.schedule.grad_clip)));
    f.push_back(bool_field("schedule.project_atoms", QMEM_ACC(protocol.schedule.project_atoms)));
    f.push_back(double_field("schedule.atom_radius", QMEM_ACC(protocol.schedule.atom_radius)));
    // data
    f.push_back(int_field("data.n_source", QMEM_ACC(protocol.n_source)));
    f.push_back(double_field("data.source_train_fraction", QMEM_ACC(protocol.source_train_fraction)));
    f.push_back(int_field("data.n_target", QMEM_ACC(protocol.n_target)));
    f.push_back(int_field("data.n_adapt", QMEM_ACC(protocol.n_adapt)));
    f.push_back(double_field("data.noise_sd", QMEM_ACC(protocol.noise_sd)));
    f.push_back(double_field("data.theta", QMEM_ACC(protocol.theta)));
    f.push_back(double_field("data.scale_lo", QMEM_ACC(protocol.scale_lo)));
    f.push_back(double_field("data.scale_hi", QMEM_ACC(protocol.scale_hi)));
    f.push_back(bool_field("data.use_instruction", QMEM_ACC(protocol.use_instruction)));
    // bench
    f.push_back({"bench.functions",
                 [](RunConfig& c, const Value& v, const std::string& k) {
                   std::vector<std::string> xs;
                   for (const Token& t : v.items) xs.push_back(resolve_function(to_string(t, k)));
                   c.functions = std::move(xs);
                 },
                 [](const RunConfig& c) { return join(c.functions, quote); }});
    f.push_back({"bench.methods",
                 [](RunConfig& c, const Value& v, const std::string& k) {
                   std::vector<Method> xs;
                   for (const Token& t : v.items) {
                     try {
                       xs.push_back(parse_method(to_string(t, k)));
                     } catch (const ConfigError&) {
                       throw;
                     } catch (const Error& e) {
                       throw ConfigError(k + ": " + e.what());
                     }
                   }
                   c.methods = std::move(xs);
                 },
                 [](const RunConfig& c) {
                   return join(c.methods, [](Method m) { return quote(method_name(m)); });
                 }});
    f.push_back({"bench.seeds",
                 [](RunConfig& c, const Value& v, const std::string& k) {
                   std::vector<std::uint64_t> xs;
                   for (const Token& t : v.items) {
                     const long long s = to_int(t, k);
                     if (s < 0) throw ConfigError(k + ": seeds must be non-negative");
                     xs.push_back(static_cast<std::uint64_t>(s));
                   }
                   c.seeds = std::move(xs);
                 },
                 [](const RunConfig& c) {
                   return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); });
                 }});
    // theory
    f.push_back(int_field("theory.trials", QMEM_ACC(theory.trials)));
    f.push_back({"theory.only",
                 [](RunConfig& c, const Value& v, const std::string& k) {
                   std::vector<std::string> xs;
                   for (const Token& t : v.items) xs.push_back(to_string(t, k));
                   c.theory.only = std::move(xs);
                 },
                 [](const RunConfig& c) { return join(c.theory.only, quote); }});
    f.push_back(double_field("theory.atom_radius", QMEM_ACC(theory.atom_radius)));
    f.push_back(double_field("theory.inject_atom_norm", QMEM_ACC(theory.inject_atom_norm)));
    // sweep
    f.push_back(int_list_field("sweep.rank", QMEM_ACC(sweep.rank)));
    f.push_back(int_list_field("sweep.atoms", QMEM_ACC(sweep.atoms)));
    f.push_back(int_list_field("sweep.k_active", QMEM_ACC(sweep.k_active)));
    // drift
    f.push_back({"drift.function",
                 [](RunConfig& c, const Value& v, const std::string& k) {
                   c.drift.function = resolve_function(to_string(scalar(v, k), k));
                 },
                 [](const RunConfig& c) { return quote(c.drift.function); }});
    f.push_back(bool_field("drift.repeat", QMEM_ACC(drift.repeat)));
    f.push_back(int_field("drift.epochs", QMEM_ACC(drift.epochs)));
    f.push_back(int_field("drift.n_source", QMEM_ACC(drift.n_source)));
    f.push_back(int_field("drift.n_train", QMEM_ACC(drift.n_train)));
    f.push_back(int_field("drift.n_eval", QMEM_ACC(drift.n_eval)));
    return f;
  }();
  return table;
}

#undef QMEM_ACC

const Field* find_field(const std::string& key) {
  for (const Field& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

void assign(RunConfig& cfg, const std::string& key, const Value& v, std::string_view origin, int line) {
  const Field* f = find_field(key);
  if (!f) fail(origin, line, "unknown key '" + key + "'");
  try {
    f->set(cfg, v, key);
  } catch (const ConfigError& e) {
    fail(origin, line, e.what());
  }
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

}  // namespace

std::string format_double(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  std::string s(buf, p);
  // Keep a decimal point or exponent so the value reads back as a float.
  if (s.find_first_of(".en") == std::string::npos) s += ".0";
  return s;
}

std::string resolve_function(const std::string& name) {
  auto squash = [](const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '-' || c == '_' || c == ' ') continue;
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
  };
  const std::string want = squash(name);
  for (const std::string& f : function_names()) {
    if (squash(f) == want) return f;
  }
  std::string all;
  for (const std::string& f : function_names()) all += (all.empty() ? "" : ", ") + f;
  throw ConfigError("unknown function '" + name + "' (known: " + all + ")");
}

void apply_config_text(RunConfig& cfg, std::string_view text, std::string_view origin) {
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(strip_comment(raw));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') fail(origin, line, "malformed section header");
      section = trim(std::string_view(s).substr(1, s.size() - 2));
      if (!valid_name(section)) fail(origin, line, "malformed section name '" + section + "'");
      continue;
    }
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos) fail(origin, line, "expected key = value");
    const std::string key = trim(std::string_view(s).substr(0, eq));
    if (!valid_name(key)) fail(origin, line, "malformed key '" + key + "'");
    const std::string full = section.empty() ? key : section + "." + key;
    if (auto it = seen.find(full); it != seen.end()) {
      fail(origin, line, "duplicate key '" + full + "' (first set on line " + std::to_string(it->second) + ")");
    }
    seen[full] = line;
    assign(cfg, full, parse_value(trim(std::string_view(s).substr(eq + 1)), origin, line), origin, line);
  }
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "': expected section.key=value");
  const std::string key = trim(std::string_view(assignment).substr(0, eq));
  const std::string val = trim(std::string_view(assignment).substr(eq + 1));
  assign(cfg, key, parse_value(val, "override", 0), "override", 0);
}

std::string config_to_text(const RunConfig& cfg) {
  std::ostringstream os;
  os << "# resolved qmem configuration\n";
  if (!cfg.preset.empty()) os << "# preset: " << cfg.preset << "\n";
  std::string section;
  for (const Field& f : fields()) {
    const std::size_t dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << f.key.substr(dot + 1) << " = " << f.get(cfg) << "\n";
  }
  return os.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const Field& f : fields()) out.push_back(f.key);
  return out;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < detail::kPresetCount; ++i) out.emplace_back(detail::kPresets[i].name);
  return out;
}

const std::string& preset_text(const std::string& name) {
  static const std::map<std::string, std::string> texts = [] {
    std::map<std::string, std::string> m;
    for (std::size_t i = 0; i < detail::kPresetCount; ++i) m[detail::kPresets[i].name] = detail::kPresets[i].text;
    return m;
  }();
  const auto it = texts.find(name);
  if (it == texts.end()) {
    std::string all;
    for (const auto& [n, t] : texts) all += (all.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (available: " + all + ")");
  }
  return it->second;
}

RunConfig load_preset(const std::string& name_or_path) {
  RunConfig cfg;
  cfg.functions = function_names();
  std::error_code ec;
  if (std::filesystem::is_regular_file(name_or_path, ec)) {
    std::ifstream in(name_or_path, std::ios::binary);
    if (!in) throw ConfigError("cannot read preset file '" + name_or_path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    cfg.preset = std::filesystem::path(name_or_path).stem().string();
    apply_config_text(cfg, buf.str(), name_or_path);
    return cfg;
  }
  const std::string& text = preset_text(name_or_path);
  cfg.preset = name_or_path;
  apply_config_text(cfg, text, "preset " + name_or_path);
  return cfg;
}

void RunConfig::validate() const {
  try {
    protocol.model.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  const ProtocolConfig& p = protocol;
  const TrainSchedule& s = p.schedule;
  if (p.model.backbone != BackboneKind::kMlp) {
    throw ConfigError("model.backbone: only \"mlp\" supports training");
  }
  if (p.model.in_dim != 2 || p.model.out_dim != 1) throw ConfigError("model: benchmarks are 2-d to scalar");
  if (s.pretrain_epochs < 0 || s.post_epochs < 0) throw ConfigError("schedule: epochs must be >= 0");
  if (!(s.pretrain_lr > 0.0) || !(s.post_lr > 0.0)) throw ConfigError("schedule: learning rates must be positive");
  if (s.batch_size < 1) throw ConfigError("schedule.batch_size must be >= 1");
  if (s.weight_decay < 0.0) throw ConfigError("schedule.weight_decay must be >= 0");
  if (s.eval_every < 1) throw ConfigError("schedule.eval_every must be >= 1");
  if (!(s.divergence > 0.0)) throw ConfigError("schedule.divergence must be positive");
  if (s.grad_clip < 0.0) throw ConfigError("schedule.grad_clip must be >= 0");
  if (!(s.atom_radius > 0.0)) throw ConfigError("schedule.atom_radius must be positive");
  if (p.n_source < 2) throw ConfigError("data.n_source must be >= 2");
  if (!(p.source_train_fraction > 0.0 && p.source_train_fraction < 1.0)) {
    throw ConfigError("data.source_train_fraction must lie in (0, 1)");
  }
  if (p.n_adapt < 1 || p.n_target <= p.n_adapt) throw ConfigError("data: need 1 <= n_adapt < n_target");
  if (p.noise_sd < 0.0) throw ConfigError("data.noise_sd must be >= 0");
  if (!(p.scale_lo > 0.0 && p.scale_lo <= p.scale_hi)) throw ConfigError("data: need 0 < scale_lo <= scale_hi");
  if (!std::isfinite(p.theta)) throw ConfigError("data.theta must be finite");
  if (functions.empty()) throw ConfigError("bench.functions must not be empty");
  if (methods.empty()) throw ConfigError("bench.methods must not be empty");
  if (seeds.empty()) throw ConfigError("bench.seeds must not be empty");
  auto unique = [](auto xs) {
    std::sort(xs.begin(), xs.end());
    return std::adjacent_find(xs.begin(), xs.end()) == xs.end();
  };
  if (!unique(functions)) throw ConfigError("bench.functions has duplicates");
  if (!unique(methods)) throw ConfigError("bench.methods has duplicates");
  if (!unique(seeds)) throw ConfigError("bench.seeds has duplicates");
  if (theory.trials < 1) throw ConfigError("theory.trials must be >= 1");
  for (const std::string& n : theory.only) {
    const auto& all = theory_check_names();
    if (std::find(all.begin(), all.end(), n) == all.end()) {
      throw ConfigError("theory.only: unknown check '" + n + "'");
    }
  }
  if (theory.atom_radius < 0.0 || theory.inject_atom_norm < 0.0) {
    throw ConfigError("theory: atom_radius and inject_atom_norm must be >= 0");
  }
  for (const auto* grid : {&sweep.rank, &sweep.atoms, &sweep.k_active}) {
    if (grid->empty()) throw ConfigError("sweep: grid axes must not be empty");
    for (int v : *grid) {
      if (v < 1) throw ConfigError("sweep: grid values must be >= 1");
    }
  }
  if (drift.epochs < 0) throw ConfigError("drift.epochs must be >= 0");
  if (drift.n_source < 2 || drift.n_train < 1 || drift.n_eval < 1) {
    throw ConfigError("drift: sample counts must be positive");
  }
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
}

}  // namespace qmem
