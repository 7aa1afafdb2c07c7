// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "qmem/config.hpp"

namespace qmem {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& content) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

namespace {

ordered_json num(double x) {
  if (std::isfinite(x)) return x;
  return format_double(x);
}

double get_num(const ordered_json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw IoError("expected a number, got " + j.dump());
}

ordered_json num_array(const std::vector<double>& xs) {
  ordered_json a = ordered_json::array();
  for (double x : xs) a.push_back(num(x));
  return a;
}

std::vector<double> get_num_array(const ordered_json& j) {
  std::vector<double> out;
  for (const auto& e : j) out.push_back(get_num(e));
  return out;
}

ordered_json config_obj(const ModelConfig& c) {
  ordered_json j;
  j["backbone"] = c.backbone == BackboneKind::kMlp ? "mlp" : "transformer";
  j["method"] = method_name(c.method);
  j["routing"] = c.routing == RoutingMode::kPerExample ? "per_example" : "batch_mean";
  j["in_dim"] = c.in_dim;
  j["out_dim"] = c.out_dim;
  j["depth"] = c.depth;
  j["width"] = c.width;
  j["rank"] = c.rank;
  j["atoms"] = c.atoms;
  j["k_active"] = c.k_active;
  j["blocks"] = c.blocks;
  j["d_k"] = c.d_k;
  j["d_c"] = c.d_c;
  j["alpha_L"] = num(c.alpha_L);
  j["T_attn"] = num(c.T_attn);
  j["T_lang"] = num(c.T_lang);
  j["T_dep"] = num(c.T_dep);
  j["tau_lang"] = num(c.tau_lang);
  j["lambda_ctx"] = num(c.lambda_ctx);
  j["eta_init"] = num(c.eta_init);
  j["dropout"] = num(c.dropout);
  j["gate_clamped"] = c.gate_clamped;
  j["atom_clip"] = num(c.atom_clip);
  j["seed"] = c.seed;
  return j;
}

ModelConfig config_from(const ordered_json& j) {
  ModelConfig c;
  const std::string bb = j.at("backbone").get<std::string>();
  if (bb == "mlp") {
    c.backbone = BackboneKind::kMlp;
  } else if (bb == "transformer") {
    c.backbone = BackboneKind::kTinyTransformer;
  } else {
    throw IoError("unknown backbone '" + bb + "'");
  }
  c.method = parse_method(j.at("method").get<std::string>());
  const std::string routing = j.at("routing").get<std::string>();
  if (routing == "per_example") {
    c.routing = RoutingMode::kPerExample;
  } else if (routing == "batch_mean") {
    c.routing = RoutingMode::kBatchMean;
  } else {
    throw IoError("unknown routing '" + routing + "'");
  }
  c.in_dim = j.at("in_dim").get<int>();
  c.out_dim = j.at("out_dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.width = j.at("width").get<int>();
  c.rank = j.at("rank").get<int>();
  c.atoms = j.at("atoms").get<int>();
  c.k_active = j.at("k_active").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.d_k = j.at("d_k").get<int>();
  c.d_c = j.at("d_c").get<int>();
  c.alpha_L = get_num(j.at("alpha_L"));
  c.T_attn = get_num(j.at("T_attn"));
  c.T_lang = get_num(j.at("T_lang"));
  c.T_dep = get_num(j.at("T_dep"));
  c.tau_lang = get_num(j.at("tau_lang"));
  c.lambda_ctx = get_num(j.at("lambda_ctx"));
  c.eta_init = get_num(j.at("eta_init"));
  c.dropout = get_num(j.at("dropout"));
  c.gate_clamped = j.at("gate_clamped").get<bool>();
  c.atom_clip = get_num(j.at("atom_clip"));
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// Pointers into a model's tensors, in checkpoint order.
struct TensorSlot {
  std::string name;
  Mat* mat = nullptr;
  Vec* vec = nullptr;
  double* scalar = nullptr;
};

template <typename M, typename B>
std::vector<TensorSlot> slots(M& model, B* backbone) {
  std::vector<TensorSlot> s;
  auto mat = [&](std::string n, Mat& m) { s.push_back({std::move(n), &m, nullptr, nullptr}); };
  auto vec = [&](std::string n, Vec& v) { s.push_back({std::move(n), nullptr, &v, nullptr}); };
  if (backbone) {
    for (std::size_t i = 0; i < backbone->W.size(); ++i) {
      mat("backbone.W." + std::to_string(i), backbone->W[i]);
      vec("backbone.b." + std::to_string(i), backbone->b[i]);
    }
    mat("backbone.head_W", backbone->head_W);
    vec("backbone.head_b", backbone->head_b);
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    AdapterLayer& l = model.layers[i];
    mat("adapter.A." + std::to_string(i), l.A);
    mat("adapter.B." + std::to_string(i), l.B);
    s.push_back({"adapter.eta." + std::to_string(i), nullptr, nullptr, &l.eta});
  }
  for (std::size_t m = 0; m < model.bank.atoms.size(); ++m) {
    mat("bank.atom." + std::to_string(m), model.bank.atoms[m]);
    vec("bank.key." + std::to_string(m), model.bank.keys[m]);
  }
  RouterParams& r = model.router;
  mat("router.Q_cur", r.Q_cur);
  mat("router.Q_dep", r.Q_dep);
  mat("router.Q_ctx", r.Q_ctx);
  mat("router.R_ctx", r.R_ctx);
  mat("router.Q_dep_q", r.Q_dep_q);
  mat("router.Q_dep_k", r.Q_dep_k);
  for (std::size_t b = 0; b < r.layer_priors.size(); ++b) {
    vec("router.prior." + std::to_string(b), r.layer_priors[b]);
  }
  return s;
}

Mat slot_value(const TensorSlot& s) {
  if (s.mat) return *s.mat;
  if (s.vec) return Mat(*s.vec);
  return Mat::Constant(1, 1, *s.scalar);
}

void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((x >> (8 * i)) & 0xff);
}
void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((x >> (8 * i)) & 0xff);
}

std::uint64_t get_le(const std::string& in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw IoError("checkpoint: truncated");
  std::uint64_t x = 0;
  for (int i = 0; i < bytes; ++i) {
    x |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
  }
  pos += static_cast<std::size_t>(bytes);
  return x;
}

}  // namespace

std::vector<NamedTensor> checkpoint_tensors(const Model& model) {
  if (model.config.backbone != BackboneKind::kMlp || !model.backbone) {
    throw IoError("checkpoint: only MLP-backbone models are supported");
  }
  Model& m = const_cast<Model&>(model);
  Backbone& bb = const_cast<Backbone&>(*model.backbone);
  std::vector<NamedTensor> out;
  for (const TensorSlot& s : slots(m, &bb)) out.push_back({s.name, slot_value(s)});
  return out;
}

std::string checkpoint_bytes(const Model& model) {
  const std::vector<NamedTensor> tensors = checkpoint_tensors(model);
  ordered_json header;
  header["format"] = "qmem.checkpoint";
  header["version"] = kCheckpointVersion;
  header["model"] = config_obj(model.config);
  header["bank_seed"] = model.bank.seed;
  ordered_json table = ordered_json::array();
  for (const NamedTensor& t : tensors) {
    table.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
  }
  header["tensors"] = table;
  const std::string h = header.dump();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, 0);
  put_u64(out, h.size());
  out += h;
  for (const NamedTensor& t : tensors) {
    for (Eigen::Index i = 0; i < t.value.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.value.cols(); ++j) {
        std::uint64_t bits = 0;
        const double x = t.value(i, j);
        std::memcpy(&bits, &x, sizeof(bits));
        put_u64(out, bits);
      }
    }
  }
  return out;
}

Model checkpoint_from_bytes(const std::string& bytes) {
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw IoError("checkpoint: bad magic");
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  const auto version = static_cast<std::uint32_t>(get_le(bytes, pos, 4));
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  get_le(bytes, pos, 4);
  const std::uint64_t hlen = get_le(bytes, pos, 8);
  if (hlen > bytes.size() - pos) throw IoError("checkpoint: truncated header");
  ordered_json header;
  try {
    header = ordered_json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad header: ") + e.what());
  }
  pos += hlen;

  ModelConfig cfg;
  try {
    cfg = config_from(header.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad model config: ") + e.what());
  }
  if (cfg.backbone != BackboneKind::kMlp) throw IoError("checkpoint: only MLP-backbone models are supported");
  cfg.validate();

  auto backbone = std::make_shared<Backbone>(Backbone::init(cfg.in_dim, cfg.width, cfg.depth, cfg.out_dim, 0));
  Model model = Model::build(cfg, backbone);
  std::vector<TensorSlot> want = slots(model, backbone.get());
  const ordered_json& table = header.at("tensors");
  if (table.size() != want.size()) throw IoError("checkpoint: tensor count mismatch");
  for (std::size_t t = 0; t < want.size(); ++t) {
    const TensorSlot& s = want[t];
    const ordered_json& e = table[t];
    const Mat cur = slot_value(s);
    if (e.at("name").get<std::string>() != s.name || e.at("rows").get<Eigen::Index>() != cur.rows() ||
        e.at("cols").get<Eigen::Index>() != cur.cols()) {
      throw IoError("checkpoint: tensor " + std::to_string(t) + " does not match " + s.name);
    }
    Mat v(cur.rows(), cur.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      for (Eigen::Index j = 0; j < v.cols(); ++j) {
        const std::uint64_t bits = get_le(bytes, pos, 8);
        double x = 0.0;
        std::memcpy(&x, &bits, sizeof(x));
        v(i, j) = x;
      }
    }
    if (s.mat) {
      *s.mat = v;
    } else if (s.vec) {
      *s.vec = v.col(0);
    } else {
      *s.scalar = v(0, 0);
    }
  }
  if (pos != bytes.size()) throw IoError("checkpoint: trailing bytes");
  model.bank.seed = header.value("bank_seed", std::uint64_t{0});
  model.backbone = backbone;
  model.validate();
  return model;
}

void save_checkpoint(const Model& model, const fs::path& path) { write_file(path, checkpoint_bytes(model)); }

Model load_checkpoint(const fs::path& path) { return checkpoint_from_bytes(read_file(path)); }

// --- reports -------------------------------------------------------------------

std::string model_config_json(const ModelConfig& cfg) { return config_obj(cfg).dump(2) + "\n"; }

ModelConfig model_config_from_json(const std::string& text) { return config_from(ordered_json::parse(text)); }

namespace {

ordered_json epochs_json(const std::vector<EpochRecord>& rows) {
  ordered_json a = ordered_json::array();
  for (const EpochRecord& r : rows) {
    ordered_json e;
    e["epoch"] = r.epoch;
    e["split"] = r.split;
    e["mse"] = num(r.mse);
    e["grad_concentration"] = num(r.grad_concentration);
    e["layer_grad_norms"] = num_array(r.layer_grad_norms);
    e["block_entropy"] = num_array(r.block_entropy);
    a.push_back(e);
  }
  return a;
}

std::vector<EpochRecord> epochs_from(const ordered_json& a) {
  std::vector<EpochRecord> out;
  for (const auto& e : a) {
    EpochRecord r;
    r.epoch = e.at("epoch").get<int>();
    r.split = e.at("split").get<std::string>();
    r.mse = get_num(e.at("mse"));
    r.grad_concentration = get_num(e.at("grad_concentration"));
    r.layer_grad_norms = get_num_array(e.at("layer_grad_norms"));
    r.block_entropy = get_num_array(e.at("block_entropy"));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

std::string run_record_json(const RunRecord& rec) {
  ordered_json j;
  j["format"] = "qmem.run";
  j["version"] = 1;
  j["function"] = rec.function;
  j["method"] = rec.method;
  j["seed"] = rec.seed;
  j["best_train_mse"] = num(rec.best_train_mse);
  j["best_test_mse"] = num(rec.best_test_mse);
  j["diverged"] = rec.diverged;
  j["shift"] = {{"coeff_scale", num_array(rec.shift.coeff_scale)},
                {"theta", num(rec.shift.theta)},
                {"seed", rec.shift.seed}};
  const RunReport& r = rec.report;
  ordered_json rep;
  rep["method"] = r.method;
  rep["diverged"] = r.diverged;
  rep["diverged_epoch"] = r.diverged_epoch;
  rep["best_train_mse"] = num(r.best_train_mse);
  rep["best_test_mse"] = num(r.best_test_mse);
  rep["final_train_mse"] = num(r.final_train_mse);
  rep["final_test_mse"] = num(r.final_test_mse);
  rep["atom_usage"] = num_array(r.atom_usage);
  rep["pretrain"] = epochs_json(r.pretrain);
  rep["post"] = epochs_json(r.post);
  j["report"] = rep;
  return j.dump(1) + "\n";
}

RunRecord run_record_from_json(const std::string& text) {
  try {
    const ordered_json j = ordered_json::parse(text);
    if (j.value("format", "") != "qmem.run") throw IoError("not a qmem run record");
    RunRecord rec;
    rec.function = j.at("function").get<std::string>();
    rec.method = j.at("method").get<std::string>();
    rec.seed = j.at("seed").get<std::uint64_t>();
    rec.best_train_mse = get_num(j.at("best_train_mse"));
    rec.best_test_mse = get_num(j.at("best_test_mse"));
    rec.diverged = j.at("diverged").get<bool>();
    const ordered_json& sh = j.at("shift");
    rec.shift.coeff_scale = get_num_array(sh.at("coeff_scale"));
    rec.shift.theta = get_num(sh.at("theta"));
    rec.shift.seed = sh.at("seed").get<std::uint64_t>();
    const ordered_json& rep = j.at("report");
    RunReport& r = rec.report;
    r.method = rep.at("method").get<std::string>();
    r.diverged = rep.at("diverged").get<bool>();
    r.diverged_epoch = rep.at("diverged_epoch").get<int>();
    r.best_train_mse = get_num(rep.at("best_train_mse"));
    r.best_test_mse = get_num(rep.at("best_test_mse"));
    r.final_train_mse = get_num(rep.at("final_train_mse"));
    r.final_test_mse = get_num(rep.at("final_test_mse"));
    r.atom_usage = get_num_array(rep.at("atom_usage"));
    r.pretrain = epochs_from(rep.at("pretrain"));
    r.post = epochs_from(rep.at("post"));
    return rec;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad run record: ") + e.what());
  }
}

std::string epochs_csv(const RunReport& report) {
  std::size_t blocks = 0, layers = 0;
  for (const auto* rows : {&report.pretrain, &report.post}) {
    for (const EpochRecord& r : *rows) {
      blocks = std::max(blocks, r.block_entropy.size());
      layers = std::max(layers, r.layer_grad_norms.size());
    }
  }
  std::ostringstream os;
  os << "stage,epoch,split,mse,grad_concentration";
  for (std::size_t b = 0; b < blocks; ++b) os << ",route_entropy_b" << b;
  for (std::size_t l = 0; l < layers; ++l) os << ",grad_norm_l" << l;
  os << "\n";
  auto emit = [&](const char* stage, const std::vector<EpochRecord>& rows) {
    for (const EpochRecord& r : rows) {
      os << stage << "," << r.epoch << "," << r.split << "," << format_double(r.mse) << ","
         << format_double(r.grad_concentration);
      for (std::size_t b = 0; b < blocks; ++b) {
        os << ",";
        if (b < r.block_entropy.size()) os << format_double(r.block_entropy[b]);
      }
      for (std::size_t l = 0; l < layers; ++l) {
        os << ",";
        if (l < r.layer_grad_norms.size()) os << format_double(r.layer_grad_norms[l]);
      }
      os << "\n";
    }
  };
  emit("pretrain", report.pretrain);
  emit("post", report.post);
  return os.str();
}

std::string table_csv(const BenchmarkTable& table, const std::string& split) {
  if (split != "train" && split != "test") throw Error("table_csv: split must be train or test");
  const bool train = split == "train";
  std::ostringstream os;
  os << "function,method,mean,sd,runs\n";
  for (const TableRow& r : table.rows) {
    os << r.function << "," << r.method << "," << format_double(train ? r.train_mean : r.test_mean) << ","
       << format_double(train ? r.train_sd : r.test_sd) << "," << r.runs << "\n";
  }
  return os.str();
}

std::string table_json(const BenchmarkTable& table) {
  ordered_json j;
  j["format"] = "qmem.table";
  j["version"] = 1;
  ordered_json rows = ordered_json::array();
  for (const TableRow& r : table.rows) {
    rows.push_back({{"function", r.function},
                    {"method", r.method},
                    {"runs", r.runs},
                    {"train", {{"mean", num(r.train_mean)}, {"sd", num(r.train_sd)}}},
                    {"test", {{"mean", num(r.test_mean)}, {"sd", num(r.test_sd)}}}});
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

std::string grad_profile_csv(const GradProfile& p) {
  std::size_t layers = 0;
  for (const auto& n : p.layer_norms) layers = std::max(layers, n.size());
  std::ostringstream os;
  os << "epoch,concentration";
  for (std::size_t l = 0; l < layers; ++l) os << ",grad_norm_l" << l;
  os << "\n";
  for (std::size_t e = 0; e < p.epochs.size(); ++e) {
    os << p.epochs[e] << "," << format_double(p.concentration[e]);
    for (std::size_t l = 0; l < layers; ++l) {
      os << ",";
      if (l < p.layer_norms[e].size()) os << format_double(p.layer_norms[e][l]);
    }
    os << "\n";
  }
  return os.str();
}

std::string matrix_csv(const Mat& m, const std::vector<std::string>& row_labels,
                       const std::vector<std::string>& col_labels, const std::string& corner) {
  if (static_cast<Eigen::Index>(row_labels.size()) != m.rows() ||
      static_cast<Eigen::Index>(col_labels.size()) != m.cols()) {
    throw ShapeError("matrix_csv: label count does not match the matrix");
  }
  std::ostringstream os;
  os << corner;
  for (const std::string& c : col_labels) os << "," << c;
  os << "\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    os << row_labels[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << "," << format_double(m(i, j));
    os << "\n";
  }
  return os.str();
}

std::string slug(const std::string& label) {
  std::string out;
  for (char c : label) {
    const auto u = static_cast<unsigned char>(c);
    out += std::isalnum(u) || c == '-' || c == '_' ? static_cast<char>(std::tolower(u)) : '_';
  }
  return out.empty() ? "_" : out;
}

}  // namespace qmem
