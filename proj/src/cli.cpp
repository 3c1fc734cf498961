#include "bvit/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bvit/checkpoint.hpp"
#include "bvit/config.hpp"
#include "bvit/memory_model.hpp"
#include "bvit/vit.hpp"

#ifndef BVIT_DEFAULT_DEVICES
#define BVIT_DEFAULT_DEVICES "data/devices.json"
#endif

namespace bvit {

namespace fs = std::filesystem;

DatasetSplit load_data_source(const std::string& source, bool standardize) {
  const auto colon = source.find(':');
  const std::string kind = source.substr(0, colon);
  const std::string arg = colon == std::string::npos ? std::string{} : source.substr(colon + 1);
  if (kind == "cifar100") {
    if (arg.empty()) throw ConfigError("data", "cifar100 needs a directory, e.g. cifar100:/data/cifar-100-binary");
    if (!fs::is_directory(arg)) throw DataError("dataset directory " + arg + " does not exist");
    return load_cifar100(arg, standardize);
  }
  if (kind == "synthetic") {
    SyntheticSpec spec;
    try {
      spec = SyntheticSpec::parse(arg);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("data", e.what());
    }
    return gen_synthetic(spec);
  }
  throw ConfigError("data", "expected cifar100:<dir> or synthetic:<spec>, got '" + source + "'");
}

namespace {

// Command-line values that override the config file when given.
struct Overrides {
  std::string config_path;
  std::string ffn, data, out, format;
  std::size_t experts = 0, top_k = 0, d_model = 0, d_ff = 0, depth = 0, epochs = 0, batch = 0, heads = 0;
  std::uint64_t seed = 0;
  double lr = 0;
  std::vector<CLI::Option*> opts;

  CLI::Option* opt(const std::string& name) const {
    for (auto* o : opts)
      if (o->get_name() == name) return o;
    return nullptr;
  }
  bool given(const std::string& name) const {
    const auto* o = opt(name);
    return o && o->count() > 0;
  }
};

void add_model_flags(CLI::App& app, Overrides& o) {
  o.opts.push_back(app.add_option("--config", o.config_path, "JSON run configuration"));
  o.opts.push_back(app.add_option("--ffn", o.ffn, "orbital, standard_moe or dense"));
  o.opts.push_back(app.add_option("--experts,--n-experts", o.experts, "number of experts N_E"));
  o.opts.push_back(app.add_option("--top-k", o.top_k, "experts per token"));
  o.opts.push_back(app.add_option("--d-model", o.d_model, "model width"));
  o.opts.push_back(app.add_option("--d-ff", o.d_ff, "FFN hidden width"));
  o.opts.push_back(app.add_option("--depth", o.depth, "number of transformer blocks"));
  o.opts.push_back(app.add_option("--heads", o.heads, "attention heads"));
  o.opts.push_back(app.add_option("--epochs", o.epochs, "training epochs"));
  o.opts.push_back(app.add_option("--batch", o.batch, "mini-batch size"));
  o.opts.push_back(app.add_option("--lr", o.lr, "peak learning rate"));
  o.opts.push_back(app.add_option("--seed", o.seed, "run seed"));
  o.opts.push_back(app.add_option("--data", o.data, "cifar100:<dir> or synthetic:<spec>"));
  o.opts.push_back(app.add_option("--out", o.out, "output directory (default: $BVIT_OUT_DIR or ./bvit_out)"));
  o.opts.push_back(app.add_option("--format", o.format, "csv or json"));
}

RunConfig resolve(const Overrides& o) {
  RunConfig r;
  if (const char* env = std::getenv("BVIT_OUT_DIR"); env && *env) r.out_dir = env;
  if (!o.config_path.empty()) r = load_run_config(o.config_path, r);
  nlohmann::json j = nlohmann::json::object();
  if (o.given("--ffn")) j["ffn"] = o.ffn;
  if (o.given("--experts")) j["experts"] = o.experts;
  if (o.given("--top-k")) j["top_k"] = o.top_k;
  if (o.given("--d-model")) j["d_model"] = o.d_model;
  if (o.given("--d-ff")) j["d_ff"] = o.d_ff;
  if (o.given("--depth")) j["depth"] = o.depth;
  if (o.given("--heads")) j["heads"] = o.heads;
  if (o.given("--epochs")) j["epochs"] = o.epochs;
  if (o.given("--batch")) j["batch"] = o.batch;
  if (o.given("--lr")) j["lr"] = o.lr;
  if (o.given("--seed")) j["seed"] = o.seed;
  if (o.given("--data")) j["data"] = o.data;
  if (o.given("--out")) j["out"] = o.out;
  if (o.given("--format")) j["format"] = o.format;
  r = run_config_from_json(j, r);
  if (r.out_dir.empty()) r.out_dir = "bvit_out";
  r.validate();
  return r;
}

void bind_classes(RunConfig& r, const DatasetSplit& data) {
  if (r.classes && *r.classes != data.train.classes)
    throw ConfigError("classes", "config says " + std::to_string(*r.classes) + " but the dataset has " +
                                     std::to_string(data.train.classes));
  r.model.classes = data.train.classes;
  r.model.channels = data.train.channels;
  if (data.train.height != data.train.width) throw DataError("images must be square");
  r.model.image_size = data.train.height;
  r.validate();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string log_json(const TrainingLog& log) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& e : log.epochs) {
    nlohmann::ordered_json o;
    o["epoch"] = e.epoch;
    o["train_loss"] = e.train_loss;
    o["train_ce"] = e.train_ce;
    o["train_acc"] = e.train_acc;
    o["val_loss"] = e.val_loss;
    o["val_acc"] = e.val_acc;
    o["bal"] = e.bal;
    o["sp"] = e.sp;
    o["lr"] = e.lr;
    o["expert_tokens"] = e.expert_tokens;
    arr.push_back(o);
  }
  return arr.dump(2) + "\n";
}

std::string num(double v, const char* fmt = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

int cmd_train(const Overrides& o, std::ostream& out) {
  RunConfig r = resolve(o);
  const DatasetSplit data = load_data_source(r.data, r.standardize);
  bind_classes(r, data);
  fs::create_directories(r.out_dir);
  write_text(fs::path(r.out_dir) / "config.json", to_json(r).dump(2) + "\n");

  ViTModel<float> model(r.model);
  model.init();
  const TrainingLog log = train(model, data.train, &data.val, r.schedule, [&](const EpochRecord& e) {
    out << "epoch " << e.epoch << "/" << r.schedule.epochs << " loss " << num(e.train_loss, "%.4f") << " acc "
        << num(e.train_acc, "%.4f") << " val_acc " << num(e.val_acc, "%.4f") << " bal " << num(e.bal, "%.4f")
        << " sp " << num(e.sp, "%.4f") << "\n";
    out.flush();
  });
  const fs::path dir(r.out_dir);
  save_checkpoint(dir / "model.bvtc", model);
  write_text(dir / "train_log.csv", log.to_csv());
  write_text(dir / "routing.csv", log.routing_csv());
  if (r.format == "json") write_text(dir / "train_log.json", log_json(log));
  out << "wrote " << (dir / "model.bvtc").string() << ", " << (dir / "train_log.csv").string() << ", "
      << (dir / "routing.csv").string() << "\n";
  return kExitOk;
}

ViTModel<float> open_checkpoint(const std::string& path) {
  if (path.empty()) throw ConfigError("checkpoint", "a checkpoint path is required");
  if (!fs::exists(path)) throw DataError("checkpoint " + path + " does not exist");
  return load_checkpoint<float>(path);
}

int cmd_eval(const Overrides& o, const std::string& ckpt, std::ostream& out) {
  RunConfig r = resolve(o);
  ViTModel<float> model = open_checkpoint(ckpt);
  const DatasetSplit data = load_data_source(r.data, r.standardize);
  const ViTConfig& c = model.config();
  if (data.val.classes != c.classes || data.val.height != c.image_size || data.val.channels != c.channels)
    throw CheckpointError("checkpoint expects " + std::to_string(c.classes) + " classes of " +
                          std::to_string(c.channels) + "x" + std::to_string(c.image_size) + "x" +
                          std::to_string(c.image_size) + " images; the dataset does not match");
  const EvalResult res = evaluate(model, data.val);
  std::string text;
  if (r.format == "json") {
    nlohmann::ordered_json j;
    j["accuracy"] = res.accuracy;
    j["loss"] = res.loss;
    j["samples"] = res.samples;
    text = j.dump(2) + "\n";
  } else {
    text = "accuracy,loss,samples\n" + num(res.accuracy) + "," + num(res.loss) + "," + std::to_string(res.samples) +
           "\n";
  }
  out << text;
  if (o.given("--out")) {
    fs::create_directories(r.out_dir);
    write_text(fs::path(r.out_dir) / (r.format == "json" ? "eval.json" : "eval.csv"), text);
  }
  return kExitOk;
}

struct MemoryFlags {
  std::size_t butterfly_layers = 2;
  double bytes_per_angle = 4;
  bool asymptote = false;
};

ArchSpec arch_from(const Overrides& o, const MemoryFlags& m) {
  ArchSpec spec;
  if (!o.config_path.empty()) spec = ArchSpec::from_config(load_run_config(o.config_path).model);
  if (o.given("--d-model")) spec.d_model = o.d_model;
  if (o.given("--d-ff")) spec.d_ff = o.d_ff;
  if (o.given("--depth")) spec.depth = o.depth;
  if (o.given("--experts")) spec.n_experts = o.experts;
  spec.n_butterfly_layers = m.butterfly_layers;
  spec.bytes_per_angle = m.bytes_per_angle;
  spec.validate();
  return spec;
}

std::string format_of(const Overrides& o) {
  const std::string f = o.given("--format") ? o.format : "csv";
  if (f != "csv" && f != "json") throw ConfigError("format", "expected csv or json, got '" + f + "'");
  return f;
}

int cmd_memory_report(const Overrides& o, const MemoryFlags& m, std::ostream& out) {
  const ArchSpec spec = arch_from(o, m);
  const std::string format = format_of(o);
  if (m.asymptote) {
    out << num(asymptotic_ratio(spec), "%.10g") << "\n";
    return kExitOk;
  }
  const auto rows = o.given("--experts") ? std::vector<MemoryReport>{memory_report(spec)}
                                         : memory_sweep(spec, kTableExpertCounts);
  const std::string text = format == "json" ? report_json(rows) : report_csv(rows);
  out << text;
  if (o.given("--out")) {
    fs::create_directories(o.out);
    write_text(fs::path(o.out) / (format == "json" ? "memory_report.json" : "memory_report.csv"), text);
  }
  return kExitOk;
}

int cmd_similarity(const Overrides& o, const std::string& ckpt, bool fresh, bool summary, std::ostream& out) {
  std::unique_ptr<ViTModel<float>> model;
  if (fresh) {
    const RunConfig r = resolve(o);
    model = std::make_unique<ViTModel<float>>(r.model);
    model->init();
  } else {
    model = std::make_unique<ViTModel<float>>(open_checkpoint(ckpt));
  }
  if (model->config().ffn_kind != FfnKind::orbital)
    throw ConfigError("ffn", std::string("similarity needs an orbital model, this one is ") +
                                 to_string(model->config().ffn_kind));
  std::ostringstream os;
  os << (summary ? "block,mean_off_diagonal,max_off_diagonal\n" : "block,row,col,similarity\n");
  for (std::size_t b = 0; b < model->blocks().size(); ++b) {
    const auto& layer = dynamic_cast<const OrbitalMoELayer<float>&>(*model->blocks()[b]->ffn);
    const Tensor<double> sim = expert_cosine_similarity(layer);
    const std::size_t n = sim.dim(0);
    if (summary) {
      double mx = -1;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (i != j) mx = std::max(mx, sim(i, j));
      os << b << ',' << num(mean_off_diagonal(sim), "%.9f") << ',' << num(n > 1 ? mx : 0.0, "%.9f") << '\n';
    } else {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) os << b << ',' << i << ',' << j << ',' << num(sim(i, j), "%.9f") << '\n';
    }
  }
  out << os.str();
  return kExitOk;
}

int cmd_device_fit(const Overrides& o, const MemoryFlags& m, const std::string& devices,
                   std::uint64_t budget, std::ostream& out) {
  const ArchSpec spec = arch_from(o, m);
  std::vector<DeviceProfile> profiles;
  if (budget > 0) {
    profiles.push_back({"custom", budget, "command line"});
  } else {
    try {
      profiles = load_device_profiles(devices);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("device profiles " + devices + ": " + e.what());
    } catch (const ConfigError&) {
      throw;
    } catch (const std::runtime_error& e) {
      throw DataError(e.what());
    }
  }
  out << "device,budget_bytes,butterfly_experts,standard_experts\n";
  for (const auto& p : profiles) {
    const FitResult fit = max_experts_fit(spec, p);
    out << p.name << ',' << p.memory_budget_bytes << ',' << fit.butterfly_experts << ',' << fit.standard_experts
        << '\n';
  }
  return kExitOk;
}

int fail(std::ostream& err, int code, const char* kind, const std::string& msg) {
  std::string line = msg;
  for (char& ch : line)
    if (ch == '\n') ch = ' ';
  err << "error code=" << code << " kind=" << kind << ": " << line << "\n";
  return code;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ButterflyViT: orbital mixture-of-experts vision transformer"};
  app.require_subcommand(1);
  Overrides o;
  MemoryFlags mem;
  std::string checkpoint, devices = BVIT_DEFAULT_DEVICES;
  std::uint64_t budget = 0;
  bool fresh = false, summary = false;

  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint, log and routing stats");
  add_model_flags(*train_cmd, o);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  Overrides eval_o;
  add_model_flags(*eval_cmd, eval_o);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

  auto* mem_cmd = app.add_subcommand("memory-report", "expert memory, compression and energy table");
  Overrides mem_o;
  add_model_flags(*mem_cmd, mem_o);
  mem_cmd->add_option("--butterfly-layers", mem.butterfly_layers, "butterfly layers per rotation");
  mem_cmd->add_option("--bytes-per-angle", mem.bytes_per_angle, "storage bytes per angle");
  mem_cmd->add_flag("--asymptote", mem.asymptote, "print the N_E -> infinity compression bound only");

  auto* sim_cmd = app.add_subcommand("similarity", "pairwise cosine similarity of effective expert matrices");
  Overrides sim_o;
  add_model_flags(*sim_cmd, sim_o);
  sim_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");
  sim_cmd->add_flag("--init", fresh, "use a freshly initialized model from the config instead");
  sim_cmd->add_flag("--summary", summary, "per-block off-diagonal mean and max only");

  auto* fit_cmd = app.add_subcommand("device-fit", "largest expert count that fits each device budget");
  Overrides fit_o;
  add_model_flags(*fit_cmd, fit_o);
  fit_cmd->add_option("--butterfly-layers", mem.butterfly_layers, "butterfly layers per rotation");
  fit_cmd->add_option("--bytes-per-angle", mem.bytes_per_angle, "storage bytes per angle");
  fit_cmd->add_option("--devices", devices, "device profile JSON");
  fit_cmd->add_option("--budget", budget, "single budget in bytes (overrides --devices)");

  std::vector<const char*> argv{"bvit"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return fail(err, kExitConfig, "config", e.what());
  }

  try {
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (eval_cmd->parsed()) return cmd_eval(eval_o, checkpoint, out);
    if (mem_cmd->parsed()) return cmd_memory_report(mem_o, mem, out);
    if (sim_cmd->parsed()) {
      if (!fresh && checkpoint.empty()) throw ConfigError("checkpoint", "pass --checkpoint <file> or --init");
      return cmd_similarity(sim_o, checkpoint, fresh, summary, out);
    }
    if (fit_cmd->parsed()) return cmd_device_fit(fit_o, mem, devices, budget, out);
  } catch (const ConfigError& e) {
    return fail(err, kExitConfig, "config", e.what());
  } catch (const CheckpointError& e) {
    return fail(err, kExitConfig, "config", e.what());
  } catch (const DataError& e) {
    return fail(err, kExitData, "data", e.what());
  } catch (const DivergenceError& e) {
    return fail(err, kExitDivergence, "divergence", e.what());
  } catch (const std::exception& e) {
    return fail(err, kExitFailure, "failure", e.what());
  }
  return fail(err, kExitFailure, "failure", "no subcommand");
}

}  // namespace bvit
