#include "rfb/rfb.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>

using namespace rfb;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int kExitOk = 0, kExitValidation = 1, kExitIo = 2;

std::string build_id() {
  std::string id = kVersion;
#if defined(__clang__)
  id += " (clang " __clang_version__ ")";
#elif defined(__GNUC__)
  id += " (gcc " __VERSION__ ")";
#endif
  return id;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

json read_json_file(const fs::path &file) {
  std::ifstream in(file);
  if (!in)
    throw IoError("cannot read " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception &e) {
    throw ValidationError(file.string() + ": " + e.what());
  }
}

void write_text(const fs::path &file, const std::string &text) {
  std::ofstream out(file, std::ios::binary);
  out << text;
  if (!out)
    throw IoError("cannot write " + file.string());
}

/// Rejects keys absent from the defaults dump, recursively through objects.
void check_keys(const json &given, const json &schema, const std::string &where) {
  if (!given.is_object())
    throw ValidationError(where + ": expected an object");
  for (const auto &[key, value] : given.items()) {
    if (!schema.contains(key))
      throw ValidationError(where + ": unknown key '" + key + "'");
    if (schema[key].is_object())
      check_keys(value, schema[key], where + "." + key);
  }
}

template <typename Config> Config parse_config(const json &j, const std::string &where) {
  check_keys(j, json(Config{}), where);
  try {
    return j.get<Config>();
  } catch (const json::exception &e) {
    throw ValidationError(where + ": " + e.what());
  }
}

/// Full configuration accepted by `train` and `init`.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;
};

json to_json(const RunConfig &c) {
  return {{"model", c.model}, {"train", c.train}, {"augment", c.augment}};
}

RunConfig load_run_config(const std::string &file) {
  RunConfig c;
  if (file.empty())
    return c;
  const json j = read_json_file(file);
  check_keys(j, to_json(RunConfig{}), "config");
  if (j.contains("model"))
    c.model = parse_config<ModelConfig>(j["model"], "config.model");
  if (j.contains("train"))
    c.train = parse_config<TrainConfig>(j["train"], "config.train");
  if (j.contains("augment"))
    c.augment = parse_config<AugmentConfig>(j["augment"], "config.augment");
  return c;
}

/// Collects artifacts and removes them again unless the run commits.
class RunOutputs {
public:
  RunOutputs(std::string command, std::vector<std::string> argv)
      : command_(std::move(command)), argv_(std::move(argv)), start_(utc_now()) {}
  RunOutputs(const RunOutputs &) = delete;
  RunOutputs &operator=(const RunOutputs &) = delete;

  ~RunOutputs() {
    if (committed_)
      return;
    std::error_code ec;
    for (auto it = created_.rbegin(); it != created_.rend(); ++it)
      fs::remove_all(*it, ec);
  }

  /// Creates `dir` if needed; a directory this run created is removed whole
  /// on failure.
  void own_dir(const fs::path &dir) {
    if (fs::exists(dir)) {
      if (!fs::is_directory(dir))
        throw IoError(dir.string() + " exists and is not a directory");
      return;
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
      throw IoError("cannot create " + dir.string() + ": " + ec.message());
    created_.push_back(dir);
  }

  /// Registers an output file or directory; removed on failure when it did
  /// not exist before.
  void artifact(const fs::path &p) {
    artifacts_.push_back(p.string());
    if (!fs::exists(p))
      created_.push_back(p);
  }

  json config = json::object();
  std::uint64_t seed = 0;

  void commit(const fs::path &manifest) {
    if (!fs::exists(manifest))
      created_.push_back(manifest);
    const json m{{"command", command_}, {"argv", argv_},       {"config", config},
                 {"seed", seed},        {"version", build_id()}, {"start", start_},
                 {"end", utc_now()},    {"artifacts", artifacts_}};
    write_text(manifest, m.dump(2) + "\n");
    committed_ = true;
  }

private:
  std::string command_;
  std::vector<std::string> argv_;
  std::string start_;
  std::vector<std::string> artifacts_;
  std::vector<fs::path> created_;
  bool committed_ = false;
};

fs::path manifest_beside(const fs::path &file) {
  return file.parent_path() / (file.filename().string() + ".manifest.json");
}

std::vector<std::string> dataset_classes(const fs::path &data) {
  const fs::path m = data / "manifest.json";
  if (!fs::exists(m))
    return SceneSpec{}.classes;
  return read_json_file(m).at("spec").value("classes", SceneSpec{}.classes);
}

// ---------------------------------------------------------------------------
// Detections file: one JSON object per line.

json detection_line(const std::string &image_id, const std::string &cls, const Detection &d) {
  return {{"image_id", image_id}, {"class", cls},     {"score", d.score},
          {"xmin", d.box.xmin},   {"ymin", d.box.ymin}, {"xmax", d.box.xmax},
          {"ymax", d.box.ymax}};
}

std::vector<ImageDetection> read_detections(const fs::path &file,
                                            const std::vector<Sample> &data,
                                            const std::vector<std::string> &classes) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < data.size(); ++i)
    by_id[data[i].image_file] = i;
  std::ifstream in(file);
  if (!in)
    throw IoError("cannot read " + file.string());
  std::vector<ImageDetection> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos)
      continue;
    const std::string where = file.string() + ":" + std::to_string(lineno);
    try {
      const json j = json::parse(line);
      const auto id = j.at("image_id").get<std::string>();
      const auto img = by_id.find(id);
      if (img == by_id.end())
        throw ValidationError(where + ": unknown image_id '" + id + "'");
      const auto cls = j.at("class").get<std::string>();
      const auto c = std::find(classes.begin(), classes.end(), cls);
      if (c == classes.end())
        throw ValidationError(where + ": unknown class '" + cls + "'");
      Detection d;
      d.label = static_cast<int>(c - classes.begin());
      d.score = j.at("score").get<double>();
      d.box = {j.at("xmin").get<double>(), j.at("ymin").get<double>(),
               j.at("xmax").get<double>(), j.at("ymax").get<double>(), d.label};
      out.push_back({img->second, d});
    } catch (const json::exception &e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct Globals {
  std::vector<std::string> argv;
  std::size_t jobs = 1;
};

int cmd_synth(const Globals &g, const std::string &spec_file, std::size_t count,
              std::uint64_t first_index, const std::string &out,
              const std::optional<std::uint64_t> &seed, bool print_config) {
  SceneSpec spec;
  if (!spec_file.empty())
    spec = parse_config<SceneSpec>(read_json_file(spec_file), "spec");
  if (seed)
    spec.seed = *seed;
  validate(spec);
  if (print_config) {
    std::cout << json(spec).dump(2) << "\n";
    return kExitOk;
  }
  if (out.empty())
    throw ValidationError("synth: --out is required");
  RunOutputs run("synth", g.argv);
  run.own_dir(out);
  for (const char *name : {"images", "annotations.jsonl", "manifest.json"})
    run.artifact(fs::path(out) / name);
  generate(spec, count, out, first_index);
  run.config = {{"spec", spec}, {"count", count}, {"first_index", first_index}};
  run.seed = spec.seed;
  run.commit(fs::path(out) / "run_manifest.json");
  std::cout << "wrote " << count << " images to " << out << "\n";
  return kExitOk;
}

int cmd_init(const Globals &g, const std::string &config_file, const std::string &out,
             const std::optional<std::uint64_t> &seed) {
  RunConfig cfg = load_run_config(config_file);
  if (seed)
    cfg.train.seed = *seed;
  validate(cfg.train);
  if (out.empty())
    throw ValidationError("init: --out is required");
  DetectorNet<float> net(cfg.model);
  msra_init(net.store(), cfg.train.seed);
  RunOutputs run("init", g.argv);
  run.artifact(out);
  save_checkpoint(out, net, nullptr, cfg.train, cfg.augment, 0, {});
  run.config = to_json(cfg);
  run.seed = cfg.train.seed;
  run.commit(fs::path(out) / "run_manifest.json");
  std::cout << "initialized " << out << " (" << net.store().total_elements() << " parameters)\n";
  return kExitOk;
}

int cmd_train(const Globals &g, const std::string &data_dir, const std::string &config_file,
              const std::string &out, const std::string &resume, bool strict,
              const std::optional<std::uint64_t> &seed, bool print_config, bool quiet) {
  RunConfig cfg = load_run_config(config_file);
  if (!resume.empty()) {
    const Checkpoint ck = read_checkpoint_manifest(resume);
    if (config_file.empty())
      cfg = {ck.model, ck.train, ck.augment};
    else if (json(ck.model) != json(cfg.model))
      throw ValidationError("train: --config model differs from the resumed checkpoint");
  }
  if (seed)
    cfg.train.seed = *seed;
  validate(cfg.train);
  DetectorNet<float> net(cfg.model);
  if (print_config) {
    std::cout << to_json(cfg).dump(2) << "\n";
    return kExitOk;
  }
  if (data_dir.empty() || out.empty())
    throw ValidationError("train: --data and --out are required");
  const auto data = load_dataset(data_dir);
  for (const auto &s : data)
    if (s.image.width != cfg.model.image_size || s.image.height != cfg.model.image_size)
      throw ValidationError("train: image " + s.image_file + " does not match model image_size " +
                            std::to_string(cfg.model.image_size));
  msra_init(net.store(), cfg.train.seed);

  RunOutputs run("train", g.argv);
  run.own_dir(out);
  run.artifact(fs::path(out) / "history.csv");
  run.artifact(fs::path(out) / "last");
  run.artifact(fs::path(out) / "config.json");
  for (std::size_t e = 1; e <= cfg.train.total_epochs; ++e)
    if (e == cfg.train.total_epochs ||
        (cfg.train.checkpoint_every && e % cfg.train.checkpoint_every == 0))
      run.artifact(fs::path(out) / ("epoch_" + std::to_string(e)));
  write_text(fs::path(out) / "config.json", to_json(cfg).dump(2) + "\n");

  TrainOptions opt;
  opt.out_dir = out;
  opt.resume_from = resume;
  opt.jobs = g.jobs;
  opt.strict_deterministic = strict;
  if (!quiet)
    opt.on_epoch = [](const EpochRecord &r) {
      std::printf("epoch %zu  cls %.5f  loc %.5f  lr %.3g\n", r.epoch + 1, r.loss_cls,
                  r.loss_loc, r.lr);
      std::fflush(stdout);
    };
  const auto result = train(net, data, cfg.train, cfg.augment, opt);
  run.config = to_json(cfg);
  run.config["strict_deterministic"] = strict;
  run.config["resume"] = resume;
  run.seed = cfg.train.seed;
  run.commit(fs::path(out) / "run_manifest.json");
  std::cout << "trained " << result.epochs_run << " epochs; checkpoints in " << out << "\n";
  return kExitOk;
}

int cmd_eval(const Globals &g, const std::string &ckpt, const std::string &dets_file,
             const std::string &data_dir, const std::string &mode, const std::string &out,
             const std::string &save_dets, double conf) {
  ApMode ap = ApMode::eleven_point;
  std::vector<double> thresholds{0.5};
  if (mode == "allpoints") {
    ap = ApMode::all_points;
  } else if (mode == "coco-avg") {
    ap = ApMode::all_points;
    thresholds = coco_thresholds();
  } else if (mode != "voc07") {
    throw ValidationError("eval: --mode must be voc07, allpoints or coco-avg");
  }
  if (ckpt.empty() == dets_file.empty())
    throw ValidationError("eval: give exactly one of --ckpt and --dets");
  if (data_dir.empty() || out.empty())
    throw ValidationError("eval: --data and --out are required");
  const auto data = load_dataset(data_dir);
  const auto classes = dataset_classes(data_dir);
  std::vector<std::vector<BoxXYXY>> gts;
  for (const auto &s : data)
    gts.push_back(s.boxes);

  RunOutputs run("eval", g.argv);
  run.artifact(out);
  std::vector<ImageDetection> dets;
  json config{{"mode", mode}, {"data", data_dir}};
  if (!dets_file.empty()) {
    dets = read_detections(dets_file, data, classes);
    config["dets"] = dets_file;
  } else {
    const Checkpoint ck = read_checkpoint_manifest(ckpt);
    DetectorNet<float> net(ck.model);
    load_checkpoint_params(ckpt, net);
    if (ck.model.num_classes != classes.size())
      throw ValidationError("eval: checkpoint has " + std::to_string(ck.model.num_classes) +
                            " classes, dataset has " + std::to_string(classes.size()));
    PostprocessConfig pp;
    pp.conf_threshold = conf;
    std::ofstream dout;
    if (!save_dets.empty()) {
      run.artifact(save_dets);
      dout.open(save_dets, std::ios::binary);
      if (!dout)
        throw IoError("cannot write " + save_dets);
    }
    for (std::size_t i = 0; i < data.size(); ++i)
      for (const auto &d : detect(net, data[i].image, pp)) {
        dets.push_back({i, d});
        if (dout.is_open())
          dout << detection_line(data[i].image_file, classes.at(static_cast<std::size_t>(d.label)),
                                 d)
                      .dump()
               << '\n';
      }
    if (dout.is_open() && !dout)
      throw IoError("cannot write " + save_dets);
    config["ckpt"] = ckpt;
    config["postprocess"] = {{"conf_threshold", pp.conf_threshold},
                             {"nms_iou", pp.nms_iou},
                             {"top_k", pp.top_k},
                             {"keep_top_k", pp.keep_top_k}};
  }
  const EvalResult res = evaluate(dets, gts, thresholds, ap);
  json report = rfb::to_json(res);
  for (auto &c : report["classes"])
    c["class"] = classes.at(c.at("label").get<std::size_t>());
  write_text(out, report.dump(2) + "\n");
  run.config = config;
  run.commit(manifest_beside(out));
  std::printf("mAP %.4f (%s, %zu images, %zu detections)\n", res.map, mode.c_str(), data.size(),
              dets.size());
  for (const auto &w : res.warnings)
    std::cerr << "warning: " << w << "\n";
  return kExitOk;
}

ErfReport single_block_report(const std::string &name, const BlockSpec &spec, std::size_t size,
                              const std::vector<std::uint64_t> &seeds, std::size_t samples,
                              double tau) {
  ErfReport rep;
  rep.input_size = size;
  rep.samples = samples;
  rep.seeds = seeds;
  BlockErfSummary s;
  s.name = name;
  s.params = param_count(spec);
  s.theoretical = max_rf(spec);
  std::vector<double> area, ratio, fh, fw;
  for (std::uint64_t seed : seeds) {
    BlockNet<double> net(spec);
    msra_init(net.store, seed);
    s.maps.push_back(block_erf(net, size, samples, seed, tau));
    area.push_back(static_cast<double>(s.maps.back().area_at_tau));
    ratio.push_back(s.maps.back().center_ratio);
    fh.push_back(static_cast<double>(s.maps.back().footprint.height()));
    fw.push_back(static_cast<double>(s.maps.back().footprint.width()));
  }
  s.area = mean_sd(area);
  s.center_ratio = mean_sd(ratio);
  s.footprint_h = mean_sd(fh);
  s.footprint_w = mean_sd(fw);
  rep.blocks.push_back(std::move(s));
  rep.ranking = {name};
  return rep;
}

int cmd_erf(const Globals &g, const std::vector<std::string> &kinds, std::size_t channels,
            const std::string &ckpt, const std::string &layer, std::size_t size,
            std::size_t samples, std::size_t n_seeds, std::uint64_t seed, double tau,
            const std::string &out) {
  if (out.empty())
    throw ValidationError("erf: --out is required");
  if (kinds.empty() == ckpt.empty())
    throw ValidationError("erf: give --block (one or more) or --ckpt with --layer");
  if (n_seeds == 0 || samples == 0 || size == 0)
    throw ValidationError("erf: --seeds, --samples and --input-size must be positive");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < n_seeds; ++i)
    seeds.push_back(seed + i);

  ErfReport rep;
  json config{{"input_size", size}, {"samples", samples}, {"seeds", seeds}, {"tau", tau}};
  if (!ckpt.empty()) {
    if (layer.empty())
      throw ValidationError("erf: --ckpt needs --layer");
    const Checkpoint ck = read_checkpoint_manifest(ckpt);
    DetectorNet<float> net(ck.model);
    load_checkpoint_params(ckpt, net);
    const BlockLayers &layers = net.block(layer);
    const auto params = net.store().bind(false);
    ErfFunction<float> fn = [&](const Tensor<float> &x) {
      return block_forward<float>(layers, params, x);
    };
    rep.input_size = size;
    rep.samples = samples;
    rep.seeds = seeds;
    BlockErfSummary s;
    s.name = layer;
    s.params = param_count(layers.spec);
    s.theoretical = max_rf(layers.spec);
    std::vector<double> area, ratio;
    for (std::uint64_t sd : seeds) {
      s.maps.push_back(erf<float>(fn, layers.spec.in_channels, size, samples, sd, tau));
      area.push_back(static_cast<double>(s.maps.back().area_at_tau));
      ratio.push_back(s.maps.back().center_ratio);
    }
    s.area = mean_sd(area);
    s.center_ratio = mean_sd(ratio);
    rep.blocks.push_back(std::move(s));
    rep.ranking = {layer};
    config["ckpt"] = ckpt;
    config["layer"] = layer;
  } else {
    std::vector<std::pair<std::string, BlockSpec>> blocks;
    for (const auto &k : kinds)
      blocks.emplace_back(k, make_named_block(k, channels, channels));
    rep = blocks.size() == 1
              ? single_block_report(blocks[0].first, blocks[0].second, size, seeds, samples, tau)
              : compare(blocks, size, seeds, samples, tau);
    config["blocks"] = kinds;
    config["channels"] = channels;
  }

  RunOutputs run("erf", g.argv);
  run.own_dir(out);
  for (const auto &b : rep.blocks)
    for (std::size_t i = 0; i < b.maps.size(); ++i) {
      const std::string stem = b.name + "_seed" + std::to_string(seeds[i]);
      const fs::path pgm = fs::path(out) / (stem + ".pgm"), csv = fs::path(out) / (stem + ".csv");
      run.artifact(pgm);
      run.artifact(csv);
      write_erf_pgm(pgm, b.maps[i]);
      write_erf_csv(csv, b.maps[i]);
    }
  run.artifact(fs::path(out) / "report.json");
  run.artifact(fs::path(out) / "report.txt");
  write_text(fs::path(out) / "report.json", rfb::to_json(rep).dump(2) + "\n");
  const std::string text = to_text(rep);
  write_text(fs::path(out) / "report.txt", text);
  run.config = config;
  run.seed = seed;
  run.commit(fs::path(out) / "run_manifest.json");
  std::cout << text;
  return kExitOk;
}

int cmd_gradcheck(const Globals &g, const std::string &ops, int precision, std::uint64_t seed,
                  std::size_t cases, double tol, const std::string &out) {
  if (precision != 64)
    throw ValidationError("gradcheck: only --precision 64 is supported");
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = run_gradcheck(ops, seed, cases, tol);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = true;
  std::ostringstream table;
  table << std::left << std::setw(14) << "op" << std::setw(7) << "cases" << std::setw(9)
        << "redrawn" << std::setw(14) << "max_rel_err"
        << "result\n";
  json jrows = json::array();
  for (const auto &r : rows) {
    char err[32];
    std::snprintf(err, sizeof err, "%.3e", r.max_rel_err);
    table << std::left << std::setw(14) << r.op << std::setw(7) << r.cases << std::setw(9)
          << r.redrawn << std::setw(14) << err << (r.pass ? "PASS" : "FAIL") << "\n";
    ok = ok && r.pass;
    jrows.push_back({{"op", r.op},
                     {"cases", r.cases},
                     {"redrawn", r.redrawn},
                     {"max_rel_err", r.max_rel_err},
                     {"pass", r.pass}});
  }
  std::cout << table.str();
  std::printf("%s in %.1f s (tolerance %.0e)\n", ok ? "all PASS" : "FAILURES", secs, tol);
  if (!out.empty()) {
    RunOutputs run("gradcheck", g.argv);
    run.artifact(out);
    write_text(out, json{{"rows", jrows}, {"pass", ok}}.dump(2) + "\n");
    run.config = {{"ops", ops}, {"precision", precision}, {"cases", cases}, {"tolerance", tol}};
    run.seed = seed;
    run.commit(manifest_beside(out));
  }
  return ok ? kExitOk : kExitValidation;
}

std::string rf_string(const RfFootprint &f) {
  return std::to_string(f.h) + "x" + std::to_string(f.w);
}

int cmd_inspect(const std::string &ckpt, bool as_json) {
  const Checkpoint ck = read_checkpoint_manifest(ckpt);
  DetectorNet<float> net(ck.model);
  std::map<std::string, std::size_t> groups;
  for (std::size_t i = 0; i < net.store().size(); ++i) {
    const auto &info = net.store().info(i);
    groups[info.path.substr(0, info.path.find('/'))] += info.shape.numel();
  }
  json blocks = json::array();
  for (const auto &name : net.block_names()) {
    const auto &spec = net.block(name).spec;
    json branches = json::array();
    for (const auto &rf : theoretical_rf(spec))
      branches.push_back(rf_string(rf));
    blocks.push_back({{"name", name},
                      {"kind", spec.kind},
                      {"params", param_count(spec)},
                      {"branch_rf", branches},
                      {"max_rf", rf_string(max_rf(spec))}});
  }
  const json summary{{"checkpoint", ckpt},
                     {"version", ck.manifest.value("version", "")},
                     {"epoch", ck.epoch},
                     {"head", ck.model.head},
                     {"total_params", net.store().total_elements()},
                     {"param_groups", groups},
                     {"priors", net.priors().size()},
                     {"blocks", blocks}};
  if (as_json) {
    std::cout << summary.dump(2) << "\n";
    return kExitOk;
  }
  std::cout << "checkpoint " << ckpt << "\n"
            << "  version " << summary["version"].get<std::string>() << ", epoch " << ck.epoch
            << ", head " << ck.model.head << "\n"
            << "  parameters " << net.store().total_elements() << ", priors "
            << net.priors().size() << "\n";
  for (const auto &[k, v] : groups)
    std::cout << "    " << std::left << std::setw(10) << k << v << "\n";
  std::cout << "  blocks\n";
  for (const auto &b : blocks) {
    std::cout << "    " << std::left << std::setw(8) << b["name"].get<std::string>()
              << std::setw(8) << b["kind"].get<std::string>() << std::setw(9)
              << b["params"].get<std::size_t>() << "max RF " << b["max_rf"].get<std::string>()
              << "  branches";
    for (const auto &r : b["branch_rf"])
      std::cout << " " << r.get<std::string>();
    std::cout << "\n";
  }
  if (!ck.history.empty())
    std::printf("  last epoch loss cls %.5f loc %.5f\n", ck.history.back().loss_cls,
                ck.history.back().loss_loc);
  return kExitOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"RFB detector toolkit: synthesis, training, evaluation and receptive-field "
               "analysis",
               "rfbnet"};
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", build_id());
  Globals g;
  g.argv.assign(argv, argv + argc);
  app.add_option("--jobs", g.jobs, "worker threads (1 is the reference)")
      ->check(CLI::PositiveNumber);

  std::optional<std::uint64_t> seed;
  bool print_config = false;

  auto *synth = app.add_subcommand("synth", "render a synthetic shapes dataset");
  std::string spec_file, out;
  std::size_t count = 0;
  std::uint64_t first_index = 0;
  synth->add_option("--spec", spec_file, "scene spec JSON")->check(CLI::ExistingFile);
  synth->add_option("--count", count, "number of images");
  synth->add_option("--first-index", first_index, "scene index of the first image");
  synth->add_option("--out", out, "output directory");
  synth->add_option("--seed", seed, "dataset seed");
  synth->add_flag("--print-config", print_config, "print the resolved spec and exit");

  auto *init = app.add_subcommand("init", "write a freshly initialized checkpoint");
  std::string config_file;
  init->add_option("--config", config_file, "run config JSON")->check(CLI::ExistingFile);
  init->add_option("--out", out, "checkpoint directory")->required();
  init->add_option("--seed", seed, "initialization seed");

  auto *tr = app.add_subcommand("train", "train a detector");
  std::string data_dir, resume;
  bool strict = false, quiet = false;
  tr->add_option("--data", data_dir, "dataset directory");
  tr->add_option("--config", config_file, "run config JSON")->check(CLI::ExistingFile);
  tr->add_option("--out", out, "output directory");
  tr->add_option("--resume", resume, "checkpoint directory to resume from");
  tr->add_option("--seed", seed, "overrides train.seed");
  tr->add_flag("--strict-deterministic", strict, "single worker, wallclock logged as 0");
  tr->add_flag("--print-config", print_config, "print the resolved config and exit");
  tr->add_flag("--quiet", quiet, "no per-epoch lines");

  auto *ev = app.add_subcommand("eval", "mean average precision on a dataset");
  std::string ckpt, dets_file, mode = "voc07", save_dets;
  double conf = PostprocessConfig{}.conf_threshold;
  ev->add_option("--ckpt", ckpt, "checkpoint directory");
  ev->add_option("--dets", dets_file, "detections JSONL instead of a checkpoint");
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--mode", mode, "voc07 | allpoints | coco-avg");
  ev->add_option("--out", out, "result JSON")->required();
  ev->add_option("--save-dets", save_dets, "write the model's detections as JSONL");
  ev->add_option("--conf", conf, "score threshold before NMS");

  auto *er = app.add_subcommand("erf", "effective receptive field maps");
  std::vector<std::string> kinds;
  std::string layer;
  std::size_t channels = 16, input_size = 31, samples = 32, n_seeds = 1;
  std::uint64_t erf_seed = 0;
  double tau = 0.05;
  er->add_option("--block", kinds, "rfb|rfb_s|inception|inception_l|aspp_s|plain (repeatable)");
  er->add_option("--channels", channels, "block width for --block");
  er->add_option("--ckpt", ckpt, "checkpoint directory");
  er->add_option("--layer", layer, "block name inside the checkpoint");
  er->add_option("--input-size", input_size, "square input side");
  er->add_option("--samples", samples, "random inputs per seed");
  er->add_option("--seeds", n_seeds, "number of seeds");
  er->add_option("--seed", erf_seed, "first seed");
  er->add_option("--tau", tau, "area threshold relative to the peak");
  er->add_option("--out", out, "output directory");

  auto *gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string ops = "all";
  int precision = 64;
  std::size_t cases = 20;
  double tol = 1e-6;
  std::uint64_t gc_seed = 0;
  gc->add_option("--ops", ops, "all | conv | pool | loss");
  gc->add_option("--precision", precision, "floating point bits");
  gc->add_option("--cases", cases, "random cases per op");
  gc->add_option("--tol", tol, "maximum relative error");
  gc->add_option("--seed", gc_seed, "case seed");
  gc->add_option("--out", out, "result JSON");

  auto *in = app.add_subcommand("inspect", "summarize a checkpoint");
  bool as_json = false;
  in->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  in->add_flag("--json", as_json, "machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*synth)
      return cmd_synth(g, spec_file, count, first_index, out, seed, print_config);
    if (*init)
      return cmd_init(g, config_file, out, seed);
    if (*tr)
      return cmd_train(g, data_dir, config_file, out, resume, strict, seed, print_config, quiet);
    if (*ev)
      return cmd_eval(g, ckpt, dets_file, data_dir, mode, out, save_dets, conf);
    if (*er)
      return cmd_erf(g, kinds, channels, ckpt, layer, input_size, samples, n_seeds, erf_seed, tau,
                     out);
    if (*gc)
      return cmd_gradcheck(g, ops, precision, gc_seed, cases, tol, out);
    if (*in)
      return cmd_inspect(ckpt, as_json);
    std::cout << app.help();
    return kExitValidation;
  } catch (const IoError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
}
