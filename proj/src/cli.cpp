#include "nif/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>

#include "nif/image.hpp"
#include "nif/serialize.hpp"

namespace nif::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json train_json(const TrainConfig& t) {
  json j;
  nif::to_json(j, t);
  return j;
}

}  // namespace

json to_json(const RunConfig& c) {
  json sizes = json::array();
  for (const auto& [h, w] : c.bench.sizes) sizes.push_back({h, w});
  return {{"data", c.data},
          {"stage1", {{"model", c.stage1}, {"train", train_json(c.stage1_train)}}},
          {"stage2", {{"model", c.stage2}, {"train", train_json(c.stage2_train)}}},
          {"generate",
           {{"prompt", c.generate.prompt},
            {"height", c.generate.height},
            {"width", c.generate.width},
            {"seed", c.generate.seed},
            {"steps", c.generate.steps},
            {"cfg_scale", c.generate.cfg_scale},
            {"use_ema", c.generate.use_ema}}},
          {"bench",
           {{"scales", c.bench.scales}, {"sizes", sizes}, {"repeats", c.bench.repeats}, {"warmup", c.bench.warmup}}},
          {"paths",
           {{"stage1_checkpoint", c.paths.stage1_checkpoint},
            {"stats", c.paths.stats},
            {"stage2_checkpoint", c.paths.stage2_checkpoint}}}};
}

RunConfig from_json(const json& j) {
  RunConfig c;
  j.at("data").get_to(c.data);
  j.at("stage1").at("model").get_to(c.stage1);
  j.at("stage1").at("train").get_to(c.stage1_train);
  j.at("stage2").at("model").get_to(c.stage2);
  j.at("stage2").at("train").get_to(c.stage2_train);
  const json& g = j.at("generate");
  g.at("prompt").get_to(c.generate.prompt);
  g.at("height").get_to(c.generate.height);
  g.at("width").get_to(c.generate.width);
  g.at("seed").get_to(c.generate.seed);
  g.at("steps").get_to(c.generate.steps);
  g.at("cfg_scale").get_to(c.generate.cfg_scale);
  g.at("use_ema").get_to(c.generate.use_ema);
  const json& b = j.at("bench");
  b.at("scales").get_to(c.bench.scales);
  c.bench.sizes.clear();
  for (const json& s : b.at("sizes")) {
    if (!s.is_array() || s.size() != 2) throw std::invalid_argument("bench.sizes entries must be [height, width]");
    c.bench.sizes.emplace_back(s[0].get<int64_t>(), s[1].get<int64_t>());
  }
  b.at("repeats").get_to(c.bench.repeats);
  b.at("warmup").get_to(c.bench.warmup);
  const json& p = j.at("paths");
  p.at("stage1_checkpoint").get_to(c.paths.stage1_checkpoint);
  p.at("stats").get_to(c.paths.stats);
  p.at("stage2_checkpoint").get_to(c.paths.stage2_checkpoint);
  return c;
}

json default_config() {
  RunConfig c;
  c.stage2_train.stage = 2;
  c.stage2_train.steps = 1000;
  return to_json(c);
}

namespace {

void merge_into(json& base, const json& overlay, const std::string& path) {
  if (!overlay.is_object()) throw std::invalid_argument("config section '" + path + "' must be an object");
  for (const auto& [key, value] : overlay.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw std::invalid_argument("unknown config key '" + here + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_into(slot, value, here);
    } else {
      slot = value;
    }
  }
}

}  // namespace

json merge_config(const json& base, const json& overlay) {
  json out = base;
  merge_into(out, overlay, "");
  return out;
}

void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' must look like key.path=value");
  }
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &cfg;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw std::invalid_argument("unknown config key '" + key + "'");
    node = &(*node)[part];
  }
  if (node->is_object()) throw std::invalid_argument("config key '" + key + "' names a section, not a value");
  *node = value;
}

std::pair<int64_t, int64_t> parse_size(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw std::invalid_argument("size '" + text + "' must look like HxW");
  try {
    size_t a = 0, b = 0;
    const long long h = std::stoll(text.substr(0, x), &a);
    const long long w = std::stoll(text.substr(x + 1), &b);
    if (a != x || b != text.size() - x - 1 || h < 1 || w < 1) throw std::invalid_argument("");
    return {h, w};
  } catch (const std::exception&) {
    throw std::invalid_argument("size '" + text + "' must be two positive integers HxW");
  }
}

// ------------------------------------------------------------- commands

namespace {

using Clock = std::chrono::steady_clock;

struct Context {
  json config;
  RunConfig run;
  fs::path out_dir;
  std::ostream& out;
  std::ostream& err;

  fs::path stage1_path() const {
    return run.paths.stage1_checkpoint.empty() ? out_dir / "stage1" / "stage1.ckpt" : fs::path(run.paths.stage1_checkpoint);
  }
  fs::path stats_path() const {
    return run.paths.stats.empty() ? out_dir / "stage1" / "stats.json" : fs::path(run.paths.stats);
  }
  fs::path stage2_path() const {
    return run.paths.stage2_checkpoint.empty() ? out_dir / "stage2" / "stage2.ckpt" : fs::path(run.paths.stage2_checkpoint);
  }
  LogFn logger() const {
    return [this](const std::string& line) { err << line << '\n'; };
  }
};

std::string hex(uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string size_str(int64_t h, int64_t w) { return std::to_string(h) + "x" + std::to_string(w); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

LatentStats load_stats_checked(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("latent statistics not found: " + path.string());
  return load_stats(path);
}

int cmd_train_stage1(Context& ctx, const std::optional<fs::path>& resume) {
  const Stage1Run run{ctx.run.data, ctx.run.stage1, ctx.run.stage1_train};
  const RunPaths p = run_stage1(run, ctx.out_dir / "stage1", resume, ctx.config, ctx.logger());
  ctx.out << "checkpoint: " << p.checkpoint.string() << '\n'
          << "stats: " << (p.out_dir / "stats.json").string() << '\n'
          << "metrics: " << p.metrics.string() << '\n';
  return kExitOk;
}

int cmd_compute_stats(Context& ctx, const std::string& output) {
  const auto data = make_dataset(ctx.run.data);
  const LoadedStage1 s1 = load_stage1(ctx.stage1_path());
  const LatentStats stats =
      compute_latent_stats(*data, *s1.models, ctx.run.stage1.stats_subsample, ctx.run.stage1_train.seed);
  const fs::path dest = output.empty() ? ctx.stats_path() : fs::path(output);
  save_stats(dest, stats);
  ctx.out << "stats: " << dest.string() << " (" << stats.count << " latents, " << stats.channels() << " channels)\n";
  return kExitOk;
}

int cmd_train_stage2(Context& ctx, const std::optional<fs::path>& resume) {
  Stage2Run run{ctx.run.data, ctx.run.stage2, ctx.run.stage2_train, ctx.stage1_path(), ctx.stats_path()};
  const RunPaths p = run_stage2(run, ctx.out_dir / "stage2", resume, ctx.config, ctx.logger());
  ctx.out << "checkpoint: " << p.checkpoint.string() << '\n' << "metrics: " << p.metrics.string() << '\n';
  return kExitOk;
}

struct Pipeline {
  LoadedStage1 stage1;
  LatentStats stats;
  LoadedStage2 stage2;
};

Pipeline load_pipeline(const Context& ctx) {
  Pipeline p{load_stage1(ctx.stage1_path()), load_stats_checked(ctx.stats_path()),
             load_stage2(ctx.stage2_path(), ctx.run.generate.use_ema)};
  if (p.stats.channels() != p.stage2.latent_shape[0] ||
      p.stage1.models->config.encoder.channels != p.stage2.latent_shape[0]) {
    throw std::runtime_error("stage-1 checkpoint, statistics and stage-2 checkpoint disagree on latent channels");
  }
  return p;
}

GenerateOptions generate_options(const GenerateConfig& g) { return {g.prompt, g.seed, g.steps, g.cfg_scale}; }

int cmd_generate(Context& ctx, const std::vector<std::pair<int64_t, int64_t>>& sizes, const std::string& out_dir) {
  const Pipeline p = load_pipeline(ctx);
  const GeneratedLatent gen =
      generate_latent(*p.stage2.models, p.stats, p.stage2.latent_shape, generate_options(ctx.run.generate));
  const fs::path dir = out_dir.empty() ? ctx.out_dir / "generate" : fs::path(out_dir);
  fs::create_directories(dir);
  json report = {{"prompt", ctx.run.generate.prompt},
                 {"seed", ctx.run.generate.seed},
                 {"latent_shape", p.stage2.latent_shape},
                 {"denoiser_tokens", gen.denoiser_tokens},
                 {"latent_checksum", hex(gen.checksum)},
                 {"renders", json::array()}};
  ctx.out << "denoiser tokens: " << gen.denoiser_tokens << '\n' << "latent checksum: " << hex(gen.checksum) << '\n';
  for (const auto& [h, w] : sizes) {
    const Tensor img = p.stage1.models->render(gen.latent, h, w);
    const fs::path file = dir / ("sample_" + size_str(h, w) + ".png");
    image::write_png(file, img);
    report["renders"].push_back({{"height", h}, {"width", w}, {"render_tokens", h * w}, {"file", file.string()}});
    ctx.out << "render " << size_str(h, w) << ": " << h * w << " tokens -> " << file.string() << '\n';
  }
  write_text_file(dir / "report.json", report.dump(2) + "\n");
  return kExitOk;
}

int cmd_reconstruct(Context& ctx, const std::string& input, double scale, const std::string& truth,
                    const std::string& output) {
  const LoadedStage1 s1 = load_stage1(ctx.stage1_path());
  const Tensor img = image::read_png(input);
  const int64_t h = round_half_even(scale * static_cast<double>(img.dim(1)));
  const int64_t w = round_half_even(scale * static_cast<double>(img.dim(2)));
  if (h < 1 || w < 1) throw std::runtime_error("scale produces an empty output");
  const Tensor rec = s1.models->render(s1.models->encode(img), h, w);
  image::write_png(output, rec);
  ctx.out << "output: " << output << " (" << size_str(h, w) << ")\n";
  if (!truth.empty()) {
    const Tensor gt = image::read_png(truth);
    if (gt.shape() != rec.shape()) {
      throw std::runtime_error("ground truth is " + size_str(gt.dim(1), gt.dim(2)) + ", output is " + size_str(h, w));
    }
    ctx.out << "L1: " << std::setprecision(6) << image::mean_abs_error(rec, gt) << '\n';
  }
  return kExitOk;
}

int cmd_bench(Context& ctx, const std::string& json_path) {
  const BenchConfig& b = ctx.run.bench;
  const Pipeline p = load_pipeline(ctx);
  const Shape& ls = p.stage2.latent_shape;
  std::vector<std::pair<int64_t, int64_t>> sizes = b.sizes;
  if (sizes.empty()) {
    for (double s : b.scales) {
      sizes.emplace_back(round_half_even(s * static_cast<double>(ls[1])), round_half_even(s * static_cast<double>(ls[2])));
    }
  }
  const GenerateOptions opts = generate_options(ctx.run.generate);
  json rows = json::array();
  for (const auto& [h, w] : sizes) {
    std::vector<double> t_denoise, t_render;
    GeneratedLatent gen;
    for (int i = 0; i < b.warmup + b.repeats; ++i) {
      const auto a = Clock::now();
      gen = generate_latent(*p.stage2.models, p.stats, ls, opts);
      const auto mid = Clock::now();
      const Tensor img = p.stage1.models->render(gen.latent, h, w);
      const auto end = Clock::now();
      if (i >= b.warmup) {
        t_denoise.push_back(std::chrono::duration<double>(mid - a).count());
        t_render.push_back(std::chrono::duration<double>(end - mid).count());
      }
    }
    rows.push_back({{"height", h},
                    {"width", w},
                    {"denoise_tokens", gen.denoiser_tokens},
                    {"render_tokens", h * w},
                    {"denoise_seconds", median(t_denoise)},
                    {"render_seconds", median(t_render)},
                    {"latent_checksum", hex(gen.checksum)}});
  }
  const json report = {{"latent_shape", ls},
                       {"timing", "median of " + std::to_string(b.repeats) + " runs after " +
                                      std::to_string(b.warmup) + " warm-up"},
                       {"rows", rows}};
  ctx.out << std::left << std::setw(12) << "size" << std::setw(16) << "denoise_tokens" << std::setw(15)
          << "render_tokens" << std::setw(14) << "denoise_s" << std::setw(12) << "render_s"
          << "latent_checksum\n";
  for (const json& r : rows) {
    ctx.out << std::left << std::setw(12) << size_str(r["height"], r["width"]) << std::setw(16)
            << r["denoise_tokens"].get<int64_t>() << std::setw(15) << r["render_tokens"].get<int64_t>()
            << std::setw(14) << std::fixed << std::setprecision(4) << r["denoise_seconds"].get<double>()
            << std::setw(12) << r["render_seconds"].get<double>() << r["latent_checksum"].get<std::string>() << '\n';
  }
  ctx.out.unsetf(std::ios::floatfield);
  const fs::path dest = json_path.empty() ? ctx.out_dir / "bench" / "bench_scaling.json" : fs::path(json_path);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  write_text_file(dest, report.dump(2) + "\n");
  ctx.out << "json: " << dest.string() << '\n';
  return kExitOk;
}

fs::path default_out_dir() {
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return "runs";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Arbitrary-resolution image generation with neural image fields", "nifdiff"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::vector<std::string> sets;
  auto common = [&](CLI::App* sc) {
    sc->add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    sc->add_option("--set", sets, "Override a config value, e.g. --set stage1.train.lr=1e-3");
    sc->add_option("-o,--out", out_dir, std::string("Output directory (default $") + kOutDirEnv + " or ./runs)");
  };

  std::string resume;
  std::optional<int64_t> steps;
  std::optional<uint64_t> seed;
  auto* s1 = app.add_subcommand("train-stage1", "Train the encoder and renderer");
  common(s1);
  s1->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  s1->add_option("--steps", steps, "Total training steps");
  s1->add_option("--seed", seed, "Training seed");

  std::string stats_out;
  auto* cs = app.add_subcommand("compute-stats", "Compute per-channel latent statistics");
  common(cs);
  cs->add_option("--output", stats_out, "Where to write the statistics");

  std::string stage1_ckpt, stats_path;
  auto* s2 = app.add_subcommand("train-stage2", "Train the latent denoiser");
  common(s2);
  s2->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  s2->add_option("--steps", steps, "Total training steps");
  s2->add_option("--seed", seed, "Training seed");
  s2->add_option("--stage1", stage1_ckpt, "Stage-1 checkpoint");
  s2->add_option("--stats", stats_path, "Latent statistics");

  std::optional<std::string> prompt;
  std::vector<std::string> sizes;
  std::optional<int> sample_steps;
  std::optional<double> cfg_scale;
  bool use_ema = false;
  std::string gen_dir;
  auto* gen = app.add_subcommand("generate", "Sample one latent and render it at each requested size");
  common(gen);
  gen->add_option("-p,--prompt", prompt, "Text prompt");
  gen->add_option("--size", sizes, "Output size HxW (repeatable)");
  gen->add_option("--seed", seed, "Sampling seed");
  gen->add_option("--steps", sample_steps, "Euler steps");
  gen->add_option("--cfg-scale", cfg_scale, "Classifier-free guidance scale");
  gen->add_flag("--ema", use_ema, "Use EMA weights");
  gen->add_option("--output-dir", gen_dir, "Directory for rendered images");

  std::string rec_in, rec_truth, rec_out;
  double rec_scale = 1.0;
  auto* rec = app.add_subcommand("reconstruct", "Encode an image and render it at a new scale");
  common(rec);
  rec->add_option("-i,--image", rec_in, "Input PNG")->required()->check(CLI::ExistingFile);
  rec->add_option("-s,--scale", rec_scale, "Output scale relative to the input")->check(CLI::PositiveNumber);
  rec->add_option("--ground-truth", rec_truth, "PNG at the output size for an L1 report")->check(CLI::ExistingFile);
  rec->add_option("--output", rec_out, "Output PNG")->required();

  std::vector<double> scales;
  std::optional<int> repeats;
  std::string bench_json;
  auto* bench = app.add_subcommand("bench-scaling", "Time denoising and rendering across output sizes");
  common(bench);
  bench->add_option("--scales", scales, "Output sizes as multiples of the latent size")->delimiter(',');
  bench->add_option("--sizes", sizes, "Explicit output sizes HxW")->delimiter(',');
  bench->add_option("-p,--prompt", prompt, "Text prompt");
  bench->add_option("--seed", seed, "Sampling seed");
  bench->add_option("--steps", sample_steps, "Euler steps");
  bench->add_option("--repeats", repeats, "Timed runs per size");
  bench->add_option("--json", bench_json, "Where to write the JSON table");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  // Resolution: defaults < config file < --set < dedicated flags.
  std::optional<Context> ctx;
  std::vector<std::pair<int64_t, int64_t>> gen_sizes;
  try {
    json cfg = default_config();
    if (!config_path.empty()) cfg = merge_config(cfg, json::parse(read_text_file(config_path)));
    for (const auto& s : sets) apply_override(cfg, s);
    const auto set = [&](const std::string& key, const json& v) { apply_override(cfg, key + "=" + v.dump()); };
    if (s1->parsed()) {
      if (steps) set("stage1.train.steps", *steps);
      if (seed) set("stage1.train.seed", *seed);
    }
    if (s2->parsed()) {
      if (steps) set("stage2.train.steps", *steps);
      if (seed) set("stage2.train.seed", *seed);
      if (!stage1_ckpt.empty()) set("paths.stage1_checkpoint", stage1_ckpt);
      if (!stats_path.empty()) set("paths.stats", stats_path);
    }
    if (gen->parsed() || bench->parsed()) {
      if (prompt) set("generate.prompt", *prompt);
      if (seed) set("generate.seed", *seed);
      if (sample_steps) set("generate.steps", *sample_steps);
      if (cfg_scale) set("generate.cfg_scale", *cfg_scale);
      if (use_ema) set("generate.use_ema", true);
    }
    if (bench->parsed()) {
      if (!scales.empty()) set("bench.scales", scales);
      if (repeats) set("bench.repeats", *repeats);
      if (!sizes.empty()) {
        json arr = json::array();
        for (const auto& s : sizes) {
          const auto [h, w] = parse_size(s);
          arr.push_back({h, w});
        }
        set("bench.sizes", arr);
      }
    }
    RunConfig run = from_json(cfg);
    run.stage1.validate();
    run.stage1_train.validate();
    run.stage2.validate();
    run.stage2_train.validate();
    if (run.stage1_train.stage != 1 || run.stage2_train.stage != 2) {
      throw std::invalid_argument("stage1.train.stage must be 1 and stage2.train.stage must be 2");
    }
    if (run.generate.steps < 1) throw std::invalid_argument("generate.steps must be at least 1");
    if (run.generate.height < 1 || run.generate.width < 1) throw std::invalid_argument("generate size must be positive");
    if (run.bench.repeats < 1 || run.bench.warmup < 0) throw std::invalid_argument("bench.repeats must be >= 1");
    for (const auto& [h, w] : run.bench.sizes)
      if (h < 1 || w < 1) throw std::invalid_argument("bench sizes must be positive");
    for (double s : run.bench.scales)
      if (!(s > 0.0)) throw std::invalid_argument("bench scales must be positive");
    if (gen->parsed()) {
      for (const auto& s : sizes) gen_sizes.push_back(parse_size(s));
      if (gen_sizes.empty()) gen_sizes.emplace_back(run.generate.height, run.generate.width);
    }
    ctx.emplace(Context{cfg, run, out_dir.empty() ? default_out_dir() : fs::path(out_dir), out, err});
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    const std::optional<fs::path> resume_path = resume.empty() ? std::nullopt : std::optional<fs::path>(resume);
    if (s1->parsed()) return cmd_train_stage1(*ctx, resume_path);
    if (cs->parsed()) return cmd_compute_stats(*ctx, stats_out);
    if (s2->parsed()) return cmd_train_stage2(*ctx, resume_path);
    if (gen->parsed()) return cmd_generate(*ctx, gen_sizes, gen_dir);
    if (rec->parsed()) return cmd_reconstruct(*ctx, rec_in, rec_scale, rec_truth, rec_out);
    if (bench->parsed()) return cmd_bench(*ctx, bench_json);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace nif::cli
