#include "osf/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "osf/util.hpp"

namespace osf {

std::filesystem::path default_run_root() {
  if (const char* env = std::getenv(kRunRootEnv); env && *env) return env;
  return "runs";
}

// ---- config -----------------------------------------------------------------

void validate(const ExperimentConfig& c) {
  if (c.name.empty()) throw std::invalid_argument("experiment name must be nonempty");
  validate(c.corpus);
  validate(c.pretrain);
  double rsum = c.split_ratios[0] + c.split_ratios[1] + c.split_ratios[2];
  if (std::abs(rsum - 1.0) > 1e-9)
    throw std::invalid_argument("split_ratios must sum to 1");
  EncoderConfig::from_preset(c.encoder_preset);
  for (const auto& p : c.scale_presets) EncoderConfig::from_preset(p);
  if (!(c.data_fraction > 0 && c.data_fraction <= 1.0))
    throw std::invalid_argument("data_fraction must be in (0, 1]");
  if (c.scale_fractions.empty()) throw std::invalid_argument("scale_fractions must be nonempty");
  for (double f : c.scale_fractions)
    if (!(f > 0 && f <= 1.0)) throw std::invalid_argument("scale fractions must be in (0, 1]");
  if (c.scale_presets.empty()) throw std::invalid_argument("scale_presets must be nonempty");
  if (c.seeds.empty()) throw std::invalid_argument("seeds must be nonempty");
  if (c.tasks.empty()) throw std::invalid_argument("tasks must be nonempty");
  for (const auto& t : c.tasks) TaskSpec::from_name(t);
  for (const auto& s : c.missing_settings) MissingChannelSetting::preset(s);
  if (auto cohort = single_source_cohort(c.source_mode)) {
    bool found = false;
    for (const auto& co : c.corpus.cohorts) found = found || co.id == *cohort;
    if (!found) throw std::invalid_argument("source_mode references unknown cohort: " + *cohort);
  }
}

std::optional<std::string> single_source_cohort(const std::string& source_mode) {
  if (source_mode == "multi") return std::nullopt;
  const std::string prefix = "single:";
  if (source_mode.rfind(prefix, 0) == 0 && source_mode.size() > prefix.size())
    return source_mode.substr(prefix.size());
  throw std::invalid_argument("source_mode must be 'multi' or 'single:<cohort>', got " +
                              source_mode);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"name", c.name},
                     {"corpus", c.corpus},
                     {"split_ratios", c.split_ratios},
                     {"preprocess_seed", c.preprocess_seed},
                     {"encoder_preset", c.encoder_preset},
                     {"pretrain", c.pretrain},
                     {"eval", c.eval},
                     {"tasks", c.tasks},
                     {"data_fraction", c.data_fraction},
                     {"source_mode", c.source_mode},
                     {"seeds", c.seeds},
                     {"scale_fractions", c.scale_fractions},
                     {"scale_presets", c.scale_presets},
                     {"missing_settings", c.missing_settings}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (j.contains("name")) c.name = j.at("name");
  if (j.contains("corpus")) c.corpus = j.at("corpus").get<CorpusSpec>();
  if (j.contains("split_ratios")) c.split_ratios = j.at("split_ratios");
  if (j.contains("preprocess_seed")) c.preprocess_seed = j.at("preprocess_seed");
  if (j.contains("encoder_preset")) c.encoder_preset = j.at("encoder_preset");
  if (j.contains("pretrain")) c.pretrain = j.at("pretrain").get<PretrainConfig>();
  if (j.contains("eval")) c.eval = j.at("eval").get<EvalOptions>();
  if (j.contains("tasks")) c.tasks = j.at("tasks").get<std::vector<std::string>>();
  if (j.contains("data_fraction")) c.data_fraction = j.at("data_fraction");
  if (j.contains("source_mode")) c.source_mode = j.at("source_mode");
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  if (j.contains("scale_fractions"))
    c.scale_fractions = j.at("scale_fractions").get<std::vector<double>>();
  if (j.contains("scale_presets"))
    c.scale_presets = j.at("scale_presets").get<std::vector<std::string>>();
  if (j.contains("missing_settings"))
    c.missing_settings = j.at("missing_settings").get<std::vector<std::string>>();
}

// ---- minimal YAML subset -----------------------------------------------------

namespace {

struct YamlLine {
  int indent = 0;
  std::string text;  // content without indentation
};

std::vector<YamlLine> yaml_lines(const std::string& text) {
  std::vector<YamlLine> out;
  std::istringstream ss(text);
  std::string raw;
  while (std::getline(ss, raw)) {
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    size_t i = 0;
    while (i < raw.size() && raw[i] == ' ') ++i;
    if (i >= raw.size() || raw[i] == '#') continue;
    if (raw.find('\t') != std::string::npos)
      throw std::invalid_argument("yaml: tabs are not supported");
    out.push_back({static_cast<int>(i), raw.substr(i)});
  }
  return out;
}

nlohmann::json yaml_scalar(std::string s) {
  auto strip = [](std::string& v) {
    while (!v.empty() && v.back() == ' ') v.pop_back();
    while (!v.empty() && v.front() == ' ') v.erase(v.begin());
  };
  strip(s);
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                        (s.front() == '\'' && s.back() == '\'')))
    return s.substr(1, s.size() - 2);
  if (s == "true") return true;
  if (s == "false") return false;
  if (s == "null" || s == "~") return nullptr;
  long long iv = 0;
  auto [ip, iec] = std::from_chars(s.data(), s.data() + s.size(), iv);
  if (iec == std::errc() && ip == s.data() + s.size()) return iv;
  try {
    size_t used = 0;
    double dv = std::stod(s, &used);
    if (used == s.size()) return dv;
  } catch (const std::exception&) {
  }
  return s;
}

nlohmann::json yaml_block(const std::vector<YamlLine>& lines, size_t& pos, int indent);

nlohmann::json yaml_list(const std::vector<YamlLine>& lines, size_t& pos, int indent) {
  auto arr = nlohmann::json::array();
  while (pos < lines.size() && lines[pos].indent == indent &&
         lines[pos].text.rfind("- ", 0) == 0) {
    std::string rest = lines[pos].text.substr(2);
    size_t colon = rest.find(':');
    const bool is_map_entry =
        colon != std::string::npos && (colon + 1 == rest.size() || rest[colon + 1] == ' ');
    if (is_map_entry) {
      // splice the inline entry back as a map line two columns deeper
      std::vector<YamlLine> sub = {{indent + 2, rest}};
      ++pos;
      while (pos < lines.size() && lines[pos].indent >= indent + 2) sub.push_back(lines[pos++]);
      size_t sp = 0;
      arr.push_back(yaml_block(sub, sp, indent + 2));
    } else {
      arr.push_back(yaml_scalar(rest));
      ++pos;
    }
  }
  return arr;
}

nlohmann::json yaml_block(const std::vector<YamlLine>& lines, size_t& pos, int indent) {
  if (pos >= lines.size()) return nullptr;
  if (lines[pos].text.rfind("- ", 0) == 0) return yaml_list(lines, pos, indent);
  auto obj = nlohmann::json::object();
  while (pos < lines.size() && lines[pos].indent == indent) {
    const std::string& t = lines[pos].text;
    if (t.rfind("- ", 0) == 0) break;
    size_t colon = t.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("yaml: expected 'key:' in line: " + t);
    std::string key = t.substr(0, colon);
    std::string rest = colon + 1 < t.size() ? t.substr(colon + 1) : "";
    while (!rest.empty() && rest.front() == ' ') rest.erase(rest.begin());
    ++pos;
    if (!rest.empty()) {
      obj[key] = yaml_scalar(rest);
    } else if (pos < lines.size() && lines[pos].indent > indent) {
      obj[key] = yaml_block(lines, pos, lines[pos].indent);
    } else {
      obj[key] = nullptr;
    }
  }
  return obj;
}

}  // namespace

nlohmann::json yaml_to_json(const std::string& text) {
  auto lines = yaml_lines(text);
  if (lines.empty()) return nlohmann::json::object();
  size_t pos = 0;
  auto j = yaml_block(lines, pos, lines.front().indent);
  if (pos != lines.size())
    throw std::invalid_argument("yaml: inconsistent indentation near: " + lines[pos].text);
  return j;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  nlohmann::json j;
  const std::string ext = path.extension().string();
  if (ext == ".yaml" || ext == ".yml")
    j = yaml_to_json(text);
  else
    j = nlohmann::json::parse(text);
  auto cfg = j.get<ExperimentConfig>();
  validate(cfg);
  return cfg;
}

// ---- subsampling -------------------------------------------------------------

std::vector<uint32_t> subsample_recordings(std::vector<uint32_t> patients, double fraction,
                                           uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1.0))
    throw std::invalid_argument("fraction must be in (0, 1]");
  std::sort(patients.begin(), patients.end());
  patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
  const auto keep = static_cast<size_t>(fraction * double(patients.size()));
  if (keep < 1)
    throw std::invalid_argument("fraction keeps no recording (" + std::to_string(fraction) +
                                " of " + std::to_string(patients.size()) + ")");
  Rng rng(seed);
  rng.shuffle(patients);
  patients.resize(keep);
  std::sort(patients.begin(), patients.end());
  return patients;
}

namespace {

// epochs whose patient passes the filter, copied into a new shard
size_t filter_shard(const std::filesystem::path& src, const std::filesystem::path& dst,
                    const std::function<bool(uint32_t)>& keep, const std::string& tag) {
  ShardReader reader(src);
  ShardWriter writer(dst, tag);
  for (size_t i = 0; i < reader.size(); ++i)
    if (keep(reader.patient_ids()[i])) writer.append(reader.read(i));
  size_t n = writer.count();
  writer.close();
  return n;
}

std::map<uint32_t, std::string> shard_cohorts(const std::filesystem::path& shard) {
  ShardReader reader(shard);
  std::map<uint32_t, std::string> out;
  for (auto& [pid, cid] : reader.manifest().at("patient_cohorts").items())
    out[static_cast<uint32_t>(std::stoul(pid))] = cid.get<std::string>();
  return out;
}

std::string shard_hash(const std::filesystem::path& shard) {
  return hex64(fnv1a64(ShardReader(shard).manifest().dump()));
}

void write_done(const std::filesystem::path& dir) { write_text_file(dir / "DONE", "ok\n"); }

std::string fmt(double v) {
  char buf[32];
  snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

// ---- stage pipeline ----------------------------------------------------------

ExperimentRun::ExperimentRun(ExperimentConfig cfg, std::filesystem::path root, std::ostream* log)
    : cfg_(std::move(cfg)), root_(std::move(root)), log_(log) {
  validate(cfg_);
  std::filesystem::create_directories(root_ / "stages");
}

void ExperimentRun::log(const std::string& line) {
  if (log_) *log_ << line << "\n";
}

std::string ExperimentRun::synth_key() const {
  nlohmann::json j = cfg_.corpus;
  return hex64(fnv1a64("synth:" + j.dump()));
}

std::string ExperimentRun::preprocess_key() const {
  nlohmann::json j{{"upstream", synth_key()},
                   {"ratios", cfg_.split_ratios},
                   {"seed", cfg_.preprocess_seed}};
  return hex64(fnv1a64("preprocess:" + j.dump()));
}

std::string ExperimentRun::subsample_key(double fraction, const std::string& source_mode,
                                         uint64_t seed) const {
  nlohmann::json j{{"upstream", preprocess_key()},
                   {"fraction", fraction},
                   {"source_mode", source_mode},
                   {"seed", seed}};
  return hex64(fnv1a64("subsample:" + j.dump()));
}

std::string ExperimentRun::pretrain_key(const std::string& subsample, const std::string& preset,
                                        uint64_t seed) const {
  nlohmann::json j{{"upstream", subsample},
                   {"pretrain", cfg_.pretrain},
                   {"preset", preset},
                   {"seed", seed}};
  return hex64(fnv1a64("pretrain:" + j.dump()));
}

StageResult ExperimentRun::stage(const std::string& name, const std::string& key,
                                 const std::function<void(const std::filesystem::path&)>& build) {
  StageResult res;
  res.key = key;
  res.dir = root_ / "stages" / (name + "-" + key);
  if (std::filesystem::exists(res.dir / "DONE")) {
    res.cache_hit = true;
    log("[cache] hit " + name + " " + key);
    return res;
  }
  log("[stage] run " + name + " " + key);
  std::filesystem::create_directories(res.dir);
  build(res.dir);
  write_done(res.dir);
  return res;
}

StageResult ExperimentRun::synth_stage() {
  return stage("synth", synth_key(), [&](const std::filesystem::path& dir) {
    auto manifest = synth_corpus_to_dir(cfg_.corpus, dir / "corpus");
    write_text_file(dir / "stats.csv", stats_to_csv(corpus_stats(manifest)));
  });
}

StageResult ExperimentRun::preprocess_stage() {
  auto synth = synth_stage();
  return stage("preprocess", preprocess_key(), [&](const std::filesystem::path& dir) {
    preprocess_corpus(synth.dir / "corpus", dir, cfg_.split_ratios, cfg_.preprocess_seed);
  });
}

StageResult ExperimentRun::subsample_stage(double fraction, const std::string& source_mode,
                                           uint64_t seed) {
  auto prep = preprocess_stage();
  const auto key = subsample_key(fraction, source_mode, seed);
  return stage("subsample", key, [&](const std::filesystem::path& dir) {
    const auto train = prep.dir / "train.shard";
    auto cohorts = shard_cohorts(train);
    auto cohort = single_source_cohort(source_mode);
    std::vector<uint32_t> pool;
    for (const auto& [pid, cid] : cohorts)
      if (!cohort || cid == *cohort) pool.push_back(pid);
    if (pool.empty()) throw std::runtime_error("no training recordings match " + source_mode);
    auto kept = subsample_recordings(pool, fraction, seed);
    std::set<uint32_t> keep(kept.begin(), kept.end());
    size_t n = filter_shard(train, dir / "pretrain.shard",
                            [&](uint32_t pid) { return keep.count(pid) > 0; }, "pretrain");
    nlohmann::json meta{{"fraction", fraction},
                        {"source_mode", source_mode},
                        {"seed", seed},
                        {"recordings", kept},
                        {"epochs", n}};
    write_text_file(dir / "subsample.json", meta.dump(2));
  });
}

StageResult ExperimentRun::pretrain_stage(const StageResult& subsample,
                                          const std::string& preset, uint64_t seed) {
  const auto key = pretrain_key(subsample.key, preset, seed);
  return stage("pretrain", key, [&](const std::filesystem::path& dir) {
    PretrainConfig pc = cfg_.pretrain;
    pc.seed = seed;
    pretrain(subsample.dir / "pretrain.shard", EncoderConfig::from_preset(preset), pc, dir);
  });
}

EvalReport ExperimentRun::probe_report(const StageResult& pre, const TaskSpec& task,
                                       uint64_t seed,
                                       const std::optional<MissingChannelSetting>& setting) {
  auto prep = preprocess_stage();
  EvalOptions opts = cfg_.eval;
  opts.seed = seed;
  opts.setting = setting;
  return linear_probe(pre.dir / "checkpoint", prep.dir / "train.shard", prep.dir / "test.shard",
                      task, opts);
}

// ---- full runs ---------------------------------------------------------------

RunArtifacts run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& root,
                            std::ostream* log) {
  ExperimentRun run(cfg, root, log);
  nlohmann::json cj = cfg;
  RunArtifacts out;
  out.run_dir = root / "runs" / (cfg.name + "-" + hex64(fnv1a64(cj.dump())));
  std::filesystem::create_directories(out.run_dir);
  write_text_file(out.run_dir / "config.json", cj.dump(2));

  for (uint64_t seed : cfg.seeds) {
    auto sub = run.subsample_stage(cfg.data_fraction, cfg.source_mode, seed);
    auto pre = run.pretrain_stage(sub, cfg.encoder_preset, seed);
    for (const auto& task_name : cfg.tasks)
      out.reports.push_back(run.probe_report(pre, TaskSpec::from_name(task_name), seed));
  }
  nlohmann::json rj = out.reports;
  write_text_file(out.run_dir / "reports.json", rj.dump(2));
  write_text_file(out.run_dir / "metrics.csv", reports_to_csv(out.reports));
  return out;
}

namespace {

std::string scale_csv(const std::vector<ScaleCell>& cells) {
  std::string csv = "preset,fraction,n_recordings,task,auroc,auprc\n";
  for (const auto& c : cells)
    csv += c.preset + "," + fmt(c.fraction) + "," + std::to_string(c.n_recordings) + "," +
           c.report.task + "," + fmt(c.report.auroc) + "," + fmt(c.report.auprc) + "\n";
  return csv;
}

// metric-vs-fraction line plot, one polyline per preset
std::string scale_svg(const std::vector<ScaleCell>& cells,
                      const std::vector<std::string>& presets,
                      const std::vector<double>& fractions) {
  const int w = 640, h = 420, ml = 70, mr = 20, mt = 30, mb = 50;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  double lo = 1.0, hi = 0.0;
  for (const auto& c : cells) {
    lo = std::min(lo, c.report.auroc);
    hi = std::max(hi, c.report.auroc);
  }
  if (!(hi > lo)) { lo -= 0.05; hi += 0.05; }
  const double pad = 0.05 * (hi - lo);
  lo -= pad; hi += pad;
  auto xs = [&](size_t i) {
    return ml + double(w - ml - mr) * (fractions.size() < 2 ? 0.5
                                       : double(i) / double(fractions.size() - 1));
  };
  auto ys = [&](double v) { return h - mb - (v - lo) / (hi - lo) * double(h - mt - mb); };
  svg << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
      << "' stroke='black'/>\n";
  svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
      << "' stroke='black'/>\n";
  for (size_t i = 0; i < fractions.size(); ++i)
    svg << "<text x='" << xs(i) << "' y='" << h - mb + 20
        << "' font-size='12' text-anchor='middle'>" << fmt(fractions[i]) << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    double v = lo + (hi - lo) * t / 4.0;
    svg << "<text x='" << ml - 8 << "' y='" << ys(v) + 4
        << "' font-size='12' text-anchor='end'>" << fmt(v) << "</text>\n";
  }
  svg << "<text x='" << (w / 2) << "' y='" << h - 12
      << "' font-size='13' text-anchor='middle'>pretraining data fraction</text>\n";
  for (size_t p = 0; p < presets.size(); ++p) {
    svg << "<polyline fill='none' stroke='" << colors[p % 5] << "' stroke-width='2' points='";
    for (size_t i = 0; i < fractions.size(); ++i) {
      for (const auto& c : cells)
        if (c.preset == presets[p] && c.fraction == fractions[i])
          svg << xs(i) << "," << ys(c.report.auroc) << " ";
    }
    svg << "'/>\n";
    svg << "<text x='" << w - mr - 5 << "' y='" << mt + 16 * double(p + 1)
        << "' font-size='12' text-anchor='end' fill='" << colors[p % 5] << "'>" << presets[p]
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace

ScaleStudyResult scale_study(const ExperimentConfig& cfg, const std::filesystem::path& root,
                             std::ostream* log) {
  ExperimentRun run(cfg, root, log);
  const uint64_t seed = cfg.seeds.front();
  ScaleStudyResult out;
  for (const auto& preset : cfg.scale_presets) {
    for (double fraction : cfg.scale_fractions) {
      auto sub = run.subsample_stage(fraction, cfg.source_mode, seed);
      auto pre = run.pretrain_stage(sub, preset, seed);
      ScaleCell cell;
      cell.preset = preset;
      cell.fraction = fraction;
      auto meta = nlohmann::json::parse(read_text_file(sub.dir / "subsample.json"));
      cell.n_recordings = static_cast<long>(meta.at("recordings").size());
      cell.report = run.probe_report(pre, TaskSpec::from_name(cfg.tasks.front()), seed);
      out.cells.push_back(std::move(cell));
    }
  }
  nlohmann::json cj = cfg;
  out.dir = root / "runs" / (cfg.name + "-scale-" + hex64(fnv1a64(cj.dump())));
  std::filesystem::create_directories(out.dir);
  out.csv = out.dir / "scale_study.csv";
  out.svg = out.dir / "scale_study.svg";
  write_text_file(out.csv, scale_csv(out.cells));
  write_text_file(out.svg, scale_svg(out.cells, cfg.scale_presets, cfg.scale_fractions));
  return out;
}

MixStudyResult mix_study(const ExperimentConfig& cfg, const std::filesystem::path& root,
                         std::ostream* log) {
  if (cfg.corpus.cohorts.size() < 2)
    throw std::invalid_argument("mix_study needs at least 2 cohorts");
  ExperimentRun run(cfg, root, log);
  const uint64_t seed = cfg.seeds.front();
  auto prep = run.preprocess_stage();

  const std::string heldout = cfg.corpus.cohorts.back().id;
  std::string single_cohort =
      single_source_cohort(cfg.source_mode).value_or(cfg.corpus.cohorts.front().id);
  if (single_cohort == heldout)
    throw std::invalid_argument("single-source cohort equals the held-out cohort");

  const auto train_shard = prep.dir / "train.shard";
  auto cohorts = shard_cohorts(train_shard);
  std::map<std::string, std::vector<uint32_t>> by_cohort;
  for (const auto& [pid, cid] : cohorts)
    if (cid != heldout) by_cohort[cid].push_back(pid);
  if (by_cohort.find(single_cohort) == by_cohort.end() || by_cohort.at(single_cohort).empty())
    throw std::runtime_error("no training recordings in cohort " + single_cohort);

  // matched recording budgets: the mixture draws the single arm's count,
  // spread as evenly as the pool allows
  const size_t m = by_cohort.at(single_cohort).size();
  std::set<uint32_t> single_keep(by_cohort.at(single_cohort).begin(),
                                 by_cohort.at(single_cohort).end());
  std::set<uint32_t> multi_keep;
  {
    Rng rng(seed);
    size_t remaining = m;
    size_t cohorts_left = by_cohort.size();
    for (auto& [cid, pids] : by_cohort) {
      std::sort(pids.begin(), pids.end());
      size_t take = std::min(pids.size(), (remaining + cohorts_left - 1) / cohorts_left);
      auto rr = rng.fork(fnv1a64(cid));
      rr.shuffle(pids);
      for (size_t i = 0; i < take; ++i) multi_keep.insert(pids[i]);
      remaining -= take;
      --cohorts_left;
    }
    if (remaining > 0)
      throw std::runtime_error("cohort pool too small for a matched mixture budget");
  }

  nlohmann::json cj = cfg;
  MixStudyResult out;
  out.heldout_cohort = heldout;
  out.dir = root / "runs" / (cfg.name + "-mix-" + hex64(fnv1a64(cj.dump())));
  std::filesystem::create_directories(out.dir);

  // matched sample budgets: both arms truncated to the same epoch count
  const auto single_path = out.dir / "single.shard";
  const auto multi_path = out.dir / "multi.shard";
  {
    ShardReader reader(train_shard);
    std::vector<size_t> single_rows, multi_rows;
    for (size_t i = 0; i < reader.size(); ++i) {
      const uint32_t pid = reader.patient_ids()[i];
      if (single_keep.count(pid)) single_rows.push_back(i);
      if (multi_keep.count(pid)) multi_rows.push_back(i);
    }
    const size_t n = std::min(single_rows.size(), multi_rows.size());
    if (n == 0) throw std::runtime_error("mix_study arms have no training epochs");
    single_rows.resize(n);
    multi_rows.resize(n);
    ShardWriter sw(single_path, "mix-single"), mw(multi_path, "mix-multi");
    for (size_t i : single_rows) sw.append(reader.read(i));
    for (size_t i : multi_rows) mw.append(reader.read(i));
    sw.close();
    mw.close();
    out.single_arm.n_train_epochs = static_cast<long>(n);
    out.multi_arm.n_train_epochs = static_cast<long>(n);
  }
  out.single_arm.name = "single:" + single_cohort;
  out.multi_arm.name = "multi";
  out.single_arm.corpus_hash = shard_hash(single_path);
  out.multi_arm.corpus_hash = shard_hash(multi_path);

  // matched step budgets
  PretrainConfig pc = cfg.pretrain;
  pc.seed = seed;
  if (pc.max_steps == 0) {
    const long spe =
        (out.single_arm.n_train_epochs + pc.batch_size - 1) / pc.batch_size;
    pc.max_steps = spe * pc.max_epochs;
  }
  const auto enc_cfg = EncoderConfig::from_preset(cfg.encoder_preset);
  out.single_arm.pretrain = pretrain(single_path, enc_cfg, pc, out.dir / "single");
  out.multi_arm.pretrain = pretrain(multi_path, enc_cfg, pc, out.dir / "multi");

  // evaluate both arms on the held-out cohort
  auto eval_cohorts = shard_cohorts(prep.dir / "test.shard");
  auto in_heldout = [&](uint32_t pid) {
    auto it = cohorts.find(pid);
    if (it != cohorts.end()) return it->second == heldout;
    auto jt = eval_cohorts.find(pid);
    return jt != eval_cohorts.end() && jt->second == heldout;
  };
  const auto probe_train = out.dir / "heldout_train.shard";
  const auto probe_test = out.dir / "heldout_test.shard";
  if (filter_shard(train_shard, probe_train, in_heldout, "heldout-train") == 0)
    throw std::runtime_error("held-out cohort has no probe training epochs");
  if (filter_shard(prep.dir / "test.shard", probe_test, in_heldout, "heldout-test") == 0)
    throw std::runtime_error("held-out cohort has no test epochs");

  EvalOptions opts = cfg.eval;
  opts.seed = seed;
  const auto task = TaskSpec::from_name(cfg.tasks.front());
  out.single_arm.report =
      linear_probe(out.dir / "single" / "checkpoint", probe_train, probe_test, task, opts);
  out.multi_arm.report =
      linear_probe(out.dir / "multi" / "checkpoint", probe_train, probe_test, task, opts);

  nlohmann::json j{{"heldout_cohort", heldout},
                   {"single", {{"name", out.single_arm.name},
                               {"corpus_hash", out.single_arm.corpus_hash},
                               {"n_train_epochs", out.single_arm.n_train_epochs},
                               {"report", out.single_arm.report}}},
                   {"multi", {{"name", out.multi_arm.name},
                              {"corpus_hash", out.multi_arm.corpus_hash},
                              {"n_train_epochs", out.multi_arm.n_train_epochs},
                              {"report", out.multi_arm.report}}}};
  write_text_file(out.dir / "mix_study.json", j.dump(2));
  return out;
}

std::vector<EvalReport> missing_sweep(const std::filesystem::path& checkpoint_dir,
                                      const std::filesystem::path& train_shard,
                                      const std::filesystem::path& test_shard,
                                      const TaskSpec& task,
                                      const std::vector<std::string>& settings,
                                      const EvalOptions& opts,
                                      const std::filesystem::path& out_csv) {
  if (settings.empty()) throw std::invalid_argument("missing_sweep: no settings");
  std::vector<EvalReport> reports;
  for (const auto& name : settings) {
    EvalOptions o = opts;
    o.setting = MissingChannelSetting::preset(name);
    reports.push_back(linear_probe(checkpoint_dir, train_shard, test_shard, task, o));
  }
  if (!out_csv.empty()) write_text_file(out_csv, reports_to_csv(reports));
  return reports;
}

// ---- reporting ---------------------------------------------------------------

std::string protocol_task_table(const std::vector<EvalReport>& reports) {
  std::vector<std::string> protocols, tasks;
  for (const auto& r : reports) {
    if (std::find(protocols.begin(), protocols.end(), r.protocol) == protocols.end())
      protocols.push_back(r.protocol);
    if (std::find(tasks.begin(), tasks.end(), r.task) == tasks.end()) tasks.push_back(r.task);
  }
  std::string csv = "protocol";
  for (const auto& t : tasks) csv += "," + t;
  csv += "\n";
  for (const auto& p : protocols) {
    csv += p;
    for (const auto& t : tasks) {
      const EvalReport* found = nullptr;
      for (const auto& r : reports)
        if (r.protocol == p && r.task == t) found = &r;
      if (!found) {
        csv += ",NA";
      } else if (std::isnan(found->auroc)) {
        csv += "," + fmt(found->mae_bpm);
      } else {
        csv += "," + fmt(found->auroc);
      }
    }
    csv += "\n";
  }
  return csv;
}

ReportResult write_report(const std::filesystem::path& run_dir) {
  if (!std::filesystem::exists(run_dir))
    throw std::invalid_argument("no such run directory: " + run_dir.string());
  std::vector<EvalReport> reports;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(run_dir))
    if (e.is_regular_file() && e.path().filename() == "reports.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    auto j = nlohmann::json::parse(read_text_file(f));
    for (const auto& rj : j) reports.push_back(rj.get<EvalReport>());
  }
  if (reports.empty()) throw std::runtime_error("no reports.json found under " + run_dir.string());
  ReportResult out;
  out.n_reports = static_cast<int>(reports.size());
  out.summary_csv = run_dir / "summary.csv";
  out.table_csv = run_dir / "protocol_task_table.csv";
  write_text_file(out.summary_csv, reports_to_csv(reports));
  write_text_file(out.table_csv, protocol_task_table(reports));
  return out;
}

void export_embeddings(const std::filesystem::path& checkpoint_dir,
                       const std::filesystem::path& shard,
                       const std::filesystem::path& out_f32,
                       const std::filesystem::path& out_labels_csv) {
  auto enc = load_checkpoint(checkpoint_dir);
  auto emb = extract_embeddings(enc, shard);
  std::vector<float> flat(emb.data(), emb.data() + emb.size());
  write_f32_file(out_f32, flat);
  ShardReader reader(shard);
  std::string csv = "row,patient_id,stage,arousal,hypopnea,oxygen_desaturation,central_apnea\n";
  for (size_t i = 0; i < reader.size(); ++i) {
    const uint8_t bits = reader.event_bits()[i];
    csv += std::to_string(i) + "," + std::to_string(reader.patient_ids()[i]) + "," +
           std::to_string(int(reader.stages()[i]));
    for (int e = 0; e < kNumEventTypes; ++e) csv += "," + std::to_string((bits >> e) & 1);
    csv += "\n";
  }
  write_text_file(out_labels_csv, csv);
}

}  // namespace osf
