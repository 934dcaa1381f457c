#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "osf/aggregate.hpp"
#include "osf/corpus.hpp"
#include "osf/eval.hpp"
#include "osf/preprocess.hpp"
#include "osf/ssl.hpp"

namespace osf {

inline constexpr const char* kRunRootEnv = "OSF_RUN_ROOT";

// $OSF_RUN_ROOT when set, otherwise ./runs
std::filesystem::path default_run_root();

struct ExperimentConfig {
  std::string name = "run";
  CorpusSpec corpus = CorpusSpec::defaults();
  std::array<double, 3> split_ratios = {0.8, 0.1, 0.1};
  uint64_t preprocess_seed = 0;
  std::string encoder_preset = "tiny";
  PretrainConfig pretrain = PretrainConfig::defaults_for(Objective::dino);
  EvalOptions eval;
  std::vector<std::string> tasks = {"staging"};
  double data_fraction = 1.0;
  std::string source_mode = "multi";  // "multi" | "single:<cohort id>"
  std::vector<uint64_t> seeds = {0};
  std::vector<double> scale_fractions = {0.01, 0.1, 1.0};
  std::vector<std::string> scale_presets = {"tiny"};
  std::vector<std::string> missing_settings = {"full_montage", "head_band", "disorder_study",
                                               "micro_arch", "in_home"};
};

void validate(const ExperimentConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Indentation-based subset of YAML sufficient for config files: nested maps,
// lists of scalars or maps, scalar type inference, '#' comments.
nlohmann::json yaml_to_json(const std::string& text);

// Dispatches on the file extension: .json, or .yaml/.yml via yaml_to_json.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// cohort id for "single:<id>", nullopt for "multi"
std::optional<std::string> single_source_cohort(const std::string& source_mode);

// Whole-recording subsets, nested across fractions: the patient list is
// shuffled once per seed and the first floor(fraction*N) entries are kept
// (returned sorted). Rejects fractions that keep no recording.
std::vector<uint32_t> subsample_recordings(std::vector<uint32_t> patients, double fraction,
                                           uint64_t seed);

struct StageResult {
  std::string key;  // content hash of everything the stage reads
  std::filesystem::path dir;
  bool cache_hit = false;
};

// Content-addressed stage pipeline. Every stage directory is keyed by the
// configuration it reads plus its upstream stage keys; a DONE marker makes
// reruns free.
class ExperimentRun {
 public:
  explicit ExperimentRun(ExperimentConfig cfg,
                         std::filesystem::path root = default_run_root(),
                         std::ostream* log = nullptr);

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& root() const { return root_; }

  StageResult synth_stage();
  StageResult preprocess_stage();
  // Fraction/source subset of the training shard for pretraining.
  StageResult subsample_stage(double fraction, const std::string& source_mode, uint64_t seed);
  StageResult pretrain_stage(const StageResult& subsample, const std::string& preset,
                             uint64_t seed);
  EvalReport probe_report(const StageResult& pretrain, const TaskSpec& task, uint64_t seed,
                          const std::optional<MissingChannelSetting>& setting = std::nullopt);

  // cache keys, exposed so dependency coverage can be audited
  std::string synth_key() const;
  std::string preprocess_key() const;
  std::string subsample_key(double fraction, const std::string& source_mode,
                            uint64_t seed) const;
  std::string pretrain_key(const std::string& subsample_key, const std::string& preset,
                           uint64_t seed) const;

 private:
  StageResult stage(const std::string& name, const std::string& key,
                    const std::function<void(const std::filesystem::path&)>& build);
  void log(const std::string& line);

  ExperimentConfig cfg_;
  std::filesystem::path root_;
  std::ostream* log_ = nullptr;
};

struct RunArtifacts {
  std::filesystem::path run_dir;
  std::vector<EvalReport> reports;
};

// synth -> preprocess -> subsample -> pretrain -> linear probe for every
// (seed, task); writes config.json, reports.json and metrics.csv.
RunArtifacts run_experiment(const ExperimentConfig& cfg,
                            const std::filesystem::path& root = default_run_root(),
                            std::ostream* log = nullptr);

struct ScaleCell {
  std::string preset;
  double fraction = 1.0;
  long n_recordings = 0;
  EvalReport report;
};

struct ScaleStudyResult {
  std::vector<ScaleCell> cells;  // preset-major, fractions ascending
  std::filesystem::path dir;
  std::filesystem::path csv;
  std::filesystem::path svg;
};

// scale_fractions x scale_presets grid with the first seed; each cell
// pretrains on a nested recording subset and linear-probes the first task.
ScaleStudyResult scale_study(const ExperimentConfig& cfg,
                             const std::filesystem::path& root = default_run_root(),
                             std::ostream* log = nullptr);

struct MixArm {
  std::string name;
  std::string corpus_hash;
  long n_train_epochs = 0;
  PretrainResult pretrain;
  EvalReport report;
};

struct MixStudyResult {
  MixArm single_arm;
  MixArm multi_arm;
  std::string heldout_cohort;
  std::filesystem::path dir;
};

// Twin pretrains at matched step and sample budgets: one cohort vs a uniform
// cohort mixture, both evaluated on the held-out (last) cohort.
MixStudyResult mix_study(const ExperimentConfig& cfg,
                         const std::filesystem::path& root = default_run_root(),
                         std::ostream* log = nullptr);

// Linear probe of one task across missing-channel presets; writes a CSV next
// to the reports when out_csv is nonempty.
std::vector<EvalReport> missing_sweep(const std::filesystem::path& checkpoint_dir,
                                      const std::filesystem::path& train_shard,
                                      const std::filesystem::path& test_shard,
                                      const TaskSpec& task,
                                      const std::vector<std::string>& settings,
                                      const EvalOptions& opts,
                                      const std::filesystem::path& out_csv = {});

// protocol x task grid of AUROC values with explicit NA gaps
std::string protocol_task_table(const std::vector<EvalReport>& reports);

struct ReportResult {
  std::filesystem::path summary_csv;
  std::filesystem::path table_csv;
  int n_reports = 0;
};

// Consolidates every reports.json under run_dir into summary.csv and a
// protocol x task table.
ReportResult write_report(const std::filesystem::path& run_dir);

// N x D f32 embeddings plus a per-row label CSV, for external projection.
void export_embeddings(const std::filesystem::path& checkpoint_dir,
                       const std::filesystem::path& shard,
                       const std::filesystem::path& out_f32,
                       const std::filesystem::path& out_labels_csv);

}  // namespace osf
