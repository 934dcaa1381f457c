#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "osf/encoder.hpp"
#include "osf/epoch.hpp"
#include "osf/metrics.hpp"
#include "osf/rng.hpp"

namespace osf {

enum class TaskKind { staging, arousal, hypopnea, ox_desat, central_apnea, hr_regression };

struct TaskSpec {
  TaskKind kind = TaskKind::staging;

  static TaskSpec from_name(const std::string& s);
  static std::vector<TaskSpec> all();
  std::string name() const;
  bool is_regression() const { return kind == TaskKind::hr_regression; }
  int n_classes() const;  // 4 for staging, 2 for event tasks, 0 for regression
  int label_of(const Epoch& e) const;
  float target_of(const Epoch& e) const;  // hr in bpm
};

struct MissingChannelSetting {
  std::string name = "full_montage";
  std::vector<ChannelGroup> kept = {ChannelGroup::Brain, ChannelGroup::Respiration,
                                    ChannelGroup::Cardiac, ChannelGroup::Somatic};

  static MissingChannelSetting full_montage() { return {}; }
  static MissingChannelSetting head_band() { return {"head_band", {ChannelGroup::Brain}}; }
  static MissingChannelSetting disorder_study() {
    return {"disorder_study",
            {ChannelGroup::Respiration, ChannelGroup::Cardiac, ChannelGroup::Somatic}};
  }
  static MissingChannelSetting micro_arch() {
    return {"micro_arch", {ChannelGroup::Brain, ChannelGroup::Cardiac, ChannelGroup::Somatic}};
  }
  static MissingChannelSetting in_home() { return {"in_home", {ChannelGroup::Respiration}}; }
  static MissingChannelSetting preset(const std::string& name);
  bool keeps(ChannelGroup g) const;
};

// Channels outside the kept groups are zeroed and marked invalid.
Epoch apply_missing_setting(const Epoch& e, const MissingChannelSetting& s);

struct EvalReport {
  std::string task;
  std::string protocol;  // linear_probe | finetune | fewshot-K | hr_probe
  std::string setting = "full_montage";
  double auroc = std::nan("");
  double auprc = std::nan("");
  double mae_bpm = std::nan("");
  double rmse_bpm = std::nan("");
  double baseline_mae_bpm = std::nan("");
  double baseline_rmse_bpm = std::nan("");
  uint64_t seed = 0;
  std::string config_hash;
  long n_train = 0;
  long n_test = 0;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);
std::string reports_to_csv(const std::vector<EvalReport>& reports);

struct EvalOptions {
  double probe_lr = 0.1;
  long probe_max_steps = 500;
  int probe_batch = 800;
  double finetune_lr = 1e-4;
  int finetune_epochs = 5;
  int finetune_batch = 8;
  int embed_batch = 64;
  uint64_t seed = 0;
  std::optional<MissingChannelSetting> setting;
};

void to_json(nlohmann::json& j, const EvalOptions& o);
void from_json(const nlohmann::json& j, EvalOptions& o);

using EmbeddingMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Frozen-encoder embeddings for every epoch of a shard, in shard order.
EmbeddingMatrix extract_embeddings(Encoder<float>& encoder, const std::filesystem::path& shard,
                                   const MissingChannelSetting* setting = nullptr,
                                   int batch = 64);

struct LinearHead {
  EmbeddingMatrix w;  // d x C (C=1 for regression)
  EmbeddingMatrix b;  // 1 x C
  EmbeddingMatrix logits(const EmbeddingMatrix& emb) const;
  // row-wise softmax in double precision
  Eigen::MatrixXd probabilities(const EmbeddingMatrix& emb) const;
};

struct HeadTrainOptions {
  double base_lr = 0.1;
  long max_steps = 500;
  int batch = 800;
  uint64_t seed = 0;
};

LinearHead train_logistic_head(const EmbeddingMatrix& emb, const std::vector<int>& labels,
                               int n_classes, const HeadTrainOptions& opts);
LinearHead train_regression_head(const EmbeddingMatrix& emb, const std::vector<float>& targets,
                                 const HeadTrainOptions& opts);

EvalReport linear_probe(const std::filesystem::path& checkpoint_dir,
                        const std::filesystem::path& train_shard,
                        const std::filesystem::path& test_shard, const TaskSpec& task,
                        const EvalOptions& opts = {});

EvalReport finetune(const std::filesystem::path& checkpoint_dir,
                    const std::filesystem::path& train_shard,
                    const std::filesystem::path& test_shard, const TaskSpec& task,
                    const EvalOptions& opts = {});

// Exactly k training examples per class, sampled uniformly with the seed.
EvalReport fewshot(const std::filesystem::path& checkpoint_dir,
                   const std::filesystem::path& train_shard,
                   const std::filesystem::path& test_shard, const TaskSpec& task, int k,
                   const EvalOptions& opts = {});

EvalReport hr_probe(const std::filesystem::path& checkpoint_dir,
                    const std::filesystem::path& train_shard,
                    const std::filesystem::path& test_shard, const EvalOptions& opts = {});

}  // namespace osf
