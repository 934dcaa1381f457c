// Command-line front end: config-driven corpus synthesis, preprocessing,
// pretraining, evaluation protocols, and study orchestration.

#include <CLI11.hpp>
#include <iostream>

#include "osf/experiment.hpp"
#include "osf/preprocess.hpp"
#include "osf/util.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Args {
  std::string config, corpus, out, shard, train_shard, test_shard, checkpoint, run_dir;
  std::string task = "staging";
  std::string setting;
  std::string aggregator = "mean_pool";
  std::string splits;
  std::vector<std::string> settings;
  std::string root;
  std::string preset;
  uint64_t seed = 0;
  bool seed_set = false;
  int k = 5;
  int disease = 0;
  int epochs = 0;
};

std::filesystem::path root_of(const Args& a) {
  return a.root.empty() ? osf::default_run_root() : std::filesystem::path(a.root);
}

void print_report(const osf::EvalReport& r) {
  nlohmann::json j = r;
  std::cout << j.dump(2) << "\n";
}

void write_single_report(const Args& a, const osf::EvalReport& r) {
  if (!a.out.empty()) {
    nlohmann::json j = nlohmann::json::array({r});
    osf::write_text_file(a.out, j.dump(2));
  }
  print_report(r);
}

osf::EvalOptions eval_opts(const Args& a) {
  osf::EvalOptions o;
  o.seed = a.seed;
  if (!a.setting.empty()) o.setting = osf::MissingChannelSetting::preset(a.setting);
  return o;
}

int run_disease(const Args& a) {
  auto enc = osf::load_checkpoint(a.checkpoint);
  auto manifest = osf::load_manifest(a.corpus);
  auto splits_json = nlohmann::json::parse(osf::read_text_file(a.splits));
  auto splits = splits_json.template get<osf::SplitSets>();
  const auto montage = osf::ChannelMontage::standard();
  std::vector<osf::EmbeddingSequence> train, test;
  for (const auto& entry : manifest.nights) {
    const bool in_train = splits.train.count(entry.patient_id) > 0;
    const bool in_test = splits.test.count(entry.patient_id) > 0;
    if (!in_train && !in_test) continue;
    auto night = osf::load_night(a.corpus, entry);
    auto epochs =
        osf::segment_epochs(osf::normalize_night(osf::trim_wake_edges(night), montage), montage);
    auto seq = osf::embed_night(enc, epochs, entry.disease_labels);
    (in_train ? train : test).push_back(std::move(seq));
  }
  osf::DiseaseHeadConfig cfg;
  cfg.kind = osf::aggregator_from_name(a.aggregator);
  cfg.seed = a.seed;
  if (a.epochs > 0) cfg.max_epochs = a.epochs;
  write_single_report(a, osf::train_disease_head(train, test, a.disease, cfg));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sleep-signal foundation pipeline"};
  app.require_subcommand(1);
  Args a;

  auto add_seed = [&](CLI::App* c) {
    c->add_option("--seed", a.seed)->each([&](const std::string&) { a.seed_set = true; });
  };

  auto* synth = app.add_subcommand("synth", "synthesize a corpus");
  synth->add_option("--config", a.config)->required();
  synth->add_option("--out", a.out)->required();

  auto* prep = app.add_subcommand("preprocess", "corpus -> split shards");
  prep->add_option("--corpus", a.corpus)->required();
  prep->add_option("--out", a.out)->required();
  add_seed(prep);

  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
  pre->add_option("--config", a.config)->required();
  pre->add_option("--shard", a.shard)->required();
  pre->add_option("--out", a.out)->required();
  pre->add_option("--preset", a.preset);
  add_seed(pre);

  auto add_eval_common = [&](CLI::App* c) {
    c->add_option("--checkpoint", a.checkpoint)->required();
    c->add_option("--train-shard", a.train_shard)->required();
    c->add_option("--test-shard", a.test_shard)->required();
    c->add_option("--task", a.task);
    c->add_option("--out", a.out);
    add_seed(c);
  };
  auto* probe = app.add_subcommand("probe", "linear probe on frozen embeddings");
  add_eval_common(probe);
  probe->add_option("--setting", a.setting);
  auto* ft = app.add_subcommand("finetune", "end-to-end fine-tuning");
  add_eval_common(ft);
  auto* fs = app.add_subcommand("fewshot", "K examples per class probe");
  add_eval_common(fs);
  fs->add_option("--k", a.k)->required();

  auto* dis = app.add_subcommand("disease", "patient-level disease head");
  dis->add_option("--checkpoint", a.checkpoint)->required();
  dis->add_option("--corpus", a.corpus)->required();
  dis->add_option("--splits", a.splits)->required();
  dis->add_option("--disease", a.disease)->required();
  dis->add_option("--aggregator", a.aggregator);
  dis->add_option("--epochs", a.epochs);
  dis->add_option("--out", a.out);
  add_seed(dis);

  auto* sweep = app.add_subcommand("missing-sweep", "probe across channel subsets");
  add_eval_common(sweep);
  sweep->add_option("--settings", a.settings);

  auto* runc = app.add_subcommand("run", "full config-driven pipeline");
  runc->add_option("--config", a.config)->required();
  runc->add_option("--root", a.root);

  auto* scale = app.add_subcommand("scale-study", "fraction x preset grid");
  scale->add_option("--config", a.config)->required();
  scale->add_option("--root", a.root);

  auto* mix = app.add_subcommand("mix-study", "single- vs multi-source pretraining");
  mix->add_option("--config", a.config)->required();
  mix->add_option("--root", a.root);

  auto* rep = app.add_subcommand("report", "consolidate run reports");
  rep->add_option("--run-dir", a.run_dir)->required();

  auto* exp = app.add_subcommand("export-embeddings", "N x D f32 + label CSV");
  exp->add_option("--checkpoint", a.checkpoint)->required();
  exp->add_option("--shard", a.shard)->required();
  exp->add_option("--out", a.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  // configuration phase: parse and validate everything the subcommand reads
  osf::ExperimentConfig cfg;
  try {
    if (!a.config.empty()) cfg = osf::load_experiment_config(a.config);
    if (!a.setting.empty()) osf::MissingChannelSetting::preset(a.setting);
    osf::TaskSpec::from_name(a.task);
    osf::aggregator_from_name(a.aggregator);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*synth) {
      auto manifest = osf::synth_corpus_to_dir(cfg.corpus, a.out);
      osf::write_text_file(std::filesystem::path(a.out) / "stats.csv",
                           osf::stats_to_csv(osf::corpus_stats(manifest)));
      std::cout << "synthesized " << manifest.nights.size() << " nights -> " << a.out << "\n";
    } else if (*prep) {
      auto res = osf::preprocess_corpus(a.corpus, a.out, {0.8, 0.1, 0.1}, a.seed);
      for (const auto& [split, n] : res.epoch_counts)
        std::cout << split << ": " << n << " epochs\n";
    } else if (*pre) {
      osf::PretrainConfig pc = cfg.pretrain;
      if (a.seed_set) pc.seed = a.seed;
      auto enc_cfg =
          osf::EncoderConfig::from_preset(a.preset.empty() ? cfg.encoder_preset : a.preset);
      auto res = osf::pretrain(a.shard, enc_cfg, pc, a.out);
      std::cout << "steps=" << res.steps << " final_loss=" << res.final_loss
                << " checkpoint=" << res.checkpoint_dir.string() << "\n";
      if (res.diverged) return kExitStage;
    } else if (*probe) {
      write_single_report(
          a, osf::linear_probe(a.checkpoint, a.train_shard, a.test_shard,
                               osf::TaskSpec::from_name(a.task), eval_opts(a)));
    } else if (*ft) {
      write_single_report(a, osf::finetune(a.checkpoint, a.train_shard, a.test_shard,
                                           osf::TaskSpec::from_name(a.task), eval_opts(a)));
    } else if (*fs) {
      write_single_report(a, osf::fewshot(a.checkpoint, a.train_shard, a.test_shard,
                                          osf::TaskSpec::from_name(a.task), a.k, eval_opts(a)));
    } else if (*dis) {
      return run_disease(a);
    } else if (*sweep) {
      std::vector<std::string> names = a.settings;
      if (names.empty())
        names = {"full_montage", "head_band", "disorder_study", "micro_arch", "in_home"};
      auto reports = osf::missing_sweep(a.checkpoint, a.train_shard, a.test_shard,
                                        osf::TaskSpec::from_name(a.task), names, eval_opts(a),
                                        std::filesystem::path(a.out));
      for (const auto& r : reports)
        std::cout << r.setting << ": auroc=" << r.auroc << "\n";
    } else if (*runc) {
      auto res = osf::run_experiment(cfg, root_of(a), &std::cerr);
      std::cout << "run dir: " << res.run_dir.string() << "\n";
    } else if (*scale) {
      auto res = osf::scale_study(cfg, root_of(a), &std::cerr);
      std::cout << "scale study: " << res.csv.string() << "\n";
    } else if (*mix) {
      auto res = osf::mix_study(cfg, root_of(a), &std::cerr);
      std::cout << "single " << res.single_arm.report.auroc << " vs multi "
                << res.multi_arm.report.auroc << " on " << res.heldout_cohort << "\n";
    } else if (*rep) {
      auto res = osf::write_report(a.run_dir);
      std::cout << res.n_reports << " reports -> " << res.summary_csv.string() << "\n";
    } else if (*exp) {
      std::filesystem::path base = a.out;
      osf::export_embeddings(a.checkpoint, a.shard, base.string() + ".f32",
                             base.string() + ".labels.csv");
      std::cout << "exported " << base.string() << ".f32\n";
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return kExitStage;
  }
  return kExitOk;
}
