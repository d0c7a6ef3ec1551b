#pragma once

// Config-driven pipeline behind the smile_lab tool.
//
// Subcommands and the artifacts they read (<) and write (>), all under the
// output directory:
//   gen-data  > source.bin target_train.bin target_test.bin
//   pretrain  < source.bin  > pretrained.ckpt pretrain_loss.csv
//   train     < pretrained.ckpt *.bin  > student.ckpt metrics.csv eval.csv
//   ablate    < pretrained.ckpt *.bin  > ablation_summary.csv
//   diagnose  < student.ckpt *.bin  > il_report.json pca_traj.csv
//   report    < ablation_summary.csv  > report.md report.csv

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "smile/diagnostics.hpp"
#include "smile/synth_data.hpp"
#include "smile/trainer.hpp"

namespace smile::cli {

inline constexpr const char* kOutputDirEnv = "SMILE_LAB_OUTPUT_DIR";

struct AblationSection {
  std::vector<Mode> modes{Mode::kFineTune, Mode::kMixup, Mode::kSmile};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t jobs = 1;
  bool interpolation_loss = true;  // add IL columns per cell
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "smile_out";

  TaskSpec task;
  double sampling_rate = 0.3;
  std::size_t test_per_class = 100;

  Architecture model;  // input shape and class counts follow `task`
  PretrainConfig pretrain;
  TrainConfig train;
  AblationSection ablation;
  ILConfig diagnostics;
  std::vector<ILLayer> il_layers{ILLayer::kLabel, ILLayer::kFeature};
  std::size_t trajectory_pairs = 4;

  /// Throws ConfigError on the first out-of-range field.
  void validate() const;
  Architecture architecture() const;
};

/// Defaults, then the document, then `key=value` overrides with dotted keys.
/// The global seed seeds every section that does not set its own. Unknown
/// keys and ill-typed values raise ConfigError.
ExperimentConfig parse_config(const nlohmann::json& doc, const std::vector<std::string>& overrides);
ExperimentConfig load_config(const std::filesystem::path* path,
                             const std::vector<std::string>& overrides);

nlohmann::json to_json(const ExperimentConfig& config);

/// Runs one invocation (argv without the program name). Returns the exit
/// status; failures print a single `error kind=... ` line on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace smile::cli
