#pragma once
// Cross-entropy training with Adam, per-epoch evaluation and a versioned
// binary checkpoint that resumes bit-identically.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vmamba/architecture.hpp"
#include "vmamba/dataset.hpp"
#include "vmamba/metrics.hpp"

namespace vmamba::training {

enum class Precision { f32, f64 };  // spelled "single" and "double"
std::string_view to_string(Precision p);
Precision parse_precision(std::string_view text);

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;
  ssm::ScanMode scan = ssm::ScanMode::sequential;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep the values in `base`; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& doc, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& doc) { return from_json(doc, TrainConfig{}); }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// -log softmax(logits)[label] via log-sum-exp. logits: [K].
double cross_entropy(std::span<const double> logits, std::size_t label);
// Mean of per-row losses. logits: [B, K].
double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

struct AdamState {
  std::vector<Tensor> m;  // aligned with ParameterSet iteration order
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const ParameterSet& params);
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// Bias-corrected Adam update from each parameter's accumulated grad.
void adam_step(ParameterSet& params, AdamState& state, const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double eval_accuracy = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

std::string history_csv(std::span<const EpochRecord> history);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<volume::ClassLabel> predictions;
  metrics::ConfusionMatrix confusion;
};

// Eval-mode forward over `samples` in batches; labels are argmax of logits.
Evaluation evaluate(model::Model& model, std::span<const dataset::Sample> samples, ssm::ScanMode scan,
                    std::size_t batch_size = 16);

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  model::ModelConfig model_config;
  TrainConfig train_config;
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> norm_mean;
  std::vector<NamedTensor> norm_var;
  AdamState adam;
  std::uint64_t epoch = 0;
  std::string rng_state;
  std::vector<EpochRecord> history;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

using Bytes = std::vector<std::uint8_t>;

Bytes checkpoint_save(const Checkpoint& c);
// Throws FormatError on bad magic, unsupported version or corrupt lengths.
Checkpoint checkpoint_load(const Bytes& bytes);
// 16 hex digits of the FNV-1a hash of the serialised bytes.
std::string checkpoint_id(const Bytes& bytes);

// Rebuilds a model and copies parameter values and running statistics.
model::Model restore_model(const Checkpoint& c);

// One training run. Owns the model, optimiser state and shuffle RNG so a run
// can be checkpointed after any epoch and resumed without drift.
class Trainer {
 public:
  Trainer(model::ModelConfig model_config, TrainConfig config);
  explicit Trainer(const Checkpoint& c);

  // One pass over `train` in seeded shuffled order, then evaluation on
  // `eval`. Throws DivergenceError when a batch loss is not finite.
  EpochRecord run_epoch(std::span<const dataset::Sample> train, std::span<const dataset::Sample> eval);

  // Runs until config().epochs epochs are complete. `on_epoch` sees each
  // record as it is produced.
  void run(std::span<const dataset::Sample> train, std::span<const dataset::Sample> eval,
           const std::function<void(const EpochRecord&)>& on_epoch = {});

  Checkpoint checkpoint() const;

  model::Model& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  TrainConfig& config() { return config_; }
  std::size_t epoch() const { return epoch_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  const AdamState& adam() const { return adam_; }

  // A single optimiser step on one batch; returns the batch loss.
  double step(std::span<const dataset::Sample* const> batch);

 private:
  TrainConfig config_;
  model::Model model_;
  AdamState adam_;
  std::mt19937_64 rng_;
  std::size_t epoch_ = 0;
  std::vector<EpochRecord> history_;
};

// Stacks sample volumes into [B, D, H, W].
Tensor stack_volumes(std::span<const dataset::Sample* const> batch);

}  // namespace vmamba::training
