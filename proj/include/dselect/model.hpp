#pragma once

// Multi-task mixture-of-experts models and the shared-bottom baseline.
//
// A model owns named parameter tensors. Training goes through an ExprGraph
// assembled from the spec (trainable tensors become graph parameters, frozen
// ones become constants). Inference uses Predictor, which evaluates the gates
// directly and only runs experts that received a nonzero weight.

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dselect/autodiff.hpp"
#include "dselect/baseline_gates.hpp"
#include "dselect/gate.hpp"
#include "dselect/rng.hpp"
#include "dselect/tensor.hpp"

namespace dselect::model {

enum class GateKind {
  dselect_static,
  dselect_per_example,
  topk,
  softmax,
  gumbel,
  ablation_anneal,
  ablation_entropy,
};

const char* gate_kind_name(GateKind kind);
GateKind parse_gate_kind(std::string_view name);  // ConfigError on unknown names

enum class LossKind { squared_error, cross_entropy };
enum class ExpertOutput { sum, vector };

struct GateSpec {
  GateKind kind = GateKind::dselect_static;
  bool per_example = false;  // topk and softmax; the DSelect-k kinds carry their own mode
  std::size_t n_experts = 4;
  std::size_t k = 2;
  double gamma = 1.0;
  double lambda = 0.0;
  double xi = 0.0;
  double temperature = 1.0;  // Gumbel and ablation gates
  bool use_bias = true;      // per-example DSelect-k
  bool anneal_gamma = false; // DSelect-k reads gamma from the bound schedule scalar

  bool is_per_example() const;
  bool is_dselect() const;
  bool is_ablation() const;
  bool operator==(const GateSpec&) const = default;
};

struct ExpertSpec {
  std::vector<std::size_t> widths{4};  // ReLU layer widths
  ExpertOutput output = ExpertOutput::sum;
  bool trainable = true;
};

struct TowerSpec {
  std::vector<std::size_t> hidden;  // ReLU widths before the final linear unit
  bool identity = false;            // pass the combined scalar through unchanged
  bool trainable = true;
};

struct ModelSpec {
  bool shared_bottom = false;
  std::size_t input_dim = 10;
  std::size_t tasks = 1;
  ExpertSpec expert;  // the bottom network when shared_bottom
  GateSpec gate;
  TowerSpec tower;
  LossKind loss = LossKind::squared_error;
  std::vector<double> task_weights;  // empty: uniform 1/T

  std::size_t expert_output_dim() const;
  std::vector<double> resolved_task_weights() const;
  void validate() const;
};

std::string gate_prefix(std::size_t task);
std::string expert_prefix(std::size_t expert);
std::string tower_prefix(std::size_t task);

// Leaf names bound alongside the parameters.
inline constexpr const char* kInputLeaf = "x";
inline constexpr const char* kLabelLeaf = "y";
inline constexpr const char* kTaskWeightLeaf = "task_weights";
inline constexpr const char* kInvGammaLeaf = "inv_gamma";
inline constexpr const char* kInvTemperatureLeaf = "inv_temperature";
inline constexpr const char* kGumbelNoiseLeaf = "gumbel_noise";

struct TrainingGraph {
  ExprGraph graph;
  NodeId predictions;                // [B, T] (logits for cross-entropy)
  NodeId task_losses;                // [T]
  NodeId loss;                       // scalar: weighted task losses + regularizers
  std::optional<NodeId> gate_weights;
  std::optional<NodeId> regularizer;
  std::optional<NodeId> encodings;   // DSelect-k S(.)
};

TrainingGraph build_training_graph(const ModelSpec& spec);

class MoeModel {
 public:
  explicit MoeModel(ModelSpec spec);

  const ModelSpec& spec() const noexcept { return spec_; }

  // Draws every parameter tensor from rng.
  void initialize(Rng& rng);

  std::map<std::string, Tensor>& parameters() noexcept { return params_; }
  const std::map<std::string, Tensor>& parameters() const noexcept { return params_; }
  const Tensor& parameter(const std::string& name) const;
  void set_parameter(const std::string& name, Tensor value);

  // Frozen tensors enter the training graph as constants.
  void freeze(const std::string& name);
  bool is_trainable(const std::string& name) const;
  std::size_t trainable_count() const;  // scalar values
  std::size_t gate_parameter_count() const;  // scalar values in the task gates

  // Current schedule values used for both training and inference.
  double gamma_now = 1.0;
  double temperature_now = 1.0;

  const TrainingGraph& graph() const;

  // Binds parameters, task weights and schedule scalars. Data leaves and the
  // Gumbel noise are bound by the caller.
  void bind_parameters(Bindings& bindings) const;

 private:
  ModelSpec spec_;
  std::map<std::string, Tensor> params_;
  std::set<std::string> frozen_;
  mutable std::optional<TrainingGraph> graph_;
};

struct GateEval {
  std::vector<double> weights;      // n
  double phantom_mass = 0.0;
  std::vector<double> encodings;    // DSelect-k S(z) values, k*m
};

struct ForwardResult {
  double output = 0.0;                  // tower output (a logit for cross-entropy)
  std::vector<std::size_t> evaluated;   // experts whose outputs were computed
};

// Read-only inference snapshot of a model.
class Predictor {
 public:
  explicit Predictor(const MoeModel& model);

  GateEval gate(std::size_t task, std::span<const double> x) const;
  std::vector<double> expert_output(std::size_t expert, std::span<const double> x) const;
  std::vector<double> bottom_output(std::span<const double> x) const;
  double tower(std::size_t task, std::span<const double> input) const;

  ForwardResult forward(std::span<const double> x, std::size_t task) const;
  // All task outputs; experts shared between tasks are evaluated once.
  std::vector<double> predict(std::span<const double> x) const;

 private:
  const MoeModel& model_;
  std::vector<gate::StaticDSelectParams> static_dselect_;
  std::vector<gate::PerExampleDSelectParams> per_example_dselect_;
  std::vector<baseline::LinearGateParams> linear_;
  std::vector<baseline::GumbelGateParams> gumbel_;
  std::vector<baseline::AblationGateParams> ablation_;
  std::vector<GateEval> static_cache_;
};

// Gate-weighted expert combination for one task, fed through its tower.
ForwardResult moe_forward(const MoeModel& model, std::span<const double> x, std::size_t task);
double shared_bottom_forward(const MoeModel& model, std::span<const double> x, std::size_t task);

// Parameters of a single dense ReLU layer and a logistic head, as used by the
// recovery data generator.
struct DenseLayer {
  Tensor w;  // units x inputs
  Tensor b;  // units
};

struct RecoverySource {
  std::vector<DenseLayer> experts;  // the data-generating experts
  Tensor head_w;                    // units
  double head_b = 0.0;
};

struct RecoveryModel {
  MoeModel model;
  std::vector<std::size_t> true_experts;  // positions of the copied experts, ascending
};

// 16 frozen experts: copies of the source experts at random positions, the
// rest freshly drawn from the same distribution; a trainable logistic head
// initialized from the source head; one trainable static gate with k = number
// of source experts.
RecoveryModel build_recovery_model(const RecoverySource& source, const GateSpec& gate, Rng& rng,
                                   std::size_t n_experts = 16);

}  // namespace dselect::model
