#pragma once

// Minimal dense network substrate with analytic gradients: fully connected
// layers, embedding tables, a handful of activations and losses, and Adam
// with decoupled weight decay. Batches are stored column-wise (one sample per
// column) so a forward pass is one matrix product per layer.

#include <Eigen/Dense>

#include <map>
#include <span>
#include <string>
#include <vector>

#include "ecthub/random.hpp"

namespace ecthub::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Flat views over parameter (or gradient) storage, in a fixed order.
using ParamList = std::vector<std::span<double>>;

enum class Activation { Identity, Relu, Tanh, Sigmoid };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation act = Activation::Identity;
};

struct DenseGrads {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  void set_zero();
  ParamList params();
};

class DenseNet {
 public:
  struct Cache {
    std::vector<Matrix> inputs;   // input to layer i
    std::vector<Matrix> outputs;  // post-activation output of layer i
  };

  DenseNet() = default;
  // dims = {in, h1, ..., out}; acts has dims.size()-1 entries. Uniform fan-in init.
  DenseNet(const std::vector<int>& dims, const std::vector<Activation>& acts, Rng& rng);
  explicit DenseNet(std::vector<DenseLayer> layers);

  int input_dim() const;
  int output_dim() const;
  std::size_t num_layers() const { return layers_.size(); }
  const DenseLayer& layer(std::size_t i) const { return layers_[i]; }
  DenseLayer& layer(std::size_t i) { return layers_[i]; }

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Vector forward(const Vector& x) const;

  // Accumulates parameter gradients into `grads` and returns dLoss/dInput.
  Matrix backward(const Cache& cache, const Matrix& grad_out, DenseGrads& grads) const;

  DenseGrads make_grads() const;
  ParamList params();
  std::size_t num_params() const;

 private:
  std::vector<DenseLayer> layers_;
};

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(int vocab, int dim, Rng& rng);

  int vocab() const { return static_cast<int>(table_.cols()); }
  int dim() const { return static_cast<int>(table_.rows()); }

  // Column `index` of the (dim x vocab) table.
  Eigen::Ref<const Vector> lookup(int index) const;
  void accumulate(int index, const Eigen::Ref<const Vector>& grad, Matrix& grad_table) const;

  const Matrix& table() const { return table_; }
  Matrix& table() { return table_; }
  Matrix make_grad() const { return Matrix::Zero(table_.rows(), table_.cols()); }
  std::span<double> params() { return {table_.data(), static_cast<std::size_t>(table_.size())}; }

 private:
  Matrix table_;
};

// ---- activations and losses -------------------------------------------------

Matrix apply_activation(Activation a, const Matrix& z);
// Derivative expressed through the activation output.
Matrix activation_grad(Activation a, const Matrix& out);

// Column-wise numerically stable softmax / log-softmax.
Matrix softmax(const Matrix& logits);
Matrix log_softmax(const Matrix& logits);

struct LossResult {
  double value = 0.0;
  Matrix grad;  // dLoss/dPrediction, same shape as the prediction
};

// Mean over every element.
LossResult mse(const Matrix& pred, const Matrix& target);
// Mean negative log-likelihood of Bernoulli targets; gradient is w.r.t. the logits.
LossResult bce_with_logits(const Matrix& logits, const Matrix& target);
// Mean negative log-likelihood of class labels; gradient is w.r.t. the logits.
LossResult categorical_nll(const Matrix& logits, std::span<const int> labels);

// ---- optimizer --------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 0.01;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  // One bias-corrected Adam step with decoupled weight decay. Throws
  // TrainingError (parameters untouched) if any gradient is not finite.
  void step(const ParamList& params, const ParamList& grads);

  long steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::vector<Vector> m_;
  std::vector<Vector> v_;
};

bool all_finite(const ParamList& params);

// ---- checkpoints ------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Matrix value;
};

// In-memory form of a weight file: ordered tensors plus string metadata.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;

  const Matrix& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void add_dense_net(Checkpoint& ckpt, const std::string& prefix, const DenseNet& net);
DenseNet read_dense_net(const Checkpoint& ckpt, const std::string& prefix);
// Copies weights into an existing net; throws ShapeError naming the offending layer.
void load_dense_net_into(const Checkpoint& ckpt, const std::string& prefix, DenseNet& net);

void add_embedding(Checkpoint& ckpt, const std::string& name, const EmbeddingTable& table);
void load_embedding_into(const Checkpoint& ckpt, const std::string& name, EmbeddingTable& table);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

void save_weights(const DenseNet& net, const std::string& path);
DenseNet load_weights(const std::string& path);

}  // namespace ecthub::nn
