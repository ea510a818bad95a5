#include "ecthub/neural.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "ecthub/errors.hpp"

namespace ecthub::nn {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw ParseError("unknown activation '" + s + "'");
}

// ---- DenseGrads ---------------------------------------------------------------

void DenseGrads::set_zero() {
  for (auto& w : weight) w.setZero();
  for (auto& b : bias) b.setZero();
}

ParamList DenseGrads::params() {
  ParamList out;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    out.emplace_back(weight[i].data(), static_cast<std::size_t>(weight[i].size()));
    out.emplace_back(bias[i].data(), static_cast<std::size_t>(bias[i].size()));
  }
  return out;
}

// ---- DenseNet -------------------------------------------------------------------

DenseNet::DenseNet(const std::vector<int>& dims, const std::vector<Activation>& acts, Rng& rng) {
  if (dims.size() < 2 || acts.size() != dims.size() - 1)
    throw ShapeError("DenseNet needs dims.size() == acts.size() + 1 >= 2");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const int in = dims[i];
    const int out = dims[i + 1];
    if (in <= 0 || out <= 0) throw ShapeError("DenseNet dimensions must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    DenseLayer layer;
    layer.weight.resize(out, in);
    layer.bias.resize(out);
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = uniform(rng, -bound, bound);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = uniform(rng, -bound, bound);
    layer.act = acts[i];
    layers_.push_back(std::move(layer));
  }
}

DenseNet::DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ShapeError("DenseNet needs at least one layer");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].bias.size() != layers_[i].weight.rows())
      throw ShapeError(fmt::format("layer {}: bias size does not match weight rows", i));
    if (i > 0 && layers_[i].weight.cols() != layers_[i - 1].weight.rows())
      throw ShapeError(fmt::format("layer {}: input dim does not chain with layer {}", i, i - 1));
  }
}

int DenseNet::input_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
int DenseNet::output_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }

Matrix DenseNet::forward(const Matrix& x, Cache* cache) const {
  if (x.rows() != input_dim())
    throw ShapeError(fmt::format("input has {} rows, network expects {}", x.rows(), input_dim()));
  if (cache) {
    cache->inputs.clear();
    cache->outputs.clear();
  }
  Matrix h = x;
  for (const auto& layer : layers_) {
    Matrix z = layer.weight * h;
    z.colwise() += layer.bias;
    Matrix out = apply_activation(layer.act, z);
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->outputs.push_back(out);
    }
    h = std::move(out);
  }
  return h;
}

Vector DenseNet::forward(const Vector& x) const {
  Matrix m = x;
  return forward(m, nullptr).col(0);
}

Matrix DenseNet::backward(const Cache& cache, const Matrix& grad_out, DenseGrads& grads) const {
  if (cache.inputs.size() != layers_.size() || cache.outputs.size() != layers_.size())
    throw DomainError("backward called without a forward cache for this network");
  if (grads.weight.size() != layers_.size()) throw ShapeError("gradient buffer does not match network");
  Matrix delta = grad_out;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const auto& layer = layers_[k];
    if (delta.rows() != layer.weight.rows() || delta.cols() != cache.outputs[k].cols())
      throw ShapeError(fmt::format("layer {}: output gradient has shape {}x{}", k, delta.rows(), delta.cols()));
    Matrix dz = delta.cwiseProduct(activation_grad(layer.act, cache.outputs[k]));
    grads.weight[k].noalias() += dz * cache.inputs[k].transpose();
    grads.bias[k] += dz.rowwise().sum();
    delta = layer.weight.transpose() * dz;
  }
  return delta;
}

DenseGrads DenseNet::make_grads() const {
  DenseGrads g;
  for (const auto& layer : layers_) {
    g.weight.push_back(Matrix::Zero(layer.weight.rows(), layer.weight.cols()));
    g.bias.push_back(Vector::Zero(layer.bias.size()));
  }
  return g;
}

ParamList DenseNet::params() {
  ParamList out;
  for (auto& layer : layers_) {
    out.emplace_back(layer.weight.data(), static_cast<std::size_t>(layer.weight.size()));
    out.emplace_back(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
  }
  return out;
}

std::size_t DenseNet::num_params() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += layer.weight.size() + layer.bias.size();
  return n;
}

// ---- EmbeddingTable ---------------------------------------------------------------

EmbeddingTable::EmbeddingTable(int vocab, int dim, Rng& rng) : table_(dim, vocab) {
  if (vocab <= 0 || dim <= 0) throw ShapeError("embedding vocab and dim must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Eigen::Index c = 0; c < table_.cols(); ++c)
    for (Eigen::Index r = 0; r < table_.rows(); ++r) table_(r, c) = uniform(rng, -bound, bound);
}

Eigen::Ref<const Vector> EmbeddingTable::lookup(int index) const {
  if (index < 0 || index >= vocab())
    throw DomainError(fmt::format("embedding index {} outside vocabulary of {}", index, vocab()));
  return table_.col(index);
}

void EmbeddingTable::accumulate(int index, const Eigen::Ref<const Vector>& grad, Matrix& grad_table) const {
  if (index < 0 || index >= vocab())
    throw DomainError(fmt::format("embedding index {} outside vocabulary of {}", index, vocab()));
  grad_table.col(index) += grad;
}

// ---- activations and losses -----------------------------------------------------

Matrix apply_activation(Activation a, const Matrix& z) {
  switch (a) {
    case Activation::Identity: return z;
    case Activation::Relu: return z.cwiseMax(0.0);
    case Activation::Tanh: return z.array().tanh().matrix();
    case Activation::Sigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
  }
  return z;
}

Matrix activation_grad(Activation a, const Matrix& out) {
  switch (a) {
    case Activation::Identity: return Matrix::Ones(out.rows(), out.cols());
    case Activation::Relu: return (out.array() > 0.0).cast<double>().matrix();
    case Activation::Tanh: return (1.0 - out.array().square()).matrix();
    case Activation::Sigmoid: return (out.array() * (1.0 - out.array())).matrix();
  }
  return Matrix::Ones(out.rows(), out.cols());
}

Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double mx = logits.col(c).maxCoeff();
    Vector e = (logits.col(c).array() - mx).exp().matrix();
    out.col(c) = e / e.sum();
  }
  return out;
}

Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double mx = logits.col(c).maxCoeff();
    const double lse = mx + std::log((logits.col(c).array() - mx).exp().sum());
    out.col(c) = logits.col(c).array() - lse;
  }
  return out;
}

LossResult mse(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeError("mse: prediction and target shapes differ");
  const double n = static_cast<double>(pred.size());
  Matrix diff = pred - target;
  return {diff.squaredNorm() / n, diff * (2.0 / n)};
}

LossResult bce_with_logits(const Matrix& logits, const Matrix& target) {
  if (logits.rows() != target.rows() || logits.cols() != target.cols())
    throw ShapeError("bce: logits and target shapes differ");
  const double n = static_cast<double>(logits.size());
  double total = 0.0;
  Matrix grad(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const double z = logits(r, c);
      const double y = target(r, c);
      // log(1 + exp(z)) - y*z, stable for both signs of z.
      total += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
      grad(r, c) = (1.0 / (1.0 + std::exp(-z)) - y) / n;
    }
  }
  return {total / n, grad};
}

LossResult categorical_nll(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.cols()) != labels.size())
    throw ShapeError("categorical_nll: one label per column required");
  const double n = static_cast<double>(labels.size());
  Matrix logp = log_softmax(logits);
  Matrix grad = logp.array().exp().matrix();
  double total = 0.0;
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const int y = labels[c];
    if (y < 0 || y >= logits.rows()) throw DomainError(fmt::format("label {} out of range", y));
    total -= logp(y, c);
    grad(y, c) -= 1.0;
  }
  return {total / n, grad / n};
}

// ---- Adam -------------------------------------------------------------------------

bool all_finite(const ParamList& params) {
  for (const auto& p : params)
    for (double v : p)
      if (!std::isfinite(v)) return false;
  return true;
}

void Adam::step(const ParamList& params, const ParamList& grads) {
  if (params.size() != grads.size()) throw ShapeError("adam: parameter and gradient lists differ in length");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size())
      throw ShapeError(fmt::format("adam: tensor {} has {} params but {} grads", i, params[i].size(), grads[i].size()));
    for (std::size_t j = 0; j < grads[i].size(); ++j)
      if (!std::isfinite(grads[i][j]))
        throw TrainingError(fmt::format("adam: non-finite gradient {} at tensor {} index {} (step {})",
                                        grads[i][j], i, j, step_ + 1));
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Vector::Zero(static_cast<Eigen::Index>(p.size())));
      v_.push_back(Vector::Zero(static_cast<Eigen::Index>(p.size())));
    }
  } else if (m_.size() != params.size()) {
    throw ShapeError("adam: parameter list changed shape between steps");
  }

  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto g = grads[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const auto k = static_cast<Eigen::Index>(j);
      m(k) = cfg_.beta1 * m(k) + (1.0 - cfg_.beta1) * g[j];
      v(k) = cfg_.beta2 * v(k) + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m(k) / bc1;
      const double vhat = v(k) / bc2;
      p[j] -= cfg_.learning_rate * (mhat / (std::sqrt(vhat) + cfg_.epsilon) + cfg_.weight_decay * p[j]);
    }
  }
}

// ---- checkpoints --------------------------------------------------------------------
//
// Text container, one record per line:
//
//   ECTHUB-WEIGHTS 1
//   meta <key> <value>
//   tensor <name> <rows> <cols>
//   <rows*cols hexfloat values, column-major, space separated>
//   checksum <16 hex digits>
//
// The checksum is FNV-1a 64 over every byte preceding the checksum line.
// Hexfloat makes the round trip bit-exact.

namespace {

constexpr const char* kMagic = "ECTHUB-WEIGHTS";
constexpr int kVersion = 1;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

}  // namespace

const Matrix& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw ShapeError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

void add_dense_net(Checkpoint& ckpt, const std::string& prefix, const DenseNet& net) {
  ckpt.meta[prefix + ".layers"] = std::to_string(net.num_layers());
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const auto& layer = net.layer(i);
    const std::string base = fmt::format("{}.layer{}", prefix, i);
    ckpt.meta[base + ".act"] = to_string(layer.act);
    ckpt.tensors.push_back({base + ".weight", layer.weight});
    ckpt.tensors.push_back({base + ".bias", Matrix(layer.bias)});
  }
}

DenseNet read_dense_net(const Checkpoint& ckpt, const std::string& prefix) {
  auto it = ckpt.meta.find(prefix + ".layers");
  if (it == ckpt.meta.end()) throw ShapeError("checkpoint has no network '" + prefix + "'");
  const int n = std::stoi(it->second);
  std::vector<DenseLayer> layers;
  for (int i = 0; i < n; ++i) {
    const std::string base = fmt::format("{}.layer{}", prefix, i);
    auto act = ckpt.meta.find(base + ".act");
    if (act == ckpt.meta.end()) throw ShapeError("checkpoint is missing activation for " + base);
    DenseLayer layer;
    layer.weight = ckpt.tensor(base + ".weight");
    const Matrix& b = ckpt.tensor(base + ".bias");
    if (b.cols() != 1) throw ShapeError(base + ".bias is not a vector");
    layer.bias = b.col(0);
    layer.act = activation_from_string(act->second);
    layers.push_back(std::move(layer));
  }
  return DenseNet(std::move(layers));
}

void load_dense_net_into(const Checkpoint& ckpt, const std::string& prefix, DenseNet& net) {
  DenseNet stored = read_dense_net(ckpt, prefix);
  if (stored.num_layers() != net.num_layers())
    throw ShapeError(fmt::format("network '{}' has {} layers in checkpoint but {} in model", prefix,
                                 stored.num_layers(), net.num_layers()));
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const auto& src = stored.layer(i);
    auto& dst = net.layer(i);
    if (src.weight.rows() != dst.weight.rows() || src.weight.cols() != dst.weight.cols())
      throw ShapeError(fmt::format("layer {}.layer{}: checkpoint weight is {}x{}, model expects {}x{}", prefix, i,
                                   src.weight.rows(), src.weight.cols(), dst.weight.rows(), dst.weight.cols()));
    if (src.act != dst.act)
      throw ShapeError(fmt::format("layer {}.layer{}: activation {} in checkpoint, {} in model", prefix, i,
                                   to_string(src.act), to_string(dst.act)));
    dst.weight = src.weight;
    dst.bias = src.bias;
  }
}

void add_embedding(Checkpoint& ckpt, const std::string& name, const EmbeddingTable& table) {
  ckpt.tensors.push_back({name, table.table()});
}

void load_embedding_into(const Checkpoint& ckpt, const std::string& name, EmbeddingTable& table) {
  const Matrix& src = ckpt.tensor(name);
  if (src.rows() != table.table().rows() || src.cols() != table.table().cols())
    throw ShapeError(fmt::format("embedding {}: checkpoint is {}x{}, model expects {}x{}", name, src.rows(),
                                 src.cols(), table.table().rows(), table.table().cols()));
  table.table() = src;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string body = fmt::format("{} {}\n", kMagic, kVersion);
  for (const auto& [k, v] : ckpt.meta) body += fmt::format("meta {} {}\n", k, v);
  for (const auto& t : ckpt.tensors) {
    body += fmt::format("tensor {} {} {}\n", t.name, t.value.rows(), t.value.cols());
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      if (i) body += ' ';
      body += hexfloat(t.value.data()[i]);
    }
    body += '\n';
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IntegrityError("cannot open " + path + " for writing");
  out << body << fmt::format("checksum {:016x}\n", fnv1a(body));
  if (!out) throw IntegrityError("failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string all = ss.str();

  const auto pos = all.rfind("checksum ");
  if (pos == std::string::npos || (pos > 0 && all[pos - 1] != '\n'))
    throw IntegrityError(path + ": missing checksum (truncated file?)");
  const std::string body = all.substr(0, pos);
  std::uint64_t stored = 0;
  if (std::sscanf(all.c_str() + pos, "checksum %16lx", &stored) != 1)
    throw IntegrityError(path + ": unreadable checksum line");
  if (stored != fnv1a(body)) throw IntegrityError(path + ": checksum mismatch");

  std::istringstream lines(body);
  std::string line;
  if (!std::getline(lines, line)) throw IntegrityError(path + ": empty checkpoint");
  {
    std::istringstream hdr(line);
    std::string magic;
    int version = 0;
    hdr >> magic >> version;
    if (magic != kMagic) throw IntegrityError(path + ": not a weight file");
    if (version != kVersion)
      throw IntegrityError(fmt::format("{}: unsupported version {} (expected {})", path, version, kVersion));
  }

  Checkpoint ckpt;
  while (std::getline(lines, line)) {
    std::istringstream rec(line);
    std::string kind;
    rec >> kind;
    if (kind == "meta") {
      std::string key, value;
      rec >> key >> value;
      ckpt.meta[key] = value;
    } else if (kind == "tensor") {
      NamedTensor t;
      Eigen::Index rows = 0, cols = 0;
      rec >> t.name >> rows >> cols;
      if (!rec || rows < 0 || cols < 0) throw IntegrityError(path + ": bad tensor header: " + line);
      std::string values;
      if (!std::getline(lines, values)) throw IntegrityError(path + ": tensor " + t.name + " has no data");
      t.value.resize(rows, cols);
      const char* p = values.c_str();
      for (Eigen::Index i = 0; i < rows * cols; ++i) {
        char* end = nullptr;
        t.value.data()[i] = std::strtod(p, &end);
        if (end == p) throw IntegrityError(path + ": tensor " + t.name + " is short of values");
        p = end;
      }
      ckpt.tensors.push_back(std::move(t));
    } else if (!kind.empty()) {
      throw IntegrityError(path + ": unknown record '" + kind + "'");
    }
  }
  return ckpt;
}

void save_weights(const DenseNet& net, const std::string& path) {
  Checkpoint ckpt;
  add_dense_net(ckpt, "net", net);
  save_checkpoint(ckpt, path);
}

DenseNet load_weights(const std::string& path) { return read_dense_net(load_checkpoint(path), "net"); }

}  // namespace ecthub::nn
