#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gate/autodiff.hpp"
#include "gate/error.hpp"
#include "gate/json_util.hpp"

namespace gate {

using ad::Matrix;
using ad::Var;

inline constexpr double kLeakySlope = 0.21;

enum class Precision { f64, f32 };

inline const char* to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

inline Precision precision_from_string(const std::string& s) {
  if (s == "f64" || s == "64") return Precision::f64;
  if (s == "f32" || s == "32") return Precision::f32;
  throw ConfigError("unknown precision \"" + s + "\" (expected f64 or f32)");
}

struct Dims {
  std::size_t d_in = 384;
  std::size_t d_hidden = 128;
  std::size_t heads = 4;
  std::size_t d_state = 384;
  std::size_t d_attn = 64;  // attention projection width
  std::size_t gat_layers = 1;
  std::size_t score_hidden = 64;
  std::size_t node_attn_hidden = 16;

  void validate() const {
    if (d_in == 0 || d_hidden == 0 || heads == 0 || d_state == 0 || gat_layers == 0 || score_hidden == 0 ||
        node_attn_hidden == 0)
      throw ConfigError("model dimensions must be >= 1");
    if (d_hidden % heads != 0) throw ConfigError("d_hidden must be divisible by heads");
    if (d_attn == 0 || d_attn % heads != 0) throw ConfigError("d_attn must be a positive multiple of heads");
    if (d_state != d_in) throw ConfigError("d_state must equal d_in (knowledge scores are S_t . e_k)");
  }
  bool operator==(const Dims&) const = default;
};

// Named tensors. Gradients share the type so the two stay shape-congruent.
struct TensorMap {
  std::map<std::string, Matrix> tensors;

  Matrix& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError("no tensor named \"" + name + "\"");
    return it->second;
  }
  const Matrix& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError("no tensor named \"" + name + "\"");
    return it->second;
  }
  std::size_t coordinate_count() const {
    std::size_t n = 0;
    for (const auto& [_, m] : tensors) n += static_cast<std::size_t>(m.size());
    return n;
  }
  bool all_finite() const {
    for (const auto& [_, m] : tensors)
      if (!m.allFinite()) return false;
    return true;
  }
  TensorMap zeros_like() const {
    TensorMap z;
    for (const auto& [name, m] : tensors) z.tensors.emplace(name, Matrix::Zero(m.rows(), m.cols()));
    return z;
  }
};

using Gradients = TensorMap;

struct ModelParams : TensorMap {
  static constexpr int kVersion = 1;
  Dims dims;
  Precision precision = Precision::f64;

  void quantize() {
    if (precision != Precision::f32) return;
    for (auto& [_, m] : tensors) m = m.cast<float>().cast<double>();
  }
};

// ---------------------------------------------------------------------------
// Parameter layout

namespace layout {

struct Shape {
  std::string name;
  Eigen::Index rows;
  Eigen::Index cols;
  bool bias;
};

inline void gat_shapes(std::vector<Shape>& out, const std::string& prefix, std::size_t in, std::size_t hidden) {
  auto r = static_cast<Eigen::Index>(hidden), c = static_cast<Eigen::Index>(in);
  out.push_back({prefix + ".w_left", r, c, false});
  out.push_back({prefix + ".w_right", r, c, false});
  out.push_back({prefix + ".attn", r, 1, false});
}

inline void mlp_shapes(std::vector<Shape>& out, const std::string& prefix, const std::vector<std::size_t>& sizes) {
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    auto r = static_cast<Eigen::Index>(sizes[l + 1]), c = static_cast<Eigen::Index>(sizes[l]);
    out.push_back({prefix + "." + std::to_string(l) + ".w", r, c, false});
    out.push_back({prefix + "." + std::to_string(l) + ".b", r, 1, true});
  }
}

inline void mha_shapes(std::vector<Shape>& out, const std::string& prefix, std::size_t d_query, std::size_t d_input,
                       std::size_t d_attn, std::size_t d_out) {
  auto m = static_cast<Eigen::Index>(d_attn);
  out.push_back({prefix + ".wq", m, static_cast<Eigen::Index>(d_query), false});
  out.push_back({prefix + ".wk", m, static_cast<Eigen::Index>(d_input), false});
  out.push_back({prefix + ".wv", m, static_cast<Eigen::Index>(d_input), false});
  out.push_back({prefix + ".wo", static_cast<Eigen::Index>(d_out), m, false});
}

// Node-attention MLP input: per-node [p_n, p_n - 1/|Adj|].
inline constexpr std::size_t kNodeAttnFeatures = 2;

inline std::vector<Shape> model_shapes(const Dims& d) {
  std::vector<Shape> s;
  for (std::size_t l = 0; l < d.gat_layers; ++l)
    gat_shapes(s, "graph_gat." + std::to_string(l), l == 0 ? d.d_in : d.d_hidden, d.d_hidden);
  s.push_back({"node_proj", static_cast<Eigen::Index>(d.d_state), static_cast<Eigen::Index>(d.d_hidden), false});
  gat_shapes(s, "score_gat", d.d_state + d.d_hidden, d.d_hidden);
  mlp_shapes(s, "score_mlp", {d.d_hidden, d.score_hidden, 1});
  mlp_shapes(s, "node_attn_mlp", {kNodeAttnFeatures, d.node_attn_hidden, 1});
  mha_shapes(s, "modality_attn", d.d_in, d.d_in, d.d_attn, d.d_state);
  mha_shapes(s, "state_attn", d.d_state, d.d_state, d.d_attn, d.d_state);
  return s;
}

}  // namespace layout

// Xavier-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
inline ModelParams init_params(const Dims& dims, std::uint64_t seed, Precision precision = Precision::f64) {
  dims.validate();
  ModelParams p;
  p.dims = dims;
  p.precision = precision;
  std::mt19937_64 rng(seed);
  auto shapes = layout::model_shapes(dims);
  std::sort(shapes.begin(), shapes.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  for (const auto& s : shapes) {
    Matrix m = Matrix::Zero(s.rows, s.cols);
    if (!s.bias) {
      double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    }
    p.tensors.emplace(s.name, std::move(m));
  }
  p.quantize();
  return p;
}

// Binds a parameter set to a tape; each tensor becomes one leaf on first use.
class ParamBinding {
 public:
  ParamBinding(ad::Tape& tape, const TensorMap& params, bool trainable = true)
      : tape_(&tape), params_(&params), trainable_(trainable) {}

  Var operator()(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    Var v = tape_->reference(params_->at(name), trainable_);
    leaves_.emplace(name, v);
    return v;
  }

  ad::Tape& tape() { return *tape_; }
  const TensorMap& params() const { return *params_; }

  // After tape.backward(): gradient of every tensor (zero if unused).
  Gradients gradients() const {
    Gradients g = params_->zeros_like();
    for (const auto& [name, v] : leaves_) g.at(name) = tape_->gradient_of(v);
    return g;
  }

 private:
  ad::Tape* tape_;
  const TensorMap* params_;
  bool trainable_;
  std::map<std::string, Var> leaves_;
};

// ---------------------------------------------------------------------------
// Layers

// Attentive-aggregation graph attention (one layer). `features` holds one
// column per node; `neighbors[i]` lists node i's neighbors (self-loop added
// here). Per head h with projections L = W_left X, R = W_right X:
//   logit(i, j) = a_h . LeakyReLU(L_h[:, i] + R_h[:, j])
//   out_h(i)    = sum_j softmax_j(logit) R_h[:, j]
// Heads are concatenated. Returns one column per node.
inline Var gat_forward(ParamBinding& p, const std::string& prefix, Var features,
                       const std::vector<std::vector<std::size_t>>& neighbors, std::size_t heads,
                       std::vector<std::vector<Eigen::VectorXd>>* attention = nullptr) {
  Var wl = p(prefix + ".w_left"), wr = p(prefix + ".w_right"), a = p(prefix + ".attn");
  if (wl.cols() != features.rows())
    throw ShapeError(prefix + ": features have " + std::to_string(features.rows()) + " rows, " + prefix +
                     ".w_left expects " + std::to_string(wl.cols()));
  const auto n = static_cast<std::size_t>(features.cols());
  if (neighbors.size() != n) throw ShapeError(prefix + ": adjacency size differs from feature count");
  const Eigen::Index dh = wl.rows() / static_cast<Eigen::Index>(heads);
  Var left = ad::matmul(wl, features), right = ad::matmul(wr, features);

  std::vector<std::vector<Var>> left_cols(heads), right_cols(heads);
  std::vector<Var> attn_h(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto off = static_cast<Eigen::Index>(h) * dh;
    Var lh = ad::slice_rows(left, off, dh), rh = ad::slice_rows(right, off, dh);
    attn_h[h] = ad::slice_rows(a, off, dh);
    for (std::size_t i = 0; i < n; ++i) {
      left_cols[h].push_back(ad::col(lh, static_cast<Eigen::Index>(i)));
      right_cols[h].push_back(ad::col(rh, static_cast<Eigen::Index>(i)));
    }
  }
  if (attention) attention->assign(n, {});

  std::vector<Var> outputs;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> scope{i};
    for (auto j : neighbors[i])
      if (j != i) scope.push_back(j);
    std::vector<Var> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<Var> logits, msgs;
      for (auto j : scope) {
        Var z = ad::leaky_relu(ad::add(left_cols[h][i], right_cols[h][j]), kLeakySlope);
        logits.push_back(ad::dot(attn_h[h], z));
        msgs.push_back(right_cols[h][j]);
      }
      Var alpha = ad::softmax(ad::stack(logits));
      if (attention) (*attention)[i].push_back(alpha.value().col(0));
      head_out.push_back(ad::matmul(ad::concat_cols(msgs), alpha));
    }
    outputs.push_back(ad::concat_rows(head_out));
  }
  return ad::concat_cols(outputs);
}

// Affine -> LeakyReLU per hidden layer, affine output.
inline Var mlp_forward(ParamBinding& p, const std::string& prefix, Var x, std::size_t layers) {
  for (std::size_t l = 0; l < layers; ++l) {
    Var w = p(prefix + "." + std::to_string(l) + ".w"), b = p(prefix + "." + std::to_string(l) + ".b");
    if (w.cols() != x.rows())
      throw ShapeError(prefix + "." + std::to_string(l) + ".w expects " + std::to_string(w.cols()) +
                       " inputs, got " + std::to_string(x.rows()));
    x = ad::add(ad::matmul(w, x), b);
    if (l + 1 < layers) x = ad::leaky_relu(x, kLeakySlope);
  }
  return x;
}

struct AttentionOutput {
  Var vector;
  // weights[h][j]: head h's attention on input j
  std::vector<Eigen::VectorXd> weights;
};

// Multi-head scaled dot-product attention of one query over a set of inputs.
inline AttentionOutput mha_forward(ParamBinding& p, const std::string& prefix, Var query,
                                   const std::vector<Var>& inputs, std::size_t heads) {
  if (inputs.empty()) throw ShapeError(prefix + ": attention needs at least one input");
  Var wq = p(prefix + ".wq"), wk = p(prefix + ".wk"), wv = p(prefix + ".wv"), wo = p(prefix + ".wo");
  if (wq.cols() != query.rows())
    throw ShapeError(prefix + ".wq expects " + std::to_string(wq.cols()) + " query rows, got " +
                     std::to_string(query.rows()));
  for (const auto& in : inputs)
    if (in.rows() != wk.cols())
      throw ShapeError(prefix + ".wk expects " + std::to_string(wk.cols()) + " input rows, got " +
                       std::to_string(in.rows()));
  Var x = ad::concat_cols(inputs);
  Var q = ad::matmul(wq, query), k = ad::matmul(wk, x), v = ad::matmul(wv, x);
  const Eigen::Index dh = wq.rows() / static_cast<Eigen::Index>(heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionOutput out;
  std::vector<Var> head_out;
  for (std::size_t h = 0; h < heads; ++h) {
    auto off = static_cast<Eigen::Index>(h) * dh;
    Var qh = ad::slice_rows(q, off, dh), kh = ad::slice_rows(k, off, dh), vh = ad::slice_rows(v, off, dh);
    Var logits = ad::scale(ad::matmul(ad::transpose(kh), qh), inv_sqrt);
    Var alpha = ad::softmax(logits);
    out.weights.push_back(alpha.value().col(0));
    head_out.push_back(ad::matmul(vh, alpha));
  }
  out.vector = ad::matmul(wo, ad::concat_rows(head_out));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json to_json(const Dims& d) {
  return {{"d_in", d.d_in},         {"d_hidden", d.d_hidden},         {"heads", d.heads},
          {"d_state", d.d_state},   {"gat_layers", d.gat_layers},     {"score_hidden", d.score_hidden},
          {"d_attn", d.d_attn},     {"node_attn_hidden", d.node_attn_hidden}};
}

inline Dims dims_from_json(const nlohmann::json& j) {
  Dims d;
  d.d_in = j.at("d_in").get<std::size_t>();
  d.d_hidden = j.at("d_hidden").get<std::size_t>();
  d.heads = j.at("heads").get<std::size_t>();
  d.d_state = j.at("d_state").get<std::size_t>();
  d.d_attn = j.value("d_attn", Dims{}.d_attn);
  d.gat_layers = j.value("gat_layers", std::size_t{1});
  d.score_hidden = j.value("score_hidden", std::size_t{64});
  d.node_attn_hidden = j.value("node_attn_hidden", std::size_t{16});
  d.validate();
  return d;
}

// Tensors stored column-major as plain JSON numbers (shortest round-trip form).
inline nlohmann::json to_json(const ModelParams& p) {
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, m] : p.tensors) {
    std::vector<double> data(m.data(), m.data() + m.size());
    tensors[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
  }
  return {{"version", ModelParams::kVersion},
          {"dims", to_json(p.dims)},
          {"precision", to_string(p.precision)},
          {"tensors", std::move(tensors)}};
}

inline ModelParams params_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != ModelParams::kVersion)
      throw ValidationError("unsupported checkpoint version " + j.at("version").dump());
    ModelParams p;
    p.dims = dims_from_json(j.at("dims"));
    p.precision = precision_from_string(j.at("precision").get<std::string>());
    for (const auto& s : layout::model_shapes(p.dims)) {
      const auto& t = j.at("tensors").at(s.name);
      auto rows = t.at("rows").get<Eigen::Index>(), cols = t.at("cols").get<Eigen::Index>();
      if (rows != s.rows || cols != s.cols)
        throw ShapeError("checkpoint tensor \"" + s.name + "\" has shape " + std::to_string(rows) + "x" +
                         std::to_string(cols) + ", expected " + std::to_string(s.rows) + "x" + std::to_string(s.cols));
      const auto& data = t.at("data");
      if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw ShapeError("checkpoint tensor \"" + s.name + "\" has the wrong element count");
      Matrix m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = data[static_cast<std::size_t>(i)].get<double>();
      if (!m.allFinite()) throw ValidationError("checkpoint tensor \"" + s.name + "\" holds non-finite values");
      p.tensors.emplace(s.name, std::move(m));
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path);
  out << to_json(p).dump() << '\n';
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return params_from_json(detail::parse_json_text(text));
}

// ---------------------------------------------------------------------------
// Gradient checking

using LossFn = std::function<Var(ad::Tape&, ParamBinding&)>;

inline double evaluate_loss(const LossFn& fn, const TensorMap& params) {
  ad::Tape tape;
  ParamBinding bind(tape, params, false);
  return fn(tape, bind).scalar();
}

inline Gradients analytic_gradients(const LossFn& fn, const TensorMap& params) {
  ad::Tape tape;
  ParamBinding bind(tape, params);
  Var loss = fn(tape, bind);
  tape.backward(loss);
  return bind.gradients();
}

struct GradCheckOptions {
  double epsilon = 1e-4;
  double fraction = 0.05;   // share of coordinates compared
  std::uint64_t seed = 0;
  // Magnitudes below the floor are compared on an absolute scale.
  double floor = 1e-4;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "tensor[index]"
};

// Central differences against a supplied analytic gradient on a seeded sample
// of coordinates. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult compare_gradients(const LossFn& fn, const TensorMap& params, const Gradients& analytic,
                                         const GradCheckOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  std::bernoulli_distribution take(std::clamp(opt.fraction, 0.0, 1.0));
  std::vector<std::pair<std::string, Eigen::Index>> coords;
  for (const auto& [name, m] : params.tensors)
    for (Eigen::Index i = 0; i < m.size(); ++i)
      if (take(rng)) coords.emplace_back(name, i);
  if (coords.empty() && params.coordinate_count() > 0) {
    const auto& first = *params.tensors.begin();
    coords.emplace_back(first.first, 0);
  }

  GradCheckResult res;
  TensorMap probe = params;
  for (const auto& [name, i] : coords) {
    double& x = probe.at(name).data()[i];
    const double orig = x;
    x = orig + opt.epsilon;
    double up = evaluate_loss(fn, probe);
    x = orig - opt.epsilon;
    double down = evaluate_loss(fn, probe);
    x = orig;
    double numeric = (up - down) / (2 * opt.epsilon);
    double a = analytic.at(name).data()[i];
    double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
    ++res.coordinates;
    if (rel > res.max_relative_error) {
      res.max_relative_error = rel;
      res.worst = name + "[" + std::to_string(i) + "]";
    }
  }
  return res;
}

inline GradCheckResult grad_check(const LossFn& fn, const TensorMap& params, const GradCheckOptions& opt = {}) {
  return compare_gradients(fn, params, analytic_gradients(fn, params), opt);
}

}  // namespace gate
