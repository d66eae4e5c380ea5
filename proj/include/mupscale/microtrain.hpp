#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mupscale/param_engine.hpp"
#include "mupscale/rng.hpp"

// A minimal, fully instrumented three-layer network (input n x d_in, hidden
// n x n, output d_out x n) with per-layer width-scaled SGD/AdamW, a
// warmup-stable-decay schedule, mid-training learning-rate switches, layer
// freezing, and RMS-norm / update-decomposition / alignment instrumentation.
namespace mupscale::microtrain {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using params::LayerRole;
using params::OptimizerKind;
using params::ParamSpec;

enum class Nonlinearity { Identity, Relu, Tanh };

inline const char* to_string(Nonlinearity n) {
  switch (n) {
    case Nonlinearity::Identity: return "identity";
    case Nonlinearity::Relu: return "relu";
    case Nonlinearity::Tanh: return "tanh";
  }
  return "?";
}

inline Nonlinearity nonlinearity_from_string(const std::string& s) {
  if (s == "identity") return Nonlinearity::Identity;
  if (s == "relu") return Nonlinearity::Relu;
  if (s == "tanh") return Nonlinearity::Tanh;
  throw std::invalid_argument("unknown nonlinearity: " + s);
}

struct NetworkConfig {
  long long width = 64;
  long long d_in = 8;
  long long d_out = 8;
  Nonlinearity nonlinearity = Nonlinearity::Identity;
  bool layernorm_enabled = false;
  bool attention_probe_enabled = false;
  long long head_dim = 64;
  bool weight_tied = false;
  std::uint64_t seed = 0;
};

struct WsdFractions {
  double warmup = 0.2;
  double stable = 0.6;
  double decay = 0.2;
};

struct SwitchEvent {
  long long step = 0;
  LayerRole role = LayerRole::Input;
  Rational new_c;
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  long long steps = 100;
  long long batch_size = 32;
  double eta = 1e-2;
  double lambda = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  WsdFractions schedule;
  std::optional<double> grad_clip;
  std::vector<SwitchEvent> switch_events;
  std::set<LayerRole> frozen_roles;
  long long trace_stride = 0;  // 0: auto (steps/100); steps 0 and 1 always recorded
};

enum class TaskKind { TeacherStudentRegression, SyntheticClassification };

struct TaskSpec {
  TaskKind kind = TaskKind::TeacherStudentRegression;
  long long d_in = 8;
  long long d_out = 8;
  long long dataset_size = 2048;
  double noise_std = 0.0;
  std::uint64_t data_seed = 0;
  long long teacher_width = 256;  // convention: 4x the largest student width
};

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

inline void validate_schedule(const WsdFractions& f) {
  if (f.warmup < 0 || f.stable < 0 || f.decay < 0 ||
      std::abs(f.warmup + f.stable + f.decay - 1.0) > 1e-9)
    throw std::invalid_argument("WSD fractions must be non-negative and sum to 1");
}

// Linear ramp 0->1 over the warmup span, constant 1, linear decay 1->0.
inline double lr_schedule(long long t, long long total, const WsdFractions& f) {
  if (t < 0 || t >= total) throw std::invalid_argument("lr_schedule: step out of range");
  const double warm = f.warmup * static_cast<double>(total);
  const double dec = f.decay * static_cast<double>(total);
  const double td = static_cast<double>(t);
  if (td < warm) return td / warm;
  if (td >= static_cast<double>(total) - dec) return (static_cast<double>(total) - td) / dec;
  return 1.0;
}

// ---------------------------------------------------------------------------
// Task data
// ---------------------------------------------------------------------------

struct Dataset {
  MatrixXd inputs;    // d_in x (train + heldout)
  MatrixXd targets;   // d_out x cols (regression targets or one-hot rows for CE)
  std::vector<int> labels;  // classification only
  TaskKind kind = TaskKind::TeacherStudentRegression;
  long long train_count = 0;
  long long heldout_count = 0;
};

inline Dataset make_dataset(const TaskSpec& task, long long heldout = 256) {
  Dataset ds;
  ds.kind = task.kind;
  ds.train_count = task.dataset_size;
  ds.heldout_count = heldout;
  const long long total = task.dataset_size + heldout;
  ds.inputs.resize(task.d_in, total);
  for (long long j = 0; j < total; ++j)
    for (long long i = 0; i < task.d_in; ++i)
      ds.inputs(i, j) = rng::normal(task.data_seed, rng::Purpose::TaskData, 0,
                                    static_cast<std::uint64_t>(j * task.d_in + i));
  if (task.kind == TaskKind::TeacherStudentRegression) {
    const long long m = std::max<long long>(task.teacher_width, 1);
    MatrixXd t1(m, task.d_in), t2(task.d_out, m);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(task.d_in));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(m));
    for (long long i = 0; i < m; ++i)
      for (long long j = 0; j < task.d_in; ++j)
        t1(i, j) = s1 * rng::normal(task.data_seed, rng::Purpose::TaskTeacher, 1,
                                    static_cast<std::uint64_t>(i * task.d_in + j));
    for (long long i = 0; i < task.d_out; ++i)
      for (long long j = 0; j < m; ++j)
        t2(i, j) = s2 * rng::normal(task.data_seed, rng::Purpose::TaskTeacher, 2,
                                    static_cast<std::uint64_t>(i * m + j));
    ds.targets = t2 * (t1 * ds.inputs).array().tanh().matrix();
    if (task.noise_std > 0) {
      for (long long j = 0; j < total; ++j)
        for (long long i = 0; i < task.d_out; ++i)
          ds.targets(i, j) += task.noise_std *
                              rng::normal(task.data_seed, rng::Purpose::TaskNoise, 0,
                                          static_cast<std::uint64_t>(j * task.d_out + i));
    }
  } else {
    MatrixXd t(task.d_out, task.d_in);
    const double s = 1.0 / std::sqrt(static_cast<double>(task.d_in));
    for (long long i = 0; i < task.d_out; ++i)
      for (long long j = 0; j < task.d_in; ++j)
        t(i, j) = s * rng::normal(task.data_seed, rng::Purpose::TaskTeacher, 3,
                                  static_cast<std::uint64_t>(i * task.d_in + j));
    MatrixXd logits = t * ds.inputs;
    ds.labels.resize(total);
    for (long long j = 0; j < total; ++j) {
      Eigen::Index best = 0;
      VectorXd col = logits.col(j);
      if (task.noise_std > 0)
        for (long long i = 0; i < task.d_out; ++i)
          col(i) += task.noise_std *
                    rng::normal(task.data_seed, rng::Purpose::TaskNoise, 1,
                                static_cast<std::uint64_t>(j * task.d_out + i));
      col.maxCoeff(&best);
      ds.labels[j] = static_cast<int>(best);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Network state
// ---------------------------------------------------------------------------

struct AdamMoments {
  MatrixXd m, v;
  long long t = 0;
  void init_like(const MatrixXd& p) {
    m = MatrixXd::Zero(p.rows(), p.cols());
    v = MatrixXd::Zero(p.rows(), p.cols());
    t = 0;
  }
};

struct NetworkState {
  ParamSpec spec;
  NetworkConfig net;
  MatrixXd U, W, V;            // V is absent when weight_tied (V = U^T)
  VectorXd ln1_gain, ln1_bias;  // LayerNorm on h
  VectorXd ln2_gain, ln2_bias;  // LayerNorm on z
  AdamMoments mU, mW, mV, mg1, mb1, mg2, mb2;

  double multiplier(LayerRole role) const {
    const auto& e = spec.layer(role);
    return e.a ? params::npow(net.width, -*e.a) : 1.0;
  }
  MatrixXd output_matrix() const { return net.weight_tied ? U.transpose() : V; }
};

inline long long param_count(const NetworkConfig& net) {
  long long count = net.width * net.d_in + net.width * net.width;
  if (!net.weight_tied) count += net.d_out * net.width;
  if (net.layernorm_enabled) count += 4 * net.width;
  return count;
}

inline NetworkState init_network(const ParamSpec& spec, const NetworkConfig& net) {
  if (spec.weight_tied != net.weight_tied)
    throw std::invalid_argument("init_network: weight_tied mismatch between spec and network");
  if (net.weight_tied && net.d_in != net.d_out)
    throw std::invalid_argument("init_network: weight tying requires d_in == d_out");
  if (net.attention_probe_enabled && !spec.has_role(LayerRole::AttentionScale))
    throw std::invalid_argument("init_network: attention probe requires an attention scale role");

  NetworkState st;
  st.spec = spec;
  st.net = net;
  auto need_b = [&](LayerRole r) {
    const auto& e = spec.layer(r);
    if (!e.b) throw std::invalid_argument("init_network: missing init exponent for role");
    return params::npow(net.width, -*e.b);
  };
  // Base draws are keyed by (seed, layer, flat index) only, so gauge-related
  // specs (same seed, different exponents) reuse identical base randomness.
  auto fill = [&](MatrixXd& mat, std::uint64_t layer, double scale) {
    for (Eigen::Index i = 0; i < mat.rows(); ++i)
      for (Eigen::Index j = 0; j < mat.cols(); ++j)
        mat(i, j) = scale * rng::normal(net.seed, rng::Purpose::WeightInit, layer,
                                        static_cast<std::uint64_t>(i * mat.cols() + j));
  };
  st.U.resize(net.width, net.d_in);
  fill(st.U, 0, need_b(LayerRole::Input));
  st.W.resize(net.width, net.width);
  fill(st.W, 1, need_b(LayerRole::Hidden));
  if (!net.weight_tied) {
    st.V.resize(net.d_out, net.width);
    fill(st.V, 2, need_b(LayerRole::Output));
  }
  if (net.layernorm_enabled) {
    st.ln1_gain = VectorXd::Ones(net.width);
    st.ln1_bias = VectorXd::Zero(net.width);
    st.ln2_gain = VectorXd::Ones(net.width);
    st.ln2_bias = VectorXd::Zero(net.width);
  }
  st.mU.init_like(st.U);
  st.mW.init_like(st.W);
  if (!net.weight_tied) st.mV.init_like(st.V);
  if (net.layernorm_enabled) {
    st.mg1.init_like(st.ln1_gain);
    st.mb1.init_like(st.ln1_bias);
    st.mg2.init_like(st.ln2_gain);
    st.mb2.init_like(st.ln2_bias);
  }
  return st;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  MatrixXd xhat;       // normalized input
  VectorXd inv_std;    // per-column 1/sqrt(var + eps)
};

inline MatrixXd layernorm_forward(const MatrixXd& x, const VectorXd& gain, const VectorXd& bias,
                                  LayerNormCache& cache) {
  const Eigen::Index n = x.rows(), b = x.cols();
  cache.xhat.resize(n, b);
  cache.inv_std.resize(b);
  MatrixXd out(n, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const double mu = x.col(j).mean();
    const double var = (x.col(j).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(j) = inv;
    cache.xhat.col(j) = (x.col(j).array() - mu).matrix() * inv;
    out.col(j) = (cache.xhat.col(j).array() * gain.array() + bias.array()).matrix();
  }
  return out;
}

inline MatrixXd layernorm_backward(const MatrixXd& dout, const VectorXd& gain,
                                   const LayerNormCache& cache, VectorXd& dgain,
                                   VectorXd& dbias) {
  const Eigen::Index n = dout.rows(), b = dout.cols();
  dgain = (dout.array() * cache.xhat.array()).rowwise().sum().matrix();
  dbias = dout.rowwise().sum();
  MatrixXd dx(n, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto dxhat = (dout.col(j).array() * gain.array()).matrix();
    const double mean_dxhat = dxhat.mean();
    const double mean_dxhat_xhat = (dxhat.array() * cache.xhat.col(j).array()).mean();
    dx.col(j) = cache.inv_std(j) *
                (dxhat.array() - mean_dxhat - cache.xhat.col(j).array() * mean_dxhat_xhat)
                    .matrix();
  }
  return dx;
}

struct ForwardCache {
  MatrixXd x;        // d_in x B
  MatrixXd h;        // pre-LN first activation
  MatrixXd h_in;     // input fed to the nonlinearity (post-LN when enabled)
  MatrixXd p;        // phi(h_in), the hidden matrix input
  MatrixXd z;        // pre-LN second activation
  MatrixXd z_in;     // input fed to the output matrix (post-LN when enabled)
  MatrixXd f;        // network output
  LayerNormCache ln1, ln2;
};

inline MatrixXd apply_phi(const MatrixXd& x, Nonlinearity nl) {
  switch (nl) {
    case Nonlinearity::Identity: return x;
    case Nonlinearity::Relu: return x.cwiseMax(0.0);
    case Nonlinearity::Tanh: return x.array().tanh().matrix();
  }
  return x;
}

inline MatrixXd phi_grad(const MatrixXd& x, Nonlinearity nl) {
  switch (nl) {
    case Nonlinearity::Identity: return MatrixXd::Ones(x.rows(), x.cols());
    case Nonlinearity::Relu:
      return (x.array() > 0.0).cast<double>().matrix();
    case Nonlinearity::Tanh: {
      auto t = x.array().tanh();
      return (1.0 - t.square()).matrix();
    }
  }
  return MatrixXd::Ones(x.rows(), x.cols());
}

inline ForwardCache forward(const NetworkState& st, const MatrixXd& x) {
  if (x.rows() != st.net.d_in) throw std::invalid_argument("forward: input dimension mismatch");
  ForwardCache c;
  c.x = x;
  c.h = st.multiplier(LayerRole::Input) * (st.U * x);
  c.h_in = st.net.layernorm_enabled ? layernorm_forward(c.h, st.ln1_gain, st.ln1_bias, c.ln1)
                                    : c.h;
  c.p = apply_phi(c.h_in, st.net.nonlinearity);
  c.z = st.multiplier(LayerRole::Hidden) * (st.W * c.p);
  c.z_in = st.net.layernorm_enabled ? layernorm_forward(c.z, st.ln2_gain, st.ln2_bias, c.ln2)
                                    : c.z;
  c.f = st.multiplier(LayerRole::Output) *
        (st.net.weight_tied ? (st.U.transpose() * c.z_in).eval() : (st.V * c.z_in).eval());
  return c;
}

struct Gradients {
  MatrixXd gU, gW, gV;
  VectorXd g_ln1_gain, g_ln1_bias, g_ln2_gain, g_ln2_bias;
};

inline Gradients backward(const NetworkState& st, const ForwardCache& c, const MatrixXd& df) {
  if (df.rows() != c.f.rows() || df.cols() != c.f.cols())
    throw std::invalid_argument("backward: loss gradient shape mismatch");
  Gradients g;
  const double mu = st.multiplier(LayerRole::Input);
  const double mw = st.multiplier(LayerRole::Hidden);
  const double mv = st.multiplier(LayerRole::Output);
  const MatrixXd gv = mv * (df * c.z_in.transpose());  // d_out x n
  MatrixXd dz_in = st.net.weight_tied ? (mv * (st.U * df)).eval()
                                      : (mv * (st.V.transpose() * df)).eval();
  MatrixXd dz;
  if (st.net.layernorm_enabled)
    dz = layernorm_backward(dz_in, st.ln2_gain, c.ln2, g.g_ln2_gain, g.g_ln2_bias);
  else
    dz = std::move(dz_in);
  g.gW = mw * (dz * c.p.transpose());
  MatrixXd dp = mw * (st.W.transpose() * dz);
  MatrixXd dh_in = (dp.array() * phi_grad(c.h_in, st.net.nonlinearity).array()).matrix();
  MatrixXd dh;
  if (st.net.layernorm_enabled)
    dh = layernorm_backward(dh_in, st.ln1_gain, c.ln1, g.g_ln1_gain, g.g_ln1_bias);
  else
    dh = std::move(dh_in);
  g.gU = mu * (dh * c.x.transpose());
  if (st.net.weight_tied)
    g.gU += gv.transpose();
  else
    g.gV = gv;
  return g;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossGrad {
  double loss = 0.0;
  MatrixXd df;
};

// Mean squared error, normalized so each per-example loss-gradient entry is
// width-independent: l = ||f - y||^2 / (2 d_out), averaged over the batch.
inline LossGrad mse_loss(const MatrixXd& f, const MatrixXd& y) {
  LossGrad lg;
  const double scale = 1.0 / (static_cast<double>(f.rows()) * static_cast<double>(f.cols()));
  lg.loss = 0.5 * scale * (f - y).squaredNorm();
  lg.df = scale * (f - y);
  return lg;
}

inline LossGrad cross_entropy_loss(const MatrixXd& f, const std::vector<int>& labels) {
  LossGrad lg;
  const Eigen::Index b = f.cols();
  lg.df.resize(f.rows(), b);
  double total = 0.0;
  for (Eigen::Index j = 0; j < b; ++j) {
    VectorXd col = f.col(j);
    const double mx = col.maxCoeff();
    VectorXd ex = (col.array() - mx).exp();
    const double denom = ex.sum();
    VectorXd p = ex / denom;
    total += -std::log(std::max(p(labels[j]), 1e-300));
    lg.df.col(j) = p;
    lg.df(labels[j], j) -= 1.0;
  }
  lg.loss = total / static_cast<double>(b);
  lg.df /= static_cast<double>(b);
  return lg;
}

// ---------------------------------------------------------------------------
// Optimizer step
// ---------------------------------------------------------------------------

// Learning-rate exponent for a role at step t, after any switch events.
inline Rational effective_c(const ParamSpec& spec, const std::vector<SwitchEvent>& events,
                            LayerRole role, long long t) {
  Rational c = *spec.layer(role).c;
  for (const auto& ev : events)
    if (ev.role == role && t >= ev.step) c = ev.new_c;
  return c;
}

inline double effective_lr(const ParamSpec& spec, const TrainConfig& cfg,
                           const NetworkConfig& net, LayerRole role, long long t) {
  const Rational c = effective_c(spec, cfg.switch_events, role, t);
  return lr_schedule(t, cfg.steps, cfg.schedule) * cfg.eta * params::npow(net.width, -c);
}

namespace detail {

// theta <- theta - lr * phi(g) - lr * wd * theta, with phi the identity for
// SGD and the bias-corrected normalized update for Adam.
inline void apply_update(MatrixXd& theta, const MatrixXd& grad, AdamMoments& mom, double lr,
                         double wd, const TrainConfig& cfg) {
  if (wd != 0.0) theta *= (1.0 - lr * wd);  // decay from the pre-update value
  if (cfg.optimizer == OptimizerKind::SGD) {
    theta.noalias() -= lr * grad;
  } else {
    mom.t += 1;
    mom.m = cfg.adam_beta1 * mom.m + (1.0 - cfg.adam_beta1) * grad;
    mom.v = cfg.adam_beta2 * mom.v + (1.0 - cfg.adam_beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(mom.t));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(mom.t));
    const MatrixXd mhat = mom.m / bc1;
    const MatrixXd vhat = mom.v / bc2;
    theta.array() -= lr * (mhat.array() / (vhat.array().sqrt() + cfg.adam_eps));
  }
}

inline void apply_update_vec(VectorXd& theta, const VectorXd& grad, AdamMoments& mom, double lr,
                             double wd, const TrainConfig& cfg) {
  MatrixXd th = theta, gr = grad;
  apply_update(th, gr, mom, lr, wd, cfg);
  theta = th;
}

}  // namespace detail

inline void step(NetworkState& st, Gradients& grads, long long t, const TrainConfig& cfg) {
  if (t >= cfg.steps) throw std::invalid_argument("step: t out of range");
  if (cfg.grad_clip) {
    double sq = grads.gU.squaredNorm() + grads.gW.squaredNorm();
    if (!st.net.weight_tied) sq += grads.gV.squaredNorm();
    if (st.net.layernorm_enabled)
      sq += grads.g_ln1_gain.squaredNorm() + grads.g_ln1_bias.squaredNorm() +
            grads.g_ln2_gain.squaredNorm() + grads.g_ln2_bias.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > *cfg.grad_clip) {
      const double s = *cfg.grad_clip / norm;
      grads.gU *= s;
      grads.gW *= s;
      if (!st.net.weight_tied) grads.gV *= s;
      if (st.net.layernorm_enabled) {
        grads.g_ln1_gain *= s;
        grads.g_ln1_bias *= s;
        grads.g_ln2_gain *= s;
        grads.g_ln2_bias *= s;
      }
    }
  }

  auto lr_wd = [&](LayerRole role) -> std::pair<double, double> {
    const double lr = effective_lr(st.spec, cfg, st.net, role, t);
    const auto& e = st.spec.layer(role);
    const double wd = e.d ? cfg.lambda * params::npow(st.net.width, -*e.d) : 0.0;
    return {lr, wd};
  };
  auto frozen = [&](LayerRole role) { return cfg.frozen_roles.count(role) != 0; };

  if (!frozen(LayerRole::Input)) {
    auto [lr, wd] = lr_wd(LayerRole::Input);
    detail::apply_update(st.U, grads.gU, st.mU, lr, wd, cfg);
  }
  if (!frozen(LayerRole::Hidden)) {
    auto [lr, wd] = lr_wd(LayerRole::Hidden);
    detail::apply_update(st.W, grads.gW, st.mW, lr, wd, cfg);
  }
  if (!st.net.weight_tied && !frozen(LayerRole::Output)) {
    auto [lr, wd] = lr_wd(LayerRole::Output);
    detail::apply_update(st.V, grads.gV, st.mV, lr, wd, cfg);
  }
  if (st.net.layernorm_enabled && !frozen(LayerRole::LayerNorm)) {
    auto [lr, wd] = lr_wd(LayerRole::LayerNorm);
    (void)wd;  // no weight decay on LayerNorm parameters
    detail::apply_update_vec(st.ln1_gain, grads.g_ln1_gain, st.mg1, lr, 0.0, cfg);
    detail::apply_update_vec(st.ln1_bias, grads.g_ln1_bias, st.mb1, lr, 0.0, cfg);
    detail::apply_update_vec(st.ln2_gain, grads.g_ln2_gain, st.mg2, lr, 0.0, cfg);
    detail::apply_update_vec(st.ln2_bias, grads.g_ln2_bias, st.mb2, lr, 0.0, cfg);
  }
}

// ---------------------------------------------------------------------------
// Instrumentation
// ---------------------------------------------------------------------------

inline double rms(const MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  return std::sqrt(m.squaredNorm() / static_cast<double>(m.size()));
}

struct TraceRow {
  long long step;
  std::string quantity;
  std::string role;
  double value;
};

struct NormTrace {
  std::vector<TraceRow> rows;

  void add(long long step, std::string quantity, std::string role, double value) {
    rows.push_back({step, std::move(quantity), std::move(role), value});
  }
  double get(long long step, const std::string& quantity, const std::string& role) const {
    for (const auto& r : rows)
      if (r.step == step && r.quantity == quantity && r.role == role) return r.value;
    throw std::out_of_range("no trace row " + quantity + "/" + role + " at step " +
                            std::to_string(step));
  }
  std::string to_csv() const {
    std::ostringstream os;
    os << "step,quantity,role,value\n";
    os.precision(17);
    for (const auto& r : rows)
      os << r.step << "," << r.quantity << "," << r.role << "," << r.value << "\n";
    return os.str();
  }
};

namespace detail {

inline double ratio(double num, double a, double b) {
  const double d = a * b;
  return d > 0 ? num / d : 0.0;
}

// State norms plus, when a previous snapshot is given, the update norms, the
// three-term decompositions of dz/df, and the raw alignment ratios.
inline void record_trace(NormTrace& tr, long long stepno, const NetworkState& st,
                         const ForwardCache& now, const NetworkState* prev,
                         const ForwardCache* before) {
  tr.add(stepno, "weight_norm", "input", rms(st.U));
  tr.add(stepno, "weight_norm", "hidden", rms(st.W));
  tr.add(stepno, "weight_norm", "output", rms(st.output_matrix()));
  tr.add(stepno, "act_norm", "h", rms(now.h));
  tr.add(stepno, "act_norm", "z", rms(now.z));
  tr.add(stepno, "act_norm", "f", rms(now.f));
  if (!prev || !before) return;

  const MatrixXd dU = st.U - prev->U;
  const MatrixXd dW = st.W - prev->W;
  const MatrixXd dV = st.output_matrix() - prev->output_matrix();
  tr.add(stepno, "weight_update_norm", "input", rms(dU));
  tr.add(stepno, "weight_update_norm", "hidden", rms(dW));
  tr.add(stepno, "weight_update_norm", "output", rms(dV));

  const MatrixXd dh = now.h - before->h;
  const MatrixXd dz = now.z - before->z;
  const MatrixXd df = now.f - before->f;
  tr.add(stepno, "act_update_norm", "h", rms(dh));
  tr.add(stepno, "act_update_norm", "z", rms(dz));
  tr.add(stepno, "act_update_norm", "f", rms(df));

  // dz = mw * [dW p0 + W0 dp + dW dp] exactly, where p is the hidden input.
  const double mw = st.multiplier(LayerRole::Hidden);
  const double mv = st.multiplier(LayerRole::Output);
  const MatrixXd dp = now.p - before->p;
  const MatrixXd dq = now.z_in - before->z_in;
  tr.add(stepno, "dz_decomp", "weight_term", mw * rms(dW * before->p));
  tr.add(stepno, "dz_decomp", "act_term", mw * rms(prev->W * dp));
  tr.add(stepno, "dz_decomp", "second_order", mw * rms(dW * dp));
  tr.add(stepno, "df_decomp", "weight_term", mv * rms(dV * before->z_in));
  tr.add(stepno, "df_decomp", "act_term", mv * rms(prev->output_matrix() * dq));
  tr.add(stepno, "df_decomp", "second_order", mv * rms(dV * dq));

  tr.add(stepno, "align_rho", "hidden", ratio(rms(dW * before->p), rms(dW), rms(before->p)));
  tr.add(stepno, "align_omega", "hidden", ratio(rms(prev->W * dp), rms(prev->W), rms(dp)));
  tr.add(stepno, "align_sigma", "hidden", ratio(rms(dW * dp), rms(dW), rms(dp)));
  tr.add(stepno, "align_rho", "output",
         ratio(rms(dV * before->z_in), rms(dV), rms(before->z_in)));
  tr.add(stepno, "align_omega", "output",
         ratio(rms(prev->output_matrix() * dq), rms(prev->output_matrix()), rms(dq)));
  tr.add(stepno, "align_sigma", "output", ratio(rms(dV * dq), rms(dV), rms(dq)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct RunResult {
  std::vector<double> loss_trajectory;  // training-batch loss per step
  double final_loss = std::numeric_limits<double>::infinity();
  bool diverged = false;
  NormTrace trace;
};

inline void validate_configs(const ParamSpec& spec, const NetworkConfig& net,
                             const TaskSpec& task, const TrainConfig& cfg) {
  validate_schedule(cfg.schedule);
  if (net.d_in != task.d_in || net.d_out != task.d_out)
    throw std::invalid_argument("network and task dimensions disagree");
  if (spec.weight_tied != net.weight_tied)
    throw std::invalid_argument("weight_tied mismatch between spec and network");
  long long prev = -1;
  for (const auto& ev : cfg.switch_events) {
    if (ev.step < prev) throw std::invalid_argument("switch events must be sorted by step");
    if (ev.step >= cfg.steps) throw std::invalid_argument("switch event beyond training horizon");
    prev = ev.step;
  }
}

inline LossGrad task_loss(const Dataset& ds, const MatrixXd& f, long long col0, long long count) {
  if (ds.kind == TaskKind::TeacherStudentRegression)
    return mse_loss(f, ds.targets.middleCols(col0, count));
  std::vector<int> labels(ds.labels.begin() + col0, ds.labels.begin() + col0 + count);
  return cross_entropy_loss(f, labels);
}

inline RunResult train(const ParamSpec& spec, const NetworkConfig& net, const TaskSpec& task,
                       const TrainConfig& cfg) {
  validate_configs(spec, net, task, cfg);
  const Dataset ds = make_dataset(task);
  NetworkState st = init_network(spec, net);

  const long long stride =
      cfg.trace_stride > 0 ? cfg.trace_stride : std::max<long long>(1, cfg.steps / 100);
  auto traced = [&](long long s) { return s <= 1 || s % stride == 0 || s == cfg.steps; };

  // Fixed probe batch (held-out columns) for the norm instrumentation.
  const long long probe_n = std::min<long long>(32, ds.heldout_count);
  const MatrixXd probe = ds.inputs.middleCols(ds.train_count, probe_n);

  RunResult out;
  ForwardCache probe_before = forward(st, probe);
  detail::record_trace(out.trace, 0, st, probe_before, nullptr, nullptr);

  rng::Stream batch_stream(net.seed, rng::Purpose::BatchOrder);
  MatrixXd xb(net.d_in, cfg.batch_size);
  std::vector<long long> idx(cfg.batch_size);
  NetworkState prev_state = st;

  for (long long t = 0; t < cfg.steps; ++t) {
    for (long long j = 0; j < cfg.batch_size; ++j) {
      idx[j] = static_cast<long long>(batch_stream.below(
          static_cast<std::uint64_t>(ds.train_count)));
      xb.col(j) = ds.inputs.col(idx[j]);
    }
    ForwardCache c = forward(st, xb);
    LossGrad lg;
    if (ds.kind == TaskKind::TeacherStudentRegression) {
      MatrixXd yb(net.d_out, cfg.batch_size);
      for (long long j = 0; j < cfg.batch_size; ++j) yb.col(j) = ds.targets.col(idx[j]);
      lg = mse_loss(c.f, yb);
    } else {
      std::vector<int> lb(cfg.batch_size);
      for (long long j = 0; j < cfg.batch_size; ++j) lb[j] = ds.labels[idx[j]];
      lg = cross_entropy_loss(c.f, lb);
    }
    out.loss_trajectory.push_back(lg.loss);
    if (!std::isfinite(lg.loss)) {
      out.diverged = true;
      out.final_loss = std::numeric_limits<double>::infinity();
      return out;
    }

    const bool trace_next = traced(t + 1);
    if (trace_next) {
      prev_state = st;
      probe_before = forward(st, probe);
    }
    Gradients g = backward(st, c, lg.df);
    step(st, g, t, cfg);
    if (trace_next) {
      const ForwardCache probe_now = forward(st, probe);
      detail::record_trace(out.trace, t + 1, st, probe_now, &prev_state, &probe_before);
      for (LayerRole r : {LayerRole::Input, LayerRole::Hidden, LayerRole::Output})
        out.trace.add(t + 1, "lr", params::to_string(r), effective_lr(spec, cfg, net, r, t));
    }
  }

  const ForwardCache held = forward(st, ds.inputs.middleCols(ds.train_count, ds.heldout_count));
  const LossGrad final_lg = task_loss(ds, held.f, ds.train_count, ds.heldout_count);
  out.final_loss = std::isfinite(final_lg.loss) ? final_lg.loss
                                                : std::numeric_limits<double>::infinity();
  out.diverged = !std::isfinite(final_lg.loss);
  return out;
}

// ---------------------------------------------------------------------------
// Attention logit probe
// ---------------------------------------------------------------------------

inline double attention_logit_ratio(const MatrixXd& q, const MatrixXd& k) {
  return rms(q * k.transpose()) / (rms(q) * rms(k));
}

// Random Q, K with unit-RMS rows; the exponent regression over head_dim
// happens in the scaling checker.
inline double measure_attention_logit_ratio(long long head_dim, std::uint64_t seed,
                                            long long rows = 16) {
  if (head_dim < 1) throw std::invalid_argument("head_dim must be >= 1");
  MatrixXd q(rows, head_dim), k(rows, head_dim);
  for (long long i = 0; i < rows; ++i)
    for (long long j = 0; j < head_dim; ++j) {
      q(i, j) = rng::normal(seed, rng::Purpose::Probe, 10,
                            static_cast<std::uint64_t>(i * head_dim + j));
      k(i, j) = rng::normal(seed, rng::Purpose::Probe, 11,
                            static_cast<std::uint64_t>(i * head_dim + j));
    }
  for (long long i = 0; i < rows; ++i) {
    q.row(i) /= std::sqrt(q.row(i).squaredNorm() / static_cast<double>(head_dim));
    k.row(i) /= std::sqrt(k.row(i).squaredNorm() / static_cast<double>(head_dim));
  }
  return attention_logit_ratio(q, k);
}

}  // namespace mupscale::microtrain
