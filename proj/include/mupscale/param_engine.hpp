#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mupscale/rational.hpp"

// Width-parameterization algebra: the per-layer (a, b, c, d) exponent tables
// for SP and muP, the 16 interpolating ablations, gauge transformations, and
// the symbolic stability checker. Everything here is exact rational
// arithmetic; floats appear only when a spec is resolved at a concrete width.
namespace mupscale::params {

enum class OptimizerKind { SGD, Adam };

enum class LayerRole { Input, Hidden, Output, LayerNorm, AttentionScale };

inline const char* to_string(OptimizerKind k) {
  return k == OptimizerKind::SGD ? "sgd" : "adam";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::SGD;
  if (s == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer: " + s);
}

inline const char* to_string(LayerRole r) {
  switch (r) {
    case LayerRole::Input: return "input";
    case LayerRole::Hidden: return "hidden";
    case LayerRole::Output: return "output";
    case LayerRole::LayerNorm: return "layernorm";
    case LayerRole::AttentionScale: return "attention_scale";
  }
  return "?";
}

inline LayerRole role_from_string(const std::string& s) {
  if (s == "input") return LayerRole::Input;
  if (s == "hidden") return LayerRole::Hidden;
  if (s == "output") return LayerRole::Output;
  if (s == "layernorm") return LayerRole::LayerNorm;
  if (s == "attention_scale") return LayerRole::AttentionScale;
  throw std::invalid_argument("unknown layer role: " + s);
}

// Exponents for one layer role. Multiplier = n^-a, init variance = n^-2b,
// lr = eta * n^-c, wd = lambda * n^-d. Roles that lack a knob (LayerNorm has
// only a learning rate, the attention scale only a multiplier) leave the
// field unset rather than defaulting it to zero.
struct LayerExponents {
  std::optional<Rational> a;
  std::optional<Rational> b;
  std::optional<Rational> c;
  std::optional<Rational> d;

  static LayerExponents full(Rational a, Rational b, Rational c, Rational d) {
    return LayerExponents{a, b, c, d};
  }
  static LayerExponents lr_only(Rational c) { return LayerExponents{{}, {}, c, {}}; }
  static LayerExponents none() { return LayerExponents{}; }

  bool operator==(const LayerExponents& o) const = default;
};

// The 16 SP<->muP ablation switches; true selects the muP-style value.
struct AblationFlags {
  bool embd = false;
  bool last = false;
  bool ln = false;
  bool attn = false;

  bool operator==(const AblationFlags& o) const = default;

  static std::array<AblationFlags, 16> all() {
    std::array<AblationFlags, 16> out{};
    for (int i = 0; i < 16; ++i)
      out[i] = AblationFlags{(i & 1) != 0, (i & 2) != 0, (i & 4) != 0, (i & 8) != 0};
    return out;
  }
};

struct ParamSpec {
  std::string name;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::map<LayerRole, LayerExponents> layers;
  Rational attn_exponent = Rational(1, 2);
  bool weight_tied = false;

  const LayerExponents& layer(LayerRole r) const {
    auto it = layers.find(r);
    if (it == layers.end())
      throw std::invalid_argument(std::string("spec '") + name + "' has no role '" +
                                  to_string(r) + "'");
    return it->second;
  }
  bool has_role(LayerRole r) const { return layers.count(r) != 0; }

  bool same_exponents(const ParamSpec& o) const {
    return optimizer == o.optimizer && layers == o.layers &&
           attn_exponent == o.attn_exponent && weight_tied == o.weight_tied;
  }
};

// Hyperparameters of one layer at a concrete width. Fields a role does not
// carry stay unset (e.g. the attention scale has only a multiplier).
struct ResolvedLayerHP {
  std::optional<double> multiplier;
  std::optional<double> init_std;
  std::optional<double> lr;
  std::optional<double> wd;
};

// ---------------------------------------------------------------------------
// Canonical tables
// ---------------------------------------------------------------------------

namespace detail {
inline ParamSpec sp_table(OptimizerKind opt) {
  ParamSpec s;
  s.name = "SP";
  s.optimizer = opt;
  s.layers[LayerRole::Input] = LayerExponents::full({0}, {0}, {1}, {-1});
  s.layers[LayerRole::Hidden] = LayerExponents::full({0}, {1, 2}, {1}, {-1});
  s.layers[LayerRole::Output] = LayerExponents::full({0}, {1, 2}, {1}, {-1});
  s.layers[LayerRole::LayerNorm] = LayerExponents::lr_only({1});
  s.layers[LayerRole::AttentionScale] = LayerExponents::none();
  s.attn_exponent = Rational(1, 2);
  return s;
}

inline ParamSpec mup_table(OptimizerKind opt) {
  ParamSpec s;
  s.name = "muP";
  s.optimizer = opt;
  if (opt == OptimizerKind::Adam) {
    s.layers[LayerRole::Input] = LayerExponents::full({0}, {0}, {0}, {0});
    s.layers[LayerRole::Hidden] = LayerExponents::full({0}, {1, 2}, {1}, {-1});
    s.layers[LayerRole::Output] = LayerExponents::full({0}, {1}, {1}, {-1});
  } else {
    // "No multipliers" gauge: the SGD analogue of peeling LR factors into c.
    s.layers[LayerRole::Input] = LayerExponents::full({0}, {0}, {-1}, {1});
    s.layers[LayerRole::Hidden] = LayerExponents::full({0}, {1, 2}, {0}, {0});
    s.layers[LayerRole::Output] = LayerExponents::full({0}, {1}, {1}, {-1});
  }
  s.layers[LayerRole::LayerNorm] = LayerExponents::lr_only({0});
  s.layers[LayerRole::AttentionScale] = LayerExponents::none();
  s.attn_exponent = Rational(1);
  return s;
}
}  // namespace detail

enum class BaseKind { SP, MuP };

inline ParamSpec base_spec(BaseKind kind, OptimizerKind opt) {
  return kind == BaseKind::SP ? detail::sp_table(opt) : detail::mup_table(opt);
}

// The gauge-equivalent muP implementations (same dynamics, different tables).
enum class MupImpl { NoMultipliers, NoLrScaling, Canonical, CompleteP };

inline ParamSpec mup_implementation(MupImpl impl, OptimizerKind opt) {
  ParamSpec s = detail::mup_table(opt);
  auto set = [&](LayerRole r, Rational a, Rational b, Rational c, Rational d) {
    s.layers[r] = LayerExponents::full(a, b, c, d);
  };
  const bool adam = opt == OptimizerKind::Adam;
  switch (impl) {
    case MupImpl::NoMultipliers:
      s.name = "muP-no-multipliers";
      break;  // identical to the base table
    case MupImpl::NoLrScaling:
      s.name = "muP-no-lr-scaling";
      if (adam) {
        set(LayerRole::Input, {0}, {0}, {0}, {0});
        set(LayerRole::Hidden, {1}, {-1, 2}, {0}, {0});
        set(LayerRole::Output, {1}, {0}, {0}, {0});
      } else {
        set(LayerRole::Input, {-1, 2}, {1, 2}, {0}, {0});
        set(LayerRole::Hidden, {0}, {1, 2}, {0}, {0});
        set(LayerRole::Output, {1, 2}, {1, 2}, {0}, {0});
      }
      break;
    case MupImpl::Canonical:
      s.name = "muP-canonical";
      if (adam) {
        set(LayerRole::Input, {-1, 2}, {1, 2}, {1, 2}, {-1, 2});
        set(LayerRole::Hidden, {0}, {1, 2}, {1}, {-1});
        set(LayerRole::Output, {1, 2}, {1, 2}, {1, 2}, {-1, 2});
      } else {
        set(LayerRole::Input, {-1, 2}, {1, 2}, {0}, {0});
        set(LayerRole::Hidden, {0}, {1, 2}, {0}, {0});
        set(LayerRole::Output, {1, 2}, {1, 2}, {0}, {0});
      }
      break;
    case MupImpl::CompleteP:
      s.name = "muP-completep";
      if (adam) {
        set(LayerRole::Input, {0}, {0}, {0}, {0});
        set(LayerRole::Hidden, {0}, {1, 2}, {1}, {-1});
        set(LayerRole::Output, {1}, {0}, {0}, {0});
      } else {
        set(LayerRole::Input, {0}, {0}, {-1}, {1});
        set(LayerRole::Hidden, {0}, {1, 2}, {0}, {0});
        set(LayerRole::Output, {1}, {0}, {-1}, {1});
      }
      break;
  }
  return s;
}

// Weight-tied variant: output shares the input's b, c, d and keeps only its
// own forward multiplier exponent a_v.
inline ParamSpec weight_tied_spec(OptimizerKind opt) {
  ParamSpec s;
  s.optimizer = opt;
  s.weight_tied = true;
  s.name = "muP-tied";
  if (opt == OptimizerKind::Adam) {
    s.layers[LayerRole::Input] = LayerExponents::full({0}, {0}, {0}, {0});
    s.layers[LayerRole::Hidden] = LayerExponents::full({0}, {1, 2}, {1}, {-1});
    s.layers[LayerRole::Output] = LayerExponents::full({1}, {0}, {0}, {0});
  } else {
    s.layers[LayerRole::Input] = LayerExponents::full({0}, {0}, {-1}, {1});
    s.layers[LayerRole::Hidden] = LayerExponents::full({0}, {1, 2}, {0}, {0});
    s.layers[LayerRole::Output] = LayerExponents::full({1}, {0}, {-1}, {1});
  }
  s.layers[LayerRole::LayerNorm] = LayerExponents::lr_only({0});
  s.layers[LayerRole::AttentionScale] = LayerExponents::none();
  s.attn_exponent = Rational(1);
  return s;
}

// ---------------------------------------------------------------------------
// Ablations and naming
// ---------------------------------------------------------------------------

inline ParamSpec ablate(AblationFlags flags, OptimizerKind opt);

// Canonical ablation name: one flag away from SP -> "SP+X", one away from
// muP -> "muP-X", endpoints "SP"/"muP", everything else the full change list.
inline std::string ablation_name(AblationFlags f) {
  static const char* tag[4] = {"Embd", "Last", "LN", "Attn"};
  const bool on[4] = {f.embd, f.last, f.ln, f.attn};
  int n_on = 0;
  for (bool b : on) n_on += b ? 1 : 0;
  if (n_on == 0) return "SP";
  if (n_on == 4) return "muP";
  std::string s;
  if (n_on == 3) {
    s = "muP";
    for (int i = 0; i < 4; ++i)
      if (!on[i]) s += std::string("-") + tag[i];
  } else {
    s = "SP";
    for (int i = 0; i < 4; ++i)
      if (on[i]) s += std::string("+") + tag[i];
  }
  return s;
}

inline std::optional<AblationFlags> match_ablation(const ParamSpec& spec) {
  for (const AblationFlags& f : AblationFlags::all()) {
    if (ablate(f, spec.optimizer).same_exponents(spec)) return f;
  }
  return std::nullopt;
}

inline std::string spec_name(const ParamSpec& spec) {
  if (auto f = match_ablation(spec)) return ablation_name(*f);
  return spec.name.empty() ? "custom" : spec.name;
}

inline std::optional<AblationFlags> flags_from_name(const std::string& name) {
  if (name == "SP") return AblationFlags{};
  if (name == "muP") return AblationFlags{true, true, true, true};
  for (const AblationFlags& f : AblationFlags::all())
    if (ablation_name(f) == name) return f;
  return std::nullopt;
}

inline ParamSpec ablate(AblationFlags flags, OptimizerKind opt) {
  ParamSpec s = base_spec(BaseKind::SP, opt);
  const ParamSpec mup = base_spec(BaseKind::MuP, opt);
  if (flags.embd) {
    // Learning-rate swap; weight decay follows so eta*lambda stays O(1).
    s.layers[LayerRole::Input].c = mup.layer(LayerRole::Input).c;
    s.layers[LayerRole::Input].d = mup.layer(LayerRole::Input).d;
  }
  if (flags.last) s.layers[LayerRole::Output].b = mup.layer(LayerRole::Output).b;
  if (flags.ln) s.layers[LayerRole::LayerNorm].c = mup.layer(LayerRole::LayerNorm).c;
  if (flags.attn) s.attn_exponent = mup.attn_exponent;
  s.name = ablation_name(flags);
  return s;
}

// ---------------------------------------------------------------------------
// Resolution at a concrete width
// ---------------------------------------------------------------------------

inline double npow(long long n, const Rational& e) {
  return std::pow(static_cast<double>(n), e.to_double());
}

inline ResolvedLayerHP resolve(const ParamSpec& spec, LayerRole role, long long width,
                               long long head_dim, double eta, double lambda) {
  if (width < 1 || head_dim < 1)
    throw std::invalid_argument("resolve: width and head_dim must be >= 1");
  const LayerExponents& e = spec.layer(role);  // throws if the role is absent
  ResolvedLayerHP out;
  if (role == LayerRole::AttentionScale) {
    out.multiplier = std::pow(static_cast<double>(head_dim), -spec.attn_exponent.to_double());
    return out;
  }
  if (e.a) out.multiplier = npow(width, -*e.a);
  if (e.b) out.init_std = npow(width, -*e.b);
  if (e.c) out.lr = eta * npow(width, -*e.c);
  if (e.d) out.wd = lambda * npow(width, -*e.d);
  if (role == LayerRole::LayerNorm) {
    out.multiplier = 1.0;  // no forward multiplier
    out.init_std = 1.0;    // gain initialized to one, bias to zero
    out.wd = 0.0;          // weight decay is not applied to LayerNorm
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gauge transformation
// ---------------------------------------------------------------------------

// a -> a+delta, b -> b-delta; c and d shift by 2*delta for SGD and by delta
// for Adam, leaving the update scalings and c+d unchanged.
inline ParamSpec gauge_transform(const ParamSpec& spec, LayerRole role, const Rational& delta) {
  const LayerExponents& e = spec.layer(role);
  if (!e.a || !e.b || !e.c || !e.d)
    throw std::invalid_argument(std::string("gauge_transform: role '") + to_string(role) +
                                "' lacks a full exponent set");
  const Rational zeta = spec.optimizer == OptimizerKind::SGD ? Rational(2) : Rational(1);
  ParamSpec out = spec;
  LayerExponents& t = out.layers[role];
  t.a = *e.a + delta;
  t.b = *e.b - delta;
  t.c = *e.c - zeta * delta;
  t.d = *e.d + zeta * delta;
  return out;
}

// ---------------------------------------------------------------------------
// Stability checker
// ---------------------------------------------------------------------------

enum class AlignmentAssumption { Init, Full };

inline const char* to_string(AlignmentAssumption a) {
  return a == AlignmentAssumption::Init ? "init" : "full";
}

struct StabilityEntry {
  std::string condition;  // e.g. "init/hidden", "update/input", "wd/output"
  LayerRole role;
  std::string relation;  // human-readable expected relation
  bool satisfied = false;
  Rational residual;  // condition expression minus its required value
};

struct StabilityReport {
  AlignmentAssumption alignment = AlignmentAssumption::Full;
  std::vector<StabilityEntry> entries;

  bool all_satisfied() const {
    for (const auto& e : entries)
      if (!e.satisfied) return false;
    return true;
  }
  const StabilityEntry& entry(const std::string& condition) const {
    for (const auto& e : entries)
      if (e.condition == condition) return e;
    throw std::out_of_range("no stability entry '" + condition + "'");
  }
  bool same_verdicts(const StabilityReport& o) const {
    if (entries.size() != o.entries.size()) return false;
    for (size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].condition != o.entries[i].condition ||
          entries[i].satisfied != o.entries[i].satisfied ||
          entries[i].residual != o.entries[i].residual)
        return false;
    }
    return true;
  }
};

namespace detail {

struct AlignmentValues {
  Rational rho_w, omega_w, sigma_w;
  Rational rho_v, omega_v, sigma_v;
};

// At initialization every alignment exponent sits at 1/2 (products of
// independent Gaussian factors). Under the full-alignment assumption the
// free exponents rho and sigma move to 1; omega_w stays pinned at 1/2 by the
// stable-update requirement, and omega_v is pinned to the (gauge-invariant)
// sum a_v + b_v, capped at 1, by the last layer's consistency relation.
inline AlignmentValues alignment_values(AlignmentAssumption mode, const Rational& av_plus_b) {
  if (mode == AlignmentAssumption::Init) {
    const Rational h(1, 2);
    return {h, h, h, h, h, h};
  }
  return {Rational(1), Rational(1, 2), Rational(1),
          Rational(1), rat_min(Rational(1), av_plus_b), Rational(1)};
}

}  // namespace detail

inline StabilityReport check_stability(const ParamSpec& spec, AlignmentAssumption mode) {
  const bool sgd = spec.optimizer == OptimizerKind::SGD;
  const bool tied = spec.weight_tied;
  const LayerExponents& u = spec.layer(LayerRole::Input);
  const LayerExponents& w = spec.layer(LayerRole::Hidden);
  const LayerExponents& v = spec.layer(LayerRole::Output);
  auto need = [](const std::optional<Rational>& r, const char* what) -> const Rational& {
    if (!r) throw std::invalid_argument(std::string("check_stability: missing exponent ") + what);
    return *r;
  };
  const Rational au = need(u.a, "a_u"), bu = need(u.b, "b_u"), cu = need(u.c, "c_u");
  const Rational aw = need(w.a, "a_w"), bw = need(w.b, "b_w"), cw = need(w.c, "c_w");
  const Rational av = need(v.a, "a_v");
  // Tied specs inherit the output's b and c from the input.
  const Rational bv = tied ? bu : need(v.b, "b_v");
  const Rational cv = tied ? cu : need(v.c, "c_v");

  const auto align = detail::alignment_values(mode, av + bv);

  StabilityReport rep;
  rep.alignment = mode;
  auto push_eq = [&](const char* cond, LayerRole role, std::string rel, Rational residual) {
    rep.entries.push_back({cond, role, std::move(rel), residual == Rational(0), residual});
  };
  auto push_ge = [&](const char* cond, LayerRole role, std::string rel, Rational lhs,
                     Rational rhs) {
    rep.entries.push_back({cond, role, std::move(rel), lhs >= rhs, lhs - rhs});
  };

  // Stable initialization.
  push_eq("init/input", LayerRole::Input, "a_u + b_u = 0", au + bu);
  push_eq("init/hidden", LayerRole::Hidden, "a_w + b_w = 1/2", aw + bw - Rational(1, 2));
  push_ge("init/output", LayerRole::Output,
          tied ? "a_v + b_u >= 1/2" : "a_v + b_v >= 1/2", av + bv, Rational(1, 2));

  // Stable first-step updates. Each hidden/output condition is the max over
  // the weight-update, activation-update and second-order decomposition terms.
  Rational r_u = sgd ? (tied ? au + cu + av : Rational(2) * au + cu + av + bv) : au + cu;
  push_eq("update/input", LayerRole::Input,
          sgd ? (tied ? "a_u + c_u + a_v = 0" : "2a_u + c_u + a_v + b_v = 0")
              : "a_u + c_u = 0",
          r_u);

  const Rational xw = sgd ? Rational(2) * aw + cw + av + bv : aw + cw;
  const Rational r_w = rat_max(align.rho_w - xw,
                               rat_max(align.omega_w - Rational(1, 2), align.sigma_w - xw));
  push_eq("update/hidden", LayerRole::Hidden,
          "max(rho_w - X, omega_w - 1/2, sigma_w - X) = 0", r_w);

  const Rational xv = sgd ? Rational(2) * av + cv : av + cv;
  const Rational r_v = rat_max(align.rho_v - xv,
                               rat_max(align.omega_v - (av + bv), align.sigma_v - xv));
  push_eq("update/output", LayerRole::Output,
          "max(rho_v - Y, omega_v - (a_v + b_v), sigma_v - Y) = 0", r_v);

  // Weight decay: eta*lambda must stay width-independent wherever d exists.
  push_eq("wd/input", LayerRole::Input, "c_u + d_u = 0", cu + need(u.d, "d_u"));
  push_eq("wd/hidden", LayerRole::Hidden, "c_w + d_w = 0", cw + need(w.d, "d_w"));
  if (!tied)
    push_eq("wd/output", LayerRole::Output, "c_v + d_v = 0", cv + need(v.d, "d_v"));

  return rep;
}

// ---------------------------------------------------------------------------
// JSON serialization (canonical field order for byte-stable golden files)
// ---------------------------------------------------------------------------

using json = nlohmann::ordered_json;

inline json to_json(const Rational& r) { return json::array({r.num(), r.den()}); }

inline Rational rational_from_json(const json& j) {
  if (!j.is_array() || j.size() != 2)
    throw std::invalid_argument("rational must be a [num, den] pair");
  return Rational(j[0].get<std::int64_t>(), j[1].get<std::int64_t>());
}

inline json to_json(const ParamSpec& s) {
  json j;
  j["name"] = s.name;
  j["optimizer"] = to_string(s.optimizer);
  j["weight_tied"] = s.weight_tied;
  json layers;
  // Fixed role order, independent of map iteration details.
  for (LayerRole r : {LayerRole::Input, LayerRole::Hidden, LayerRole::Output,
                      LayerRole::LayerNorm, LayerRole::AttentionScale}) {
    if (!s.has_role(r)) continue;
    const LayerExponents& e = s.layer(r);
    json je = json::object();
    if (e.a) je["a"] = to_json(*e.a);
    if (e.b) je["b"] = to_json(*e.b);
    if (e.c) je["c"] = to_json(*e.c);
    if (e.d) je["d"] = to_json(*e.d);
    layers[to_string(r)] = je;
  }
  j["layers"] = layers;
  j["attn_exponent"] = to_json(s.attn_exponent);
  return j;
}

inline ParamSpec spec_from_json(const json& j) {
  ParamSpec s;
  s.name = j.at("name").get<std::string>();
  s.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  s.weight_tied = j.at("weight_tied").get<bool>();
  for (const auto& [key, val] : j.at("layers").items()) {
    LayerExponents e;
    if (val.contains("a")) e.a = rational_from_json(val["a"]);
    if (val.contains("b")) e.b = rational_from_json(val["b"]);
    if (val.contains("c")) e.c = rational_from_json(val["c"]);
    if (val.contains("d")) e.d = rational_from_json(val["d"]);
    s.layers[role_from_string(key)] = e;
  }
  s.attn_exponent = rational_from_json(j.at("attn_exponent"));
  return s;
}

// Looks up a spec by canonical name ("SP", "muP", "SP+Embd", "muP-Attn",
// "muP-canonical", "muP-tied", ...).
inline ParamSpec spec_by_name(const std::string& name, OptimizerKind opt) {
  if (auto f = flags_from_name(name)) return ablate(*f, opt);
  if (name == "muP-no-multipliers") return mup_implementation(MupImpl::NoMultipliers, opt);
  if (name == "muP-no-lr-scaling") return mup_implementation(MupImpl::NoLrScaling, opt);
  if (name == "muP-canonical") return mup_implementation(MupImpl::Canonical, opt);
  if (name == "muP-completep") return mup_implementation(MupImpl::CompleteP, opt);
  if (name == "muP-tied") return weight_tied_spec(opt);
  throw std::invalid_argument("unknown parameterization name: " + name);
}

}  // namespace mupscale::params
