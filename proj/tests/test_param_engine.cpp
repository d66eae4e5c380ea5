#include "mupscale/param_engine.hpp"

#include <gtest/gtest.h>

using namespace mupscale;
using namespace mupscale::params;

namespace {

Rational r(long long n, long long d = 1) { return Rational(n, d); }

void expect_layer(const ParamSpec& s, LayerRole role, Rational a, Rational b, Rational c,
                  Rational d) {
  const LayerExponents& e = s.layer(role);
  ASSERT_TRUE(e.a && e.b && e.c && e.d) << s.name << "/" << to_string(role);
  EXPECT_EQ(*e.a, a) << s.name << "/" << to_string(role) << " a";
  EXPECT_EQ(*e.b, b) << s.name << "/" << to_string(role) << " b";
  EXPECT_EQ(*e.c, c) << s.name << "/" << to_string(role) << " c";
  EXPECT_EQ(*e.d, d) << s.name << "/" << to_string(role) << " d";
}

}  // namespace

TEST(Rational, Arithmetic) {
  EXPECT_EQ(r(1, 2) + r(1, 3), r(5, 6));
  EXPECT_EQ(r(2, 4), r(1, 2));
  EXPECT_EQ(r(1, -2), r(-1, 2));
  EXPECT_LT(r(-1), r(-1, 2));
  EXPECT_EQ((r(1, 2) * r(2)).str(), "1");
  EXPECT_THROW(Rational(1, 0), std::invalid_argument);
}

// Golden encoding of the AdamW SP/muP comparison table, cell for cell.
TEST(BaseSpec, AdamTable) {
  const ParamSpec sp = base_spec(BaseKind::SP, OptimizerKind::Adam);
  expect_layer(sp, LayerRole::Input, r(0), r(0), r(1), r(-1));
  expect_layer(sp, LayerRole::Hidden, r(0), r(1, 2), r(1), r(-1));
  expect_layer(sp, LayerRole::Output, r(0), r(1, 2), r(1), r(-1));
  EXPECT_EQ(*sp.layer(LayerRole::LayerNorm).c, r(1));
  EXPECT_FALSE(sp.layer(LayerRole::LayerNorm).a);
  EXPECT_FALSE(sp.layer(LayerRole::LayerNorm).d);
  EXPECT_EQ(sp.attn_exponent, r(1, 2));

  const ParamSpec mup = base_spec(BaseKind::MuP, OptimizerKind::Adam);
  expect_layer(mup, LayerRole::Input, r(0), r(0), r(0), r(0));
  expect_layer(mup, LayerRole::Hidden, r(0), r(1, 2), r(1), r(-1));
  expect_layer(mup, LayerRole::Output, r(0), r(1), r(1), r(-1));
  EXPECT_EQ(*mup.layer(LayerRole::LayerNorm).c, r(0));
  EXPECT_EQ(mup.attn_exponent, r(1));

  // Last-layer init variance 1/n^2 means 2b = 2; input LR exponent 0.
  EXPECT_EQ(*mup.layer(LayerRole::Output).b * r(2), r(2));
  EXPECT_EQ(*mup.layer(LayerRole::Input).c, r(0));
}

// Golden encoding of the gauge-equivalent muP implementation table.
TEST(BaseSpec, MupImplementationTable) {
  // SGD columns.
  {
    const ParamSpec s = mup_implementation(MupImpl::NoMultipliers, OptimizerKind::SGD);
    expect_layer(s, LayerRole::Input, r(0), r(0), r(-1), r(1));
    expect_layer(s, LayerRole::Hidden, r(0), r(1, 2), r(0), r(0));
    expect_layer(s, LayerRole::Output, r(0), r(1), r(1), r(-1));
  }
  {
    const ParamSpec s = mup_implementation(MupImpl::NoLrScaling, OptimizerKind::SGD);
    expect_layer(s, LayerRole::Input, r(-1, 2), r(1, 2), r(0), r(0));
    expect_layer(s, LayerRole::Hidden, r(0), r(1, 2), r(0), r(0));
    expect_layer(s, LayerRole::Output, r(1, 2), r(1, 2), r(0), r(0));
  }
  {
    const ParamSpec s = mup_implementation(MupImpl::Canonical, OptimizerKind::SGD);
    expect_layer(s, LayerRole::Input, r(-1, 2), r(1, 2), r(0), r(0));
    expect_layer(s, LayerRole::Hidden, r(0), r(1, 2), r(0), r(0));
    expect_layer(s, LayerRole::Output, r(1, 2), r(1, 2), r(0), r(0));
  }
  {
    const ParamSpec s = mup_implementation(MupImpl::CompleteP, OptimizerKind::SGD);
    expect_layer(s, LayerRole::Input, r(0), r(0), r(-1), r(1));
    expect_layer(s, LayerRole::Hidden, r(0), r(1, 2), r(0), r(0));
    expect_layer(s, LayerRole::Output, r(1), r(0), r(-1), r(1));
  }
  // Adam columns.
  {
    const ParamSpec s = mup_implementation(MupImpl::NoMultipliers, OptimizerKind::Adam);
    expect_layer(s, LayerRole::Input, r(0), r(0), r(0), r(0));
    expect_layer(s, LayerRole::Hidden, r(0), r(1, 2), r(1), r(-1));
    expect_layer(s, LayerRole::Output, r(0), r(1), r(1), r(-1));
  }
  {
    const ParamSpec s = mup_implementation(MupImpl::NoLrScaling, OptimizerKind::Adam);
    expect_layer(s, LayerRole::Input, r(0), r(0), r(0), r(0));
    expect_layer(s, LayerRole::Hidden, r(1), r(-1, 2), r(0), r(0));
    expect_layer(s, LayerRole::Output, r(1), r(0), r(0), r(0));
  }
  {
    const ParamSpec s = mup_implementation(MupImpl::Canonical, OptimizerKind::Adam);
    expect_layer(s, LayerRole::Input, r(-1, 2), r(1, 2), r(1, 2), r(-1, 2));
    expect_layer(s, LayerRole::Hidden, r(0), r(1, 2), r(1), r(-1));
    expect_layer(s, LayerRole::Output, r(1, 2), r(1, 2), r(1, 2), r(-1, 2));
  }
  {
    const ParamSpec s = mup_implementation(MupImpl::CompleteP, OptimizerKind::Adam);
    expect_layer(s, LayerRole::Input, r(0), r(0), r(0), r(0));
    expect_layer(s, LayerRole::Hidden, r(0), r(1, 2), r(1), r(-1));
    expect_layer(s, LayerRole::Output, r(1), r(0), r(0), r(0));
  }
}

TEST(BaseSpec, MupSgdUsesNoMultiplierGauge) {
  const ParamSpec s = base_spec(BaseKind::MuP, OptimizerKind::SGD);
  EXPECT_EQ(*s.layer(LayerRole::Input).c, r(-1));  // input LR = eta * n
  EXPECT_EQ(*s.layer(LayerRole::Hidden).c, r(0));
  EXPECT_TRUE(s.same_exponents(mup_implementation(MupImpl::NoMultipliers, OptimizerKind::SGD)));
}

TEST(Ablate, SpEmbd) {
  const ParamSpec s = ablate(AblationFlags{true, false, false, false}, OptimizerKind::Adam);
  EXPECT_EQ(s.name, "SP+Embd");
  EXPECT_EQ(*s.layer(LayerRole::Input).c, r(0));
  EXPECT_EQ(*s.layer(LayerRole::Input).d, r(0));
  EXPECT_EQ(*s.layer(LayerRole::Output).b * r(2), r(1));  // still SP's 1/n variance
  EXPECT_EQ(*s.layer(LayerRole::LayerNorm).c, r(1));
  EXPECT_EQ(s.attn_exponent, r(1, 2));
}

TEST(Ablate, AllFalseIsSp) {
  const ParamSpec s = ablate(AblationFlags{}, OptimizerKind::Adam);
  EXPECT_TRUE(s.same_exponents(base_spec(BaseKind::SP, OptimizerKind::Adam)));
  EXPECT_EQ(s.name, "SP");
}

TEST(Ablate, MupMinusEmbd) {
  // Everything muP-style except the embedding learning rate.
  const ParamSpec s = ablate(AblationFlags{false, true, true, true}, OptimizerKind::Adam);
  EXPECT_EQ(s.name, "muP-Embd");
  EXPECT_EQ(*s.layer(LayerRole::Input).c, r(1));
  EXPECT_EQ(*s.layer(LayerRole::Output).b, r(1));
  EXPECT_EQ(*s.layer(LayerRole::LayerNorm).c, r(0));
  EXPECT_EQ(s.attn_exponent, r(1));
}

TEST(Ablate, SixteenDistinctWithEndpoints) {
  std::vector<ParamSpec> specs;
  for (const auto& f : AblationFlags::all()) specs.push_back(ablate(f, OptimizerKind::Adam));
  for (size_t i = 0; i < specs.size(); ++i)
    for (size_t j = i + 1; j < specs.size(); ++j)
      EXPECT_FALSE(specs[i].same_exponents(specs[j])) << specs[i].name << " vs " << specs[j].name;
  bool has_sp = false, has_mup = false;
  for (const auto& s : specs) {
    has_sp |= s.same_exponents(base_spec(BaseKind::SP, OptimizerKind::Adam));
    has_mup |= s.same_exponents(base_spec(BaseKind::MuP, OptimizerKind::Adam));
  }
  EXPECT_TRUE(has_sp);
  EXPECT_TRUE(has_mup);
}

TEST(Ablate, WeightDecayConventionHolds) {
  for (const auto& f : AblationFlags::all()) {
    const ParamSpec s = ablate(f, OptimizerKind::Adam);
    for (LayerRole role : {LayerRole::Input, LayerRole::Hidden, LayerRole::Output}) {
      const auto& e = s.layer(role);
      EXPECT_EQ(*e.c + *e.d, r(0)) << s.name << " " << to_string(role);
    }
  }
}

TEST(SpecName, Canonical) {
  EXPECT_EQ(ablation_name(AblationFlags{}), "SP");
  EXPECT_EQ(ablation_name(AblationFlags{true, true, true, true}), "muP");
  EXPECT_EQ(ablation_name(AblationFlags{true, false, false, false}), "SP+Embd");
  EXPECT_EQ(ablation_name(AblationFlags{true, true, true, false}), "muP-Attn");
  EXPECT_EQ(ablation_name(AblationFlags{true, false, false, true}), "SP+Embd+Attn");
  EXPECT_EQ(spec_name(base_spec(BaseKind::SP, OptimizerKind::Adam)), "SP");
  EXPECT_EQ(spec_name(ablate(AblationFlags{false, true, true, true}, OptimizerKind::Adam)),
            "muP-Embd");
  ASSERT_TRUE(flags_from_name("muP-LN").has_value());
  EXPECT_EQ(ablation_name(*flags_from_name("muP-LN")), "muP-LN");
}

TEST(Resolve, SpInputAtWidth256) {
  const ParamSpec sp = base_spec(BaseKind::SP, OptimizerKind::Adam);
  const double eta = std::pow(2.0, -6);
  const ResolvedLayerHP hp = resolve(sp, LayerRole::Input, 256, 64, eta, 0.1);
  EXPECT_DOUBLE_EQ(*hp.lr, eta / 256.0);
  EXPECT_DOUBLE_EQ(*hp.wd, 0.1 * 256.0);
  EXPECT_DOUBLE_EQ(*hp.multiplier, 1.0);
  EXPECT_DOUBLE_EQ(*hp.init_std, 1.0);
}

TEST(Resolve, WidthOneCollapsesAllPowers) {
  for (auto kind : {BaseKind::SP, BaseKind::MuP}) {
    const ParamSpec s = base_spec(kind, OptimizerKind::Adam);
    for (LayerRole role : {LayerRole::Input, LayerRole::Hidden, LayerRole::Output}) {
      const ResolvedLayerHP hp = resolve(s, role, 1, 1, 0.25, 0.5);
      EXPECT_DOUBLE_EQ(*hp.multiplier, 1.0);
      EXPECT_DOUBLE_EQ(*hp.init_std, 1.0);
      EXPECT_DOUBLE_EQ(*hp.lr, 0.25);
      EXPECT_DOUBLE_EQ(*hp.wd, 0.5);
    }
  }
}

TEST(Resolve, AttentionScale) {
  const ParamSpec mup = base_spec(BaseKind::MuP, OptimizerKind::Adam);
  const ResolvedLayerHP hp = resolve(mup, LayerRole::AttentionScale, 256, 64, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(*hp.multiplier, 1.0 / 64.0);
  EXPECT_FALSE(hp.lr);
  const ParamSpec sp = base_spec(BaseKind::SP, OptimizerKind::Adam);
  EXPECT_DOUBLE_EQ(*resolve(sp, LayerRole::AttentionScale, 256, 64, 0.1, 0.0).multiplier,
                   1.0 / 8.0);
}

TEST(Resolve, MissingRoleIsStructuredError) {
  ParamSpec s = base_spec(BaseKind::SP, OptimizerKind::Adam);
  s.layers.erase(LayerRole::Output);
  try {
    resolve(s, LayerRole::Output, 64, 8, 0.1, 0.0);
    FAIL() << "expected error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("output"), std::string::npos);
  }
}

TEST(Gauge, DeltaZeroIsIdentity) {
  const ParamSpec s = base_spec(BaseKind::MuP, OptimizerKind::Adam);
  EXPECT_TRUE(gauge_transform(s, LayerRole::Hidden, r(0)).same_exponents(s));
}

TEST(Gauge, ShiftRules) {
  const ParamSpec mup = mup_implementation(MupImpl::NoMultipliers, OptimizerKind::Adam);
  // Adam: (a, b, c, d) -> (a+D, b-D, c-D, d+D).
  const ParamSpec t = gauge_transform(mup, LayerRole::Input, r(1, 2));
  expect_layer(t, LayerRole::Input, r(1, 2), r(-1, 2), r(-1, 2), r(1, 2));
  // SGD: c and d shift by 2*delta.
  const ParamSpec mups = mup_implementation(MupImpl::NoMultipliers, OptimizerKind::SGD);
  const ParamSpec ts = gauge_transform(mups, LayerRole::Output, r(1, 2));
  expect_layer(ts, LayerRole::Output, r(1, 2), r(1, 2), r(0), r(0));
  // c + d is preserved in both cases.
  EXPECT_EQ(*t.layer(LayerRole::Input).c + *t.layer(LayerRole::Input).d, r(0));
  EXPECT_EQ(*ts.layer(LayerRole::Output).c + *ts.layer(LayerRole::Output).d, r(0));
}

// The per-layer deltas mapping the no-multiplier table onto the canonical one.
TEST(Gauge, NoMultipliersToCanonical) {
  for (auto opt : {OptimizerKind::SGD, OptimizerKind::Adam}) {
    ParamSpec s = mup_implementation(MupImpl::NoMultipliers, opt);
    s = gauge_transform(s, LayerRole::Input, r(-1, 2));
    s = gauge_transform(s, LayerRole::Output, r(1, 2));
    EXPECT_TRUE(s.same_exponents(mup_implementation(MupImpl::Canonical, opt)))
        << to_string(opt);
  }
}

TEST(Gauge, RoleWithoutExponentsErrors) {
  const ParamSpec s = base_spec(BaseKind::MuP, OptimizerKind::Adam);
  EXPECT_THROW(gauge_transform(s, LayerRole::LayerNorm, r(1, 2)), std::invalid_argument);
  EXPECT_THROW(gauge_transform(s, LayerRole::AttentionScale, r(1, 2)), std::invalid_argument);
}

TEST(Stability, MupAdamFullPasses) {
  const auto rep = check_stability(base_spec(BaseKind::MuP, OptimizerKind::Adam),
                                   AlignmentAssumption::Full);
  EXPECT_TRUE(rep.all_satisfied());
  EXPECT_EQ(rep.entries.size(), 9u);
}

TEST(Stability, SpAdamFullFailsOnlyInputUpdate) {
  const auto rep = check_stability(base_spec(BaseKind::SP, OptimizerKind::Adam),
                                   AlignmentAssumption::Full);
  int failures = 0;
  for (const auto& e : rep.entries) failures += e.satisfied ? 0 : 1;
  EXPECT_EQ(failures, 1);
  const auto& e = rep.entry("update/input");
  EXPECT_FALSE(e.satisfied);
  EXPECT_EQ(e.residual, r(1));  // a_u + c_u = 1: embedding updates vanish as 1/n
}

TEST(Stability, MupSgdCanonicalFullPasses) {
  for (MupImpl impl : {MupImpl::NoMultipliers, MupImpl::NoLrScaling, MupImpl::Canonical,
                       MupImpl::CompleteP}) {
    for (auto opt : {OptimizerKind::SGD, OptimizerKind::Adam}) {
      const auto rep = check_stability(mup_implementation(impl, opt), AlignmentAssumption::Full);
      EXPECT_TRUE(rep.all_satisfied()) << static_cast<int>(impl) << " " << to_string(opt);
    }
  }
}

TEST(Stability, MupAdamInitAlignmentReportsVanishingOutputUpdate) {
  // At random (t=0) alignment, muP's first-step output update shrinks as
  // n^{-1/2}; the report flags the unmet max-condition.
  const auto rep = check_stability(base_spec(BaseKind::MuP, OptimizerKind::Adam),
                                   AlignmentAssumption::Init);
  EXPECT_FALSE(rep.entry("update/output").satisfied);
  EXPECT_EQ(rep.entry("update/output").residual, r(-1, 2));
  EXPECT_TRUE(rep.entry("update/input").satisfied);
  EXPECT_TRUE(rep.entry("update/hidden").satisfied);
}

// Stability verdicts are invariant under gauge transformations.
TEST(Stability, GaugeInvariance) {
  const std::vector<Rational> deltas = {r(-1), r(-1, 2), r(1, 2), r(1)};
  for (auto opt : {OptimizerKind::SGD, OptimizerKind::Adam}) {
    for (auto kind : {BaseKind::SP, BaseKind::MuP}) {
      const ParamSpec s = base_spec(kind, opt);
      for (LayerRole role : {LayerRole::Input, LayerRole::Hidden, LayerRole::Output}) {
        for (const Rational& d : deltas) {
          const ParamSpec t = gauge_transform(s, role, d);
          for (auto mode : {AlignmentAssumption::Init, AlignmentAssumption::Full}) {
            EXPECT_TRUE(check_stability(t, mode).same_verdicts(check_stability(s, mode)))
                << s.name << " " << to_string(role) << " delta=" << d.str();
          }
        }
      }
    }
  }
}

TEST(WeightTied, AdamTable) {
  const ParamSpec s = weight_tied_spec(OptimizerKind::Adam);
  expect_layer(s, LayerRole::Input, r(0), r(0), r(0), r(0));
  expect_layer(s, LayerRole::Hidden, r(0), r(1, 2), r(1), r(-1));
  EXPECT_EQ(*s.layer(LayerRole::Output).a, r(1));  // output multiplier 1/n
  // Shared init variance: b_u = 0 means variance 1 for the tied matrix.
  EXPECT_EQ(*s.layer(LayerRole::Input).b, r(0));
  EXPECT_TRUE(s.weight_tied);
}

TEST(WeightTied, StabilityPassesByConstruction) {
  for (auto opt : {OptimizerKind::SGD, OptimizerKind::Adam}) {
    const auto rep = check_stability(weight_tied_spec(opt), AlignmentAssumption::Full);
    EXPECT_TRUE(rep.all_satisfied()) << to_string(opt);
  }
}

TEST(WeightTied, CollapsedMultipliersContradict) {
  // Forcing a_u = a_v demands b_u = 0 (init) and b_u = 1 (output update); no
  // assignment satisfies both, so some condition must fail either way.
  for (Rational bu : {r(0), r(1)}) {
    ParamSpec s = weight_tied_spec(OptimizerKind::Adam);
    s.layers[LayerRole::Output].a = r(0);  // = a_u
    s.layers[LayerRole::Input].b = bu;
    const auto rep = check_stability(s, AlignmentAssumption::Full);
    EXPECT_FALSE(rep.all_satisfied()) << "b_u=" << bu.str();
  }
}

TEST(Json, RoundTripAndByteStable) {
  for (auto opt : {OptimizerKind::SGD, OptimizerKind::Adam}) {
    for (const auto& f : AblationFlags::all()) {
      const ParamSpec s = ablate(f, opt);
      const std::string text = to_json(s).dump();
      const ParamSpec back = spec_from_json(json::parse(text));
      EXPECT_TRUE(back.same_exponents(s));
      EXPECT_EQ(back.name, s.name);
      EXPECT_EQ(to_json(back).dump(), text);  // canonical field order
    }
  }
  const ParamSpec tied = weight_tied_spec(OptimizerKind::Adam);
  EXPECT_TRUE(spec_from_json(json::parse(to_json(tied).dump())).weight_tied);
}

TEST(SpecByName, LooksUpCanonicalNames) {
  EXPECT_TRUE(spec_by_name("SP", OptimizerKind::Adam)
                  .same_exponents(base_spec(BaseKind::SP, OptimizerKind::Adam)));
  EXPECT_TRUE(spec_by_name("muP-Attn", OptimizerKind::Adam)
                  .same_exponents(ablate(AblationFlags{true, true, true, false},
                                         OptimizerKind::Adam)));
  EXPECT_TRUE(spec_by_name("muP-canonical", OptimizerKind::SGD)
                  .same_exponents(mup_implementation(MupImpl::Canonical, OptimizerKind::SGD)));
  EXPECT_THROW(spec_by_name("nonsense", OptimizerKind::Adam), std::invalid_argument);
}
