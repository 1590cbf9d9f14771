#include <gtest/gtest.h>

#include "support.hpp"

using namespace unigen;
using namespace unigen::testing;

namespace {

Tensor ref_modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
  Tensor out = x;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(r, c) * (1.0 + scale[c]) + shift[c];
  return out;
}

Tensor cols(const Tensor& v, std::size_t k, std::size_t i) {
  const std::size_t d = v.cols() / k;
  return Tensor({1, d}, std::span<const double>(v.data() + i * d, d));
}

Tensor ref_mm_attention(const ParamStore& ps, const MMAttention& m, const Tensor& xq, const Tensor& xkv, const Tensor& cond) {
  Tensor s = cond;
  for (double& v : s.values()) v = ref_silu(v);
  const Tensor mod = ref_linear(ps, m.mod, s), gate = ref_linear(ps, m.gate, s);
  const Tensor hq = ref_modulate(ref_layer_norm(xq), cols(mod, 4, 0), cols(mod, 4, 1));
  const Tensor hkv = ref_modulate(ref_layer_norm(xkv), cols(mod, 4, 2), cols(mod, 4, 3));
  Tensor o = ref_linear(ps, m.o, ref_attention(ref_linear(ps, m.q, hq), ref_linear(ps, m.k, hkv), ref_linear(ps, m.v, hkv), m.heads));
  for (std::size_t r = 0; r < o.rows(); ++r)
    for (std::size_t c = 0; c < o.cols(); ++c) o.at(r, c) *= gate[c];
  return o;
}

Tensor plus(const Tensor& a, const Tensor& b) {
  Tensor o = a;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += b[i];
  return o;
}

Tensor rows_of(const Tensor& t, std::size_t begin, std::size_t end) {
  const std::size_t d = t.cols();
  return Tensor({end - begin, d}, std::span<const double>(t.data() + begin * d, (end - begin) * d));
}

}  // namespace

TEST(Routing, HandComputedScores) {
  // F_n + F_c = [[1, 0], [0, 2]]; W_r = [[1, 0, 2], [0, 1, -1]]; b_r = [0, 0.5, 0]
  const Tensor Fn({2, 2}, {1.0, -1.0, 0.0, 1.0}), Fc({2, 2}, {0.0, 1.0, 0.0, 1.0});
  const Tensor W({2, 3}, {1.0, 0.0, 2.0, 0.0, 1.0, -1.0}), b({1, 3}, {0.0, 0.5, 0.0});
  const ExpertAssignment a = route_tokens(Fn, Fc, W, b);
  // token 0 scores [1, 0.5, 2] -> expert 2; token 1 scores [0, 2.5, -2] -> expert 1
  EXPECT_EQ(a.scores, Tensor({2, 3}, {1.0, 0.5, 2.0, 0.0, 2.5, -2.0}));
  EXPECT_EQ(a.index, (std::vector<std::size_t>{2, 1}));
  EXPECT_TRUE(a.groups[0].empty());
  EXPECT_EQ(a.groups[1], std::vector<std::size_t>{1});
  EXPECT_EQ(a.groups[2], std::vector<std::size_t>{0});
}

TEST(Routing, TiesGoToLowestIndex) {
  const ExpertAssignment a = assign_from_scores(Tensor({2, 3}, {0.5, 0.5, 0.5, -1.0, 3.0, 3.0}));
  EXPECT_EQ(a.index, (std::vector<std::size_t>{0, 1}));
}

TEST(Routing, ShapeErrors) {
  EXPECT_THROW(route_tokens(Tensor({2, 2}), Tensor({3, 2}), Tensor({2, 3}), Tensor({1, 3})), ShapeError);
  EXPECT_THROW(route_tokens(Tensor({2, 2}), Tensor({2, 2}), Tensor({4, 3}), Tensor({1, 3})), ShapeError);
}

TEST(Routing, LoadStatisticsCoverAllTokens) {
  Rng rng(30);
  for (int trial = 0; trial < 50; ++trial) {
    const ExpertAssignment a = assign_from_scores(random_tensor(17, 5, rng));
    const auto load = load_statistics(a);
    EXPECT_EQ(std::accumulate(load.begin(), load.end(), std::size_t{0}), 17u);
  }
}

TEST(ReverseScatter, RoundTripIsBitwiseIdentity) {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t e = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    const Tensor x = random_tensor(n, d, rng);
    const ExpertAssignment a = random_assignment(n, e, rng);
    ASSERT_EQ(reverse_scatter(gather_groups(x, a), Tensor({n, d}, std::nan("")), a), x) << "trial " << trial;

    Graph g;
    ASSERT_EQ(reverse_scatter(gather_groups(g.constant(x), a), a).value(), x) << "graph form, trial " << trial;
  }
}

TEST(ReverseScatter, BlocksKeepOriginalOrder) {
  const Tensor x({4, 1}, {10.0, 11.0, 12.0, 13.0});
  const ExpertAssignment a = assign_from_scores(Tensor({4, 2}, {0, 1, 1, 0, 0, 1, 1, 0}));
  const auto blocks = gather_groups(x, a);
  EXPECT_EQ(blocks[0], Tensor({2, 1}, {11.0, 13.0}));
  EXPECT_EQ(blocks[1], Tensor({2, 1}, {10.0, 12.0}));
}

TEST(ReverseScatter, MismatchedBlocksRejected) {
  const ExpertAssignment a = assign_from_scores(Tensor({2, 2}, {1, 0, 0, 1}));
  EXPECT_THROW(reverse_scatter({Tensor({2, 3}), Tensor({1, 3})}, Tensor({2, 3}), a), ShapeError);
  EXPECT_THROW(reverse_scatter({Tensor({1, 3})}, Tensor({2, 3}), a), ShapeError);
  EXPECT_THROW(gather_groups(Tensor({3, 3}), a), ShapeError);
}

TEST(ModulatedExpert, HandComputedTwoChannels) {
  ParamStore ps;
  Rng rng(32);
  const ModulatedExpert ex = ModulatedExpert::make(ps, "e", 2, rng);
  ps.value(ex.lw_c) = Tensor({2, 2}, {1.0, 0.0, 0.0, 2.0});
  ps.value(ex.lb_c) = Tensor({1, 2}, {0.5, -0.5});
  ps.value(ex.lw_h) = Tensor({2, 2}, {0.0, 1.0, 1.0, 0.0});
  ps.value(ex.lb_h) = Tensor({1, 2}, {1.0, 1.0});
  Graph g;
  const Ctx ctx{g, ps};
  // E_c LW_c = [3, 4]; F_c' = [3*1 + 0.5, 4*2 - 0.5] = [3.5, 7.5]
  // F_c' LW_h = [7.5, 3.5]; F_n' = [7.5*2 + 1, 3.5*(-1) + 1] = [16, -2.5]
  auto [fn, fc] = ex(ctx, g.constant(Tensor({1, 2}, {2.0, -1.0})), g.constant(Tensor({1, 2}, {1.0, 2.0})), g.constant(Tensor({1, 2}, {3.0, 2.0})));
  EXPECT_EQ(fc.value(), Tensor({1, 2}, {3.5, 7.5}));
  EXPECT_EQ(fn.value(), Tensor({1, 2}, {16.0, -2.5}));
}

TEST(ModulatedExpert, InitIsNormalWithStdPointOne) {
  ParamStore ps;
  Rng rng(33);
  const ModulatedExpert ex = ModulatedExpert::make(ps, "e", 64, rng);
  const Tensor& w = ps.value(ex.lw_c);
  double m = 0.0, s = 0.0;
  for (double v : w.values()) m += v / double(w.size());
  for (double v : w.values()) s += (v - m) * (v - m) / double(w.size());
  EXPECT_NEAR(m, 0.0, 0.01);
  EXPECT_NEAR(std::sqrt(s), 0.1, 0.005);
}

TEST(MMAttention, MatchesReference) {
  Rng rng(34);
  ParamStore ps;
  const MMAttention m = MMAttention::make(ps, "m", 8, 2, rng);
  randomize(ps, rng);
  const Tensor xq = random_tensor(5, 8, rng), xkv = random_tensor(3, 8, rng), cond = random_tensor(1, 8, rng);
  Graph g;
  const Ctx ctx{g, ps};
  const Tensor out = m(ctx, g.constant(xq), g.constant(xkv), g.constant(cond)).value();
  EXPECT_LT(max_abs_diff(out, ref_mm_attention(ps, m, xq, xkv, cond)), 1e-12);
}

TEST(SharedExpert, FreshGatesGiveZeroOutput) {
  Rng rng(35);
  ParamStore ps;
  const SharedExpert se = SharedExpert::make(ps, "s", 8, 1, rng);
  const PromptTable pt = PromptTable::make(ps, 8, 8, rng);
  const ConditionTable ct = ConditionTable::make(ps, 4, 8, rng);
  Graph g;
  const Ctx ctx{g, ps};
  const auto out = se(ctx, g.constant(random_tensor(4, 8, rng)), g.constant(random_tensor(4, 8, rng)), pt.embed(ctx, std::vector<int>{1, 2}),
                      ct.embed(ctx, 1), 0.4);
  for (double v : out.S_n2.value().values()) EXPECT_EQ(v, 0.0);
  for (double v : out.S_c2.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(SharedExpert, MatchesTwoStageReference) {
  Rng rng(36);
  ParamStore ps;
  const std::size_t d = 8, n = 4;
  const SharedExpert se = SharedExpert::make(ps, "s", d, 1, rng);
  const PromptTable pt = PromptTable::make(ps, 8, d, rng);
  const ConditionTable ct = ConditionTable::make(ps, 4, d, rng);
  randomize(ps, rng);
  const Tensor Fn = random_tensor(n, d, rng), Fc = random_tensor(n, d, rng);
  const std::vector<int> prompt{1, 5, 2};
  Graph g;
  const Ctx ctx{g, ps};
  const PromptContext pc = pt.embed(ctx, prompt);
  const ConditionContext cc = ct.embed(ctx, 3);
  const auto out = se(ctx, g.constant(Fn), g.constant(Fc), pc, cc, 0.6);

  const Tensor Tn = se.temb(ctx, 0.6, cc.E_c).value(), Tp = se.temb(ctx, 0.6, pc.E_p).value();
  const Tensor Sn = ref_mm_attention(ps, se.noisy_to_cond, Fn, Fc, Tn);
  const Tensor Sc0 = ref_mm_attention(ps, se.cond_to_noisy, Fc, Fn, Tn);
  const Tensor Sc = plus(Sc0, ref_mm_attention(ps, se.cond_self, Sc0, Sc0, Tn));
  Tensor joint({2 * n, d});
  std::copy(Fn.data(), Fn.data() + Fn.size(), joint.data());
  std::copy(Fc.data(), Fc.data() + Fc.size(), joint.data() + Fn.size());
  const Tensor S0 = ref_mm_attention(ps, se.joint_prompt, joint, pc.F_p.value(), Tp);
  const Tensor S = plus(S0, ref_mm_attention(ps, se.joint_self, S0, S0, Tp));
  EXPECT_LT(max_abs_diff(out.S_n2.value(), plus(rows_of(S, 0, n), Sn)), 1e-12);
  EXPECT_LT(max_abs_diff(out.S_c2.value(), plus(rows_of(S, n, 2 * n), Sc)), 1e-12);
}

TEST(CoMoE, OutputIsScatteredExpertsPlusSharedExpert) {
  Rng rng(37);
  ParamStore ps;
  const std::size_t d = 8;
  const CoMoE m = CoMoE::make(ps, "c", d, 3, 1, 10000.0, rng);
  const PromptTable pt = PromptTable::make(ps, 8, d, rng);
  const ConditionTable ct = ConditionTable::make(ps, 4, d, rng);
  randomize(ps, rng);
  const auto grid = raster_grid(2, 3);
  const auto table = std::make_shared<const RopeTable>(grid, d, 10000.0);
  const Tensor Fn = random_tensor(6, d, rng), Fc = random_tensor(6, d, rng);
  Graph g;
  const Ctx ctx{g, ps};
  const PromptContext pc = pt.embed(ctx, std::vector<int>{4, 1});
  const ConditionContext cc = ct.embed(ctx, 2);
  const CoMoEOutput out = m(ctx, g.constant(Fn), g.constant(Fc), table, pc, cc, 0.3);

  // Routing reads the un-rotated features.
  const ExpertAssignment a = route_tokens(Fn, Fc, ps.value(m.router.w), ps.value(m.router.b));
  EXPECT_EQ(out.assignment.index, a.index);

  const Tensor Fn_r = rope_apply({Fn, grid, TokenKind::noisy}).tokens, Fc_r = rope_apply({Fc, grid, TokenKind::condition}).tokens;
  const Tensor E_c = cc.E_c.value();
  Tensor expert_n({6, d}), expert_c({6, d});
  for (std::size_t t = 0; t < 6; ++t) {
    const ModulatedExpert& ex = m.experts[a.index[t]];
    const Tensor scale_c = ref_matmul(E_c, ps.value(ex.lw_c));
    Tensor fc({1, d});
    for (std::size_t c = 0; c < d; ++c) fc[c] = scale_c[c] * Fc_r.at(t, c) + ps.value(ex.lb_c)[c];
    const Tensor gate = ref_matmul(fc, ps.value(ex.lw_h));
    for (std::size_t c = 0; c < d; ++c) {
      expert_c.at(t, c) = fc[c];
      expert_n.at(t, c) = gate[c] * Fn_r.at(t, c) + ps.value(ex.lb_h)[c];
    }
  }
  const auto s = m.shared(ctx, g.constant(Fn_r), g.constant(Fc_r), pc, cc, 0.3);
  EXPECT_LT(max_abs_diff(out.Fn_hat.value(), plus(expert_n, s.S_n2.value())), 1e-12);
  EXPECT_LT(max_abs_diff(out.Fc_hat.value(), plus(expert_c, s.S_c2.value())), 1e-12);
}

TEST(CoMoE, MoreExpertsThanTokens) {
  Rng rng(38);
  ParamStore ps;
  const CoMoE m = CoMoE::make(ps, "c", 4, 12, 1, 10000.0, rng);
  const PromptTable pt = PromptTable::make(ps, 4, 4, rng);
  const ConditionTable ct = ConditionTable::make(ps, 2, 4, rng);
  const auto table = std::make_shared<const RopeTable>(raster_grid(1, 2), 4, 10000.0);
  Graph g;
  const Ctx ctx{g, ps};
  const CoMoEOutput out = m(ctx, g.constant(random_tensor(2, 4, rng)), g.constant(random_tensor(2, 4, rng)), table,
                            pt.embed(ctx, std::vector<int>{1}), ct.embed(ctx, 0), 0.5);
  EXPECT_EQ(out.Fn_hat.rows(), 2u);
  EXPECT_TRUE(out.Fn_hat.value().all_finite());
}

TEST(CoMoE, GradientsMatchFiniteDifferences) {
  Rng rng(39);
  ParamStore ps;
  const std::size_t d = 8;
  const CoMoE m = CoMoE::make(ps, "c", d, 3, 2, 10000.0, rng);
  const PromptTable pt = PromptTable::make(ps, 6, d, rng);
  const ConditionTable ct = ConditionTable::make(ps, 3, d, rng);
  randomize(ps, rng);
  const auto table = std::make_shared<const RopeTable>(raster_grid(2, 2), d, 10000.0);
  const Tensor Fn = random_tensor(4, d, rng), Fc = random_tensor(4, d, rng), w1 = random_tensor(4, d, rng), w2 = random_tensor(4, d, rng);
  auto loss = [&](Graph& g, const ParamStore& s) {
    const Ctx ctx{g, s};
    const CoMoEOutput out = m(ctx, g.constant(Fn), g.constant(Fc), table, pt.embed(ctx, std::vector<int>{2, 5}), ct.embed(ctx, 1), 0.7);
    return add(sum(mul(out.Fn_hat, g.constant(w1))), sum(mul(out.Fc_hat, g.constant(w2))));
  };
  // The router weights only select experts; exclude them, the argmax has no gradient.
  std::vector<ParamId> ids;
  for (ParamId id : ps.ids())
    if (id != m.router.w && id != m.router.b) ids.push_back(id);
  const auto r = grad_check(loss, ps, ids);
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst_param << "[" << r.worst_index << "]";
}

TEST(CoMoE, ParameterCountMatchesStore) {
  Rng rng(40);
  ParamStore ps;
  CoMoE::make(ps, "c", 16, 6, 1, 10000.0, rng);
  EXPECT_EQ(ps.scalar_count(), CoMoE::count(16, 6));
}
