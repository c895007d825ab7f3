#include <gtest/gtest.h>

#include "support.hpp"

using namespace effscale;

namespace {

TEST(WidthMap, NonMultipleGrowth) {
  const auto m = build_width_map(2, 3);
  EXPECT_EQ(m.src_index, (std::vector<std::size_t>{0, 1, 0}));
  EXPECT_EQ(m.multiplicity, (std::vector<std::size_t>{2, 1}));
  EXPECT_EQ(m.replica, (std::vector<bool>{false, false, true}));
}

TEST(WidthMap, DoublingIsCircular) {
  const auto m = build_width_map(2, 4);
  EXPECT_EQ(m.src_index, (std::vector<std::size_t>{0, 1, 0, 1}));
  EXPECT_EQ(m.multiplicity, (std::vector<std::size_t>{2, 2}));
}

TEST(WidthMap, IdentityAndShrink) {
  EXPECT_TRUE(build_width_map(5, 5).is_identity());
  EXPECT_THROW(build_width_map(4, 3), Error);
  EXPECT_THROW(WidthMap::from_sources(3, {0, 1, 1}), Error);  // source 2 unused
}

TEST(WidthMap, Surjective) {
  for (std::size_t o = 1; o < 9; ++o)
    for (std::size_t n = o; n < 20; ++n) {
      const auto m = build_width_map(o, n);
      std::size_t sum = 0;
      for (auto k : m.multiplicity) {
        EXPECT_GE(k, 1u);
        sum += k;
      }
      EXPECT_EQ(sum, n);
    }
}

TEST(ExpandAxis, SplitRuleOnInput) {
  // x = [a, b] grows to [a, b, a]; rows mapped to source 0 carry half weight.
  Tensor<float> w({2, 1}, std::vector<float>{4.0f, 6.0f});
  const auto e = expand_in_axis(w, build_width_map(2, 3));
  EXPECT_EQ(e.data, (std::vector<float>{2.0f, 6.0f, 2.0f}));
}

TEST(ExpandAxis, DuplicateRuleOnOutput) {
  Tensor<float> w({1, 2}, std::vector<float>{4.0f, 6.0f});
  const auto e = expand_out_axis(w, build_width_map(2, 3));
  EXPECT_EQ(e.data, (std::vector<float>{4.0f, 6.0f, 4.0f}));
  Tensor<float> donor({1, 2}, std::vector<float>{-1.0f, -2.0f});
  const auto a = expand_out_axis(w, build_width_map(2, 3), &donor);
  EXPECT_EQ(a.data, (std::vector<float>{4.0f, 6.0f, -1.0f}));
}

TEST(ExpandAxis, PreservesProductForRandomMatrices) {
  // x' W' == x W where x' duplicates x along the map, for every map.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto w = fixtures::random_matrix(8, 16, seed);
    for (std::size_t n : {8u, 11u, 16u, 24u}) {
      const auto map = build_width_map(8, n);
      const auto we = expand_in_axis(w, map);
      Rng rng(seed + 100);
      std::vector<double> x(8);
      for (auto& v : x) v = rng.normal();
      for (std::size_t o = 0; o < 16; ++o) {
        double a = 0, b = 0;
        for (std::size_t i = 0; i < 8; ++i) a += x[i] * w.at(i, o);
        for (std::size_t i = 0; i < n; ++i) b += x[map.src_index[i]] * we.at(i, o);
        EXPECT_NEAR(a, b, 1e-6);
      }
    }
  }
}

TEST(ExpandAxis, TwoLayerMlpOutputIsDuplicated) {
  // y = relu(x W1) W2, with W1 grown on the output and W2 on both axes.
  const auto w1 = fixtures::random_matrix(4, 6, 1);
  const auto w2 = fixtures::random_matrix(6, 4, 2);
  const auto h = build_width_map(4, 8), mid = build_width_map(6, 12);
  const auto w1e = expand_out_axis(expand_in_axis(w1, h), mid);
  const auto w2e = expand_out_axis(expand_in_axis(w2, mid), h);
  std::vector<float> x{0.5f, -1.0f, 2.0f, 0.25f}, xe(8);
  for (std::size_t i = 0; i < 8; ++i) xe[i] = x[h.src_index[i]];
  const auto mlp = [](std::span<const float> in, const Tensor<float>& a, const Tensor<float>& b) {
    std::vector<float> t(a.cols()), y(b.cols());
    vecmat<float>(in, a, t);
    for (auto& v : t) v = std::max(v, 0.0f);
    vecmat<float>(t, b, y);
    return y;
  };
  const auto y = mlp(x, w1, w2);
  const auto ye = mlp(xe, w1e, w2e);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(ye[i], y[h.src_index[i]]);
}

TEST(Heads, GrowWithinKvGroups) {
  const auto g = plan_heads(ModelConfig{1, 16, 4, 4, 2, 16, 8, false, 8}, 8, 2);
  // group 0 owns source heads {0,1}, group 1 owns {2,3}
  EXPECT_EQ(g.q_heads.src_index, (std::vector<std::size_t>{0, 1, 0, 1, 2, 3, 2, 3}));
  EXPECT_TRUE(g.kv_heads.is_identity());
}

TEST(Heads, KvGroupMismatchIsRejected) {
  try {
    plan_heads(ModelConfig{1, 16, 4, 4, 2, 16, 8, false, 8}, 8, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("kv_groups must match"), std::string::npos);
  }
  GrowthPlan p{GrowthMethod::fpi, DepthMode::stack, fixtures::toy_config(), fixtures::toy_wide_config()};
  p.target_config.kv_groups = 1;  // neither side-consistent nor MHA -> MHA
  ASSERT_TRUE(validate_plan(p).has_value());
  EXPECT_NE(validate_plan(p)->find("kv_groups must match"), std::string::npos);
}

TEST(Heads, MultiHeadGrowsKvAlongside) {
  const auto g = plan_heads(ModelConfig{1, 8, 2, 4, 2, 16, 8, false, 8}, 4, 4);
  EXPECT_EQ(g.q_heads.src_index, (std::vector<std::size_t>{0, 1, 0, 1}));
  EXPECT_EQ(g.kv_heads.src_index, g.q_heads.src_index);
}

TEST(Heads, IdentityWhenNothingGrows) {
  const auto cfg = fixtures::toy_config();
  const auto m = random_init<float>(cfg, 3);
  const auto b = extract_block(m, 0);
  const auto e = expand_heads(b, cfg, cfg.n_heads, cfg.kv_groups, build_width_map(8, 8));
  EXPECT_TRUE(bitwise_equal(e.wq, b.wq));
  EXPECT_TRUE(bitwise_equal(e.wo, b.wo));
}

// Block-level oracle: a one-layer model whose block was head-expanded computes
// the same logits on duplicated hidden input as the source.
void check_head_growth(ModelConfig src, std::int64_t heads, std::int64_t kv) {
  const auto m = random_init<float>(src, 21, 0.3);
  ModelConfig dst = src;
  dst.n_heads = heads;
  dst.kv_groups = kv;
  dst.hidden_dim = heads * src.head_dim;
  dst.intermediate_dim = 2 * src.intermediate_dim;
  const auto g = fpi_expand(m, dst);
  const auto r = verify_preservation(m, g, 16, 5, 1e-5);
  EXPECT_TRUE(r.pass) << r.max_abs_logit_diff;
}

TEST(Heads, GqaGrowthPreservesBlockOutput) { check_head_growth(ModelConfig{1, 16, 4, 4, 2, 12, 16, true, 16}, 8, 2); }
TEST(Heads, MhaGrowthPreservesBlockOutput) { check_head_growth(ModelConfig{1, 8, 2, 4, 2, 12, 16, true, 16}, 4, 4); }

TEST(Fpi, DoublingPreservesLogits) {
  const auto src = random_init<float>(fixtures::toy_config(), 4, 0.3);
  const auto dst = fpi_expand(src, fixtures::toy_wide_config());
  const auto r = verify_preservation(src, dst, 64, 9, 1e-5);
  EXPECT_TRUE(r.pass) << r.max_abs_logit_diff;
  EXPECT_LT(r.loss_diff, 1e-5);
}

TEST(Fpi, DoublingIsExactInDouble) {
  const auto src = random_init<double>(fixtures::toy_config(), 4, 0.3);
  const auto dst = fpi_expand(src, fixtures::toy_wide_config());
  EXPECT_LE(verify_preservation(src, dst, 16, 9, 1e-10).max_abs_logit_diff, 1e-10);
}

TEST(Fpi, NonMultipleIsReportOnly) {
  const auto src = random_init<float>(fixtures::toy_config(), 4, 0.3);
  auto cfg = fixtures::toy_config();
  cfg.hidden_dim = 12;
  cfg.n_heads = 3;
  cfg.kv_groups = 1;
  auto s = fixtures::toy_config();
  s.kv_groups = 1;
  const auto src1 = random_init<float>(s, 4, 0.3);
  const auto dst = fpi_expand(src1, cfg);
  const auto r = verify_preservation(src1, dst, 8, 1, 1e-5);
  EXPECT_TRUE(std::isfinite(r.max_abs_logit_diff));
  EXPECT_GT(r.max_abs_logit_diff, 0.0);  // RMSNorm statistics shift
}

TEST(Fpi, RandomTargetFailsVerification) {
  const auto src = random_init<float>(fixtures::toy_config(), 4, 0.3);
  const auto other = random_init<float>(fixtures::toy_wide_config(), 5, 0.3);
  const auto r = verify_preservation(src, other, 8, 1, 1e-5);
  EXPECT_FALSE(r.pass);
  EXPECT_GT(r.max_abs_logit_diff, 1e-2);
}

TEST(Aki, ReplicaSlicesComeFromNextLayer) {
  const auto src = random_init<float>(fixtures::toy_config(), 6);
  const auto dst = aki_expand(src, fixtures::toy_wide_config());
  const auto hidden = build_width_map(8, 16);
  const auto inter = build_width_map(16, 32);
  // w_gate of layer 0: input split then output from layer 1 on replica columns
  const auto own = expand_in_axis(src.get("layers.0.mlp.w_gate"), hidden);
  const auto don = expand_in_axis(src.get("layers.1.mlp.w_gate"), hidden);
  const auto& got = dst.get("layers.0.mlp.w_gate");
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 32; ++c) {
      const auto& from = inter.replica[c] ? don : own;
      ASSERT_EQ(got.at(r, c), from.at(r, inter.src_index[c]));
    }
  // top layer has no donor: identical to FPI
  const auto fpi = fpi_expand(src, fixtures::toy_wide_config());
  EXPECT_TRUE(bitwise_equal(dst.get("layers.1.mlp.w_gate"), fpi.get("layers.1.mlp.w_gate")));
  EXPECT_TRUE(bitwise_equal(dst.get("embed"), fpi.get("embed")));
}

TEST(Aki, BreaksFunctionPreservation) {
  const auto src = random_init<float>(fixtures::toy_config(), 6, 0.3);
  const auto dst = aki_expand(src, fixtures::toy_wide_config());
  EXPECT_FALSE(verify_preservation(src, dst, 4, 1, 1e-5).pass);
}

TEST(Depth, Goldens) {
  EXPECT_EQ(depth_sources(3, 6, DepthMode::interpolate), (std::vector<std::size_t>{0, 0, 1, 1, 2, 2}));
  EXPECT_EQ(depth_sources(3, 6, DepthMode::stack), (std::vector<std::size_t>{0, 1, 2, 0, 1, 2}));
  EXPECT_EQ(depth_sources(2, 5, DepthMode::interpolate), (std::vector<std::size_t>{0, 0, 0, 1, 1}));
}

TEST(Depth, MapLaws) {
  for (std::size_t a = 1; a < 9; ++a)
    for (std::size_t b = a; b < 25; ++b) {
      const auto in = depth_sources(a, b, DepthMode::interpolate);
      const auto st = depth_sources(a, b, DepthMode::stack);
      EXPECT_TRUE(std::is_sorted(in.begin(), in.end()));
      for (std::size_t l = a; l < b; ++l) EXPECT_EQ(st[l], st[l - a]);
      std::vector<bool> hit_in(a), hit_st(a);
      for (std::size_t l = 0; l < b; ++l) hit_in[in[l]] = hit_st[st[l]] = true;
      EXPECT_EQ(std::count(hit_in.begin(), hit_in.end(), true), static_cast<long>(a));
      EXPECT_EQ(std::count(hit_st.begin(), hit_st.end(), true), static_cast<long>(a));
    }
}

TEST(Depth, CopiesBlocksBitwise) {
  const auto src = random_init<float>(fixtures::toy_config(), 2);
  const auto d = grow_depth(src, 4, DepthMode::interpolate);
  EXPECT_EQ(d.config.n_layers, 4);
  EXPECT_TRUE(bitwise_equal(d.get("layers.1.attn.wq"), src.get("layers.0.attn.wq")));
  EXPECT_TRUE(bitwise_equal(d.get("layers.2.mlp.w_down"), src.get("layers.1.mlp.w_down")));
  EXPECT_THROW(grow_depth(src, 1, DepthMode::stack), Error);
}

TEST(ScaleUp, PlanRoundTripsAndGrows) {
  const auto plan = nlohmann::json::parse(
      effscale::detail::read_file(std::string(EFFSCALE_DATA_DIR) + "/plan_aki_pro.json")).get<GrowthPlan>();
  EXPECT_EQ(plan.method, GrowthMethod::aki);
  EXPECT_EQ(plan.depth_mode, DepthMode::interpolate);
  const nlohmann::json j = plan;
  EXPECT_EQ(j.get<GrowthPlan>().target_config, plan.target_config);
  const auto src = random_init<float>(plan.source_config, 1);
  const auto dst = scale_up(src, plan);
  EXPECT_EQ(dst.config, plan.target_config);
  EXPECT_NO_THROW(validate_model(dst));
}

TEST(ScaleUp, RejectsConfigMismatchAndMoe) {
  GrowthPlan p{GrowthMethod::fpi, DepthMode::stack, fixtures::toy_config(), fixtures::toy_wide_config()};
  const auto other = random_init<float>(fixtures::toy_wide_config(), 1);
  EXPECT_THROW(scale_up(other, p), Error);
  const auto moe = upcycle(random_init<float>(fixtures::toy_config(), 1), MoEConfig{}, 1);
  EXPECT_THROW(fpi_expand(moe, fixtures::toy_wide_config()), Error);
  p.target_config.head_dim = 8;
  p.target_config.n_heads = 2;
  EXPECT_TRUE(validate_plan(p).has_value());
}

TEST(Symmetry, RandomInitHasNoDuplicates) {
  for (const auto& e : symmetry_report(random_init<float>(fixtures::toy_config(), 1)))
    EXPECT_EQ(e.duplicate_pairs, 0u) << e.tensor;
}

TEST(Symmetry, FpiDuplicatesEveryGrownColumn) {
  const auto src = random_init<float>(fixtures::toy_config(), 1);
  const auto dst = fpi_expand(src, fixtures::toy_wide_config());
  for (const auto& e : symmetry_report(dst)) {
    const auto old_cols = src.get(e.tensor).cols();
    if (e.columns > old_cols) {
      EXPECT_GE(e.duplicate_pairs, old_cols) << e.tensor;
    }
  }
}

TEST(Symmetry, AkiRegionsHaveNoDuplicates) {
  const auto dst = aki_expand(random_init<float>(fixtures::toy_config(), 1), fixtures::toy_wide_config());
  for (const auto& e : symmetry_report(dst))
    if (e.tensor.starts_with("layers.0.")) {
      EXPECT_EQ(e.duplicate_pairs, 0u) << e.tensor;
    }
}

}  // namespace
