// Central finite-difference checks (step 1e-4) of every analytic loss
// gradient with respect to the student-side inputs.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "oracles.hpp"
#include "stagekd/losses.hpp"

using namespace stagekd;

namespace {

constexpr double kStep = 1e-4;
constexpr double kTol = 1e-4;

// Norm-wise relative error between an analytic gradient and central
// differences of `eval` over the buffer x[0..n).
double grad_rel_error(double* x, std::int64_t n, const double* analytic,
                      const std::function<double()>& eval) {
  double num = 0.0, na = 0.0, nf = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double keep = x[i];
    x[i] = keep + kStep;
    double fp = eval();
    x[i] = keep - kStep;
    double fm = eval();
    x[i] = keep;
    double fd = (fp - fm) / (2.0 * kStep);
    num += (analytic[i] - fd) * (analytic[i] - fd);
    na += analytic[i] * analytic[i];
    nf += fd * fd;
  }
  return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nf), 1e-8});
}

}  // namespace

TEST_CASE("cross_entropy gradient (hard and soft labels)") {
  Rng rng(31);
  for (int i = 0; i < 10; ++i) {
    int c = rng.uniform_int(2, 8);
    auto l = oracle::random_logits(rng, c);
    int label = rng.uniform_int(0, c - 1);
    LogitVector g;
    cross_entropy(l, Target::of(label), &g);
    CHECK(grad_rel_error(l.data(), c, g.data(),
                         [&] { return cross_entropy(l, label); }) <= kTol);

    auto q = oracle::random_distribution(rng, c);
    LogitVector gs;
    cross_entropy(l, Target::of_soft(q), &gs);
    CHECK(grad_rel_error(l.data(), c, gs.data(),
                         [&] { return cross_entropy(l, Target::of_soft(q)); }) <= kTol);
  }
}

TEST_CASE("response_loss gradient w.r.t. student logits") {
  Rng rng(32);
  for (int i = 0; i < 10; ++i) {
    int c = rng.uniform_int(2, 8);
    auto s = oracle::random_logits(rng, c);
    auto t = oracle::random_logits(rng, c);
    int label = rng.uniform_int(0, c - 1);
    LossWeights w;
    w.lambda_ = rng.uniform(0.1, 1.5);
    w.temperature = rng.uniform(1.0, 6.0);
    w.scale_kl_by_t2 = (i % 2 == 0);
    LogitVector g;
    response_loss(s, t, Target::of(label), w, &g);
    CHECK(grad_rel_error(s.data(), c, g.data(), [&] {
            return response_loss(s, t, Target::of(label), w);
          }) <= kTol);
  }
}

TEST_CASE("at_distance gradient w.r.t. student map") {
  Rng rng(33);
  for (int i = 0; i < 10; ++i) {
    int ch = rng.uniform_int(2, 5), hw = rng.uniform_int(2, 4);
    FeatureMap ft{oracle::random_map(rng, ch, hw, hw), "t"};
    FeatureMap fs{oracle::random_map(rng, ch, hw, hw), "s"};
    Tensor g;
    at_distance(ft, fs, &g);
    CHECK(grad_rel_error(fs.data.data(), fs.data.size(), g.data(),
                         [&] { return at_distance(ft, fs); }) <= kTol);
  }
}

TEST_CASE("df_distance gradient w.r.t. student map") {
  Rng rng(34);
  for (int i = 0; i < 10; ++i) {
    int ch = rng.uniform_int(3, 6), hw = rng.uniform_int(2, 4);
    int k = rng.uniform_int(1, ch - 1);
    FeatureMap ft{oracle::random_map(rng, ch, hw, hw), "t"};
    FeatureMap fs{oracle::random_map(rng, ch, hw, hw), "s"};
    Tensor g;
    df_distance(ft, fs, k, &g);
    CHECK(grad_rel_error(fs.data.data(), fs.data.size(), g.data(),
                         [&] { return df_distance(ft, fs, k); }) <= kTol);
  }
}

TEST_CASE("feature_loss gradients w.r.t. student maps and logits") {
  Rng rng(35);
  for (int i = 0; i < 10; ++i) {
    int c = rng.uniform_int(2, 6);
    int ch = rng.uniform_int(2, 5), hw = 3;
    LossWeights w;
    w.alpha = rng.uniform(1.0, 250.0);
    w.beta = rng.uniform(1.0, 350.0);
    w.k_channels = rng.uniform_int(1, ch);
    auto s = oracle::random_logits(rng, c);
    int label = rng.uniform_int(0, c - 1);
    std::vector<std::pair<FeatureMap, FeatureMap>> pairs{
        {{oracle::random_map(rng, ch, hw, hw), "a"},
         {oracle::random_map(rng, ch, hw, hw), "a"}},
        {{oracle::random_map(rng, ch, hw, hw), "b"},
         {oracle::random_map(rng, ch, hw, hw), "b"}}};
    LogitVector gl;
    std::vector<Tensor> gm;
    feature_loss(pairs, s, Target::of(label), w, &gl, &gm);

    auto eval = [&] { return feature_loss(pairs, s, Target::of(label), w); };
    CHECK(grad_rel_error(s.data(), c, gl.data(), eval) <= kTol);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      Tensor& fsdata = pairs[p].second.data;
      CHECK(grad_rel_error(fsdata.data(), fsdata.size(), gm[p].data(), eval) <= kTol);
    }
  }
}

TEST_CASE("relation_loss gradient w.r.t. student FSP matrices") {
  Rng rng(36);
  for (int i = 0; i < 10; ++i) {
    int c = rng.uniform_int(2, 6);
    int ci = rng.uniform_int(2, 4), co = rng.uniform_int(2, 4);
    LossWeights w;
    w.gamma = rng.uniform(0.1, 1.5);
    auto s = oracle::random_logits(rng, c);
    int label = rng.uniform_int(0, c - 1);
    FspMatrix gt, gs;
    gt.data = Tensor({ci, co});
    gs.data = Tensor({ci, co});
    for (std::int64_t j = 0; j < gt.data.size(); ++j) {
      gt.data[j] = rng.uniform(-1.0, 1.0);
      gs.data[j] = rng.uniform(-1.0, 1.0);
    }
    LogitVector gl;
    std::vector<Tensor> gg;
    std::vector<FspMatrix> tv{gt}, sv{gs};
    relation_loss(tv, sv, s, Target::of(label), w, &gl, &gg);
    auto eval = [&] { return relation_loss(tv, sv, s, Target::of(label), w); };
    CHECK(grad_rel_error(s.data(), c, gl.data(), eval) <= kTol);
    CHECK(grad_rel_error(sv[0].data.data(), sv[0].data.size(), gg[0].data(), eval) <= kTol);
  }
}

TEST_CASE("relation_loss_from_taps gradient w.r.t. student feature maps") {
  Rng rng(37);
  for (int i = 0; i < 10; ++i) {
    int c = 4, hw = 3;
    int ci = rng.uniform_int(2, 4), co = rng.uniform_int(2, 4);
    LossWeights w;
    w.gamma = rng.uniform(0.1, 1.5);
    auto s = oracle::random_logits(rng, c);
    int label = rng.uniform_int(0, c - 1);
    std::vector<std::pair<FeatureMap, FeatureMap>> tp{
        {{oracle::random_map(rng, ci, hw, hw), "in"},
         {oracle::random_map(rng, co, hw, hw), "out"}}};
    std::vector<std::pair<FeatureMap, FeatureMap>> sp{
        {{oracle::random_map(rng, ci, hw, hw), "in"},
         {oracle::random_map(rng, co, hw, hw), "out"}}};
    LogitVector gl;
    std::vector<std::pair<Tensor, Tensor>> gm;
    relation_loss_from_taps(tp, sp, s, Target::of(label), w, &gl, &gm);
    auto eval = [&] { return relation_loss_from_taps(tp, sp, s, Target::of(label), w); };
    CHECK(grad_rel_error(sp[0].first.data.data(), sp[0].first.data.size(),
                         gm[0].first.data(), eval) <= kTol);
    CHECK(grad_rel_error(sp[0].second.data.data(), sp[0].second.data.size(),
                         gm[0].second.data(), eval) <= kTol);
  }
}

TEST_CASE("fsp_matrix_backward against a random linear functional") {
  Rng rng(38);
  for (int i = 0; i < 10; ++i) {
    int ci = rng.uniform_int(2, 4), co = rng.uniform_int(2, 4), hw = 3;
    FeatureMap fin{oracle::random_map(rng, ci, hw, hw), "in"};
    FeatureMap fout{oracle::random_map(rng, co, hw, hw), "out"};
    Tensor coeff({ci, co});
    for (std::int64_t j = 0; j < coeff.size(); ++j) coeff[j] = rng.uniform(-1.0, 1.0);

    auto eval = [&] {
      FspMatrix g = fsp_matrix(fin, fout);
      double v = 0.0;
      for (std::int64_t j = 0; j < g.data.size(); ++j) v += coeff[j] * g.data[j];
      return v;
    };
    Tensor gin, gout;
    fsp_matrix_backward(fin, fout, coeff, &gin, &gout);
    CHECK(grad_rel_error(fin.data.data(), fin.data.size(), gin.data(), eval) <= kTol);
    CHECK(grad_rel_error(fout.data.data(), fout.data.size(), gout.data(), eval) <= kTol);
  }
}

TEST_CASE("rskd_total_loss gradient w.r.t. its components") {
  Rng rng(39);
  for (int i = 0; i < 10; ++i) {
    LossWeights w;
    w.eta = rng.uniform(0.0, 1.5);
    w.xi = rng.uniform(0.0, 1.5);
    w.tau_w = rng.uniform(0.0, 1.5);
    double comp[4] = {rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0),
                      rng.uniform(0.1, 2.0)};
    double analytic[4] = {1.0, w.eta, w.xi, w.tau_w};
    auto eval = [&] { return rskd_total_loss(comp[0], comp[1], comp[2], comp[3], w); };
    CHECK(grad_rel_error(comp, 4, analytic, eval) <= kTol);
  }
}

TEST_CASE("df through a channel adapter: gradients for input, weight, bias") {
  Rng rng(40);
  for (int i = 0; i < 10; ++i) {
    int cs = rng.uniform_int(2, 4);
    int ct = cs + rng.uniform_int(1, 3);  // wider teacher
    int hw = 3;
    int k = rng.uniform_int(1, ct);
    FeatureMap ft{oracle::random_map(rng, ct, hw, hw), "t"};
    FeatureMap fs{oracle::random_map(rng, cs, hw, hw), "s"};
    ChannelAdapter ad = ChannelAdapter::init(cs, ct, rng);

    auto eval = [&] { return df_distance(ft, ad.apply(fs), k); };

    FeatureMap proj = ad.apply(fs);
    Tensor gproj;
    df_distance(ft, proj, k, &gproj);
    Tensor gin, gw, gb;
    ad.backward(fs, gproj, &gin, &gw, &gb);

    CHECK(grad_rel_error(fs.data.data(), fs.data.size(), gin.data(), eval) <= kTol);
    CHECK(grad_rel_error(ad.weight.data(), ad.weight.size(), gw.data(), eval) <= kTol);
    CHECK(grad_rel_error(ad.bias.data(), ad.bias.size(), gb.data(), eval) <= kTol);
  }
}
