#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>

#include "helpers.hpp"
#include "robomt/corpus.hpp"
#include "robomt/seqmodel.hpp"

using namespace robomt;
using namespace robomt::seqmodel;

namespace {

ModelConfig tiny(bool visual, bool correction, double lambda = 0.5) {
  ModelConfig c;
  c.layers = 1;
  c.d_model = 8;
  c.d_ff = 12;
  c.heads = 2;
  c.dropout = 0.0;
  c.visual = visual;
  c.correction = correction;
  c.regions = 2;
  c.d_feat = 3;
  c.lambda = lambda;
  c.warmup = 10;
  c.batch_size = 4;
  c.src_vocab = 9;
  c.tgt_vocab = 8;
  c.cor_vocab = 7;
  return c;
}

std::vector<Example> tiny_batch() {
  return {
      {{4, 5, 6}, {4, 7}, {5, 6, 4}, {0.1f, -0.2f, 0.3f, 0.5f, 0.0f, -1.0f}},
      {{8, 4}, {6, 5, 4}, {4}, {1.0f, 0.2f, -0.3f, 0.0f, 0.0f, 0.0f}},
  };
}

std::vector<const Example*> ptrs(const std::vector<Example>& v) {
  std::vector<const Example*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

struct SyntheticSet {
  corpus::Vocab src, tgt;
  std::vector<Example> data;
};

SyntheticSet synthetic_examples(std::size_t n, std::uint64_t seed) {
  corpus::SyntheticOptions o;
  o.num_sentences = n;
  o.seed = seed;
  const auto s = corpus::gen_synthetic_grounded(o);
  SyntheticSet out{corpus::build_vocab(s.source), corpus::build_vocab(s.target), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const float* f = s.features.sample(i);
    out.data.push_back({out.src.encode(s.source[i]), out.tgt.encode(s.target[i]), out.src.encode(s.source[i]),
                        std::vector<float>(f, f + o.regions * o.dim)});
  }
  return out;
}

bool same_params(const Params<float>& a, const Params<float>& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i)
    if (a.tensors[i].name != b.tensors[i].name || a.tensors[i].value != b.tensors[i].value) return false;
  return true;
}

}  // namespace

TEST_SUITE("seqmodel") {
  TEST_CASE("config validation") {
    CHECK_NOTHROW(tiny(true, true).validate());
    auto c = tiny(false, false);
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny(false, false);
    c.lambda = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny(false, false);
    c.dropout = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny(false, true);
    c.cor_vocab = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny(false, false);
    c.src_vocab = 4;
    CHECK_THROWS_AS(Model<float>(c, 1), ConfigError);
    CHECK(ModelConfig::from_json(tiny(true, true).to_json()).to_json() == tiny(true, true).to_json());
  }

  TEST_CASE("parameter groups follow the architecture") {
    const Model<float> nmt(tiny(false, false), 1), cor(tiny(true, true), 1);
    CHECK_FALSE(nmt.params().has("vis.proj.w"));
    CHECK_FALSE(nmt.params().has("cor.out.w"));
    CHECK(cor.params().has("vis.proj.w"));
    CHECK(cor.params()["cor.out.w"].group == Group::cor_decoder);
    CHECK(cor.params()["mt.out.w"].group == Group::mt_decoder);
    CHECK(cor.params()["enc.embed"].group == Group::encoder);
    CHECK(cor.params()["cor.out.w"].value.cols() == 7);
    CHECK(cor.params().count() > nmt.params().count());
  }

  TEST_CASE("uniform output gives (|target|+1) ln W") {
    Model<double> m(tiny(false, true), 3);
    m.params()["mt.out.w"].value.setZero();
    m.params()["mt.out.b"].value.setZero();
    m.params()["cor.out.w"].value.setZero();
    m.params()["cor.out.b"].value.setZero();
    const auto H = encode(m, {4, 5, 6});
    CHECK(H.rows() == 3);
    CHECK(H.cols() == 8);
    for (std::size_t len : {1, 2, 5}) {
      const std::vector<std::int32_t> t(len, 5);
      CHECK(forward_nll(m, H, nullptr, t, DecoderKind::mt) == doctest::Approx((len + 1) * std::log(8.0)));
      CHECK(forward_nll(m, H, nullptr, t, DecoderKind::cor) == doctest::Approx((len + 1) * std::log(7.0)));
    }
  }

  TEST_CASE("forward errors") {
    const Model<float> nmt(tiny(false, false), 1), mmt(tiny(true, false), 1);
    CHECK_THROWS_AS(encode(nmt, {}), DataError);
    const auto H = encode(nmt, {4});
    CHECK_THROWS_AS(forward_nll(nmt, H, nullptr, {4}, DecoderKind::cor), ConfigError);
    CHECK_THROWS_AS(forward_nll(mmt, encode(mmt, {4}), nullptr, {4}, DecoderKind::mt), DataError);
  }

  TEST_CASE("gradients match finite differences") {
    for (const auto& cfg : {tiny(false, false), tiny(true, true, 0.7)}) {
      const Model<double> m(cfg, 5);
      const auto data = tiny_batch();
      const auto batch = ptrs(data);
      const auto grads = backward(m, batch);
      Rng pick(17);
      std::size_t checked = 0;
      for (std::size_t ti = 0; ti < m.params().tensors.size(); ++ti) {
        const auto& t = m.params().tensors[ti];
        for (int k = 0; k < 3; ++k) {
          const Eigen::Index r = Eigen::Index(pick.below(std::size_t(t.value.rows())));
          const Eigen::Index c = Eigen::Index(pick.below(std::size_t(t.value.cols())));
          const double h = 1e-5;
          Model<double> plus = m, minus = m;
          plus.params().tensors[ti].value(r, c) += h;
          minus.params().tensors[ti].value(r, c) -= h;
          const double fd = (batch_loss(plus, batch, false, nullptr).loss -
                             batch_loss(minus, batch, false, nullptr).loss) / (2 * h);
          const double an = grads.tensors[ti].value(r, c);
          INFO(t.name, " (", r, ",", c, ")");
          CHECK(an == doctest::Approx(fd).epsilon(1e-5).scale(1e-3));
          ++checked;
        }
      }
      CHECK(checked > 30);
    }
  }

  TEST_CASE("joint loss is affine in lambda") {
    const auto data = tiny_batch();
    const auto batch = ptrs(data);
    std::map<double, BatchResult<double>> at;
    for (double lam : {0.0, 0.5, 1.0}) {
      auto cfg = tiny(true, true, lam);
      const Model<double> m(cfg, 9);
      at[lam] = batch_loss(m, batch, true, nullptr, true);
    }
    CHECK(at[0.5].loss == doctest::Approx((at[0.0].loss + at[1.0].loss) / 2).epsilon(1e-12));
    CHECK(at[1.0].loss == doctest::Approx(at[1.0].mt_loss + at[1.0].cor_loss).epsilon(1e-12));
    CHECK(joint_loss(2.0, 3.0, 0.5) == 3.5);

    const auto& g0 = at[0.0].grads;
    const auto& g1 = at[1.0].grads;
    for (std::size_t i = 0; i < g0.tensors.size(); ++i) {
      const auto group = g0.tensors[i].group;
      if (group == Group::cor_decoder) {
        CHECK(g0.tensors[i].value.isZero(0));
        CHECK_FALSE(g1.tensors[i].value.isZero(0));
      }
      if (group == Group::mt_decoder) CHECK(g0.tensors[i].value.isApprox(g1.tensors[i].value, 1e-12));
    }
  }

  TEST_CASE("token-mean losses per decoder") {
    const Model<double> m(tiny(false, true, 1.0), 2);
    const auto data = tiny_batch();
    const auto r = batch_loss(m, ptrs(data), false, nullptr);
    CHECK(r.mt_tokens == 3 + 4);
    CHECK(r.cor_tokens == 4 + 2);
    double mt = 0, cor = 0;
    for (const auto& e : data) {
      const auto H = encode(m, e.src);
      mt += forward_nll(m, H, nullptr, e.tgt, DecoderKind::mt);
      cor += forward_nll(m, H, nullptr, e.cor, DecoderKind::cor);
    }
    CHECK(r.mt_loss == doctest::Approx(mt / 7));
    CHECK(r.cor_loss == doctest::Approx(cor / 6));
  }

  TEST_CASE("noam schedule") {
    CHECK(noam_lr(8000, 512, 8000) == doctest::Approx(4.941e-4).epsilon(1e-3));
    CHECK(noam_lr(1, 512, 8000) == doctest::Approx(std::pow(512.0, -0.5) * std::pow(8000.0, -1.5)));
    for (long s = 1; s < 8000; s += 97) CHECK(noam_lr(s, 512, 8000) < noam_lr(s + 1, 512, 8000));
    for (long s = 8000; s < 40000; s += 977) CHECK(noam_lr(s, 512, 8000) > noam_lr(s + 1, 512, 8000));
    CHECK_THROWS_AS(noam_lr(0, 512, 8000), ConfigError);
  }

  TEST_CASE("adam first step moves by lr against the gradient sign") {
    Params<double> p;
    p.add("x", Group::encoder, Mat<double>::Constant(1, 3, 1.0));
    auto g = p.zeros_like();
    g.tensors[0].value << 2.0, -0.5, 0.0;
    Adam<double> adam(p);
    adam.step(p, g, 0.1);
    CHECK(p.tensors[0].value(0, 0) == doctest::Approx(0.9));
    CHECK(p.tensors[0].value(0, 1) == doctest::Approx(1.1));
    CHECK(p.tensors[0].value(0, 2) == 1.0);
    CHECK(adam.steps() == 1);
  }

  TEST_CASE("beam search matches exhaustive search") {
    // vocab: 0 pad, 1 bos, 2 eos, 3 a, 4 b; scores depend on the whole prefix
    auto logp_of = [](std::size_t item, const std::vector<std::int32_t>& prefix) {
      std::uint64_t h = derive_seed(item + 1, prefix.size());
      for (auto t : prefix) h = derive_seed(h, std::uint64_t(t));
      Rng r(h);
      double z[3];
      double sum = 0;
      for (double& v : z) sum += (v = 0.05 + r.uniform());
      Eigen::RowVectorXd out(5);
      out << -INFINITY, -INFINITY, std::log(z[0] / sum), std::log(z[1] / sum), std::log(z[2] / sum);
      return out;
    };
    const StepScorer scorer = [&](const std::vector<std::pair<std::size_t, std::vector<std::int32_t>>>& reqs) {
      Mat<double> m(Eigen::Index(reqs.size()), 5);
      for (std::size_t i = 0; i < reqs.size(); ++i) m.row(Eigen::Index(i)) = logp_of(reqs[i].first, reqs[i].second);
      return m;
    };
    const std::size_t max_len = 4, items = 6;

    for (std::size_t item = 0; item < items; ++item) {
      double best = -INFINITY;
      std::vector<std::int32_t> best_seq;
      std::function<void(std::vector<std::int32_t>, double)> walk = [&](std::vector<std::int32_t> pre, double lp) {
        const auto row = logp_of(item, pre);
        for (std::int32_t w = 2; w < 5; ++w) {
          auto seq = pre;
          seq.push_back(w);
          const double s = lp + row(w);
          if (w == 2) {
            if (s / double(seq.size()) > best) best = s / double(seq.size()), best_seq = seq;
          } else if (seq.size() < max_len) {
            walk(seq, s);
          }
        }
      };
      walk({}, 0.0);
      const auto wide = beam_search(scorer, items, 1000, max_len, 2);
      CHECK(wide[item].tokens == best_seq);
      CHECK(wide[item].finished);
      CHECK(wide[item].score() == doctest::Approx(best));

      // beam 1 is greedy
      std::vector<std::int32_t> greedy;
      double glp = 0;
      while (greedy.size() < max_len) {
        const auto row = logp_of(item, greedy);
        Eigen::Index arg;
        glp += row.maxCoeff(&arg);
        greedy.push_back(std::int32_t(arg));
        if (arg == 2) break;
      }
      const auto narrow = beam_search(scorer, items, 1, max_len, 2);
      CHECK(narrow[item].tokens == greedy);
      CHECK(narrow[item].logprob == doctest::Approx(glp));
    }
    CHECK_THROWS_AS(beam_search(scorer, 1, 0, 4, 2), ConfigError);
    CHECK_THROWS_AS(beam_search(scorer, 1, 2, 0, 2), ConfigError);
  }

  TEST_CASE("attention maps are distributions with the expected shapes") {
    const Model<double> m(tiny(true, true), 4);
    const auto data = tiny_batch();
    const auto maps = attention_dump(m, data[0], DecoderKind::mt);
    REQUIRE(maps.text.size() == 1);
    REQUIRE(maps.text[0].size() == 2);
    REQUIRE(maps.visual.size() == 1);
    for (const auto& a : maps.text[0]) {
      CHECK(a.rows() == 3);
      CHECK(a.cols() == 3);
      for (Eigen::Index r = 0; r < a.rows(); ++r) CHECK(a.row(r).sum() == doctest::Approx(1.0));
      CHECK(a.minCoeff() >= 0.0);
    }
    for (const auto& a : maps.visual[0]) {
      CHECK(a.rows() == 3);
      CHECK(a.cols() == 2);
      for (Eigen::Index r = 0; r < a.rows(); ++r) CHECK(a.row(r).sum() == doctest::Approx(1.0));
    }
    const auto cor = attention_dump(m, data[0], DecoderKind::cor);
    CHECK(cor.text[0][0].rows() == 4);
    CHECK_THROWS_AS(attention_dump(Model<double>(tiny(false, false), 1), data[0], DecoderKind::cor), ConfigError);
  }

  TEST_CASE("visual input and word order both matter") {
    const Model<double> m(tiny(true, false), 6);
    const auto data = tiny_batch();
    const auto H = encode(m, data[0].src);
    auto other = data[0].features;
    other[0] += 1.0f;
    CHECK(forward_nll(m, H, &data[0].features, data[0].tgt, DecoderKind::mt) !=
          doctest::Approx(forward_nll(m, H, &other, data[0].tgt, DecoderKind::mt)));
    const auto ab = encode(m, {4, 5}), ba = encode(m, {5, 4});
    CHECK_FALSE(ab.row(0).isApprox(ba.row(1), 1e-6));
  }

  TEST_CASE("checkpoint round trip") {
    const Model<float> m(tiny(true, true), 8);
    const auto bytes = encode_checkpoint(m);
    CHECK(bytes.substr(0, 4) == "NTCK");
    const auto back = decode_checkpoint(bytes);
    CHECK(back.config().to_json() == m.config().to_json());
    CHECK(same_params(back.params(), m.params()));
    CHECK(encode_checkpoint(back) == bytes);

    const auto dir = test::scratch_dir("ckpt");
    save_checkpoint((dir / "m.ckpt").string(), m);
    CHECK(same_params(load_checkpoint((dir / "m.ckpt").string()).params(), m.params()));

    CHECK_THROWS_AS(decode_checkpoint("XTCK" + bytes.substr(4)), DataError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
    auto wrong_version = bytes;
    wrong_version[4] = 9;
    CHECK_THROWS_AS(decode_checkpoint(wrong_version), DataError);
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), DataError);

    const auto d = convert<float, double>(m);
    CHECK(convert<double, float>(d).params().tensors[3].value == m.params().tensors[3].value);
  }

  TEST_CASE("decoding and evaluation are deterministic") {
    const auto set = synthetic_examples(40, 2);
    auto cfg = tiny(true, true);
    cfg.src_vocab = set.src.size();
    cfg.cor_vocab = set.src.size();
    cfg.tgt_vocab = set.tgt.size();
    cfg.regions = 4;
    cfg.d_feat = 16;
    const Model<float> m(cfg, 3);
    const auto items = ptrs(set.data);
    const auto one = decode(m, items, DecoderKind::mt, 3, 12, 1);
    CHECK(decode(m, items, DecoderKind::mt, 3, 12, 4) == one);
    CHECK(decode(m, items, DecoderKind::mt, 3, 12, 1) == one);
    for (const auto& h : one) CHECK(h.size() <= 12);
    const auto r1 = batch_loss(m, items, false, nullptr), r2 = batch_loss(m, items, false, nullptr);
    CHECK(r1.loss == r2.loss);
  }

  TEST_CASE("training is deterministic and fits 32 triples") {
    const auto set = synthetic_examples(32, 4);
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 32;
    cfg.d_ff = 64;
    cfg.heads = 4;
    cfg.dropout = 0.0;
    cfg.visual = true;
    cfg.correction = true;
    cfg.lambda = 0.5;
    cfg.warmup = 100;
    cfg.batch_size = 16;
    cfg.lr_scale = 2.0;
    cfg.src_vocab = set.src.size();
    cfg.cor_vocab = set.src.size();
    cfg.tgt_vocab = set.tgt.size();

    TrainOptions opts;
    opts.steps = 600;
    opts.eval_every = 25;
    opts.seed = 12;
    opts.stop_at_train_accuracy = 1.0;
    Model<float> a(cfg, 1);
    const auto res = train(a, set.data, opts);
    const auto [acc_mt, acc_cor] = teacher_forced_accuracy(a, set.data);
    CHECK(acc_mt == 1.0);
    CHECK(acc_cor == 1.0);
    CHECK(res.final_loss < res.initial_loss);

    opts.steps = 20;
    opts.stop_at_train_accuracy = 0;
    Model<float> b(cfg, 1), c(cfg, 1);
    const auto rb = train(b, set.data, opts), rc = train(c, set.data, opts);
    CHECK(same_params(b.params(), c.params()));
    CHECK(rb.final_loss == rc.final_loss);
    CHECK(rb.history.size() == 1);
    CHECK(rb.best_step == 20);

    CHECK_THROWS_AS(train(b, {}, opts), DataError);
    opts.steps = 0;
    CHECK_THROWS_AS(train(b, set.data, opts), ConfigError);
  }

  TEST_CASE("divergence is reported") {
    auto cfg = tiny(false, false);
    Model<float> m(cfg, 1);
    m.params()["enc.embed"].value(4, 0) = std::numeric_limits<float>::quiet_NaN();
    TrainOptions opts;
    opts.steps = 3;
    const auto data = tiny_batch();
    CHECK_THROWS_AS(train(m, data, opts), DivergenceError);
  }
}
