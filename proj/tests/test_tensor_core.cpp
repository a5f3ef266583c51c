#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "oudefend/autodiff.hpp"

namespace oudefend {
namespace {

TEST(BuildTensor, RowMajorLayout) {
  auto t = build_tensor({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(t.at({1, 0}), 3.0);
  EXPECT_FALSE(t.grad().has_value());
  auto s = build_tensor({1}, {5.0});
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s.item(), 5.0);
}

TEST(BuildTensor, LengthMismatch) {
  EXPECT_THROW(build_tensor({2, 3}, {1, 2, 3, 4, 5}), ShapeError);
}

TEST(Elementwise, Examples) {
  Tape tape;
  auto xv = build_tensor({3}, {0.25, -1.5, 2.0});
  auto x = tape.constant(xv);
  auto z = tape.constant(zeros_like(xv));
  EXPECT_EQ(add(x, z).value(), xv);

  auto a = tape.constant(build_tensor({2}, {1, 2}));
  EXPECT_EQ(scalar_add(a, 1.0).value().storage(), (std::vector<double>{2, 3}));

  auto c = tape.constant(build_tensor({3}, {-0.5, 0.5, 1.5}));
  EXPECT_EQ(clip(c, 0.0, 1.0).value().storage(), (std::vector<double>{0, 0.5, 1}));
}

TEST(Elementwise, ShapeMismatch) {
  Tape tape;
  auto a = tape.constant(Tensor::zeros({2, 3}));
  auto b = tape.constant(Tensor::zeros({3, 2}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
}

TEST(Elementwise, ClipGradientStrictInterior) {
  Tensor x = build_tensor({4}, {0.0, 0.5, 1.0, 2.0}, true);
  Tape tape;
  auto y = clip(tape.leaf(x), 0.0, 1.0);
  tape.backward(sum(y));
  EXPECT_EQ(*x.grad(), (std::vector<double>{0, 1, 0, 0}));
}

TEST(Matmul, Examples) {
  Tape tape;
  auto id = tape.constant(build_tensor({2, 2}, {1, 0, 0, 1}));
  auto m = build_tensor({2, 2}, {0.3, -2, 7, 1.25});
  EXPECT_EQ(matmul(id, tape.constant(m)).value(), m);

  auto a = tape.constant(build_tensor({2, 2}, {1, 2, 3, 4}));
  auto b = tape.constant(build_tensor({2, 1}, {5, 6}));
  auto p = matmul(a, b).value();
  EXPECT_EQ(p.shape(), (Shape{2, 1}));
  EXPECT_EQ(p.storage(), (std::vector<double>{17, 39}));

  auto bad = tape.constant(Tensor::zeros({2, 3}));
  EXPECT_THROW(matmul(bad, bad), ShapeError);
}

TEST(Reduce, Examples) {
  Tape tape;
  EXPECT_EQ(sum(tape.constant(Tensor::full({2, 3}, 1.0))).value().item(), 6.0);
  EXPECT_EQ(mean(tape.constant(build_tensor({2}, {2, 4}))).value().item(), 3.0);

  Tensor x = build_tensor({3}, {1, 3, 3}, true);
  Tape t2;
  auto m = max(t2.leaf(x));
  EXPECT_EQ(m.value().item(), 3.0);
  t2.backward(m);
  EXPECT_EQ(*x.grad(), (std::vector<double>{0, 1, 0}));
}

TEST(Reduce, AxesAndErrors) {
  Tape tape;
  auto x = tape.constant(build_tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto rows = sum(x, {1});
  EXPECT_EQ(rows.shape(), (Shape{2}));
  EXPECT_EQ(rows.value().storage(), (std::vector<double>{6, 15}));
  auto cols = max(x, {0});
  EXPECT_EQ(cols.value().storage(), (std::vector<double>{4, 5, 6}));
  EXPECT_THROW(sum(x, {2}), AxisError);
  EXPECT_THROW(sum(x, {0, 0}), AxisError);
}

TEST(Backward, Examples) {
  Tensor x = build_tensor({1}, {3.0}, true);
  {
    Tape tape;
    auto v = tape.leaf(x);
    tape.backward(mul(v, v));
    EXPECT_EQ((*x.grad())[0], 6.0);
  }
  Tensor y = build_tensor({2, 2}, {1, -1, 0.5, 2}, true);
  {
    Tape tape;
    auto v = tape.leaf(y);
    tape.backward(sum(add(v, v)));
    EXPECT_EQ(*y.grad(), (std::vector<double>(4, 2.0)));
  }
}

TEST(Backward, NonScalarLoss) {
  Tensor x = build_tensor({2}, {1, 2}, true);
  Tape tape;
  auto v = tape.leaf(x);
  EXPECT_THROW(tape.backward(v * v), ShapeError);
}

TEST(Backward, SingleShot) {
  Tensor x = build_tensor({2}, {1, 2}, true);
  Tape tape;
  auto loss = sum(tape.leaf(x));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), TapeConsumedError);
}

TEST(Backward, UnreachedLeafGetsZeroGradient) {
  Tensor x = build_tensor({2}, {1, 2}, true);
  Tensor y = build_tensor({2}, {3, 4}, true);
  Tape tape;
  tape.leaf(y);
  tape.backward(sum(tape.leaf(x)));
  EXPECT_EQ(*y.grad(), (std::vector<double>{0, 0}));
}

TEST(FiniteDifference, Examples) {
  auto square = [](const Tensor& t) { return t[0] * t[0]; };
  auto g = finite_difference_gradient(square, build_tensor({1}, {3.0}), 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-6);

  auto total = [](const Tensor& t) {
    double s = 0;
    for (double v : t.data()) s += v;
    return s;
  };
  auto ones = finite_difference_gradient(total, build_tensor({5}, {0.1, -3, 2, 0.8, 1.0}), 1e-5);
  for (double v : ones.data()) EXPECT_NEAR(v, 1.0, 1e-9);
  EXPECT_THROW(finite_difference_gradient(total, Tensor::zeros({1}), 0.0), ConfigError);
}

// Random composite graphs over two leaves A (r x c) and B (c x q). Each plan
// is replayed on fresh tapes for the finite-difference oracle.
struct CompositePlan {
  std::size_t r, c, q;
  std::vector<int> ops;
  std::vector<double> consts;
  int reduce_kind;
  std::size_t reduce_axis;
};

CompositePlan make_plan(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  CompositePlan p;
  do {
    p.r = dim(rng);
    p.c = dim(rng);
    p.q = dim(rng);
  } while (p.r * p.c > 64 || p.c * p.q > 64);
  std::uniform_int_distribution<int> op(0, 6), len(1, 6), rk(0, 2);
  std::uniform_real_distribution<double> cst(-1.5, 1.5);
  const int n = len(rng);
  for (int i = 0; i < n; ++i) {
    p.ops.push_back(op(rng));
    p.consts.push_back(cst(rng));
  }
  p.reduce_kind = rk(rng);
  p.reduce_axis = std::uniform_int_distribution<std::size_t>(0, 1)(rng);
  return p;
}

// Returns false when a clip bound or a max tie is within `margin` of an
// operand, where central differences would straddle a kink.
bool run_plan(const CompositePlan& p, Tensor& a, Tensor& b, Tape& tape, Var& loss,
              double margin = 1e-3) {
  bool ok = true;
  auto A = tape.leaf(a);
  auto B = tape.leaf(b);
  Var cur = A;
  for (std::size_t i = 0; i < p.ops.size(); ++i) {
    const double k = p.consts[i];
    switch (p.ops[i]) {
      case 0: cur = add(cur, A); break;
      case 1: cur = sub(cur, A); break;
      case 2: cur = mul(cur, A); break;
      case 3: cur = scalar_add(cur, k); break;
      case 4: cur = scalar_mul(cur, k); break;
      case 5: cur = neg(cur); break;
      case 6: {
        const double lo = -std::abs(k), hi = std::abs(k) + 0.5;
        for (double v : cur.value().data()) {
          if (std::abs(v - lo) < margin || std::abs(v - hi) < margin) ok = false;
        }
        cur = clip(cur, lo, hi);
        break;
      }
    }
  }
  auto prod = matmul(reshape(cur, {p.r, p.c}), B);
  Var red;
  if (p.reduce_kind == 2) {
    // Reject near-ties along the reduced axis.
    const Tensor& v = prod.value();
    const std::size_t rows = v.dim(0), cols = v.dim(1);
    const std::size_t outer = p.reduce_axis == 0 ? cols : rows;
    const std::size_t inner = p.reduce_axis == 0 ? rows : cols;
    for (std::size_t o = 0; o < outer; ++o) {
      std::vector<double> vals;
      for (std::size_t i = 0; i < inner; ++i) {
        vals.push_back(p.reduce_axis == 0 ? v.at({i, o}) : v.at({o, i}));
      }
      std::sort(vals.rbegin(), vals.rend());
      if (vals.size() > 1 && vals[0] - vals[1] < margin) ok = false;
    }
    red = max(prod, {p.reduce_axis});
  } else {
    red = reduce(p.reduce_kind == 0 ? ReduceKind::sum : ReduceKind::mean, prod, {p.reduce_axis});
  }
  loss = sum(mul(red, red));
  return ok;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool grad) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v), grad);
}

TEST(Backward, RandomCompositeGraphsMatchFiniteDifferences) {
  std::mt19937_64 rng(20201);
  int checked = 0;
  while (checked < 120) {
    auto plan = make_plan(rng);
    Tensor a = random_tensor({plan.r * plan.c}, rng, true);
    Tensor b = random_tensor({plan.c, plan.q}, rng, true);
    Var loss;
    Tape tape;
    if (!run_plan(plan, a, b, tape, loss)) continue;
    tape.backward(loss);

    auto eval_a = [&](const Tensor& probe) {
      Tensor pa = probe, pb = b;
      Tape t;
      Var l;
      run_plan(plan, pa, pb, t, l);
      return l.value().item();
    };
    auto eval_b = [&](const Tensor& probe) {
      Tensor pa = a, pb = probe;
      Tape t;
      Var l;
      run_plan(plan, pa, pb, t, l);
      return l.value().item();
    };
    auto fa = finite_difference_gradient(eval_a, a, 1e-5);
    auto fb = finite_difference_gradient(eval_b, b, 1e-5);
    // Some plans cancel to a constant; the floor keeps FD rounding noise on
    // an exactly-zero gradient from reading as a relative error of 1.
    EXPECT_LT(relative_error(*a.grad(), fa.data(), 1e-3), 1e-5) << "trial " << checked;
    EXPECT_LT(relative_error(*b.grad(), fb.data(), 1e-3), 1e-5) << "trial " << checked;
    ++checked;
  }
}

TEST(Backward, Deterministic) {
  std::mt19937_64 rng(7);
  auto plan = make_plan(rng);
  Tensor a0 = random_tensor({plan.r * plan.c}, rng, true);
  Tensor b0 = random_tensor({plan.c, plan.q}, rng, true);
  Tensor a1 = a0, b1 = b0;
  Tape t0, t1;
  Var l0, l1;
  run_plan(plan, a0, b0, t0, l0);
  run_plan(plan, a1, b1, t1, l1);
  t0.backward(l0);
  t1.backward(l1);
  EXPECT_EQ(l0.value(), l1.value());
  EXPECT_EQ(*a0.grad(), *a1.grad());
  EXPECT_EQ(*b0.grad(), *b1.grad());
}

}  // namespace
}  // namespace oudefend
