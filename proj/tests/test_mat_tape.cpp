#include <cmath>

#include "capt/tape.hpp"
#include "doctest.h"
#include "testing_support.hpp"

using namespace capt;
using namespace capt::testing;

namespace {

// Checks every input coordinate of a tape-built scalar against central
// finite differences.
void check_gradients(const std::function<Val(Tape&, std::vector<Val>&)>& build,
                     std::vector<Mat> inputs, double tol = 1e-6, double step = 1e-5) {
    auto eval = [&]() {
        Tape t;
        std::vector<Val> leafs;
        for (const Mat& m : inputs) leafs.push_back(t.leaf(m));
        return t.value(build(t, leafs)).at(0, 0);
    };

    Tape t;
    std::vector<Val> leafs;
    for (const Mat& m : inputs) leafs.push_back(t.leaf(m));
    Val root = build(t, leafs);
    t.backward(root);

    for (size_t i = 0; i < inputs.size(); ++i) {
        const Mat& g = t.grad(leafs[i]);
        for (int r = 0; r < inputs[i].rows; ++r)
            for (int c = 0; c < inputs[i].cols; ++c) {
                const double numeric = fd_derivative(eval, inputs[i], r, c, step);
                INFO("input ", i, " coord (", r, ",", c, "): analytic ", g.at(r, c), " numeric ",
                     numeric);
                CHECK(rel_diff(g.at(r, c), numeric) < tol);
            }
    }
}

Val quadratic_readout(Tape& t, Val m, uint64_t seed) {
    // Smooth scalar readout touching every entry of m.
    const Mat w = random_mat(t.value(m).rows, t.value(m).cols, seed, 0.7);
    return t.sum_abs_pow(t.add(m, t.leaf(w)), 2);
}

}  // namespace

TEST_CASE("mat primitives") {
    Mat a(2, 3, {1, 2, 3, 4, 5, 6});
    Mat b(3, 2, {1, 0, 0, 1, 1, 1});
    Mat ab = matmul(a, b);
    CHECK(ab.rows == 2);
    CHECK(ab.cols == 2);
    CHECK(ab.at(0, 0) == doctest::Approx(1 + 3));
    CHECK(ab.at(1, 1) == doctest::Approx(5 + 6));

    Mat at = transpose(a);
    CHECK(at.at(2, 1) == 6);

    CHECK(matmul_nt(a, transpose(b)).at(0, 1) == doctest::Approx(ab.at(0, 1)));
    CHECK_THROWS_AS(matmul(a, a), InputError);

    Mat s = slice_rows(a, 1, 1);
    CHECK(s.rows == 1);
    CHECK(s.at(0, 2) == 6);

    CHECK(dot(Mat(1, 2, {3, 4}), Mat(1, 2, {3, 4})) == doctest::Approx(25.0));
    CHECK(l2_norm(Mat(1, 2, {3, 4})) == doctest::Approx(5.0));
}

TEST_CASE("rng determinism and digest sensitivity") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const double x = a.normal();
        CHECK(x == b.normal());
    }
    CHECK(a.uniform() != c.uniform());

    Digest d1, d2;
    Mat m = random_mat(3, 3, 1);
    d1.update(m);
    d2.update(m);
    CHECK(d1.value() == d2.value());
    m.data[4] += 1e-12;
    Digest d3;
    d3.update(m);
    CHECK(d3.value() != d1.value());
}

TEST_CASE("tape gradients: arithmetic ops") {
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.add(in[0], in[1]), 1);
        },
        {random_mat(2, 3, 10), random_mat(2, 3, 11)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.sub(in[0], in[1]), 2);
        },
        {random_mat(2, 3, 12), random_mat(2, 3, 13)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.scale(in[0], -1.7), 3);
        },
        {random_mat(2, 3, 14)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.hadamard(in[0], in[1]), 4);
        },
        {random_mat(2, 3, 15), random_mat(2, 3, 16)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.matmul(in[0], in[1]), 5);
        },
        {random_mat(2, 3, 17), random_mat(3, 4, 18)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.matmul_nt(in[0], in[1]), 6);
        },
        {random_mat(2, 3, 19), random_mat(4, 3, 20)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.add_rowvec(in[0], in[1]), 7);
        },
        {random_mat(3, 4, 21), random_mat(1, 4, 22)});
}

TEST_CASE("tape gradients: nonlinearities") {
    // Inputs shifted away from the ReLU kink.
    Mat relu_in = random_mat(2, 4, 30);
    for (double& v : relu_in.data) v += (v >= 0 ? 0.5 : -0.5);
    check_gradients(
        [](Tape& t, std::vector<Val>& in) { return quadratic_readout(t, t.relu(in[0]), 8); },
        {relu_in});

    check_gradients(
        [](Tape& t, std::vector<Val>& in) { return quadratic_readout(t, t.gelu_quick(in[0]), 9); },
        {random_mat(2, 4, 31)});

    check_gradients(
        [](Tape& t, std::vector<Val>& in) { return quadratic_readout(t, t.softmax_rows(in[0]), 10); },
        {random_mat(3, 4, 32)});

    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.layernorm_rows(in[0], in[1], in[2]), 11);
        },
        {random_mat(3, 5, 33), random_mat(1, 5, 34), random_mat(1, 5, 35)});

    Mat log_in = random_mat(2, 3, 36);
    for (double& v : log_in.data) v = std::fabs(v) + 0.5;
    check_gradients(
        [](Tape& t, std::vector<Val>& in) { return quadratic_readout(t, t.log(in[0]), 12); },
        {log_in});
}

TEST_CASE("tape gradients: structural ops") {
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.concat_rows({in[0], in[1]}), 13);
        },
        {random_mat(2, 3, 40), random_mat(1, 3, 41)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.slice_rows(in[0], 1, 2), 14);
        },
        {random_mat(4, 3, 42)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.concat_cols({in[0], in[1]}), 15);
        },
        {random_mat(2, 2, 43), random_mat(2, 3, 44)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.slice_cols(in[0], 1, 3), 16);
        },
        {random_mat(2, 5, 45)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            return quadratic_readout(t, t.broadcast_row(in[0], 4), 17);
        },
        {random_mat(1, 3, 46)});
    check_gradients(
        [](Tape& t, std::vector<Val>& in) {
            Val a = t.pick(in[0], 0, 1);
            Val b = t.pick(in[0], 1, 2);
            return quadratic_readout(t, t.stack_scalars({a, b}), 18);
        },
        {random_mat(2, 3, 47)});
}

TEST_CASE("tape gradients: norms and cosine") {
    Mat odd = random_mat(2, 3, 50);
    for (double& v : odd.data) v += (v >= 0 ? 0.3 : -0.3);  // keep |x| differentiable
    check_gradients([](Tape& t, std::vector<Val>& in) { return t.sum_abs_pow(in[0], 1); }, {odd});
    check_gradients([](Tape& t, std::vector<Val>& in) { return t.sum_abs_pow(in[0], 2); },
                    {random_mat(2, 3, 51)});
    check_gradients([](Tape& t, std::vector<Val>& in) { return t.cosine(in[0], in[1]); },
                    {random_mat(1, 5, 52), random_mat(1, 5, 53)});
    CHECK_THROWS_AS(
        []() {
            Tape t;
            t.sum_abs_pow(t.leaf(Mat(1, 1, 1.0)), 3);
        }(),
        ConfigError);
}

TEST_CASE("tape values: softmax and cosine basics") {
    Tape t;
    Val sm = t.softmax_rows(t.leaf(Mat(1, 3, {1.0, 2.0, 3.0})));
    const Mat& v = t.value(sm);
    CHECK(v.at(0, 0) + v.at(0, 1) + v.at(0, 2) == doctest::Approx(1.0));
    CHECK(v.at(0, 2) > v.at(0, 1));

    Val one = t.cosine(t.leaf(Mat(1, 2, {2, 0})), t.leaf(Mat(1, 2, {5, 0})));
    CHECK(t.value(one).at(0, 0) == doctest::Approx(1.0));
    Val zero = t.cosine(t.leaf(Mat(1, 2, {1, 0})), t.leaf(Mat(1, 2, {0, 3})));
    CHECK(t.value(zero).at(0, 0) == doctest::Approx(0.0));
    CHECK_THROWS_AS(t.cosine(t.leaf(Mat(1, 2)), t.leaf(Mat(1, 2, {1, 1}))), InputError);
}
