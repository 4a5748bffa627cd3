#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "collectivekv/attention.hpp"
#include "collectivekv/rng.hpp"

using namespace ckv;

namespace {

// Scalar-loop oracle: explicit softmax then weighted sum.
Matrix oracle_target_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
    const std::size_t n = k.rows(), d = k.cols();
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += q(0, c) * k(i, c);
        scores[i] = acc / std::sqrt(static_cast<double>(d));
    }
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double z = 0.0;
    for (double s : scores) z += std::exp(s - mx);
    Matrix out(1, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double w = std::exp(scores[i] - mx) / z;
        for (std::size_t c = 0; c < d; ++c) out(0, c) += w * v(i, c);
    }
    return out;
}

Matrix oracle_masked_self_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                    bool causal) {
    const std::size_t s = q.rows(), d = q.cols();
    Matrix out(s, d);
    for (std::size_t i = 0; i < s; ++i) {
        const std::size_t limit = causal ? i + 1 : s;
        std::vector<double> scores(limit);
        for (std::size_t j = 0; j < limit; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += q(i, c) * k(j, c);
            scores[j] = acc / std::sqrt(static_cast<double>(d));
        }
        double mx = scores[0];
        for (double x : scores) mx = std::max(mx, x);
        double z = 0.0;
        for (double x : scores) z += std::exp(x - mx);
        for (std::size_t j = 0; j < limit; ++j) {
            const double w = std::exp(scores[j] - mx) / z;
            for (std::size_t c = 0; c < d; ++c) out(i, c) += w * v(j, c);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("single-row sequence returns V[0] exactly") {
    Rng rng(41);
    Matrix q = rng.uniform_matrix(1, 4, -1.0, 1.0);
    Matrix k = rng.uniform_matrix(1, 4, -1.0, 1.0);
    Matrix v = rng.uniform_matrix(1, 4, -1.0, 1.0);
    CHECK(max_abs_diff(target_attention(q, k, v), v) == 0.0);
}

TEST_CASE("identical keys average the values uniformly") {
    Rng rng(42);
    Matrix q = rng.uniform_matrix(1, 3, -1.0, 1.0);
    Matrix krow = rng.uniform_matrix(1, 3, -1.0, 1.0);
    Matrix k(5, 3), v = rng.uniform_matrix(5, 3, -1.0, 1.0);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < 3; ++c) k(i, c) = krow(0, c);
    const Matrix out = target_attention(q, k, v);
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 5; ++i) mean += v(i, c);
        mean /= 5.0;
        CHECK(out(0, c) == Catch::Approx(mean).margin(1e-12));
    }
}

TEST_CASE("target attention matches the scalar oracle") {
    Rng rng(43);
    Matrix q = rng.uniform_matrix(1, 6, -1.0, 1.0);
    Matrix k = rng.uniform_matrix(3, 6, -1.0, 1.0);
    Matrix v = rng.uniform_matrix(3, 6, -1.0, 1.0);
    CHECK(max_abs_diff(target_attention(q, k, v), oracle_target_attention(q, k, v)) <= 1e-12);
}

TEST_CASE("attention outputs are convex combinations of value rows") {
    Rng rng(44);
    Matrix q = rng.uniform_matrix(1, 5, -2.0, 2.0);
    Matrix k = rng.uniform_matrix(9, 5, -2.0, 2.0);
    Matrix v = rng.uniform_matrix(9, 5, -2.0, 2.0);
    std::vector<double> weights;
    target_attention(q, k, v, &weights);
    double sum = 0.0;
    for (double w : weights) {
        CHECK(w >= 0.0);
        sum += w;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);

    Matrix sq = rng.uniform_matrix(6, 5, -2.0, 2.0);
    Matrix sk = rng.uniform_matrix(6, 5, -2.0, 2.0);
    Matrix sv = rng.uniform_matrix(6, 5, -2.0, 2.0);
    Matrix w;
    self_attention(sq, sk, sv, true, &w);
    for (std::size_t i = 0; i < 6; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
            CHECK(w(i, j) >= 0.0);
            if (j > i) CHECK(w(i, j) == 0.0);
            row_sum += w(i, j);
        }
        CHECK(std::abs(row_sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("causal first row sees only V[0]; zero values give zero output") {
    Rng rng(45);
    Matrix q = rng.uniform_matrix(4, 3, -1.0, 1.0);
    Matrix k = rng.uniform_matrix(4, 3, -1.0, 1.0);
    Matrix v = rng.uniform_matrix(4, 3, -1.0, 1.0);
    const Matrix out = self_attention(q, k, v, true);
    for (std::size_t c = 0; c < 3; ++c) CHECK(out(0, c) == v(0, c));

    const Matrix zero_out = self_attention(q, k, Matrix(4, 3), true);
    CHECK(max_abs(zero_out) == 0.0);
}

TEST_CASE("self attention matches the masked oracle") {
    Rng rng(46);
    Matrix q = rng.uniform_matrix(4, 5, -1.0, 1.0);
    Matrix k = rng.uniform_matrix(4, 5, -1.0, 1.0);
    Matrix v = rng.uniform_matrix(4, 5, -1.0, 1.0);
    CHECK(max_abs_diff(self_attention(q, k, v, true),
                       oracle_masked_self_attention(q, k, v, true)) <= 1e-12);
    CHECK(max_abs_diff(self_attention(q, k, v, false),
                       oracle_masked_self_attention(q, k, v, false)) <= 1e-12);
}

TEST_CASE("causality: perturbing a later item never changes an earlier row") {
    Rng rng(47);
    Matrix q = rng.uniform_matrix(6, 4, -1.0, 1.0);
    Matrix k = rng.uniform_matrix(6, 4, -1.0, 1.0);
    Matrix v = rng.uniform_matrix(6, 4, -1.0, 1.0);
    const Matrix base = self_attention(q, k, v, true);
    for (std::size_t j = 1; j < 6; ++j) {
        Matrix k2 = k, v2 = v;
        for (std::size_t c = 0; c < 4; ++c) {
            k2(j, c) += 10.0;
            v2(j, c) -= 3.0;
        }
        const Matrix out = self_attention(q, k2, v2, true);
        for (std::size_t i = 0; i < j; ++i)
            for (std::size_t c = 0; c < 4; ++c) CHECK(out(i, c) == base(i, c));
    }
}

TEST_CASE("attention backward matches finite differences") {
    Rng rng(48);
    const std::size_t n = 4, d = 3;
    Matrix q = rng.uniform_matrix(1, d, -1.0, 1.0);
    Matrix k = rng.uniform_matrix(n, d, -1.0, 1.0);
    Matrix v = rng.uniform_matrix(n, d, -1.0, 1.0);
    Matrix upstream = rng.uniform_matrix(1, d, -1.0, 1.0);

    std::vector<double> weights;
    target_attention(q, k, v, &weights);
    Matrix d_q(1, d), d_k(n, d), d_v(n, d);
    target_attention_backward(q, k, v, weights, upstream, d_q, d_k, d_v);

    const double h = 1e-6;
    for (Matrix* m : {&q, &k, &v}) {
        Matrix* grad = m == &q ? &d_q : (m == &k ? &d_k : &d_v);
        for (std::size_t i = 0; i < m->size(); ++i) {
            const double saved = m->data()[i];
            m->data()[i] = saved + h;
            const double up = dot(upstream, target_attention(q, k, v));
            m->data()[i] = saved - h;
            const double down = dot(upstream, target_attention(q, k, v));
            m->data()[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            CHECK(grad->data()[i] == Catch::Approx(numeric).margin(1e-5));
        }
    }
}
