#include "capt/tape.hpp"

#include <cmath>
#include <cstring>

namespace capt {

Val Tape::push(Mat value, std::function<void()> back) {
    Node n;
    n.grad = Mat(value.rows, value.cols);
    n.value = std::move(value);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Val{static_cast<int>(nodes_.size()) - 1};
}

Val Tape::leaf(Mat value) { return push(std::move(value), {}); }

void Tape::backward(Val root) {
    if (!root.valid()) throw InputError("backward: invalid root");
    Node& r = nodes_[root.i];
    if (r.value.rows != 1 || r.value.cols != 1) throw InputError("backward: root must be scalar");
    r.grad.at(0, 0) = 1.0;
    for (int i = root.i; i >= 0; --i) {
        if (nodes_[i].back) nodes_[i].back();
    }
}

Val Tape::add(Val a, Val b) {
    Mat v = capt::add(value(a), value(b));
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, b, out]() {
        const Mat& g = grad(out);
        grad_mut(a) = capt::add(grad(a), g);
        grad_mut(b) = capt::add(grad(b), g);
    });
}

Val Tape::sub(Val a, Val b) {
    Mat v = capt::sub(value(a), value(b));
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, b, out]() {
        const Mat& g = grad(out);
        grad_mut(a) = capt::add(grad(a), g);
        grad_mut(b) = capt::sub(grad(b), g);
    });
}

Val Tape::scale(Val a, double s) {
    Mat v = capt::scale(value(a), s);
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, s, out]() {
        grad_mut(a) = capt::add(grad(a), capt::scale(grad(out), s));
    });
}

Val Tape::hadamard(Val a, Val b) {
    Mat v = capt::hadamard(value(a), value(b));
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, b, out]() {
        const Mat& g = grad(out);
        grad_mut(a) = capt::add(grad(a), capt::hadamard(g, value(b)));
        grad_mut(b) = capt::add(grad(b), capt::hadamard(g, value(a)));
    });
}

Val Tape::matmul(Val a, Val b) {
    Mat v = capt::matmul(value(a), value(b));
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, b, out]() {
        const Mat& g = grad(out);
        grad_mut(a) = capt::add(grad(a), capt::matmul_nt(g, value(b)));
        grad_mut(b) = capt::add(grad(b), capt::matmul_tn(value(a), g));
    });
}

Val Tape::matmul_nt(Val a, Val b) {
    Mat v = capt::matmul_nt(value(a), value(b));
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, b, out]() {
        const Mat& g = grad(out);
        grad_mut(a) = capt::add(grad(a), capt::matmul(g, value(b)));
        grad_mut(b) = capt::add(grad(b), capt::matmul_tn(g, value(a)));
    });
}

Val Tape::add_rowvec(Val a, Val row) {
    Mat v = capt::add_rowvec(value(a), value(row));
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, row, out]() {
        const Mat& g = grad(out);
        grad_mut(a) = capt::add(grad(a), g);
        Mat rsum(1, g.cols);
        for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) rsum.at(0, j) += g.at(i, j);
        grad_mut(row) = capt::add(grad(row), rsum);
    });
}

Val Tape::relu(Val a) {
    Mat v = value(a);
    for (double& x : v.data) x = x > 0.0 ? x : 0.0;
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, out]() {
        const Mat& g = grad(out);
        Mat ga = grad(a);
        const Mat& x = value(a);
        for (size_t i = 0; i < ga.data.size(); ++i)
            if (x.data[i] > 0.0) ga.data[i] += g.data[i];
        grad_mut(a) = std::move(ga);
    });
}

Val Tape::gelu_quick(Val a) {
    const Mat& x = value(a);
    Mat v = x;
    for (double& t : v.data) t = t / (1.0 + std::exp(-1.702 * t));
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, out]() {
        const Mat& g = grad(out);
        Mat ga = grad(a);
        const Mat& x2 = value(a);
        for (size_t i = 0; i < ga.data.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-1.702 * x2.data[i]));
            ga.data[i] += g.data[i] * (s + x2.data[i] * 1.702 * s * (1.0 - s));
        }
        grad_mut(a) = std::move(ga);
    });
}

Val Tape::layernorm_rows(Val a, Val gain, Val bias, double eps) {
    const Mat& x = value(a);
    const Mat& gn = value(gain);
    const Mat& bs = value(bias);
    if (gn.cols != x.cols || bs.cols != x.cols || gn.rows != 1 || bs.rows != 1)
        throw InputError("layernorm_rows: gain/bias must be 1 x cols");
    Mat v(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double mu = 0.0;
        for (int j = 0; j < x.cols; ++j) mu += x.at(i, j);
        mu /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            const double d = x.at(i, j) - mu;
            var += d * d;
        }
        var /= x.cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < x.cols; ++j)
            v.at(i, j) = gn.at(0, j) * (x.at(i, j) - mu) * inv + bs.at(0, j);
    }
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, gain, bias, eps, out]() {
        const Mat& g = grad(out);
        const Mat& x2 = value(a);
        const Mat& gn2 = value(gain);
        Mat ga = grad(a);
        Mat ggain = grad(gain);
        Mat gbias = grad(bias);
        const int n = x2.cols;
        for (int i = 0; i < x2.rows; ++i) {
            double mu = 0.0;
            for (int j = 0; j < n; ++j) mu += x2.at(i, j);
            mu /= n;
            double var = 0.0;
            for (int j = 0; j < n; ++j) {
                const double d = x2.at(i, j) - mu;
                var += d * d;
            }
            var /= n;
            const double inv = 1.0 / std::sqrt(var + eps);
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            std::vector<double> xh(n), dxh(n);
            for (int j = 0; j < n; ++j) {
                xh[j] = (x2.at(i, j) - mu) * inv;
                dxh[j] = g.at(i, j) * gn2.at(0, j);
                mean_dxh += dxh[j];
                mean_dxh_xh += dxh[j] * xh[j];
                ggain.at(0, j) += g.at(i, j) * xh[j];
                gbias.at(0, j) += g.at(i, j);
            }
            mean_dxh /= n;
            mean_dxh_xh /= n;
            for (int j = 0; j < n; ++j)
                ga.at(i, j) += inv * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
        grad_mut(a) = std::move(ga);
        grad_mut(gain) = std::move(ggain);
        grad_mut(bias) = std::move(gbias);
    });
}

Val Tape::softmax_rows(Val a) {
    const Mat& x = value(a);
    Mat v(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double mx = x.at(i, 0);
        for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x.at(i, j));
        double z = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            v.at(i, j) = std::exp(x.at(i, j) - mx);
            z += v.at(i, j);
        }
        for (int j = 0; j < x.cols; ++j) v.at(i, j) /= z;
    }
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, out]() {
        const Mat& g = grad(out);
        const Mat& y = value(out);
        Mat ga = grad(a);
        for (int i = 0; i < y.rows; ++i) {
            double gy = 0.0;
            for (int j = 0; j < y.cols; ++j) gy += g.at(i, j) * y.at(i, j);
            for (int j = 0; j < y.cols; ++j)
                ga.at(i, j) += y.at(i, j) * (g.at(i, j) - gy);
        }
        grad_mut(a) = std::move(ga);
    });
}

Val Tape::concat_rows(const std::vector<Val>& parts) {
    std::vector<Mat> vals;
    vals.reserve(parts.size());
    for (Val p : parts) vals.push_back(value(p));
    Mat v = capt::concat_rows(vals);
    Val out{static_cast<int>(nodes_.size())};
    std::vector<Val> ps = parts;
    return push(std::move(v), [this, ps, out]() {
        const Mat& g = grad(out);
        int r = 0;
        for (Val p : ps) {
            const int pr = value(p).rows;
            if (pr == 0) continue;
            grad_mut(p) = capt::add(grad(p), capt::slice_rows(g, r, pr));
            r += pr;
        }
    });
}

Val Tape::slice_rows(Val a, int begin, int count) {
    Mat v = capt::slice_rows(value(a), begin, count);
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, begin, count, out]() {
        const Mat& g = grad(out);
        Mat ga = grad(a);
        for (int i = 0; i < count; ++i)
            for (int j = 0; j < g.cols; ++j) ga.at(begin + i, j) += g.at(i, j);
        grad_mut(a) = std::move(ga);
    });
}

Val Tape::concat_cols(const std::vector<Val>& parts) {
    int cols = 0, rows = -1;
    for (Val p : parts) {
        const Mat& m = value(p);
        if (rows < 0) rows = m.rows;
        if (m.rows != rows) throw InputError("concat_cols: row mismatch");
        cols += m.cols;
    }
    Mat v(rows, cols);
    int c = 0;
    for (Val p : parts) {
        const Mat& m = value(p);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < m.cols; ++j) v.at(i, c + j) = m.at(i, j);
        c += m.cols;
    }
    Val out{static_cast<int>(nodes_.size())};
    std::vector<Val> ps = parts;
    return push(std::move(v), [this, ps, out]() {
        const Mat& g = grad(out);
        int c2 = 0;
        for (Val p : ps) {
            Mat gp = grad(p);
            for (int i = 0; i < gp.rows; ++i)
                for (int j = 0; j < gp.cols; ++j) gp.at(i, j) += g.at(i, c2 + j);
            c2 += gp.cols;
            grad_mut(p) = std::move(gp);
        }
    });
}

Val Tape::slice_cols(Val a, int begin, int count) {
    const Mat& x = value(a);
    if (begin < 0 || count < 0 || begin + count > x.cols) throw InputError("slice_cols: out of range");
    Mat v(x.rows, count);
    for (int i = 0; i < x.rows; ++i)
        for (int j = 0; j < count; ++j) v.at(i, j) = x.at(i, begin + j);
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, begin, count, out]() {
        const Mat& g = grad(out);
        Mat ga = grad(a);
        for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < count; ++j) ga.at(i, begin + j) += g.at(i, j);
        grad_mut(a) = std::move(ga);
    });
}

Val Tape::broadcast_row(Val row, int count) {
    const Mat& r = value(row);
    if (r.rows != 1) throw InputError("broadcast_row: expects 1 x D");
    Mat v(count, r.cols);
    for (int i = 0; i < count; ++i)
        for (int j = 0; j < r.cols; ++j) v.at(i, j) = r.at(0, j);
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, row, out]() {
        const Mat& g = grad(out);
        Mat gr = grad(row);
        for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) gr.at(0, j) += g.at(i, j);
        grad_mut(row) = std::move(gr);
    });
}

Val Tape::stack_scalars(const std::vector<Val>& scalars) {
    Mat v(1, static_cast<int>(scalars.size()));
    for (size_t i = 0; i < scalars.size(); ++i) {
        const Mat& s = value(scalars[i]);
        if (s.rows != 1 || s.cols != 1) throw InputError("stack_scalars: expects 1x1 inputs");
        v.at(0, static_cast<int>(i)) = s.at(0, 0);
    }
    Val out{static_cast<int>(nodes_.size())};
    std::vector<Val> ss = scalars;
    return push(std::move(v), [this, ss, out]() {
        const Mat& g = grad(out);
        for (size_t i = 0; i < ss.size(); ++i)
            grad_mut(ss[i]).at(0, 0) += g.at(0, static_cast<int>(i));
    });
}

Val Tape::pick(Val a, int r, int c) {
    const Mat& x = value(a);
    if (r < 0 || r >= x.rows || c < 0 || c >= x.cols) throw InputError("pick: index out of range");
    Mat v(1, 1);
    v.at(0, 0) = x.at(r, c);
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, r, c, out]() {
        grad_mut(a).at(r, c) += grad(out).at(0, 0);
    });
}

Val Tape::log(Val a) {
    Mat v = value(a);
    for (double& x : v.data) x = std::log(x);
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, out]() {
        const Mat& g = grad(out);
        Mat ga = grad(a);
        const Mat& x = value(a);
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[i] / x.data[i];
        grad_mut(a) = std::move(ga);
    });
}

Val Tape::sum_abs_pow(Val a, int p) {
    if (p != 1 && p != 2) throw ConfigError("sum_abs_pow: exponent must be 1 or 2");
    const Mat& x = value(a);
    double s = 0.0;
    for (double t : x.data) s += (p == 1) ? std::fabs(t) : t * t;
    Mat v(1, 1);
    v.at(0, 0) = s;
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, p, out]() {
        const double g = grad(out).at(0, 0);
        Mat ga = grad(a);
        const Mat& x2 = value(a);
        for (size_t i = 0; i < ga.data.size(); ++i) {
            if (p == 1)
                ga.data[i] += g * (x2.data[i] > 0.0 ? 1.0 : (x2.data[i] < 0.0 ? -1.0 : 0.0));
            else
                ga.data[i] += g * 2.0 * x2.data[i];
        }
        grad_mut(a) = std::move(ga);
    });
}

Val Tape::cosine(Val a, Val b) {
    const Mat& x = value(a);
    const Mat& y = value(b);
    if (x.size() != y.size()) throw InputError("cosine: size mismatch");
    const double na = l2_norm(x), nb = l2_norm(y);
    if (na == 0.0 || nb == 0.0) throw InputError("cosine undefined for zero-norm embedding");
    const double d = capt::dot(x, y);
    Mat v(1, 1);
    v.at(0, 0) = d / (na * nb);
    Val out{static_cast<int>(nodes_.size())};
    return push(std::move(v), [this, a, b, out]() {
        const double g = grad(out).at(0, 0);
        const Mat& x2 = value(a);
        const Mat& y2 = value(b);
        const double na2 = l2_norm(x2), nb2 = l2_norm(y2);
        const double d2 = capt::dot(x2, y2);
        const double c = d2 / (na2 * nb2);
        Mat ga = grad(a);
        Mat gb = grad(b);
        for (size_t i = 0; i < ga.data.size(); ++i) {
            ga.data[i] += g * (y2.data[i] / (na2 * nb2) - c * x2.data[i] / (na2 * na2));
            gb.data[i] += g * (x2.data[i] / (na2 * nb2) - c * y2.data[i] / (nb2 * nb2));
        }
        grad_mut(a) = std::move(ga);
        grad_mut(b) = std::move(gb);
    });
}

}  // namespace capt
