#include "capt/mat.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

namespace capt {

static void require(bool ok, const char* what) {
    if (!ok) throw InputError(std::string("shape mismatch: ") + what);
}

Mat matmul(const Mat& a, const Mat& b) {
    require(a.cols == b.rows, "matmul");
    Mat out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols; ++j) out.at(i, j) += aik * b.at(k, j);
        }
    }
    return out;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
    require(a.cols == b.cols, "matmul_nt");
    Mat out(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < b.rows; ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(j, k);
            out.at(i, j) = s;
        }
    return out;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
    require(a.rows == b.rows, "matmul_tn");
    Mat out(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k)
        for (int i = 0; i < a.cols; ++i) {
            const double aki = a.at(k, i);
            if (aki == 0.0) continue;
            for (int j = 0; j < b.cols; ++j) out.at(i, j) += aki * b.at(k, j);
        }
    return out;
}

Mat transpose(const Mat& a) {
    Mat out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

Mat add(const Mat& a, const Mat& b) {
    require(a.same_shape(b), "add");
    Mat out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Mat sub(const Mat& a, const Mat& b) {
    require(a.same_shape(b), "sub");
    Mat out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

Mat hadamard(const Mat& a, const Mat& b) {
    require(a.same_shape(b), "hadamard");
    Mat out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

Mat scale(const Mat& a, double s) {
    Mat out = a;
    for (double& v : out.data) v *= s;
    return out;
}

Mat add_rowvec(const Mat& a, const Mat& row) {
    require(row.rows == 1 && row.cols == a.cols, "add_rowvec");
    Mat out = a;
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out.at(i, j) += row.at(0, j);
    return out;
}

Mat concat_rows(const std::vector<Mat>& parts) {
    int rows = 0, cols = 0;
    for (const Mat& p : parts) {
        if (p.rows == 0) continue;
        if (cols == 0) cols = p.cols;
        require(p.cols == cols, "concat_rows");
        rows += p.rows;
    }
    Mat out(rows, cols);
    int r = 0;
    for (const Mat& p : parts) {
        if (p.rows == 0) continue;
        std::memcpy(&out.data[static_cast<size_t>(r) * cols], p.data.data(), p.data.size() * sizeof(double));
        r += p.rows;
    }
    return out;
}

Mat slice_rows(const Mat& a, int begin, int count) {
    require(begin >= 0 && count >= 0 && begin + count <= a.rows, "slice_rows");
    Mat out(count, a.cols);
    std::memcpy(out.data.data(), &a.data[static_cast<size_t>(begin) * a.cols],
                out.data.size() * sizeof(double));
    return out;
}

double dot(const Mat& a, const Mat& b) {
    require(a.size() == b.size(), "dot");
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

double l2_norm(const Mat& a) { return std::sqrt(dot(a, a)); }

bool all_finite(const Mat& a) {
    for (double v : a.data)
        if (!std::isfinite(v)) return false;
    return true;
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

Mat Rng::normal_mat(int rows, int cols, double stddev) {
    Mat m(rows, cols);
    for (double& v : m.data) v = normal() * stddev;
    return m;
}

void Digest::update(const void* bytes, size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h_ ^= p[i];
        h_ *= 0x100000001b3ull;
    }
}

void Digest::update(const Mat& m) {
    update_u64(static_cast<uint64_t>(m.rows));
    update_u64(static_cast<uint64_t>(m.cols));
    update(m.data.data(), m.data.size() * sizeof(double));
}

void Digest::update_u64(uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    update(b, 8);
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace capt
