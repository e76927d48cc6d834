#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace capt {

// Errors surfaced across the library. ConfigError: a setting or shape is
// inconsistent with the model; InputError: caller passed bad data;
// TransportError: a remote client call failed and may be retried.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};
struct TransportError : std::runtime_error {
    explicit TransportError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major matrix of doubles. Vectors are 1xN matrices.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {
        if (r < 0 || c < 0) throw InputError("Mat: negative dimension");
    }
    Mat(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != static_cast<size_t>(r) * c) throw InputError("Mat: data size mismatch");
    }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

Mat matmul(const Mat& a, const Mat& b);
// a * b^T, the common inner-product layout for row-vector embeddings.
Mat matmul_nt(const Mat& a, const Mat& b);
// a^T * b.
Mat matmul_tn(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);
Mat add(const Mat& a, const Mat& b);
Mat sub(const Mat& a, const Mat& b);
Mat hadamard(const Mat& a, const Mat& b);
Mat scale(const Mat& a, double s);
// Adds a 1xC row vector to every row of a.
Mat add_rowvec(const Mat& a, const Mat& row);
Mat concat_rows(const std::vector<Mat>& parts);
Mat slice_rows(const Mat& a, int begin, int count);
double dot(const Mat& a, const Mat& b);
double l2_norm(const Mat& a);
bool all_finite(const Mat& a);

// Deterministic RNG. Draws are produced by explicit arithmetic on the
// mt19937_64 stream (not std <random> distributions, whose sequences are
// implementation-defined), so outputs are bit-stable across toolchains.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    uint64_t next() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    // Standard normal via Box-Muller.
    double normal();
    // Uniform integer in [0, bound).
    uint64_t below(uint64_t bound) { return bound ? next() % bound : 0; }

    Mat normal_mat(int rows, int cols, double stddev);

  private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a 64-bit, used for weight fingerprints and config hashes.
class Digest {
  public:
    void update(const void* bytes, size_t n);
    void update(const Mat& m);
    void update(const std::string& s) { update(s.data(), s.size()); }
    void update_u64(uint64_t v);
    uint64_t value() const { return h_; }

  private:
    uint64_t h_ = 0xcbf29ce484222325ull;
};

std::string hex64(uint64_t v);

}  // namespace capt
