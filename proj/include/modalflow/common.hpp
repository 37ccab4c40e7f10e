#ifndef MODALFLOW_COMMON_HPP
#define MODALFLOW_COMMON_HPP

// Shared numeric aliases, RNG, binary IO helpers and error types.

#include <Eigen/Dense>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <openssl/evp.h>

namespace modalflow {

template <class S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mat  = MatT<float>;
using MatD = MatT<double>;

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic RNG stream. normal() uses an explicit Box-Muller transform
// (one value per call, no hidden state) so that serialized engine state is
// enough to resume a stream bit-exactly.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(splitmix64(seed)) {}

    double uniform() {
        // in [0, 1)
        return double(engine_() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
    // uniform integer in [0, n)
    int randint(int n) {
        return int(uniform() * double(n)) % n;
    }
    uint64_t raw() { return engine_(); }

    // Independent child stream; derivation depends only on (seed material,
    // stream id), never on how much of this stream was consumed.
    static Rng stream(uint64_t seed, uint64_t stream_id) {
        return Rng(splitmix64(seed ^ splitmix64(stream_id + 0x9e37ull)));
    }

    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }
    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (!is) throw FormatError("Rng::load_state: malformed state string");
    }

private:
    std::mt19937_64 engine_;
};

// ---- little-endian binary IO -------------------------------------------

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}
inline void read_bytes(std::istream& is, void* p, size_t n) {
    is.read(reinterpret_cast<char*>(p), std::streamsize(n));
    if (!is) throw FormatError("unexpected end of stream");
}

template <class T>
void write_pod(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    write_bytes(os, &v, sizeof(T));
}
template <class T>
T read_pod(std::istream& is) {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    read_bytes(is, &v, sizeof(T));
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<uint64_t>(os, s.size());
    write_bytes(os, s.data(), s.size());
}
inline std::string read_string(std::istream& is, uint64_t max_len = (1ull << 32)) {
    uint64_t n = read_pod<uint64_t>(is);
    if (n > max_len) throw FormatError("string length out of range");
    std::string s(n, '\0');
    read_bytes(is, s.data(), n);
    return s;
}

inline void write_floats(std::ostream& os, const float* p, size_t n) {
    write_bytes(os, p, n * sizeof(float));
}
inline void read_floats(std::istream& is, float* p, size_t n) {
    read_bytes(is, p, n * sizeof(float));
}

inline void write_mat(std::ostream& os, const Mat& m) {
    write_pod<uint64_t>(os, uint64_t(m.rows()));
    write_pod<uint64_t>(os, uint64_t(m.cols()));
    write_floats(os, m.data(), size_t(m.size()));
}
inline Mat read_mat(std::istream& is) {
    uint64_t r = read_pod<uint64_t>(is);
    uint64_t c = read_pod<uint64_t>(is);
    if (r > (1ull << 24) || c > (1ull << 24)) throw FormatError("matrix dims out of range");
    Mat m{Eigen::Index(r), Eigen::Index(c)};
    read_floats(is, m.data(), size_t(r * c));
    return m;
}

// ---- content hashing -----------------------------------------------------

inline std::string sha256_hex(const void* data, size_t n) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    EVP_DigestUpdate(ctx, data, n);
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned i = 0; i < len; i++) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

inline std::string sha256_file_hex(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open file for hashing: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    std::string bytes = ss.str();
    return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace modalflow

#endif
