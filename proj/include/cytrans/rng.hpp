#ifndef CYTRANS_RNG_HPP
#define CYTRANS_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace cytrans {

// Deterministic random stream. normal() is cache-free Box-Muller so the
// entire state is the mt19937_64 engine, which serializes exactly through
// its stream operators; that is what makes checkpoint resume bitwise.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t raw() { return eng_(); }

    // uniform in [0,1)
    double uniform() {
        return (double)(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int64_t uniform_int(int64_t n) {  // [0, n)
        return (int64_t)(uniform() * (double)n) % n;
    }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    Tensor<T> randn(const Shape& s, T stddev = T(1), bool requires_grad = false) {
        auto t = Tensor<T>::zeros(s, requires_grad);
        auto d = t.leaf_data();
        for (auto& v : d) v = (T)(normal() * (double)stddev);
        return t;
    }

    template <typename T>
    Tensor<T> rand_uniform(const Shape& s, T lo, T hi, bool requires_grad = false) {
        auto t = Tensor<T>::zeros(s, requires_grad);
        auto d = t.leaf_data();
        for (auto& v : d) v = (T)uniform((double)lo, (double)hi);
        return t;
    }

    std::string state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }
    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (!is) throw TensorError("invalid rng state string");
    }

    // Derives an independent child stream.
    Rng fork(uint64_t salt) {
        std::seed_seq seq{(uint32_t)(eng_() & 0xffffffffu), (uint32_t)(eng_() >> 32),
                          (uint32_t)(salt & 0xffffffffu), (uint32_t)(salt >> 32)};
        Rng child;
        child.eng_.seed(seq);
        return child;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace cytrans

#endif
