#ifndef CYTRANS_KERNELS_HPP
#define CYTRANS_KERNELS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <thread>
#include <vector>

// Raw numeric loops shared by the autodiff primitives. All kernels are plain
// sequential code unless routed through parallel_for; parallel work splits on
// disjoint output ranges only, so results are bitwise identical for any
// worker count.

namespace cytrans::kern {

inline int& worker_count() {
    static int workers = 1;
    return workers;
}

template <typename F>
void parallel_for(int64_t n, F&& fn) {
    const int workers = worker_count();
    if (workers <= 1 || n < 2) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const int use = (int)std::min<int64_t>(workers, n);
    std::vector<std::thread> pool;
    pool.reserve(use);
    for (int w = 0; w < use; ++w) {
        const int64_t lo = n * w / use, hi = n * (w + 1) / use;
        pool.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

// C[m,n] += A[m,k] * B[k,n], all row-major. Axpy ordering keeps the inner
// loop contiguous over B and C.
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int m, int k, int n) {
    parallel_for(m, [&](int64_t i) {
        T* c = C + i * n;
        const T* a = A + i * k;
        for (int p = 0; p < k; ++p) {
            const T av = a[p];
            const T* b = B + (int64_t)p * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    });
}

// C[m,n] += A[m,k] * B[n,k]^T (row dot row).
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int m, int k, int n) {
    parallel_for(m, [&](int64_t i) {
        const T* a = A + i * k;
        T* c = C + i * n;
        for (int j = 0; j < n; ++j) {
            const T* b = B + (int64_t)j * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += a[p] * b[p];
            c[j] += acc;
        }
    });
}

// C[k,n] += A[m,k]^T * B[m,n].
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* a = A + (int64_t)i * k;
        const T* b = B + (int64_t)i * n;
        for (int p = 0; p < k; ++p) {
            const T av = a[p];
            T* c = C + (int64_t)p * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

struct Conv2dSpec {
    int in_c, out_c, kh, kw, stride, pad;
    int in_h, in_w, out_h, out_w;
};

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout] or null, y: [N,Cout,Ho,Wo].
// With accumulate set, y is treated as a += target (used for gradients).
template <typename T>
void conv2d_fwd(const T* x, const T* w, const T* b, T* y, int batch, const Conv2dSpec& s,
                bool accumulate = false) {
    const int64_t in_plane = (int64_t)s.in_h * s.in_w;
    const int64_t out_plane = (int64_t)s.out_h * s.out_w;
    parallel_for((int64_t)batch * s.out_c, [&](int64_t idx) {
        const int n = (int)(idx / s.out_c), co = (int)(idx % s.out_c);
        T* yp = y + (idx)*out_plane;
        if (!accumulate) {
            const T bias = b ? b[co] : T(0);
            for (int64_t i = 0; i < out_plane; ++i) yp[i] = bias;
        } else if (b) {
            for (int64_t i = 0; i < out_plane; ++i) yp[i] += b[co];
        }
        const T* xn = x + (int64_t)n * s.in_c * in_plane;
        for (int ci = 0; ci < s.in_c; ++ci) {
            const T* xp = xn + ci * in_plane;
            const T* wp = w + (((int64_t)co * s.in_c + ci) * s.kh) * s.kw;
            for (int kh = 0; kh < s.kh; ++kh) {
                for (int kw = 0; kw < s.kw; ++kw) {
                    const T wv = wp[kh * s.kw + kw];
                    for (int ho = 0; ho < s.out_h; ++ho) {
                        const int ih = ho * s.stride + kh - s.pad;
                        if (ih < 0 || ih >= s.in_h) continue;
                        // wo range with iw = wo*stride + kw - pad inside [0, in_w)
                        int wo_lo = 0;
                        while (wo_lo < s.out_w && wo_lo * s.stride + kw - s.pad < 0) ++wo_lo;
                        int wo_hi = s.out_w;
                        while (wo_hi > wo_lo && (wo_hi - 1) * s.stride + kw - s.pad >= s.in_w) --wo_hi;
                        T* yrow = yp + (int64_t)ho * s.out_w;
                        const T* xrow = xp + (int64_t)ih * s.in_w + kw - s.pad;
                        if (s.stride == 1) {
                            for (int wo = wo_lo; wo < wo_hi; ++wo) yrow[wo] += wv * xrow[wo];
                        } else {
                            for (int wo = wo_lo; wo < wo_hi; ++wo)
                                yrow[wo] += wv * xrow[(int64_t)wo * s.stride];
                        }
                    }
                }
            }
        }
    });
}

template <typename T>
void conv2d_bwd_input(const T* dy, const T* w, T* dx, int batch, const Conv2dSpec& s) {
    const int64_t in_plane = (int64_t)s.in_h * s.in_w;
    const int64_t out_plane = (int64_t)s.out_h * s.out_w;
    parallel_for(batch, [&](int64_t n) {
        T* dxn = dx + n * s.in_c * in_plane;
        const T* dyn = dy + n * s.out_c * out_plane;
        for (int co = 0; co < s.out_c; ++co) {
            const T* dyp = dyn + (int64_t)co * out_plane;
            for (int ci = 0; ci < s.in_c; ++ci) {
                T* dxp = dxn + (int64_t)ci * in_plane;
                const T* wp = w + (((int64_t)co * s.in_c + ci) * s.kh) * s.kw;
                for (int kh = 0; kh < s.kh; ++kh) {
                    for (int kw = 0; kw < s.kw; ++kw) {
                        const T wv = wp[kh * s.kw + kw];
                        if (wv == T(0)) continue;
                        for (int ho = 0; ho < s.out_h; ++ho) {
                            const int ih = ho * s.stride + kh - s.pad;
                            if (ih < 0 || ih >= s.in_h) continue;
                            int wo_lo = 0;
                            while (wo_lo < s.out_w && wo_lo * s.stride + kw - s.pad < 0) ++wo_lo;
                            int wo_hi = s.out_w;
                            while (wo_hi > wo_lo && (wo_hi - 1) * s.stride + kw - s.pad >= s.in_w) --wo_hi;
                            const T* dyrow = dyp + (int64_t)ho * s.out_w;
                            T* dxrow = dxp + (int64_t)ih * s.in_w + kw - s.pad;
                            if (s.stride == 1) {
                                for (int wo = wo_lo; wo < wo_hi; ++wo) dxrow[wo] += wv * dyrow[wo];
                            } else {
                                for (int wo = wo_lo; wo < wo_hi; ++wo)
                                    dxrow[(int64_t)wo * s.stride] += wv * dyrow[wo];
                            }
                        }
                    }
                }
            }
        }
    });
}

template <typename T>
void conv2d_bwd_weight(const T* x, const T* dy, T* dw, T* db, int batch, const Conv2dSpec& s) {
    const int64_t in_plane = (int64_t)s.in_h * s.in_w;
    const int64_t out_plane = (int64_t)s.out_h * s.out_w;
    parallel_for(s.out_c, [&](int64_t co) {
        if (db) {
            T acc = T(0);
            for (int n = 0; n < batch; ++n) {
                const T* dyp = dy + ((int64_t)n * s.out_c + co) * out_plane;
                for (int64_t i = 0; i < out_plane; ++i) acc += dyp[i];
            }
            db[co] += acc;
        }
        for (int ci = 0; ci < s.in_c; ++ci) {
            for (int kh = 0; kh < s.kh; ++kh) {
                for (int kw = 0; kw < s.kw; ++kw) {
                    T acc = T(0);
                    for (int n = 0; n < batch; ++n) {
                        const T* xp = x + ((int64_t)n * s.in_c + ci) * in_plane;
                        const T* dyp = dy + ((int64_t)n * s.out_c + co) * out_plane;
                        for (int ho = 0; ho < s.out_h; ++ho) {
                            const int ih = ho * s.stride + kh - s.pad;
                            if (ih < 0 || ih >= s.in_h) continue;
                            int wo_lo = 0;
                            while (wo_lo < s.out_w && wo_lo * s.stride + kw - s.pad < 0) ++wo_lo;
                            int wo_hi = s.out_w;
                            while (wo_hi > wo_lo && (wo_hi - 1) * s.stride + kw - s.pad >= s.in_w) --wo_hi;
                            const T* dyrow = dyp + (int64_t)ho * s.out_w;
                            const T* xrow = xp + (int64_t)ih * s.in_w + kw - s.pad;
                            if (s.stride == 1) {
                                for (int wo = wo_lo; wo < wo_hi; ++wo) acc += dyrow[wo] * xrow[wo];
                            } else {
                                for (int wo = wo_lo; wo < wo_hi; ++wo)
                                    acc += dyrow[wo] * xrow[(int64_t)wo * s.stride];
                            }
                        }
                    }
                    dw[(((int64_t)co * s.in_c + ci) * s.kh + kh) * s.kw + kw] += acc;
                }
            }
        }
    });
}

}  // namespace cytrans::kern

#endif
