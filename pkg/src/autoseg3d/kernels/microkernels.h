/* Register-tiled float32 micro-kernels for direct 3D convolution.
 *
 * mk_gather_row: dst[m][j] += sum_t w[t*mr + m] * src[t][j]   for m < mr, j < n
 *     The accumulators for a tile of mr rows x 2 vectors stay in registers
 *     across all taps.
 * mk_dot:        accd[(m*4 + t)*16 + l] += sum_r sum_i g[m][r, 16*i + l] * src[t][r, 16*i + l]
 *     for a tile of MK_DOT_M rows x 4 taps.
 *     Lane-wise float32 partial sums over a run of rows, flushed into
 *     float64 once per call; lanes are reduced later in a fixed order.
 *
 * Reduction order is fixed by the loop structure, so results are
 * reproducible run to run.  Uses GCC/Clang vector extensions.
 */
#ifndef AUTOSEG3D_MICROKERNELS_H
#define AUTOSEG3D_MICROKERNELS_H

#include <stddef.h>
#include <string.h>

#define MK_LANES 16

#if defined(__AVX512F__)
#define MK_VW 16
#else
#define MK_VW 8
#endif

typedef float mk_vec __attribute__((vector_size(MK_VW * sizeof(float))));

static inline mk_vec mk_load(const float *p)
{
    mk_vec v;
    memcpy(&v, p, sizeof v);
    return v;
}

static inline void mk_store(float *p, mk_vec v) { memcpy(p, &v, sizeof v); }

static inline mk_vec mk_splat(float x) { return (mk_vec){0} + x; }

/* The first n < MK_VW floats; the rest of the vector is zero, nothing past p + n is touched. */
#if defined(__AVX512F__)
#include <immintrin.h>

static inline mk_vec mk_load_part(const float *p, ptrdiff_t n)
{
    __m512 r = _mm512_maskz_loadu_ps((__mmask16)((1u << n) - 1), p);
    mk_vec v;
    memcpy(&v, &r, sizeof v);
    return v;
}

static inline void mk_store_part(float *p, mk_vec v, ptrdiff_t n)
{
    __m512 r;
    memcpy(&r, &v, sizeof r);
    _mm512_mask_storeu_ps(p, (__mmask16)((1u << n) - 1), r);
}
#else
static inline mk_vec mk_load_part(const float *p, ptrdiff_t n)
{
    mk_vec v = (mk_vec){0};
    memcpy(&v, p, n * sizeof(float));
    return v;
}

static inline void mk_store_part(float *p, mk_vec v, ptrdiff_t n) { memcpy(p, &v, n * sizeof(float)); }
#endif

/* MR rows x NV vectors of MK_VW floats */
#define MK_GATHER(MR, NV)                                                      \
    static void mk_gather_##MR##_##NV(ptrdiff_t ntaps, const float *const *src, \
                                       ptrdiff_t off, const float *w,          \
                                       float *const *dst)                      \
    {                                                                          \
        mk_vec acc[MR][NV];                                                    \
        _Pragma("GCC unroll 8") for (int m = 0; m < MR; m++)                   \
            _Pragma("GCC unroll 2") for (int v = 0; v < NV; v++)               \
                acc[m][v] = mk_load(dst[m] + off + v * MK_VW);                 \
        for (ptrdiff_t t = 0; t < ntaps; t++) {                                \
            const float *p = src[t] + off;                                     \
            const float *wt = w + t * MR;                                      \
            mk_vec x[NV];                                                      \
            _Pragma("GCC unroll 2") for (int v = 0; v < NV; v++)               \
                x[v] = mk_load(p + v * MK_VW);                                 \
            _Pragma("GCC unroll 8") for (int m = 0; m < MR; m++) {             \
                const mk_vec wv = mk_splat(wt[m]);                             \
                _Pragma("GCC unroll 2") for (int v = 0; v < NV; v++)           \
                    acc[m][v] += wv * x[v];                                    \
            }                                                                  \
        }                                                                      \
        _Pragma("GCC unroll 8") for (int m = 0; m < MR; m++)                   \
            _Pragma("GCC unroll 2") for (int v = 0; v < NV; v++)               \
                mk_store(dst[m] + off + v * MK_VW, acc[m][v]);                 \
    }

#define MK_GATHER_ALL_NV(MR) MK_GATHER(MR, 2) MK_GATHER(MR, 1)
MK_GATHER_ALL_NV(1)
MK_GATHER_ALL_NV(2)
MK_GATHER_ALL_NV(3)
MK_GATHER_ALL_NV(4)
MK_GATHER_ALL_NV(5)
MK_GATHER_ALL_NV(6)
MK_GATHER_ALL_NV(7)
MK_GATHER_ALL_NV(8)

/* Fewer than MK_VW columns: partial loads into a zeroed vector. */
static void mk_gather_part(int mr, ptrdiff_t n, ptrdiff_t ntaps, const float *const *src,
                           ptrdiff_t off, const float *w, float *const *dst)
{
    mk_vec acc[8];
    for (int m = 0; m < mr; m++)
        acc[m] = mk_load_part(dst[m] + off, n);
    for (ptrdiff_t t = 0; t < ntaps; t++) {
        const mk_vec x = mk_load_part(src[t] + off, n);
        const float *wt = w + t * mr;
        for (int m = 0; m < mr; m++)
            acc[m] += mk_splat(wt[m]) * x;
    }
    for (int m = 0; m < mr; m++)
        mk_store_part(dst[m] + off, acc[m], n);
}

static void mk_gather_tail(int mr, ptrdiff_t n, ptrdiff_t ntaps, const float *const *src,
                           ptrdiff_t off, const float *w, float *const *dst)
{
    for (; n > 0; off += MK_VW, n -= MK_VW)
        mk_gather_part(mr, n < MK_VW ? n : MK_VW, ntaps, src, off, w, dst);
}

#define MK_CASE(MR, NV) \
    case MR: mk_gather_##MR##_##NV(ntaps, src, off, w, dst); break;

#define MK_SWITCH(NV)                                                          \
    switch (mr) {                                                              \
        MK_CASE(1, NV) MK_CASE(2, NV) MK_CASE(3, NV) MK_CASE(4, NV)            \
        MK_CASE(5, NV) MK_CASE(6, NV) MK_CASE(7, NV) MK_CASE(8, NV)            \
        default: mk_gather_tail(mr, NV * MK_VW, ntaps, src, off, w, dst);      \
    }

/* Full row: n outputs per destination row, mr <= 8 rows. */
static void mk_gather_row(int mr, ptrdiff_t n, ptrdiff_t ntaps, const float *const *src,
                          const float *w, float *const *dst)
{
    ptrdiff_t off = 0;
    for (; off + 2 * MK_VW <= n; off += 2 * MK_VW) { MK_SWITCH(2) }
    for (; off + MK_VW <= n; off += MK_VW) { MK_SWITCH(1) }
    if (off < n)
        mk_gather_tail(mr, n - off, ntaps, src, off, w, dst);
}

typedef float mk_lane __attribute__((vector_size(MK_LANES * sizeof(float))));

static inline mk_lane mk_lload(const float *p)
{
    mk_lane v;
    memcpy(&v, p, sizeof v);
    return v;
}

static inline mk_lane mk_lpart(const float *p, ptrdiff_t n)
{
#if MK_VW == MK_LANES
    return mk_load_part(p, n);
#else
    mk_lane v = (mk_lane){0};
    memcpy(&v, p, n * sizeof(float));
    return v;
#endif
}

/* Rows per grad-weight tile: 6 x 4 accumulators fill AVX-512's 32 registers
 * with room for the operands; narrower machines keep 4 x 4. */
#if MK_VW == MK_LANES
enum { MK_DOT_M = 6 };
#else
enum { MK_DOT_M = 4 };
#endif

/* accd[(m*4 + t)*16 + l] += acc[m][t][l] */
#define MK_DOT_FLUSH(acc, M, accd)                                             \
    for (int m_ = 0; m_ < (M); m_++)                                           \
        for (int t_ = 0; t_ < 4; t_++) {                                       \
            float a_[MK_LANES];                                                \
            memcpy(a_, &acc[m_][t_], sizeof a_);                               \
            for (int l_ = 0; l_ < MK_LANES; l_++)                              \
                (accd)[(m_ * 4 + t_) * MK_LANES + l_] += (double)a_[l_];       \
        }

/* M rows x 4 taps.  Rows r0 <= r < r0 + nrows of length n start at g[m] + r*gs
 * and src[t] + r*ss; columns past the last full lane group go through
 * zero-filled partial loads. */
#define MK_DOT(M)                                                              \
    __attribute__((noinline))                                                  \
    static void mk_dot_##M##_rem(ptrdiff_t r0, ptrdiff_t nrows, ptrdiff_t j0,  \
                                 ptrdiff_t n, const float *const *g,           \
                                 ptrdiff_t gs, const float *const *src,        \
                                 ptrdiff_t ss, double *accd)                   \
    {                                                                          \
        mk_lane acc[M][4];                                                     \
        for (int m = 0; m < M; m++)                                            \
            for (int t = 0; t < 4; t++)                                        \
                acc[m][t] = (mk_lane){0};                                      \
        for (ptrdiff_t r = r0; r < r0 + nrows; r++) {                          \
            mk_lane x[4];                                                      \
            for (int k = 0; k < 4; k++)                                        \
                x[k] = mk_lpart(src[k] + r * ss + j0, n - j0);                 \
            for (int m = 0; m < M; m++) {                                      \
                const mk_lane gm = mk_lpart(g[m] + r * gs + j0, n - j0);       \
                for (int t = 0; t < 4; t++)                                    \
                    acc[m][t] += gm * x[t];                                    \
            }                                                                  \
        }                                                                      \
        MK_DOT_FLUSH(acc, M, accd)                                             \
    }                                                                          \
                                                                               \
    static void mk_dot_##M(ptrdiff_t r0, ptrdiff_t nrows, ptrdiff_t n,         \
                           const float *const *g, ptrdiff_t gs,                \
                           const float *const *src, ptrdiff_t ss, double *accd) \
    {                                                                          \
        const ptrdiff_t full = n - n % MK_LANES;                               \
        if (full) {                                                            \
            mk_lane acc[M][4];                                                 \
            _Pragma("GCC unroll 8") for (int m = 0; m < M; m++)                \
                _Pragma("GCC unroll 4") for (int t = 0; t < 4; t++)            \
                    acc[m][t] = (mk_lane){0};                                  \
            for (ptrdiff_t r = r0; r < r0 + nrows; r++) {                      \
                const float *s0 = src[0] + r * ss, *s1 = src[1] + r * ss,      \
                            *s2 = src[2] + r * ss, *s3 = src[3] + r * ss;      \
                const float *gp[M];                                            \
                _Pragma("GCC unroll 8") for (int m = 0; m < M; m++)            \
                    gp[m] = g[m] + r * gs;                                     \
                for (ptrdiff_t j = 0; j < full; j += MK_LANES) {               \
                    const mk_lane x0 = mk_lload(s0 + j), x1 = mk_lload(s1 + j),\
                                  x2 = mk_lload(s2 + j), x3 = mk_lload(s3 + j);\
                    _Pragma("GCC unroll 8") for (int m = 0; m < M; m++) {      \
                        const mk_lane gm = mk_lload(gp[m] + j);                \
                        acc[m][0] += gm * x0; acc[m][1] += gm * x1;            \
                        acc[m][2] += gm * x2; acc[m][3] += gm * x3;            \
                    }                                                          \
                }                                                              \
            }                                                                  \
            MK_DOT_FLUSH(acc, M, accd)                                         \
        }                                                                      \
        if (full < n)                                                          \
            mk_dot_##M##_rem(r0, nrows, full, n, g, gs, src, ss, accd);        \
    }

MK_DOT(4)
MK_DOT(6)

/* Ragged (mr, nt) edge tiles. */
static void mk_dot_tail(int mr, int nt, ptrdiff_t r0, ptrdiff_t nrows, ptrdiff_t n, const float *const *g,
                        ptrdiff_t gs, const float *const *src, ptrdiff_t ss, double *accd)
{
    for (int m = 0; m < mr; m++)
        for (int t = 0; t < nt; t++) {
            float a[MK_LANES] = {0};
            for (ptrdiff_t r = r0; r < r0 + nrows; r++) {
                const float *gm = g[m] + r * gs;
                const float *p = src[t] + r * ss;
                for (ptrdiff_t j = 0; j < n; j++)
                    a[j % MK_LANES] += gm[j] * p[j];
            }
            for (int l = 0; l < MK_LANES; l++)
                accd[(m * 4 + t) * MK_LANES + l] += (double)a[l];
        }
}

static void mk_dot(int mr, int nt, ptrdiff_t r0, ptrdiff_t nrows, ptrdiff_t n, const float *const *g,
                   ptrdiff_t gs, const float *const *src, ptrdiff_t ss, double *accd)
{
    if (nt == 4 && mr == 6)
        mk_dot_6(r0, nrows, n, g, gs, src, ss, accd);
    else if (nt == 4 && mr == 4)
        mk_dot_4(r0, nrows, n, g, gs, src, ss, accd);
    else
        mk_dot_tail(mr, nt, r0, nrows, n, g, gs, src, ss, accd);
}

#endif
