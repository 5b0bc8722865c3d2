# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CSR spmm and dense matmul.

Every output row is produced by exactly one thread and accumulated in a fixed
order, so results do not depend on the thread count.
"""

from cython.parallel cimport prange

ctypedef fused real_t:
    float
    double


def spmm(const long long[::1] indptr, const int[::1] indices, const real_t[::1] values,
         const real_t[:, ::1] h, real_t[:, ::1] out, int nthreads):
    cdef Py_ssize_t nrows = out.shape[0]
    cdef Py_ssize_t ncols = h.shape[1]
    cdef Py_ssize_t i, j
    cdef long long p
    cdef int u
    cdef real_t v
    for i in prange(nrows, nogil=True, num_threads=nthreads, schedule="static"):
        for j in range(ncols):
            out[i, j] = 0
        for p in range(indptr[i], indptr[i + 1]):
            u = indices[p]
            v = values[p]
            for j in range(ncols):
                out[i, j] = out[i, j] + v * h[u, j]


def matmul(const real_t[:, ::1] a, const real_t[:, ::1] b, real_t[:, ::1] out, int nthreads):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t kdim = a.shape[1]
    cdef Py_ssize_t m = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef real_t s
    for i in prange(n, nogil=True, num_threads=nthreads, schedule="static"):
        for j in range(m):
            out[i, j] = 0
        for k in range(kdim):
            s = a[i, k]
            for j in range(m):
                out[i, j] = out[i, j] + s * b[k, j]
