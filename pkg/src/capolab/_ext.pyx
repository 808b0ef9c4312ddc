# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: tanh-MLP forward/backward over a minibatch and the GAE recursion.

Arrays are row-major float64. BLAS is column-major, so every product below is
written against the transposed (column-major) view of the row-major buffers.
"""
import numpy as np

from scipy.linalg.cython_blas cimport dgemm


cdef inline void _gemm(char ta, char tb, int m, int n, int k,
                       double alpha, double* a, int lda,
                       double* b, int ldb,
                       double beta, double* c, int ldc) noexcept nogil:
    dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def forward(list weights, list biases, x):
    """Return the activation list [x, h1, ..., out]; hidden layers tanh, output linear."""
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t layer, i, j, n, n_out, n_in
    cdef double[:, ::1] W, A, Y
    cdef double[::1] b
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    acts = [x]
    for layer in range(n_layers):
        W = weights[layer]
        b = biases[layer]
        A = acts[layer]
        n_out = W.shape[0]
        n_in = W.shape[1]
        y = np.empty((n, n_out), dtype=np.float64)
        Y = y
        with nogil:
            for i in range(n):
                for j in range(n_out):
                    Y[i, j] = b[j]
            if n > 0:
                _gemm(b'T', b'N', <int>n_out, <int>n, <int>n_in, 1.0,
                      &W[0, 0], <int>n_in, &A[0, 0], <int>n_in,
                      1.0, &Y[0, 0], <int>n_out)
        if layer < n_layers - 1:
            # numpy's SIMD tanh is ~4x faster than a scalar libm loop here.
            np.tanh(y, out=y)
        acts.append(y)
    return acts


def backward(list weights, list acts, grad_out, list grad_weights, list grad_biases,
             bint want_input=False):
    """Write parameter gradients into the supplied views; optionally return d/d(input)."""
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t layer, i, j, n, n_out, n_in
    cdef double[:, ::1] W, A, D, dA, dW
    cdef double[::1] db
    cdef double a
    cdef bint need_prev
    delta = np.array(grad_out, dtype=np.float64, order="C", copy=True)
    n = delta.shape[0]
    grad_in = None
    for layer in range(n_layers - 1, -1, -1):
        W = weights[layer]
        A = acts[layer]
        D = delta
        dW = grad_weights[layer]
        db = grad_biases[layer]
        n_out = W.shape[0]
        n_in = W.shape[1]
        need_prev = layer > 0 or want_input
        if need_prev:
            prev = np.empty((n, n_in), dtype=np.float64)
            dA = prev
        with nogil:
            if n > 0:
                _gemm(b'N', b'T', <int>n_in, <int>n_out, <int>n, 1.0,
                      &A[0, 0], <int>n_in, &D[0, 0], <int>n_out,
                      0.0, &dW[0, 0], <int>n_in)
            else:
                for i in range(n_out):
                    for j in range(n_in):
                        dW[i, j] = 0.0
            for j in range(n_out):
                db[j] = 0.0
            for i in range(n):
                for j in range(n_out):
                    db[j] += D[i, j]
            if need_prev and n > 0:
                _gemm(b'N', b'N', <int>n_in, <int>n, <int>n_out, 1.0,
                      &W[0, 0], <int>n_in, &D[0, 0], <int>n_out,
                      0.0, &dA[0, 0], <int>n_in)
                if layer > 0:
                    for i in range(n):
                        for j in range(n_in):
                            a = A[i, j]
                            dA[i, j] = dA[i, j] * (1.0 - a * a)
        if layer > 0:
            delta = prev
        elif want_input:
            grad_in = prev
    return grad_in


def gae(rewards, values, next_values, terminated, dones, double gamma, double lam):
    """Backward GAE recursion over (T, E) arrays; `dones` cuts the accumulation."""
    cdef double[:, ::1] r = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[:, ::1] nv = np.ascontiguousarray(next_values, dtype=np.float64)
    cdef unsigned char[:, ::1] term = np.ascontiguousarray(terminated, dtype=np.uint8)
    cdef unsigned char[:, ::1] done = np.ascontiguousarray(dones, dtype=np.uint8)
    cdef Py_ssize_t T = r.shape[0], E = r.shape[1], t, e
    out = np.empty((T, E), dtype=np.float64)
    cdef double[:, ::1] adv = out
    cdef double acc, boot, delta
    with nogil:
        for e in range(E):
            acc = 0.0
            for t in range(T - 1, -1, -1):
                boot = 0.0 if term[t, e] else nv[t, e]
                delta = r[t, e] + gamma * boot - v[t, e]
                if done[t, e]:
                    acc = delta
                else:
                    acc = delta + gamma * lam * acc
                adv[t, e] = acc
    return out
