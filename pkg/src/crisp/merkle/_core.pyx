# cython: boundscheck=False, wraparound=False
"""Compiled hash kernel (OpenSSL SHA-256).

Byte-identical to crisp.merkle._kernel_pure; selected at import when built.
"""

from libc.string cimport memcpy
from cpython.bytes cimport PyBytes_FromStringAndSize, PyBytes_AsStringAndSize

cdef extern from "openssl/evp.h":
    ctypedef struct EVP_MD
    ctypedef struct EVP_MD_CTX
    const EVP_MD *EVP_sha256()
    EVP_MD_CTX *EVP_MD_CTX_new()
    void EVP_MD_CTX_free(EVP_MD_CTX *ctx)
    int EVP_DigestInit_ex(EVP_MD_CTX *ctx, const EVP_MD *md, void *impl)
    int EVP_DigestUpdate(EVP_MD_CTX *ctx, const void *d, size_t cnt)
    int EVP_DigestFinal_ex(EVP_MD_CTX *ctx, unsigned char *out, unsigned int *outlen)

IMPLEMENTATION = "compiled"

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x02"

DEF DIGEST = 32

cdef unsigned char LEAF_BYTE = 0x00
cdef unsigned char NODE_BYTE = 0x02


cdef inline void _u32be(unsigned char *dst, unsigned long v):
    dst[0] = (v >> 24) & 0xff
    dst[1] = (v >> 16) & 0xff
    dst[2] = (v >> 8) & 0xff
    dst[3] = v & 0xff


cdef inline void _u64be(unsigned char *dst, unsigned long long v):
    cdef int i
    for i in range(8):
        dst[i] = (v >> (56 - 8 * i)) & 0xff


def chunk_leaf_digests(bytes path, unsigned long long start_index, chunks):
    """Leaf digest per chunk: H(0x00 | len(path) u32be | path | index u64be | chunk)."""
    cdef EVP_MD_CTX *ctx = EVP_MD_CTX_new()
    if ctx == NULL:
        raise MemoryError()
    cdef const EVP_MD *md = EVP_sha256()
    cdef unsigned char head[5]
    cdef unsigned char idxbuf[8]
    cdef unsigned char digest[DIGEST]
    cdef unsigned int dlen
    cdef char *pdata
    cdef Py_ssize_t plen
    cdef char *cdata
    cdef Py_ssize_t clen
    cdef unsigned long long index = start_index
    PyBytes_AsStringAndSize(path, &pdata, &plen)
    head[0] = LEAF_BYTE
    _u32be(&head[1], <unsigned long> plen)
    out = []
    try:
        for chunk in chunks:
            PyBytes_AsStringAndSize(chunk, &cdata, &clen)
            _u64be(idxbuf, index)
            if (EVP_DigestInit_ex(ctx, md, NULL) != 1
                    or EVP_DigestUpdate(ctx, head, 5) != 1
                    or EVP_DigestUpdate(ctx, pdata, plen) != 1
                    or EVP_DigestUpdate(ctx, idxbuf, 8) != 1
                    or EVP_DigestUpdate(ctx, cdata, clen) != 1
                    or EVP_DigestFinal_ex(ctx, digest, &dlen) != 1):
                raise RuntimeError("sha256 failure")
            out.append(PyBytes_FromStringAndSize(<char *> digest, DIGEST))
            index += 1
    finally:
        EVP_MD_CTX_free(ctx)
    return out


def hash_pair(bytes left, bytes right):
    if len(left) != DIGEST or len(right) != DIGEST:
        raise ValueError("digests must be 32 bytes")
    cdef EVP_MD_CTX *ctx = EVP_MD_CTX_new()
    if ctx == NULL:
        raise MemoryError()
    cdef unsigned char digest[DIGEST]
    cdef unsigned int dlen
    try:
        if (EVP_DigestInit_ex(ctx, EVP_sha256(), NULL) != 1
                or EVP_DigestUpdate(ctx, &NODE_BYTE, 1) != 1
                or EVP_DigestUpdate(ctx, <char *> left, DIGEST) != 1
                or EVP_DigestUpdate(ctx, <char *> right, DIGEST) != 1
                or EVP_DigestFinal_ex(ctx, digest, &dlen) != 1):
            raise RuntimeError("sha256 failure")
        return PyBytes_FromStringAndSize(<char *> digest, DIGEST)
    finally:
        EVP_MD_CTX_free(ctx)


cdef Py_ssize_t _reduce_into(const unsigned char *src, Py_ssize_t n,
                             unsigned char *dst, EVP_MD_CTX *ctx,
                             const EVP_MD *md) except -1:
    """Reduce n nodes at src into dst; returns the output node count."""
    cdef Py_ssize_t i, pairs = n // 2
    cdef unsigned int dlen
    for i in range(pairs):
        if (EVP_DigestInit_ex(ctx, md, NULL) != 1
                or EVP_DigestUpdate(ctx, &NODE_BYTE, 1) != 1
                or EVP_DigestUpdate(ctx, src + 2 * i * DIGEST, 2 * DIGEST) != 1
                or EVP_DigestFinal_ex(ctx, dst + i * DIGEST, &dlen) != 1):
            raise RuntimeError("sha256 failure")
    if n % 2:
        memcpy(dst + pairs * DIGEST, src + (n - 1) * DIGEST, DIGEST)
        return pairs + 1
    return pairs


def reduce_level(bytes nodes):
    """One tree level up: hash adjacent pairs, promote an odd tail unchanged."""
    cdef Py_ssize_t total = len(nodes)
    if total % DIGEST:
        raise ValueError("node buffer not a multiple of 32 bytes")
    cdef Py_ssize_t n = total // DIGEST
    cdef Py_ssize_t out_n = n // 2 + (n % 2)
    out = PyBytes_FromStringAndSize(NULL, out_n * DIGEST)
    cdef EVP_MD_CTX *ctx = EVP_MD_CTX_new()
    if ctx == NULL:
        raise MemoryError()
    try:
        _reduce_into(<const unsigned char *> (<char *> nodes), n,
                     <unsigned char *> (<char *> out), ctx, EVP_sha256())
    finally:
        EVP_MD_CTX_free(ctx)
    return out


def merkle_root(bytes leaves):
    """Root over a non-empty concatenated leaf buffer."""
    cdef Py_ssize_t total = len(leaves)
    if total == 0:
        raise ValueError("merkle_root requires at least one leaf")
    if total % DIGEST:
        raise ValueError("node buffer not a multiple of 32 bytes")
    cdef Py_ssize_t n = total // DIGEST
    if n == 1:
        return leaves
    cdef bytearray buf = bytearray(leaves)
    cdef unsigned char *work = <unsigned char *> buf
    cdef EVP_MD_CTX *ctx = EVP_MD_CTX_new()
    if ctx == NULL:
        raise MemoryError()
    cdef const EVP_MD *md = EVP_sha256()
    try:
        while n > 1:
            n = _reduce_into(work, n, work, ctx, md)
    finally:
        EVP_MD_CTX_free(ctx)
    return PyBytes_FromStringAndSize(<char *> work, DIGEST)
