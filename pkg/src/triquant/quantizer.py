"""Additive codebook quantization with a soft orthogonality penalty.

An item's code is one column index per codebook; its reconstruction is the sum
of the selected codewords. The quantization objective over a set of embedding
rows Z with codes B is

    Q = sum_i |z_i - sum_m C_m[:, b_im]|^2
        + gamma * sum_{m, m'} |C_m^T C_m' - I_K|_F^2

where the penalty runs over all ordered codebook pairs including m = m' (a
flag drops the diagonal terms). Codes are found by coordinate descent (each
codebook's index re-picked exhaustively with the others fixed); codebooks are
updated from a ridge-regularized least-squares solve optionally followed by
penalty-aware gradient steps.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .clustering import kmeans_plus_plus, lloyd
from .errors import FormatError

CODEBOOK_MAGIC = b"TQCB"
CODES_MAGIC = b"TQCD"


@dataclass
class CodebookSet:
    """M codebooks stacked as an (M, D, K) array; columns are codewords."""

    codebooks: np.ndarray

    def __post_init__(self):
        self.codebooks = np.asarray(self.codebooks, dtype=np.float64)
        if self.codebooks.ndim != 3:
            raise ValueError("codebooks must have shape (M, D, K)")
        if not np.all(np.isfinite(self.codebooks)):
            raise ValueError("codebooks contain non-finite entries")

    @property
    def m(self) -> int:
        return self.codebooks.shape[0]

    @property
    def d(self) -> int:
        return self.codebooks.shape[1]

    @property
    def k(self) -> int:
        return self.codebooks.shape[2]

    @property
    def code_bits(self) -> float:
        return self.m * np.log2(self.k)


@dataclass
class QuantConfig:
    """Quantizer hyperparameters; lam is the joint-loss weight used upstream."""

    gamma: float = 0.0
    lam: float = 0.0
    icm_max_iters: int = 3
    codebook_lr: float = 1e-3
    codebook_gd_steps: int = 20
    penalty_exclude_diagonal: bool = False

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lam must be non-negative")
        if self.icm_max_iters < 1:
            raise ValueError("icm_max_iters must be >= 1")
        if self.codebook_lr <= 0:
            raise ValueError("codebook_lr must be positive")
        if self.codebook_gd_steps < 0:
            raise ValueError("codebook_gd_steps must be >= 0")


def validate_codes(codes: np.ndarray, m: int, k: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2 or codes.shape[1] != m:
        raise ValueError(f"codes must have shape (N, {m})")
    if codes.size and (codes.min() < 0 or codes.max() >= k):
        raise ValueError(f"code index out of range [0, {k})")
    return codes


def reconstruct(codebooks: CodebookSet, code_row) -> np.ndarray:
    """Sum of the selected codewords, one per codebook."""
    code_row = np.asarray(code_row, dtype=np.int64)
    if code_row.shape != (codebooks.m,):
        raise ValueError(f"code row must have {codebooks.m} entries")
    if code_row.min() < 0 or code_row.max() >= codebooks.k:
        raise ValueError(f"code index out of range [0, {codebooks.k})")
    c = codebooks.codebooks
    return c[np.arange(codebooks.m), :, code_row].sum(axis=0)


def reconstruct_batch(codebooks: CodebookSet, codes: np.ndarray) -> np.ndarray:
    """Reconstructions for an (N, M) code matrix; returns (N, D)."""
    codes = validate_codes(codes, codebooks.m, codebooks.k)
    c = codebooks.codebooks
    out = np.zeros((codes.shape[0], codebooks.d))
    for m in range(codebooks.m):
        out += c[m][:, codes[:, m]].T
    return out


def _gram_penalty(c: np.ndarray, exclude_diagonal: bool) -> float:
    m, d, k = c.shape
    flat = c.transpose(1, 0, 2).reshape(d, m * k)
    gram = flat.T @ flat
    target = np.tile(np.eye(k), (m, m))
    total = float(np.sum((gram - target) ** 2))
    if exclude_diagonal:
        for i in range(m):
            total -= float(np.sum((c[i].T @ c[i] - np.eye(k)) ** 2))
    return total


def quantization_loss(
    z: np.ndarray,
    codebooks: CodebookSet,
    codes: np.ndarray,
    gamma: float,
    exclude_diagonal: bool = False,
) -> float:
    """Summed squared residuals plus gamma times the orthogonality penalty.

    z holds all rows being quantized (triplet roles are just rows here). The
    penalty sums |C_m^T C_m' - I_K|_F^2 over all ordered pairs, diagonal
    included unless exclude_diagonal is set.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    recon = reconstruct_batch(codebooks, codes)
    residual = float(np.sum((z - recon) ** 2))
    if gamma == 0.0:
        return residual
    return residual + gamma * _gram_penalty(codebooks.codebooks, exclude_diagonal)


def icm_encode_batch(
    codebooks: CodebookSet,
    z: np.ndarray,
    init_codes: np.ndarray | None = None,
    max_iters: int = 3,
) -> np.ndarray:
    """Encode rows of z by coordinate descent over the M sub-indices.

    Sweeps visit codebooks in order m = 0..M-1, re-picking each row's codeword
    exhaustively with the other codebooks fixed. Without init_codes each
    sub-index starts at its codebook's nearest codeword (other contributions
    treated as zero); otherwise the given codes are the warm start. Stops when
    a sweep changes nothing or max_iters sweeps elapse. The summed residual
    never increases across sweeps.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    c = codebooks.codebooks
    n_items = z.shape[0]
    if z.shape[1] != codebooks.d:
        raise ValueError(f"embeddings have dim {z.shape[1]}, codebooks {codebooks.d}")
    norms = np.sum(c * c, axis=1)  # (M, K)
    if init_codes is None:
        codes = np.empty((n_items, codebooks.m), dtype=np.int64)
        for m in range(codebooks.m):
            codes[:, m] = np.argmin(-2.0 * (z @ c[m]) + norms[m], axis=1)
    else:
        codes = validate_codes(init_codes, codebooks.m, codebooks.k).copy()
    recon = reconstruct_batch(codebooks, codes)
    prev = np.inf
    for _ in range(max_iters):
        changed = False
        for m in range(codebooks.m):
            contrib = c[m][:, codes[:, m]].T
            partial = z - (recon - contrib)
            new = np.argmin(-2.0 * (partial @ c[m]) + norms[m], axis=1)
            if not np.array_equal(new, codes[:, m]):
                changed = True
                recon += c[m][:, new].T - contrib
                codes[:, m] = new
        cur = float(np.sum((z - recon) ** 2))
        assert cur <= prev * (1.0 + 1e-9) + 1e-9, "residual increased across a sweep"
        prev = cur
        if not changed:
            break
    return codes


def icm_encode(
    codebooks: CodebookSet,
    z: np.ndarray,
    init_code=None,
    max_iters: int = 3,
) -> np.ndarray:
    """Single-row convenience wrapper around icm_encode_batch."""
    init = None if init_code is None else np.asarray(init_code, dtype=np.int64)[None, :]
    return icm_encode_batch(codebooks, np.asarray(z)[None, :], init, max_iters)[0]


def pad_to_multiple(z: np.ndarray, m: int) -> np.ndarray:
    """Zero-pad columns so the width divides evenly into m blocks."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    pad = (-z.shape[1]) % m
    if pad == 0:
        return z
    return np.hstack([z, np.zeros((z.shape[0], pad))])


def init_product_quantization(
    embeddings: np.ndarray,
    m: int,
    k: int,
    kmeans_iters: int = 25,
    seed: int = 0,
) -> tuple[CodebookSet, np.ndarray]:
    """Per-subspace k-means initialization of codebooks and codes.

    Splits each D-vector into m contiguous blocks of D/m columns, clusters each
    block to k centroids (kmeans++ seeding, Lloyd iterations, one derived seed
    per subspace), and embeds the centroids into full-D codebooks that are zero
    outside their block.

    Raises:
        ValueError: D not divisible by m (pad_to_multiple first).
    """
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n, d = z.shape
    if d % m != 0:
        raise ValueError(f"embedding dim {d} not divisible by {m} subspaces")
    if n < k:
        warnings.warn(
            f"fewer points ({n}) than codewords ({k}); duplicate centroids expected"
        )
    ds = d // m
    codebooks = np.zeros((m, d, k))
    codes = np.empty((n, m), dtype=np.int64)
    for i in range(m):
        sub = z[:, i * ds : (i + 1) * ds]
        rng = np.random.default_rng([seed, i])
        init = kmeans_plus_plus(sub, k, rng)
        centroids, labels, _ = lloyd(sub, init, kmeans_iters)
        codebooks[i, i * ds : (i + 1) * ds, :] = centroids.T
        codes[:, i] = labels
    return CodebookSet(codebooks), codes


def codebook_gradient(
    codebooks: CodebookSet,
    z: np.ndarray,
    codes: np.ndarray,
    gamma: float,
    exclude_diagonal: bool = False,
) -> np.ndarray:
    """Exact gradient of quantization_loss w.r.t. every codebook entry.

    Residual part (block m, codeword k): 2 * sum over rows assigned k in
    codebook m of (reconstruction - z). Penalty part per block:
    4*gamma*(sum_m' C_m' C_m'^T @ C_m - sum_m' C_m'), the gradient of the
    all-pairs Gram penalty; with exclude_diagonal the m'=m terms drop out.
    Returns an array shaped like the codebooks.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    codes = validate_codes(codes, codebooks.m, codebooks.k)
    c = codebooks.codebooks
    m_books, d, k = c.shape
    grad = np.zeros_like(c)
    err = reconstruct_batch(codebooks, codes) - z  # (N, D)
    for m in range(m_books):
        acc = np.zeros((k, d))
        np.add.at(acc, codes[:, m], err)
        grad[m] = 2.0 * acc.T
    if gamma > 0.0:
        outer = np.einsum("mdk,mek->de", c, c)  # sum_m C_m C_m^T
        total = c.sum(axis=0)  # sum_m C_m
        for m in range(m_books):
            if exclude_diagonal:
                own = c[m] @ (c[m].T @ c[m])
                grad[m] += 4.0 * gamma * ((outer @ c[m] - own) - (total - c[m]))
            else:
                grad[m] += 4.0 * gamma * (outer @ c[m] - total)
    return grad


def update_codebooks(
    codebooks: CodebookSet,
    z: np.ndarray,
    codes: np.ndarray,
    config: QuantConfig,
) -> CodebookSet:
    """Least-squares codebook refresh plus optional penalty-aware descent.

    Step 1 solves the gamma=0 normal equations for all codebooks jointly,
    C = (Z B^T)(B B^T + eps I)^{-1} with ridge eps = 1e-6 * trace / (M K), so
    unused codewords cannot make the system singular. Step 2 (only when
    gamma > 0) runs up to codebook_gd_steps gradient steps from that start,
    halving the step size whenever the objective would rise, so the returned
    codebooks never score worse than the analytic start.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    codes = validate_codes(codes, codebooks.m, codebooks.k)
    if codes.shape[0] == 0:
        raise ValueError("cannot update codebooks from zero assigned codes")
    m_books, d, k = codebooks.codebooks.shape
    mk = m_books * k

    bbt = np.zeros((mk, mk))
    zbt = np.zeros((d, mk))
    for m in range(m_books):
        for m2 in range(m_books):
            pair = np.bincount(codes[:, m] * k + codes[:, m2], minlength=k * k)
            bbt[m * k : (m + 1) * k, m2 * k : (m2 + 1) * k] = pair.reshape(k, k)
        acc = np.zeros((k, d))
        np.add.at(acc, codes[:, m], z)
        zbt[:, m * k : (m + 1) * k] = acc.T
    eps = 1e-6 * np.trace(bbt) / mk
    flat = np.linalg.solve(bbt + eps * np.eye(mk), zbt.T).T  # (D, MK)
    updated = CodebookSet(flat.reshape(d, m_books, k).transpose(1, 0, 2))

    if config.gamma > 0.0 and config.codebook_gd_steps > 0:
        exclude = config.penalty_exclude_diagonal
        best = quantization_loss(z, updated, codes, config.gamma, exclude)
        lr = config.codebook_lr
        for _ in range(config.codebook_gd_steps):
            grad = codebook_gradient(updated, z, codes, config.gamma, exclude)
            stepped = None
            for _try in range(30):
                cand = CodebookSet(updated.codebooks - lr * grad)
                q = quantization_loss(z, cand, codes, config.gamma, exclude)
                if q <= best:
                    stepped = (cand, q)
                    break
                lr *= 0.5
            if stepped is None:
                break
            updated, best = stepped
    return updated


def update_codebooks_blockwise(
    codebooks: CodebookSet,
    z: np.ndarray,
    codes: np.ndarray,
) -> CodebookSet:
    """Per-subspace centroid update for block-structured (product) codebooks.

    Each codebook owns a contiguous block of rows; codeword k of block m
    becomes the mean of the block-m slices of the rows assigned to it. Empty
    codewords keep their previous value. Requires D divisible by M.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    codes = validate_codes(codes, codebooks.m, codebooks.k)
    if codes.shape[0] == 0:
        raise ValueError("cannot update codebooks from zero assigned codes")
    m_books, d, k = codebooks.codebooks.shape
    if d % m_books != 0:
        raise ValueError("blockwise update requires D divisible by M")
    ds = d // m_books
    new = codebooks.codebooks.copy()
    for m in range(m_books):
        block = z[:, m * ds : (m + 1) * ds]
        counts = np.bincount(codes[:, m], minlength=k).astype(np.float64)
        sums = np.zeros((k, ds))
        np.add.at(sums, codes[:, m], block)
        used = counts > 0
        # advanced (bool) + scalar indexes land first: target shape (n_used, ds)
        new[m, m * ds : (m + 1) * ds, used] = sums[used] / counts[used, None]
    return CodebookSet(new)


def save_codebooks(path, codebooks: CodebookSet) -> None:
    """Codebook file: magic, M, K, D header + float64 LE codewords
    (codebook-major, then column-major within each codebook)."""
    c = codebooks.codebooks
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", CODEBOOK_MAGIC, codebooks.m, codebooks.k, codebooks.d))
        fh.write(np.ascontiguousarray(c.transpose(0, 2, 1), dtype="<f8").tobytes())


def load_codebooks(path) -> CodebookSet:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise FormatError(f"{path}: truncated header")
        magic, m, k, d = struct.unpack("<4sIII", header)
        if magic != CODEBOOK_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        payload = fh.read()
    expected = m * k * d * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(m, k, d).transpose(0, 2, 1)
    return CodebookSet(arr.copy())


def save_codes(path, codes: np.ndarray, k: int) -> None:
    """Code file: magic, N, M, K header + one byte per sub-index for K <= 256,
    two (LE) otherwise."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2:
        raise ValueError("codes must have shape (N, M)")
    if codes.size and (codes.min() < 0 or codes.max() >= k):
        raise ValueError(f"code index out of range [0, {k})")
    dtype = "<u1" if k <= 256 else "<u2"
    if k > 65536:
        raise ValueError("K beyond two-byte sub-indices is unsupported")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", CODES_MAGIC, codes.shape[0], codes.shape[1], k))
        fh.write(np.ascontiguousarray(codes, dtype=dtype).tobytes())


def load_codes(path) -> tuple[np.ndarray, int]:
    """Returns (codes, K)."""
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise FormatError(f"{path}: truncated header")
        magic, n, m, k = struct.unpack("<4sIII", header)
        if magic != CODES_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        payload = fh.read()
    width = 1 if k <= 256 else 2
    if len(payload) != n * m * width:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {n * m * width}")
    dtype = "<u1" if k <= 256 else "<u2"
    codes = np.frombuffer(payload, dtype=dtype).reshape(n, m).astype(np.int64)
    if codes.size and codes.max() >= k:
        raise FormatError(f"{path}: sub-index exceeds K={k}")
    return codes, k
