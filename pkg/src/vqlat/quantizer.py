"""Discrete latent space: nearest-entry quantization, straight-through
gradients, the three-term objective, moving-average codebook updates, and a
Gumbel-softmax selection alternative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

# An entry whose running count decays below this is considered dead and is
# reseeded from the current batch.
DEAD_COUNT_THRESHOLD = 1e-3

_SCHEMES = ("kmeans", "gumbel")


@dataclass
class QuantizerConfig:
    scheme: str = "kmeans"
    commitment_beta: float = 0.25
    gumbel_tau: float = 1.0
    use_ema: bool = True
    include_codebook_term: bool = False

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ContractError(f"unknown quantizer scheme {self.scheme!r}")
        if not self.commitment_beta < 1.0:
            raise ContractError(f"commitment weight must be < 1, got {self.commitment_beta}")
        if not self.gumbel_tau > 0.0:
            raise ContractError(f"gumbel temperature must be positive, got {self.gumbel_tau}")

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "commitment_beta": self.commitment_beta,
                "gumbel_tau": self.gumbel_tau, "use_ema": self.use_ema,
                "include_codebook_term": self.include_codebook_term}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerConfig":
        return cls(**d)


class Codebook:
    """Latent embedding table with moving-average accumulators.

    Invariant maintained by every update: for live entries the table row
    equals ``sums[k] / counts[k]``.
    """

    def __init__(self, entries: np.ndarray, decay: float = 0.99,
                 counts: np.ndarray | None = None, sums: np.ndarray | None = None,
                 seed: int = 0):
        entries = np.asarray(entries, dtype=np.float32)
        if entries.ndim != 2 or entries.shape[0] == 0:
            raise ContractError(f"codebook entries must be a nonempty [K, I] array, got shape {entries.shape}")
        if not 0.0 <= decay < 1.0:
            raise ContractError(f"decay must lie in [0, 1), got {decay}")
        self.entries = entries.copy()
        self.decay = float(decay)
        self.counts = (np.ones(entries.shape[0], dtype=np.float64) if counts is None
                       else np.asarray(counts, dtype=np.float64).copy())
        self.sums = (self.entries.astype(np.float64) * self.counts[:, None] if sums is None
                     else np.asarray(sums, dtype=np.float64).copy())
        self._rng = np.random.default_rng(seed)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def init_from_data(cls, data: np.ndarray, k: int, rng: np.random.Generator,
                       decay: float = 0.99, seed: int = 0) -> "Codebook":
        """Seed ``k`` entries from observed vectors by farthest-point traversal.

        Plain uniform draws routinely plant several entries inside one tight
        cluster and leave another cluster unclaimed; greedily taking the
        point farthest from the entries chosen so far covers every
        well-separated cluster before refining within one.
        """
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] == 0:
            raise ContractError("init_from_data: need a nonempty [N, I] array")
        n = data.shape[0]
        chosen = [int(rng.integers(n))]
        d2 = np.sum((data - data[chosen[0]]) ** 2, axis=1)
        while len(chosen) < k:
            if d2.max() <= 0.0:
                chosen.append(int(rng.integers(n)))
            else:
                chosen.append(int(np.argmax(d2)))
            d2 = np.minimum(d2, np.sum((data - data[chosen[-1]]) ** 2, axis=1))
        return cls(data[chosen].astype(np.float32), decay=decay, seed=seed)


def _pairwise_sq_dists(vectors: np.ndarray, entries: np.ndarray,
                       chunk: int = 1024) -> np.ndarray:
    """Squared Euclidean distances [N, K] via the explicit difference form.

    Computed exactly as a per-pair sum of squared differences so results are
    bit-identical to a row-by-row scan.
    """
    vectors = np.asarray(vectors)
    out = np.empty((vectors.shape[0], entries.shape[0]), dtype=np.result_type(vectors, entries))
    for start in range(0, vectors.shape[0], chunk):
        block = vectors[start:start + chunk]
        diff = block[:, None, :] - entries[None, :, :]
        out[start:start + chunk] = np.sum(diff * diff, axis=-1)
    return out


def quantize_kmeans(embeddings: np.ndarray, codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Map each row to its nearest entry (L2); ties resolve to the lowest index."""
    embeddings = np.asarray(embeddings)
    if embeddings.ndim != 2:
        raise ShapeError(f"quantize_kmeans: expected [L, I], got shape {embeddings.shape}")
    if embeddings.shape[1] != codebook.dim:
        raise ShapeError(f"quantize_kmeans: embedding width {embeddings.shape[1]} != codebook width {codebook.dim}")
    entries = codebook.entries.astype(embeddings.dtype, copy=False)
    dists = _pairwise_sq_dists(embeddings, entries)
    indices = np.argmin(dists, axis=1)
    return indices, entries[indices].copy()


def quantize_gumbel(scores: np.ndarray, codebook: Codebook, tau: float,
                    rng: np.random.Generator,
                    noise: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sample entry indices by perturbing log-scores with Gumbel noise.

    ``scores`` are positive per-entry weights [L, K].  The temperature
    rescales the perturbed scores but never changes the argmax; passing a
    fixed ``noise`` array makes that invariance directly observable.
    """
    if tau <= 0.0:
        raise ContractError(f"gumbel temperature must be positive, got {tau}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != codebook.size:
        raise ShapeError(f"quantize_gumbel: expected [L, {codebook.size}] scores, got {scores.shape}")
    if (scores <= 0.0).any():
        raise ContractError("quantize_gumbel: scores must be strictly positive")
    if noise is None:
        u = rng.random(scores.shape)
        noise = -np.log(-np.log(u))
    perturbed = (np.log(scores) + noise) / tau
    indices = np.argmax(perturbed, axis=1)
    return indices, codebook.entries[indices].copy()


def straight_through(encoder_out: Tensor, quantized: np.ndarray) -> Tensor:
    """Realize ``encoder_out + sg(quantized - encoder_out)``.

    Forward equals the quantized values exactly; the backward Jacobian with
    respect to the encoder output is exactly the identity.
    """
    return ad.substitute_forward(encoder_out, quantized)


def vq_loss(encoder_out: Tensor, quantized, reconstruction_ce: Tensor,
            beta: float, include_codebook_term: bool = False,
            reduction: str = "sum") -> Tensor:
    """Three-term objective: reconstruction + codebook pull + commitment.

    The codebook term ``||sg(E) - z_q||^2`` is omitted by default because
    moving-average updates replace its gradient; set
    ``include_codebook_term=True`` to keep its value in the total (and its
    gradient, whenever ``quantized`` is a graph tensor).  ``reduction``
    chooses between the plain summed squared norms and their elementwise
    mean, which trainers prefer for scale balance.
    """
    if reduction not in ("sum", "mean"):
        raise ContractError(f"vq_loss: unknown reduction {reduction!r}")
    zq = quantized if isinstance(quantized, Tensor) else Tensor(
        np.asarray(quantized, dtype=encoder_out.data.dtype))
    if zq.shape != encoder_out.shape:
        raise ShapeError(f"vq_loss: shapes {encoder_out.shape} and {zq.shape} disagree")

    def sq_norm(t: Tensor) -> Tensor:
        total = ad.sum_(ad.mul(t, t))
        return ad.mul(total, 1.0 / t.size) if reduction == "mean" else total

    loss = reconstruction_ce
    if include_codebook_term:
        loss = ad.add(loss, sq_norm(ad.sub(ad.stop_gradient(encoder_out), zq)))
    commitment = sq_norm(ad.sub(encoder_out, ad.stop_gradient(zq)))
    return ad.add(loss, ad.mul(commitment, float(beta)))


def ema_update(codebook: Codebook, embeddings: np.ndarray, indices: np.ndarray) -> None:
    """Fold one batch of assigned embeddings into the codebook.

    counts_k <- counts_k * decay + n_k * (1 - decay)
    sums_k   <- sums_k * decay + (1 - decay) * sum of assigned embeddings
    entry_k  <- sums_k / counts_k

    Entries receiving nothing decay both accumulators, which leaves their
    position unchanged.  Entries whose count underflows the dead threshold
    are reseeded to a random embedding from this batch.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    indices = np.asarray(indices)
    if embeddings.shape[0] != indices.shape[0]:
        raise ShapeError(f"ema_update: {embeddings.shape[0]} embeddings vs {indices.shape[0]} assignments")
    lam = codebook.decay
    k = codebook.size

    n = np.bincount(indices, minlength=k).astype(np.float64)
    batch_sums = np.zeros((k, codebook.dim), dtype=np.float64)
    np.add.at(batch_sums, indices, embeddings)

    codebook.counts = codebook.counts * lam + n * (1.0 - lam)
    codebook.sums = codebook.sums * lam + (1.0 - lam) * batch_sums

    dead = codebook.counts < DEAD_COUNT_THRESHOLD
    live = ~dead & (codebook.counts > 0)
    codebook.entries[live] = (codebook.sums[live] / codebook.counts[live, None]).astype(np.float32)
    if dead.any() and embeddings.shape[0] > 0:
        for idx in np.flatnonzero(dead):
            seed_row = embeddings[int(codebook._rng.integers(embeddings.shape[0]))]
            codebook.entries[idx] = seed_row.astype(np.float32)
            codebook.counts[idx] = 1.0
            codebook.sums[idx] = seed_row
    elif dead.any():
        raise ContractError("ema_update: dead entries but empty batch to reseed from")


def kl_to_uniform_prior(codebook_size: int) -> float:
    """KL divergence of a one-hot posterior against the uniform prior: log K."""
    if codebook_size < 1:
        raise ContractError(f"codebook size must be positive, got {codebook_size}")
    return math.log(codebook_size)
