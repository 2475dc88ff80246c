"""Latent-space control and measurement.

Everything here operates on quantized latent rows and a codebook snapshot:
interpolation paths with their smoothness ratio, exact optimal-transport
alignment between embedding bags, per-position traversal, latent addition,
role-content dispersion statistics, and span substitution between premises.
All functions are pure given the model/codebook snapshot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .corpus import role_spans
from .errors import ContractError, NoAnchorError, ShapeError
from .quantizer import Codebook, quantize_kmeans

DecodeFn = Callable[[np.ndarray], list]
EmbedFn = Callable[[list], np.ndarray]

ARG_ROLES = {"ARG0", "ARG1", "ARG2"}


# -- interpolation --------------------------------------------------------------


@dataclass
class PathStep:
    t: float
    latents: np.ndarray
    indices: np.ndarray
    decoded: list


@dataclass
class InterpolationPath:
    steps: list[PathStep]
    step_size: float


def _require_quantized(latents: np.ndarray, codebook: Codebook, name: str) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 2 or latents.shape[1] != codebook.dim:
        raise ShapeError(f"{name}: expected [L, {codebook.dim}] latents, got {latents.shape}")
    indices, snapped = quantize_kmeans(latents, codebook)
    if not np.array_equal(snapped, latents):
        raise ContractError(f"{name}: latent rows must be codebook entries")
    return indices


def _euclidean_to_entries(rows: np.ndarray, entries: np.ndarray) -> np.ndarray:
    diff = rows[:, None, :].astype(np.float64) - entries[None, :, :].astype(np.float64)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def interpolate(source: np.ndarray, target: np.ndarray, codebook: Codebook,
                decode_fn: DecodeFn, step_size: float = 0.1,
                pad_latent: np.ndarray | None = None) -> InterpolationPath:
    """Stepwise path from source to target latent rows.

    At each step every row moves to the entry minimizing the weighted pair of
    distances ``(1-t)*d(previous, entry) + t*d(target, entry)``, so the final
    step lands exactly on the target entries.  Unequal lengths require a
    ``pad_latent`` row (appended to the shorter sequence) and are otherwise
    rejected.
    """
    source = np.asarray(source, dtype=np.float32)
    target = np.asarray(target, dtype=np.float32)
    if source.shape[0] != target.shape[0]:
        if pad_latent is None:
            raise ContractError(
                f"length mismatch {source.shape[0]} vs {target.shape[0]} and no pad latent given")
        pad = np.asarray(pad_latent, dtype=np.float32).reshape(1, -1)
        while source.shape[0] < target.shape[0]:
            source = np.concatenate([source, pad])
        while target.shape[0] < source.shape[0]:
            target = np.concatenate([target, pad])
    src_idx = _require_quantized(source, codebook, "interpolate source")
    tgt_idx = _require_quantized(target, codebook, "interpolate target")
    if not 0.0 < step_size <= 1.0:
        raise ContractError(f"step_size must lie in (0, 1], got {step_size}")

    entries = codebook.entries
    tgt_dists = _euclidean_to_entries(target, entries)
    n_steps = round(1.0 / step_size)
    steps = [PathStep(0.0, source.copy(), src_idx.copy(), decode_fn(source))]
    current = source
    for k in range(1, n_steps + 1):
        t = min(k * step_size, 1.0) if k < n_steps else 1.0
        cost = (1.0 - t) * _euclidean_to_entries(current, entries) + t * tgt_dists
        idx = np.argmin(cost, axis=1)
        current = entries[idx].copy()
        steps.append(PathStep(t, current, idx, decode_fn(current)))
    return InterpolationPath(steps, step_size)


def dump_path(path: InterpolationPath) -> str:
    lines = []
    for step in path.steps:
        indices = ",".join(str(int(i)) for i in step.indices)
        sentence = " ".join(str(tok) for tok in step.decoded)
        lines.append(f"{step.t:.2f}\t{indices}\t{sentence}")
    return "\n".join(lines) + "\n"


# -- word mover's distance -------------------------------------------------------


@dataclass
class AlignmentResult:
    cost: float
    plan: np.ndarray  # [len(a), len(b)] transported mass


def wmd(a: np.ndarray, b: np.ndarray) -> AlignmentResult:
    """Exact optimal transport between two uniform bags of embeddings.

    Each side distributes unit mass uniformly over its rows; ground cost is
    Euclidean distance.  Both sides are expanded to lcm-many equal atoms,
    which reduces the problem to an assignment solved exactly.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("wmd: empty sequence")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"wmd: embedding widths {a.shape[1]} and {b.shape[1]} disagree")
    la, lb = a.shape[0], b.shape[0]
    diff = a[:, None, :] - b[None, :, :]
    base_cost = np.sqrt(np.sum(diff * diff, axis=-1))

    size = math.lcm(la, lb)
    rep_a, rep_b = size // la, size // lb
    expanded = np.repeat(np.repeat(base_cost, rep_a, axis=0), rep_b, axis=1)
    rows, cols = linear_sum_assignment(expanded)

    plan = np.zeros((la, lb))
    for r, c in zip(rows, cols):
        plan[r // rep_a, c // rep_b] += 1.0 / size
    cost = float(expanded[rows, cols].sum() / size)
    return AlignmentResult(cost, plan)


def interpolation_smoothness(path: InterpolationPath, embed_fn: EmbedFn) -> float:
    """Direct source-to-target cost over the summed stepwise costs.

    Consecutive duplicate decoded sentences are collapsed first; a degenerate
    all-identical path is 1.0 by convention.
    """
    if len(path.steps) < 2:
        raise ContractError("interpolation_smoothness: need at least two steps")
    unique: list[list] = []
    for step in path.steps:
        if not unique or list(step.decoded) != unique[-1]:
            unique.append(list(step.decoded))
    if len(unique) < 2:
        return 1.0
    embeddings = [embed_fn(sentence) for sentence in unique]
    denom = sum(wmd(embeddings[i], embeddings[i + 1]).cost for i in range(len(embeddings) - 1))
    if denom <= 1e-12:
        return 1.0
    return wmd(embeddings[0], embeddings[-1]).cost / denom


# -- traversal and arithmetic ------------------------------------------------------


def traverse_position(latents: np.ndarray, position: int, codebook: Codebook,
                      n_variants: int, decode_fn: DecodeFn) -> list[list]:
    """Decode variants that swap one latent row for its nearest neighbours.

    The first variant keeps the row itself (its nearest entry); the rest use
    the next-nearest entries in distance order.
    """
    latents = np.asarray(latents, dtype=np.float32)
    if not 0 <= position < latents.shape[0]:
        raise ContractError(f"position {position} outside sequence of {latents.shape[0]} rows")
    if not 1 <= n_variants <= codebook.size:
        raise ContractError(f"n_variants must lie in [1, {codebook.size}], got {n_variants}")
    dists = _euclidean_to_entries(latents[position:position + 1], codebook.entries)[0]
    order = np.argsort(dists, kind="stable")[:n_variants]
    outputs = []
    for entry_idx in order:
        variant = latents.copy()
        variant[position] = codebook.entries[entry_idx]
        outputs.append(decode_fn(variant))
    return outputs


@dataclass
class ArithmeticResult:
    indices: np.ndarray
    quantized: np.ndarray
    decoded: list


def latent_arithmetic_add(a: np.ndarray, b: np.ndarray, codebook: Codebook,
                          decode_fn: DecodeFn) -> ArithmeticResult:
    """Position-wise sum over the shared prefix, re-quantized and decoded."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    rows = min(a.shape[0], b.shape[0])
    total = a[:rows] + b[:rows]
    indices, quantized = quantize_kmeans(total, codebook)
    return ArithmeticResult(indices, quantized, decode_fn(quantized))


# -- disentanglement statistics ------------------------------------------------------


@dataclass
class RoleContentStats:
    label: str
    num_centers: int
    avg_dis: float
    max_dis: float
    min_dis: float


def disentanglement_stats(occurrences: Sequence[tuple[list[str], list[str], np.ndarray]],
                          codebook: Codebook) -> list[RoleContentStats]:
    """Dispersion of each role-content pair over the codebook.

    ``occurrences`` holds (tokens, roles, entry indices) per sentence.  For
    every role-content label the distinct assigned entries are collected;
    distances are pairwise Euclidean among those entries, zero when a single
    center is used.
    """
    centers: dict[str, set[int]] = {}
    for tokens, roles, indices in occurrences:
        if not (len(tokens) == len(roles) == len(indices)):
            raise ContractError("tokens, roles, and indices must align")
        for tok, role, idx in zip(tokens, roles, indices):
            if role == "O":
                continue
            centers.setdefault(f"{role}-{tok}", set()).add(int(idx))

    stats = []
    for label in sorted(centers):
        idxs = sorted(centers[label])
        if len(idxs) == 1:
            stats.append(RoleContentStats(label, 1, 0.0, 0.0, 0.0))
            continue
        entries = codebook.entries[idxs].astype(np.float64)
        dists = [float(np.linalg.norm(entries[i] - entries[j]))
                 for i in range(len(idxs)) for j in range(i + 1, len(idxs))]
        stats.append(RoleContentStats(label, len(idxs),
                                      float(np.mean(dists)), max(dists), min(dists)))
    return stats


# -- substitution inference ------------------------------------------------------------


@dataclass
class SentenceLatents:
    tokens: list[str]
    roles: list[str]
    latents: np.ndarray

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float32)
        if len(self.tokens) != len(self.roles) or self.latents.shape[0] != len(self.tokens):
            raise ContractError("tokens, roles, and latent rows must align")


def _spans_with_words(sent: SentenceLatents, roles: set[str]):
    return [(start, end, tuple(sent.tokens[start:end]))
            for start, end in role_spans(sent.roles, roles)]


def _substitution(p1: SentenceLatents, p2: SentenceLatents,
                  p2_roles: set[str]) -> np.ndarray:
    """Replace P2's shared span with P1's counterpart span, in latent rows.

    The shared span is the first P2 span (of the requested roles) whose words
    also fill a P1 argument span.  The counterpart is the first P1 argument
    span absent from P2; identical premises therefore substitute the span
    with itself.
    """
    p1_args = _spans_with_words(p1, ARG_ROLES)
    p2_candidates = _spans_with_words(p2, p2_roles)
    p2_all = {words for _, _, words in _spans_with_words(p2, ARG_ROLES | {"PRED"})}

    shared = None
    shared_p1 = None
    for start, end, words in p2_candidates:
        for s1, e1, w1 in p1_args:
            if words == w1:
                shared, shared_p1 = (start, end), (s1, e1)
                break
        if shared:
            break
    if shared is None:
        raise NoAnchorError("no shared span between premises")

    counterpart = next(((s, e) for s, e, w in p1_args if w not in p2_all), shared_p1)
    return np.concatenate([p2.latents[:shared[0]],
                           p1.latents[counterpart[0]:counterpart[1]],
                           p2.latents[shared[1]:]])


def _further_specification(p1: SentenceLatents, p2: SentenceLatents) -> np.ndarray:
    mods = role_spans(p1.roles, {"MOD"})
    if not mods:
        raise NoAnchorError("first premise has no MOD span to append")
    start, end = mods[0]
    if start > 0 and p1.tokens[start - 1] == "to":
        start -= 1
    return np.concatenate([p2.latents, p1.latents[start:end]])


def _conjunction(p1: SentenceLatents, p2: SentenceLatents,
                 and_latent: np.ndarray | None) -> np.ndarray:
    if and_latent is None:
        raise ContractError("conjunction requires the connective's codebook latent")
    len1, len2 = len(p1.tokens), len(p2.tokens)
    pre = 0
    while pre < min(len1, len2) and p1.tokens[pre] == p2.tokens[pre]:
        pre += 1
    suf = 0
    while (suf < min(len1, len2) - pre
           and p1.tokens[len1 - 1 - suf] == p2.tokens[len2 - 1 - suf]):
        suf += 1
    mid1 = p1.latents[pre:len1 - suf]
    mid2 = p2.latents[pre:len2 - suf]
    if mid1.shape[0] == 0 and mid2.shape[0] == 0:
        raise NoAnchorError("premises have no differing spans to conjoin")
    connective = np.asarray(and_latent, dtype=np.float32).reshape(1, -1)
    return np.concatenate([p2.latents[:pre], mid2, connective, mid1, p2.latents[len2 - suf:]])


SUBSTITUTION_OPS = ("arg_sub", "verb_sub", "further_spec", "conjunction")


def substitute_and_decode(p1: SentenceLatents, p2: SentenceLatents, op: str,
                          decode_fn: DecodeFn,
                          and_latent: np.ndarray | None = None) -> list:
    """Latent-space inference over two premises; returns the decoded conclusion."""
    if op == "arg_sub":
        hybrid = _substitution(p1, p2, ARG_ROLES)
    elif op == "verb_sub":
        hybrid = _substitution(p1, p2, {"PRED"})
    elif op == "further_spec":
        hybrid = _further_specification(p1, p2)
    elif op == "conjunction":
        hybrid = _conjunction(p1, p2, and_latent)
    else:
        raise ContractError(f"unknown operation {op!r}; expected one of {SUBSTITUTION_OPS}")
    return decode_fn(hybrid)
