"""Residual-quantization codebooks and Semantic-ID assignment."""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import as_matrix, kmeans, nearest

CODEBOOK_FORMAT = "gti-codebooks/1"
SIDMAP_FORMAT = "gti-sidmap/1"


@dataclass
class CodebookStack:
    vectors: np.ndarray  # (L, K, d_code)
    seed: int = 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3:
            raise ValueError("codebook vectors must have shape (L, K, d_code)")
        if self.levels < 1 or self.size < 2:
            raise ValueError("need L >= 1 and K >= 2")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("codebook contains non-finite entries")

    @property
    def levels(self) -> int:
        return self.vectors.shape[0]

    @property
    def size(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def save(self, path) -> None:
        L, K, d = self.vectors.shape
        lines = [f"# {CODEBOOK_FORMAT}", f"L={L} K={K} d_code={d} seed={self.seed}"]
        for row in self.vectors.reshape(L * K, d):
            lines.append(" ".join(float(x).hex() for x in row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> CodebookStack:
        lines = Path(path).read_text().splitlines()
        if lines[0] != f"# {CODEBOOK_FORMAT}":
            raise ValueError(f"{path}: not a {CODEBOOK_FORMAT} file")
        head = dict(kv.split("=") for kv in lines[1].split())
        L, K, d = int(head["L"]), int(head["K"]), int(head["d_code"])
        rows = [[float.fromhex(x) for x in ln.split()] for ln in lines[2:2 + L * K]]
        return cls(np.array(rows, dtype=np.float64).reshape(L, K, d), seed=int(head["seed"]))


@dataclass(frozen=True)
class SemanticID:
    codes: tuple[int, ...]
    suffix: int | None = None

    def full(self) -> tuple[int, ...]:
        return self.codes if self.suffix is None else (*self.codes, self.suffix)


def fit_codebooks(z, levels: int, size: int, seed: int = 0, max_iter: int = 100,
                  n_init: int = 10) -> CodebookStack:
    """Residual k-means: level ``l`` is fit on the residuals left by levels ``< l``."""
    z = as_matrix(z)
    if len(z) < size:
        raise ValueError(f"{len(z)} items cannot fill a codebook of {size} entries")
    residual = z.copy()
    books = []
    for level in range(levels):
        centroids, assign = kmeans(residual, size, seed=seed * 1009 + level, max_iter=max_iter,
                                  n_init=n_init)
        books.append(centroids)
        residual = residual - centroids[assign]
    return CodebookStack(np.stack(books), seed=seed)


def quantize(z, cb: CodebookStack) -> tuple[SemanticID, np.ndarray]:
    """Greedy per-level nearest codeword with residual subtraction."""
    r = np.asarray(z, dtype=np.float64)
    if r.shape != (cb.dim,):
        raise ValueError(f"expected a vector of dim {cb.dim}, got shape {r.shape}")
    codes = []
    for level in range(cb.levels):
        c = int(nearest(r[None, :], cb.vectors[level])[0])
        codes.append(c)
        r = r - cb.vectors[level, c]
    return SemanticID(tuple(codes)), r


def sinkhorn_balance(cost, iterations: int = 200, epsilon: float = 0.05,
                     tol: float = 1e-6, sweeps: int = 20) -> tuple[np.ndarray, bool]:
    """Balance ``exp(-cost/epsilon)`` to a doubly-stochastic plan.

    Non-square costs are padded with zero-cost dummy rows/columns first; the
    returned plan is cropped back to the input shape. Works in the log domain.
    When the cost spread is large relative to ``epsilon`` the problem is
    solved along a decreasing temperature ladder ending at ``epsilon``, each
    rung warm-started from the previous potentials; only the last rung
    defines the result. At every rung the first ``sweeps`` iterations
    alternately normalise rows and columns and the rest (up to
    ``iterations``) are damped Newton steps on the same dual objective.
    Returns ``(plan, converged)``; convergence means every row and column sum
    of the padded plan is within ``tol`` of 1 at ``epsilon``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cost = as_matrix(cost)
    n, m = cost.shape
    size = max(n, m)
    padded = np.zeros((size, size))
    padded[:n, :m] = cost
    ladder = [epsilon]
    while ladder[-1] < np.ptp(padded) / 4:
        ladder.append(4 * ladder[-1])
    # potentials in cost units, so they carry over between temperatures
    f, g = np.zeros(size), np.zeros(size)
    for eps in reversed(ladder):
        logk = -padded / eps
        u, v, converged = _balance(logk, f / eps, g / eps, iterations, tol, sweeps)
        f, g = u * eps, v * eps
    plan = np.exp(logk + u[:, None] + v[None, :])
    return plan[:n, :m], converged


def _balance(logk, u, v, iterations, tol, sweeps):
    for it in range(iterations):
        if it < sweeps:
            u = -_logsumexp(logk + v[None, :], axis=1)
            v = -_logsumexp(logk + u[:, None], axis=0)
        else:
            u, v = _newton_step(logk, u, v)
        plan = np.exp(logk + u[:, None] + v[None, :])
        if (np.max(np.abs(plan.sum(axis=1) - 1.0)) <= tol
                and np.max(np.abs(plan.sum(axis=0) - 1.0)) <= tol):
            return u, v, True
    return u, v, False


def _dual(logk, u, v) -> float:
    # convex; its stationary point has unit row and column sums. Overflow means
    # the trial step is rejected by the line search.
    with np.errstate(over="ignore"):
        return float(np.exp(logk + u[:, None] + v[None, :]).sum() - u.sum() - v.sum())


def _newton_step(logk, u, v):
    n = len(u)
    plan = np.exp(logk + u[:, None] + v[None, :])
    r, c = plan.sum(axis=1), plan.sum(axis=0)
    grad = np.concatenate([r - 1.0, c - 1.0])
    hess = np.block([[np.diag(r), plan], [plan.T, np.diag(c)]])
    # the Hessian is singular along (1, -1); lstsq picks the minimum-norm step
    step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
    f0, t = _dual(logk, u, v), 1.0
    while t > 1e-8:
        nu, nv = u + t * step[:n], v + t * step[n:]
        if _dual(logk, nu, nv) <= f0 + 1e-4 * t * float(grad @ step):
            return nu, nv
        t *= 0.5
    # no descent along the Newton direction: fall back to a plain sweep
    u = -_logsumexp(logk + v[None, :], axis=1)
    return u, -_logsumexp(logk + u[:, None], axis=0)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    mx = np.max(a, axis=axis, keepdims=True)
    return (mx + np.log(np.sum(np.exp(a - mx), axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class Assignment:
    """Item-to-SID map plus bookkeeping from collision handling."""
    sids: dict[str, SemanticID]
    rerouted: set[str] = field(default_factory=set)
    sinkhorn_converged: bool = True

    def save(self, path) -> None:
        lines = [f"# {SIDMAP_FORMAT}", "item_id\tcodes\tsuffix\trerouted"]
        for item in sorted(self.sids):
            sid = self.sids[item]
            suffix = "" if sid.suffix is None else str(sid.suffix)
            lines.append(f"{item}\t{','.join(map(str, sid.codes))}\t{suffix}\t"
                         f"{int(item in self.rerouted)}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> Assignment:
        lines = Path(path).read_text().splitlines()
        if lines[0] != f"# {SIDMAP_FORMAT}":
            raise ValueError(f"{path}: not a {SIDMAP_FORMAT} file")
        sids, rerouted = {}, set()
        for ln in lines[2:]:
            item, codes, suffix, flag = ln.split("\t")
            sids[item] = SemanticID(tuple(int(c) for c in codes.split(",")),
                                    int(suffix) if suffix else None)
            if flag == "1":
                rerouted.add(item)
        return cls(sids, rerouted)

    @property
    def max_suffix(self) -> int:
        return max((s.suffix for s in self.sids.values() if s.suffix is not None), default=-1)


def assign_all(item_ids, z, cb: CodebookStack, collision_policy: str = "sinkhorn",
               epsilon: float = 0.05, iterations: int = 500) -> Assignment:
    """Quantize every item and make the full identifiers unique.

    Items that share all ``L`` greedy codes are re-routed on the final level:
    within each shared prefix, the final-level codes not held by a uniquely
    assigned item are distributed among the colliding items by a balanced
    transport plan over the cost ``||r_L - q_k||^2``. Items left over when there
    are more colliders than free codes keep their greedy code and get a
    disambiguation suffix. With ``collision_policy="suffix"`` no re-routing
    happens and every collision is resolved by suffixes.
    """
    if collision_policy not in ("sinkhorn", "suffix"):
        raise ValueError(f"unknown collision policy {collision_policy!r}")
    z = as_matrix(z)
    item_ids = [str(i) for i in item_ids]
    if len(set(item_ids)) != len(item_ids):
        raise ValueError("duplicate item ids")
    last = cb.levels - 1
    greedy, final_res = {}, {}
    for item, vec in zip(item_ids, z):
        sid, _ = quantize(vec, cb)
        greedy[item] = sid.codes
        # residual entering the final level
        r = vec.copy()
        for level in range(last):
            r = r - cb.vectors[level, sid.codes[level]]
        final_res[item] = r

    buckets = defaultdict(list)
    for item in item_ids:
        buckets[greedy[item]].append(item)
    result = Assignment({item: SemanticID(greedy[item]) for item in item_ids})
    by_prefix = defaultdict(list)
    for codes, members in buckets.items():
        by_prefix[codes[:-1]].append((codes[-1], members))

    for prefix in sorted(by_prefix):
        groups = by_prefix[prefix]
        colliders = [m for _, members in sorted(groups) if len(members) > 1 for m in members]
        if not colliders:
            continue
        taken = {c for c, members in groups if len(members) == 1}
        leftover = colliders
        if collision_policy == "sinkhorn":
            free = [k for k in range(cb.size) if k not in taken]
            cost = np.array([[np.sum((final_res[i] - cb.vectors[last, k]) ** 2) for k in free]
                             for i in colliders])
            plan, ok = sinkhorn_balance(cost, iterations=iterations, epsilon=epsilon)
            result.sinkhorn_converged &= ok
            placed = _extract_assignment(plan, cost)
            leftover = []
            for row, item in enumerate(colliders):
                if row in placed:
                    code = free[placed[row]]
                    result.sids[item] = SemanticID((*prefix, code))
                    if code != greedy[item][-1]:
                        result.rerouted.add(item)
                else:
                    leftover.append(item)
        # suffixes for whatever still shares a full code path
        seen = Counter()
        for item in leftover:
            codes = greedy[item]
            holders = [i for i in item_ids if result.sids[i].codes == codes and i not in leftover]
            n = seen[codes] + len(holders)
            if n > 0:
                result.sids[item] = SemanticID(codes, suffix=n)
            seen[codes] += 1
    return result


def _extract_assignment(plan: np.ndarray, cost: np.ndarray) -> dict[int, int]:
    """Hard one-to-one assignment from a transport plan.

    Repeatedly takes the largest remaining plan entry; ties go to the lower
    cost, then the lower row, then the lower column.
    """
    n, m = plan.shape
    order = sorted(((-round(plan[i, j], 12), cost[i, j], i, j) for i in range(n) for j in range(m)))
    rows, cols, out = set(), set(), {}
    for _, _, i, j in order:
        if i in rows or j in cols:
            continue
        out[i] = j
        rows.add(i)
        cols.add(j)
        if len(out) == min(n, m):
            break
    return out


def codebook_stats(assignment: Assignment, levels: int, size: int) -> dict:
    """Per-level code usage histograms, usage perplexity and collision counts."""
    sids = list(assignment.sids.values())
    report = {"levels": [], "n_items": len(sids)}
    for level in range(levels):
        hist = np.bincount([s.codes[level] for s in sids], minlength=size)
        report["levels"].append({"histogram": hist.tolist(), "perplexity": usage_perplexity(hist)})
    greedy_paths = Counter(s.codes for s in sids)
    report["shared_code_paths"] = sum(1 for c in greedy_paths.values() if c > 1)
    report["suffixed"] = sum(1 for s in sids if s.suffix is not None)
    report["rerouted"] = len(assignment.rerouted)
    report["unique"] = len({s.full() for s in sids}) == len(sids)
    return report


def usage_perplexity(counts) -> float:
    p = np.asarray(counts, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(math.exp(-np.sum(p * np.log(p))))
