"""Embedding-geometry analyses: cosine blocks, singular spectra, effective rank, RSA."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .numerics import cosine_matrix, make_rng, svd_values

REPORT_FORMAT = "gti-diagnostics/1"


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    labels: list[str]
    degenerate: np.ndarray
    blocks: list[tuple[str, int, int]] = field(default_factory=list)  # (name, start, stop)

    def block(self, name: str) -> np.ndarray:
        for n, a, b in self.blocks:
            if n == name:
                return self.values[a:b, a:b]
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + self.labels)
        for lab, row in zip(self.labels, self.values):
            w.writerow([lab] + [repr(float(x)) for x in row])
        return buf.getvalue()


@dataclass
class SingularSpectrum:
    values: np.ndarray  # descending; entries below the numerical-rank tolerance are exactly 0
    tol: float


@dataclass
class RsaScore:
    pearson_r: float
    spearman_rho: float
    n_pairs: int
    constant: bool = False  # one geometry has no variation; correlations reported as 0


def cosine_block(E, tokens_a, tokens_b, labels=None, names=("A", "B")) -> SimilarityMatrix:
    """Pairwise cosines over ``tokens_a`` followed by the tokens of ``tokens_b`` not in A."""
    tokens_a, tokens_b = list(tokens_a), list(tokens_b)
    if not tokens_a or not tokens_b:
        raise ValueError("token subsets must be non-empty")
    seen = set(tokens_a)
    extra = [t for t in tokens_b if t not in seen]
    order = tokens_a + extra
    E = np.asarray(E, dtype=np.float64)
    s, degenerate = cosine_matrix(E[order])
    labels = [str(t) for t in order] if labels is None else [labels(t) for t in order]
    blocks = [(names[0], 0, len(tokens_a))]
    if extra:
        blocks.append((names[1], len(tokens_a), len(order)))
    return SimilarityMatrix(s, labels, degenerate, blocks)


def singular_spectrum(m) -> SingularSpectrum:
    """Singular values with the usual numerical-rank cutoff ``max(shape) * eps * s_1``
    applied, so an exactly rank-r matrix has exactly r nonzero values."""
    a = np.asarray(m, dtype=np.float64)
    s = svd_values(a)
    tol = max(a.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    return SingularSpectrum(np.where(s > tol, s, 0.0), float(tol))


def effective_rank(spectrum) -> float:
    """Entropy effective rank ``exp(-sum p ln p)`` with ``p = s / sum(s)``."""
    s = spectrum.values if isinstance(spectrum, SingularSpectrum) else np.asarray(spectrum, float)
    if np.any(s < 0):
        raise ValueError("singular values must be non-negative")
    total = s.sum()
    if total <= 0:
        raise ValueError("effective rank of an all-zero spectrum is undefined")
    p = s[s > 0] / total
    return float(math.exp(-np.sum(p * np.log(p))))


def thresholded_rank(spectrum, tau: float = 0.01) -> int:
    """Number of singular values above ``tau`` times the largest."""
    s = spectrum.values if isinstance(spectrum, SingularSpectrum) else np.asarray(spectrum, float)
    if len(s) == 0 or s.max() <= 0:
        raise ValueError("thresholded rank of an all-zero spectrum is undefined")
    return int(np.count_nonzero(s > tau * s.max()))


def rsa(oracle_vectors, learned_vectors) -> RsaScore:
    """Pearson and Spearman correlation of the strict upper triangles of two cosine matrices."""
    a = np.asarray(oracle_vectors, dtype=np.float64)
    b = np.asarray(learned_vectors, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) != len(b):
        raise ValueError("rsa needs two matrices with the same number of rows")
    n = len(a)
    if n < 3:
        raise ValueError("rsa needs at least 3 rows")
    iu = np.triu_indices(n, k=1)
    x = cosine_matrix(a)[0][iu]
    y = cosine_matrix(b)[0][iu]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return RsaScore(0.0, 0.0, len(x), constant=True)
    r = float(stats.pearsonr(x, y).statistic)
    rho = float(stats.spearmanr(x, y).statistic)
    return RsaScore(min(1.0, max(-1.0, r)), min(1.0, max(-1.0, rho)), len(x))


# --- per-checkpoint report -------------------------------------------------

@dataclass
class DiagnosticsReport:
    matrices: dict[str, SimilarityMatrix]
    spectrum: SingularSpectrum
    erank: float
    thresholded: int
    rsa: RsaScore | None
    rsa_levels: list[RsaScore]  # within-level pairs only, one score per level
    notes: list[str]
    sample: dict[str, list[int]]
    meta: dict = field(default_factory=dict)

    def manifest_body(self) -> dict:
        return {"format": REPORT_FORMAT, "notes": self.notes, "sample": self.sample,
                **self.meta}

    def write(self, out_dir, heatmaps: bool = True, manifest: bool = True) -> list[str]:
        """Serialize into ``out_dir``; returns the written file names.

        With ``manifest=False`` the caller is responsible for the manifest
        (see :meth:`manifest_body`)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        files["spectra.csv"] = "index,singular_value\n" + "".join(
            f"{i},{float(v)!r}\n" for i, v in enumerate(self.spectrum.values))
        files["erank.csv"] = ("metric,value\n" f"entropy_effective_rank,{self.erank!r}\n"
                              f"thresholded_rank_tau_0.01,{self.thresholded}\n")
        if self.rsa is not None:
            rows = [("all", self.rsa)] + [(f"level_{l}", r) for l, r in enumerate(self.rsa_levels)]
            files["rsa.csv"] = "scope,pearson_r,spearman_rho,n_pairs,constant\n" + "".join(
                f"{name},{r.pearson_r!r},{r.spearman_rho!r},{r.n_pairs},{int(r.constant)}\n"
                for name, r in rows)
        for name, m in self.matrices.items():
            files[f"cos_{name}.csv"] = m.to_csv()
            if heatmaps:
                files[f"cos_{name}.svg"] = heatmap_svg(m, title=name)
        if manifest:
            body = {"files": sorted(files), **self.manifest_body()}
            files["manifest.json"] = json.dumps(body, indent=2, sort_keys=True) + "\n"
        for name, text in files.items():
            (out / name).write_text(text)
        return sorted(files)


def diagnose_checkpoint(params, sid_map, codebooks=None, catalog=None, seed: int = 0,
                        n_sample: int = 50) -> DiagnosticsReport:
    """Geometry of the SID rows of ``params``.

    SID-block and text-vs-SID cosine matrices, the singular spectrum and
    effective rank of the SID rows, and RSA against the codebook vector of each
    SID token, over the whole block and within each level. Text tokens for the
    cross block are sampled uniformly (with ``seed``) from the bytes that occur
    in the catalog text, or from all text tokens without a catalog.
    """
    vocab = params.vocab
    if not vocab.n_sid:
        raise ValueError("checkpoint has no SID tokens")
    for sid in sid_map.sids.values():
        if len(sid.codes) != vocab.levels or max(sid.codes) >= vocab.size:
            raise ValueError("sid map does not match the checkpoint vocabulary")
    E = params.E
    sid_tokens = list(vocab.sid_range)
    notes = []
    rng = make_rng(seed, 41)
    if len(sid_tokens) > n_sample:
        sid_sample = sorted(rng.choice(sid_tokens, n_sample, replace=False).tolist())
    else:
        sid_sample = sid_tokens
    if catalog is not None:
        used = sorted({b for it in catalog.items
                       for b in vocab.bytes_of(f"{it.title} {it.description}")})
    else:
        used = list(range(vocab.n_text))
    text_sample = sorted(rng.choice(used, min(n_sample, len(used)), replace=False).tolist())

    label = _label(vocab)
    matrices = {
        "sid": cosine_block(E, sid_tokens, sid_tokens, label, ("sid", "sid")),
        "text_sid": cosine_block(E, text_sample, sid_sample, label, ("text", "sid")),
    }
    spectrum = singular_spectrum(E[sid_tokens])
    if spectrum.values[0] == 0:
        erank, trank = 0.0, 0
        notes.append("SID rows are all zero; effective rank reported as 0")
    else:
        erank, trank = effective_rank(spectrum), thresholded_rank(spectrum)
    score, by_level = None, []
    if codebooks is None:
        notes.append("no codebooks supplied; RSA skipped")
    elif (codebooks.levels, codebooks.size) != (vocab.levels, vocab.size):
        raise ValueError("codebook shape does not match the SID vocabulary")
    else:
        oracle = np.stack([codebooks.vectors[vocab.level_of(t), (t - vocab.sid_range.start)
                                             % vocab.size] for t in sid_tokens])
        score = rsa(oracle, E[sid_tokens])
        if vocab.size >= 3:
            by_level = [rsa(codebooks.vectors[l], E[[vocab.sid_token(l, k)
                                                     for k in range(vocab.size)]])
                        for l in range(vocab.levels)]
        if score.constant:
            notes.append("one cosine geometry is constant; RSA correlations reported as 0")
    return DiagnosticsReport(matrices, spectrum, erank, trank, score, by_level, notes,
                             {"text": text_sample, "sid": sid_sample})


def _label(vocab):
    def name(t):
        s = vocab.token_str(t)
        return s if len(s) > 1 or 33 <= t < 127 else f"0x{t:02x}"
    return name


# --- rendering -------------------------------------------------------------

# Diverging map over [-1, 1]: -1 blue, 0 near-white, +1 red, linear in RGB.
_NEG = (59, 76, 192)
_MID = (247, 247, 247)
_POS = (180, 4, 38)
_DEGENERATE = (128, 128, 128)


def value_color(v: float) -> str:
    """Hex colour for a cosine value, clipped to [-1, 1]."""
    v = min(1.0, max(-1.0, float(v)))
    lo, hi, t = (_MID, _POS, v) if v >= 0 else (_MID, _NEG, -v)
    rgb = tuple(int(round(a + (b - a) * t)) for a, b in zip(lo, hi))
    return "#%02x%02x%02x" % rgb


def heatmap_svg(matrix: SimilarityMatrix, cell: int = 8, title: str = "") -> str:
    """Deterministic SVG heatmap with block separators and a numeric legend.

    Zero-norm rows and columns are drawn grey.
    """
    n = len(matrix.values)
    size = n * cell
    legend_x = size + 20
    width, height = legend_x + 70, max(size, 220) + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<title>{title}</title>', '<g transform="translate(0,20)">']
    deg = matrix.degenerate
    for i in range(n):
        for j in range(n):
            color = ("#%02x%02x%02x" % _DEGENERATE if deg[i] or deg[j]
                     else value_color(matrix.values[i, j]))
            out.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                       f'fill="{color}"/>')
    for _, start, _ in matrix.blocks[1:]:
        p = start * cell
        out.append(f'<line x1="{p}" y1="0" x2="{p}" y2="{size}" stroke="black"/>')
        out.append(f'<line x1="0" y1="{p}" x2="{size}" y2="{p}" stroke="black"/>')
    steps = 20
    for s in range(steps + 1):
        v = 1.0 - 2.0 * s / steps
        out.append(f'<rect x="{legend_x}" y="{s * 10}" width="14" height="10" '
                   f'fill="{value_color(v)}"/>')
        if s % 5 == 0:
            out.append(f'<text x="{legend_x + 18}" y="{s * 10 + 9}" font-size="9">'
                       f'{v:+.1f}</text>')
    out += ['</g>', '</svg>']
    return "\n".join(out) + "\n"


def render_heatmap(matrix: SimilarityMatrix, path, title: str = "") -> Path:
    path = Path(path)
    path.write_text(heatmap_svg(matrix, title=title))
    return path
