"""Trie-constrained beam decoding of Semantic IDs and ranking metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .lm import ModelParams, _gelu, _layernorm, _linear, _log_softmax


@dataclass
class TrieNode:
    children: dict = field(default_factory=dict)   # token id -> TrieNode
    item: str | None = None


class SidTrie:
    """Prefix tree over the SID token sequences of every catalog item."""

    def __init__(self, sid_map, vocab):
        self.root = TrieNode()
        self.depth = vocab.levels
        self.n_items = 0
        for item in sorted(sid_map.sids):
            node = self.root
            for tok in vocab.sid_tokens(sid_map.sids[item]):
                node = node.children.setdefault(tok, TrieNode())
            if node.item is not None:
                raise ValueError(f"items {node.item} and {item} share a full identifier")
            node.item = item
            self.n_items += 1

    def leaves(self) -> dict[str, tuple[int, ...]]:
        out, stack = {}, [((), self.root)]
        while stack:
            path, node = stack.pop()
            if node.item is not None:
                out[node.item] = path
            for tok, child in node.children.items():
                stack.append((path + (tok,), child))
        return out


class PrefixScorer:
    """Next-token log-probabilities after a fixed prompt plus short continuations.

    The prompt's attention keys and values are computed once; each call only
    runs the continuation tokens, attending to the prompt and causally to
    themselves. Numerically this is the same computation as a full forward
    pass over ``prompt + continuation``.
    """

    def __init__(self, params: ModelParams, prompt: list[int]):
        self.params = params
        cfg, t = params.config, params.tensors
        self.P = len(prompt)
        H, dh, D = cfg.n_heads, cfg.d_head, cfg.d_model
        x = t["wte"][np.asarray(prompt)][None] + t["wpe"][:self.P]
        self.kv = []
        mask = np.where(np.triu(np.ones((self.P, self.P), dtype=bool), k=1), -np.inf, 0.0)
        for i in range(cfg.n_layers):
            p = f"h{i}."
            a_in, _ = _layernorm(x, t[p + "ln1_g"], t[p + "ln1_b"])
            qkv = _linear(a_in, t[p + "w_qkv"], t[p + "b_qkv"])
            q, k, v = (qkv[..., j * D:(j + 1) * D].reshape(1, self.P, H, dh).transpose(0, 2, 1, 3)
                       for j in range(3))
            self.kv.append((k, v))
            x = x + self._mix(q, k, v, mask, p)
            x = x + self._mlp(x, p)
        hf, _ = _layernorm(x[:, -1], t["lnf_g"], t["lnf_b"])
        self.first = _log_softmax(hf @ t["wte"].T)[0]

    def _mix(self, q, k, v, mask, p):
        t, cfg = self.params.tensors, self.params.config
        s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(cfg.d_head) + mask
        s -= s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        B, _, T, _ = q.shape
        y = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        return _linear(y, t[p + "w_o"], t[p + "b_o"])

    def _mlp(self, x, p):
        t = self.params.tensors
        m_in, _ = _layernorm(x, t[p + "ln2_g"], t[p + "ln2_b"])
        h, _ = _gelu(_linear(m_in, t[p + "w_fc"], t[p + "b_fc"]))
        return _linear(h, t[p + "w_proj"], t[p + "b_proj"])

    def next_logprobs(self, continuations: list[list[int]]) -> np.ndarray:
        """Log-probabilities ``(n, V)`` of the token following each continuation."""
        m = len(continuations[0]) if continuations else 0
        if any(len(c) != m for c in continuations):
            raise ValueError("continuations must share a length")
        if m == 0:
            return np.tile(self.first, (max(1, len(continuations)), 1))
        cfg, t = self.params.config, self.params.tensors
        if self.P + m > cfg.context:
            raise ValueError("prompt plus continuation exceeds the context length")
        H, dh, D = cfg.n_heads, cfg.d_head, cfg.d_model
        ids = np.asarray(continuations)
        n = len(ids)
        x = t["wte"][ids] + t["wpe"][self.P:self.P + m]
        mask = np.concatenate([np.zeros((m, self.P)),
                               np.where(np.triu(np.ones((m, m), dtype=bool), k=1), -np.inf, 0.0)],
                              axis=1)
        for i in range(cfg.n_layers):
            p = f"h{i}."
            a_in, _ = _layernorm(x, t[p + "ln1_g"], t[p + "ln1_b"])
            qkv = _linear(a_in, t[p + "w_qkv"], t[p + "b_qkv"])
            q, k, v = (qkv[..., j * D:(j + 1) * D].reshape(n, m, H, dh).transpose(0, 2, 1, 3)
                       for j in range(3))
            pk, pv = self.kv[i]
            k = np.concatenate([np.broadcast_to(pk, (n, H, self.P, dh)), k], axis=2)
            v = np.concatenate([np.broadcast_to(pv, (n, H, self.P, dh)), v], axis=2)
            x = x + self._mix(q, k, v, mask, p)
            x = x + self._mlp(x, p)
        hf, _ = _layernorm(x[:, -1], t["lnf_g"], t["lnf_b"])
        return _log_softmax(hf @ t["wte"].T)


@dataclass
class RankingResult:
    query_id: str
    items: list[str]
    scores: list[float]
    relevant: set = field(default_factory=set)


def beam_decode(scorer, trie: SidTrie, beam: int, query_id: str = "",
                relevant=()) -> RankingResult:
    """Beam search restricted to trie-valid continuations.

    ``scorer`` is a :class:`PrefixScorer` (or anything with ``next_logprobs``).
    Scores are summed raw log-probabilities. Beam ties are broken by the token
    sequence, ranking ties by ascending item id.
    """
    if beam < 1:
        raise ValueError("beam must be at least 1")
    if not trie.root.children:
        raise ValueError("empty trie")
    beams = [((), 0.0, trie.root)]
    finished = []
    while beams:
        lp = scorer.next_logprobs([list(b[0]) for b in beams])
        cands = []
        for (toks, score, node), row in zip(beams, lp):
            for tok in sorted(node.children):
                cands.append((toks + (tok,), score + float(row[tok]), node.children[tok]))
        cands.sort(key=lambda c: (-c[1], c[0]))
        cands = cands[:beam]
        beams = []
        for toks, score, node in cands:
            if node.item is not None and len(toks) >= trie.depth:
                finished.append((score, node.item))
            if node.children:
                beams.append((toks, score, node))
    finished.sort(key=lambda f: (-f[0], f[1]))
    return RankingResult(query_id, [f[1] for f in finished], [f[0] for f in finished],
                         set(relevant))


def precision_recall_at_k(result: RankingResult, k: int):
    """``(precision, recall)``; recall is None when nothing is relevant."""
    if k < 1:
        raise ValueError("k must be at least 1")
    hits = len(set(result.items[:k]) & result.relevant)
    recall = hits / len(result.relevant) if result.relevant else None
    return hits / k, recall


def ndcg_at_k(result: RankingResult, k: int):
    """Binary-gain NDCG with a log2 discount; None when nothing is relevant."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if not result.relevant:
        return None
    dcg = sum(1.0 / math.log2(i + 2) for i, it in enumerate(result.items[:k])
              if it in result.relevant)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(result.relevant))))
    return dcg / ideal


def relative_gain(method_value, baseline_value):
    """Signed percentage ``100 * (method - baseline) / baseline``; None if baseline is 0."""
    if baseline_value is None or method_value is None or baseline_value == 0:
        return None
    return 100.0 * (method_value - baseline_value) / baseline_value


METRICS = ("precision", "recall", "ndcg")


def score_results(results: list[RankingResult], ks) -> dict:
    """Mean and standard error of every metric at every cutoff."""
    table = {}
    for k in ks:
        vals = {m: [] for m in METRICS}
        for r in results:
            p, rec = precision_recall_at_k(r, k)
            n = ndcg_at_k(r, k)
            vals["precision"].append(p)
            if rec is not None:
                vals["recall"].append(rec)
            if n is not None:
                vals["ndcg"].append(n)
        for m, v in vals.items():
            arr = np.asarray(v, dtype=np.float64)
            mean = float(arr.mean()) if len(arr) else None
            se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
            table[(m, int(k))] = (mean, se, len(arr))
    return table


def evaluate(params: ModelParams, examples, trie: SidTrie, ks, beam: int,
             max_queries: int | None = None) -> tuple[dict, list[RankingResult]]:
    """Decode every held-out retrieval example and aggregate ranking metrics."""
    from .corpus import prompt_length

    if not examples:
        raise ValueError("evaluation split is empty")
    results = []
    for ex in examples[:max_queries]:
        prompt = ex.seq.ids[:prompt_length(ex.seq)]
        results.append(beam_decode(PrefixScorer(params, prompt), trie, beam,
                                   f"{ex.user}", {ex.target}))
    return score_results(results, ks), results


def metric_rows(arm_tables: dict, baseline: str) -> list[dict]:
    """Flatten ``{arm: score table}`` into CSV rows with gains against ``baseline``."""
    base = arm_tables.get(baseline)
    rows = []
    for arm in arm_tables:
        for (metric, k), (mean, se, n) in sorted(arm_tables[arm].items()):
            gain = relative_gain(mean, base[(metric, k)][0]) if base else None
            rows.append({"arm": arm, "metric": metric, "k": k, "mean": mean, "stderr": se,
                         "n": n, "relative_gain_pct": gain})
    return rows


def _fmt(x, pct=False):
    if x is None:
        return "skip"
    return f"{x:+.2f}%" if pct else repr(float(x))


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "metric", "k", "mean", "stderr", "n", "relative_gain_vs_baseline"])
    for r in rows:
        w.writerow([r["arm"], r["metric"], r["k"], _fmt(r["mean"]), _fmt(r["stderr"]), r["n"],
                    _fmt(r["relative_gain_pct"], pct=True)])
    return buf.getvalue()


def gain_table_csv(arm_means: dict, labels: dict, baseline: str, ks,
                   metrics=METRICS) -> str:
    """Relative-gain table: one row per arm, one column per metric@K.

    ``arm_means`` maps arm -> {(metric, k): value}. The baseline row is 0.00%
    by construction.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    short = {"precision": "P", "recall": "R", "ndcg": "NDCG"}
    w.writerow(["Methodology"] + [f"{short[m]}@{k}" for m in metrics for k in ks])
    base = arm_means[baseline]
    order = [baseline] + [a for a in arm_means if a != baseline]
    for arm in order:
        cells = []
        for m in metrics:
            for k in ks:
                g = 0.0 if arm == baseline else relative_gain(arm_means[arm][(m, k)],
                                                              base[(m, k)])
                cells.append(_fmt(g, pct=True))
        w.writerow([labels.get(arm, arm)] + cells)
    return buf.getvalue()
