"""Tiny pre-norm decoder-only transformer with tied embeddings and manual backprop.

Everything is float64 numpy. The output head is the embedding matrix itself
(``params.tensors["wte"]``), so input and output share storage and the
embedding gradient accumulates both contributions.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import make_rng
from .vocab import Vocabulary

CKPT_MAGIC = b"GTI-CKPT/1\n"
LN_EPS = 1e-5
GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 128
    context: int = 256

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class TokenSequence:
    """Token ids plus per-token loss weights; weight ``w[t]`` scores ``P(ids[t] | ids[:t])``."""
    ids: list[int]
    weights: list[float]

    def __post_init__(self):
        if len(self.ids) != len(self.weights):
            raise ValueError("ids and weights differ in length")

    def __len__(self) -> int:
        return len(self.ids)


def layer_names(layer: int) -> list[str]:
    p = f"h{layer}."
    return [p + n for n in ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o",
                            "ln2_g", "ln2_b", "w_fc", "b_fc", "w_proj", "b_proj")]


def tensor_names(cfg: ModelConfig) -> list[str]:
    names = ["wte", "wpe"]
    for i in range(cfg.n_layers):
        names += layer_names(i)
    return names + ["lnf_g", "lnf_b"]


@dataclass
class ModelParams:
    config: ModelConfig
    vocab: Vocabulary
    tensors: dict[str, np.ndarray]
    lineage: list = field(default_factory=list)

    @property
    def E(self) -> np.ndarray:
        return self.tensors["wte"]

    @property
    def head(self) -> np.ndarray:
        # tied: same array object as E
        return self.tensors["wte"]

    @property
    def new_row_mask(self) -> np.ndarray:
        m = np.zeros(len(self.vocab), dtype=bool)
        m[self.vocab.n_text:] = True
        return m

    def copy(self) -> ModelParams:
        return ModelParams(self.config, self.vocab,
                           {k: v.copy() for k, v in self.tensors.items()}, list(self.lineage))

    def checksum(self, names=None, rows=None) -> str:
        """SHA-256 over the raw bytes of the named tensors (all by default).

        ``rows`` restricts ``wte`` to the given row indices.
        """
        h = hashlib.sha256()
        for name in names or self.tensors:
            t = self.tensors[name]
            if name == "wte" and rows is not None:
                t = t[rows]
            h.update(name.encode())
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()

    def frozen_checksum(self) -> str:
        """Checksum of everything grounding must leave untouched."""
        others = [n for n in self.tensors if n != "wte"]
        return (self.checksum(others) + ":" +
                self.checksum(["wte"], rows=np.arange(self.vocab.n_text)))

    def save(self, path) -> None:
        names = tensor_names(self.config)
        header = {
            "config": asdict(self.config),
            "vocab": asdict(self.vocab),
            "lineage": self.lineage,
            "tensors": [[n, list(self.tensors[n].shape)] for n in names],
        }
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for n in names:
                fh.write(np.ascontiguousarray(self.tensors[n], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> ModelParams:
        raw = Path(path).read_bytes()
        if not raw.startswith(CKPT_MAGIC):
            raise ValueError(f"{path}: not a model checkpoint")
        rest = raw[len(CKPT_MAGIC):]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        buf = rest[nl + 1:]
        tensors, off = {}, 0
        for name, shape in header["tensors"]:
            n = int(np.prod(shape)) * 8
            tensors[name] = np.frombuffer(buf[off:off + n], dtype="<f8").reshape(shape).copy()
            off += n
        if off != len(buf):
            raise ValueError(f"{path}: trailing bytes in checkpoint")
        return cls(ModelConfig(**header["config"]), Vocabulary(**header["vocab"]), tensors,
                   header["lineage"])


def init_params(cfg: ModelConfig, vocab: Vocabulary, seed: int, std: float = 0.1) -> ModelParams:
    if cfg.d_model % cfg.n_heads:
        raise ValueError("d_model must be divisible by n_heads")
    rng = make_rng(seed, 11)
    D, F = cfg.d_model, cfg.d_ff
    proj_std = std / np.sqrt(2 * cfg.n_layers)
    t = {"wte": rng.normal(0, std, (len(vocab), D)),
         "wpe": rng.normal(0, std * 0.1, (cfg.context, D))}
    for i in range(cfg.n_layers):
        p = f"h{i}."
        t[p + "ln1_g"] = np.ones(D)
        t[p + "ln1_b"] = np.zeros(D)
        t[p + "w_qkv"] = rng.normal(0, std, (D, 3 * D))
        t[p + "b_qkv"] = np.zeros(3 * D)
        t[p + "w_o"] = rng.normal(0, proj_std, (D, D))
        t[p + "b_o"] = np.zeros(D)
        t[p + "ln2_g"] = np.ones(D)
        t[p + "ln2_b"] = np.zeros(D)
        t[p + "w_fc"] = rng.normal(0, std, (D, F))
        t[p + "b_fc"] = np.zeros(F)
        t[p + "w_proj"] = rng.normal(0, proj_std, (F, D))
        t[p + "b_proj"] = np.zeros(D)
    t["lnf_g"] = np.ones(D)
    t["lnf_b"] = np.zeros(D)
    return ModelParams(cfg, vocab, {n: t[n] for n in tensor_names(cfg)}, [["init", int(seed)]])


@dataclass
class Batch:
    ids: np.ndarray      # (B, T) int
    weights: np.ndarray  # (B, T) float, weight on predicting ids[:, t]

    @classmethod
    def collate(cls, seqs, pad: int) -> Batch:
        T = max(len(s) for s in seqs)
        ids = np.full((len(seqs), T), pad, dtype=np.int64)
        w = np.zeros((len(seqs), T))
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s.ids
            w[i, :len(s)] = s.weights
        return cls(ids, w)


@dataclass
class ForwardResult:
    token_logprobs: np.ndarray   # (B, T); entry t is log P(ids[t] | ids[:t]); column 0 is 0
    loss: float
    n_targets: int
    degenerate: bool
    logprobs: np.ndarray | None = None  # (B, T-1, V) when requested
    cache: dict | None = None


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def _gelu(x):
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t


def _gelu_back(dy, x, t):
    # d/dx of 0.5 x (1 + tanh(c (x + a x^3)))
    x2 = x * x
    x2 *= 3 * 0.044715 * GELU_C
    x2 += GELU_C
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    sech2 *= x2
    sech2 *= x
    sech2 += t
    sech2 += 1.0
    sech2 *= 0.5
    sech2 *= dy
    return sech2


def _linear(x, w, b):
    out = x.reshape(-1, x.shape[-1]) @ w
    out += b
    return out.reshape(*x.shape[:-1], w.shape[1])


def _matmul_t(x, w):
    return (x.reshape(-1, x.shape[-1]) @ w.T).reshape(*x.shape[:-1], w.shape[0])


def _log_softmax(z):
    z -= z.max(axis=-1, keepdims=True)
    z -= np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z


def forward(params: ModelParams, batch, full: bool = False, keep_cache: bool = False,
            positions: np.ndarray | None = None) -> ForwardResult:
    """Causal forward pass.

    ``batch`` is a :class:`Batch` or a list of :class:`TokenSequence`. Log
    probabilities are computed at weighted target positions, at ``positions``
    (boolean ``(B, T)`` mask of target tokens) when given, or everywhere with
    ``full=True``. Loss is the weighted NLL summed over targets divided by the
    number of positions with non-zero weight; an all-zero weight batch has loss
    0 and ``degenerate=True``.
    """
    if not isinstance(batch, Batch):
        batch = Batch.collate(batch, params.vocab.pad)
    cfg, t = params.config, params.tensors
    ids, w = batch.ids, batch.weights
    B, T = ids.shape
    if T > cfg.context:
        raise ValueError(f"sequence length {T} exceeds context {cfg.context}")
    if ids.min() < 0 or ids.max() >= t["wte"].shape[0]:
        raise ValueError("token id outside the vocabulary")
    H, dh = cfg.n_heads, cfg.d_head
    mask_bias = np.where(np.triu(np.ones((T, T), dtype=bool), k=1), -np.inf, 0.0)
    scale = 1.0 / np.sqrt(dh)

    x = t["wte"][ids] + t["wpe"][:T]
    caches = []
    for i in range(cfg.n_layers):
        p = f"h{i}."
        a_in, ln1 = _layernorm(x, t[p + "ln1_g"], t[p + "ln1_b"])
        qkv = _linear(a_in, t[p + "w_qkv"], t[p + "b_qkv"])
        q, k, v = (qkv[..., j * cfg.d_model:(j + 1) * cfg.d_model]
                   .reshape(B, T, H, dh).transpose(0, 2, 1, 3) for j in range(3))
        att = q @ k.transpose(0, 1, 3, 2)
        att *= scale
        att += mask_bias
        att -= att.max(axis=-1, keepdims=True)
        np.exp(att, out=att)
        att /= att.sum(axis=-1, keepdims=True)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        x = x + _linear(y, t[p + "w_o"], t[p + "b_o"])
        m_in, ln2 = _layernorm(x, t[p + "ln2_g"], t[p + "ln2_b"])
        hpre = _linear(m_in, t[p + "w_fc"], t[p + "b_fc"])
        hact, tanh_c = _gelu(hpre)
        x = x + _linear(hact, t[p + "w_proj"], t[p + "b_proj"])
        caches.append((a_in, ln1, q, k, v, att, y, m_in, ln2, hpre, hact, tanh_c))
    hf, lnf = _layernorm(x, t["lnf_g"], t["lnf_b"])

    tok_lp = np.zeros((B, T))
    n_targets = int(np.count_nonzero(w[:, 1:]))
    out_logprobs = None
    if full:
        sel = np.ones((B, T), dtype=bool)
        sel[:, 0] = False
    else:
        sel = w != 0
        sel[:, 0] = False
        if positions is not None:
            sel |= positions
            sel[:, 0] = False
    bi, ti = np.nonzero(sel)
    h_sel = hf[bi, ti - 1]
    lp = _log_softmax(h_sel @ t["wte"].T)
    tok_lp[bi, ti] = lp[np.arange(len(bi)), ids[bi, ti]]
    if full:
        out_logprobs = lp.reshape(B, T - 1, -1)
    wt = w[bi, ti]
    loss = float(-(wt * tok_lp[bi, ti]).sum() / n_targets) if n_targets else 0.0
    cache = None
    if keep_cache:
        cache = dict(batch=batch, caches=caches, hf=hf, lnf=lnf, bi=bi, ti=ti, lp=lp,
                     wt=wt, n=n_targets)
    return ForwardResult(tok_lp, loss, n_targets, n_targets == 0, out_logprobs, cache)


def backward(params: ModelParams, batch, only=None, fwd: ForwardResult | None = None):
    """Exact gradient of the forward loss with respect to every tensor.

    Returns ``(grads, forward_result)``. ``only`` names the tensors whose
    gradients are wanted; weight gradients of the others are skipped (the
    activation gradients still flow through them).
    """
    if fwd is None or fwd.cache is None:
        fwd = forward(params, batch, keep_cache=True)
    if not np.isfinite(fwd.loss):
        raise FloatingPointError("non-finite loss")
    cfg, t, c = params.config, params.tensors, fwd.cache
    want = set(only) if only is not None else set(t)
    grads = {n: np.zeros_like(v) for n, v in t.items() if n in want}
    if fwd.degenerate:
        return grads, fwd
    ids = c["batch"].ids
    B, T = ids.shape
    H, dh, D = cfg.n_heads, cfg.d_head, cfg.d_model
    bi, ti, lp = c["bi"], c["ti"], c["lp"]

    dlogits = np.exp(lp)
    dlogits[np.arange(len(bi)), ids[bi, ti]] -= 1.0
    dlogits *= (c["wt"] / c["n"])[:, None]
    h_sel = c["hf"][bi, ti - 1]
    dwte = np.zeros_like(t["wte"])
    dwte += dlogits.T @ h_sel
    dhf = np.zeros((B, T, D))
    np.add.at(dhf, (bi, ti - 1), dlogits @ t["wte"])

    dx, dg, db = _layernorm_back(dhf, t["lnf_g"], c["lnf"])
    if "lnf_g" in want:
        grads["lnf_g"] += dg
    if "lnf_b" in want:
        grads["lnf_b"] += db
    for i in reversed(range(cfg.n_layers)):
        p = f"h{i}."
        a_in, ln1, q, k, v, att, y, m_in, ln2, hpre, hact, tanh_c = c["caches"][i]
        # feed-forward block
        if p + "w_proj" in want:
            grads[p + "w_proj"] += hact.reshape(-1, hact.shape[-1]).T @ dx.reshape(-1, D)
        if p + "b_proj" in want:
            grads[p + "b_proj"] += dx.sum(axis=(0, 1))
        dhpre = _gelu_back(_matmul_t(dx, t[p + "w_proj"]), hpre, tanh_c)
        if p + "w_fc" in want:
            grads[p + "w_fc"] += m_in.reshape(-1, D).T @ dhpre.reshape(-1, dhpre.shape[-1])
        if p + "b_fc" in want:
            grads[p + "b_fc"] += dhpre.sum(axis=(0, 1))
        dm, dg, db = _layernorm_back(_matmul_t(dhpre, t[p + "w_fc"]), t[p + "ln2_g"], ln2)
        if p + "ln2_g" in want:
            grads[p + "ln2_g"] += dg
        if p + "ln2_b" in want:
            grads[p + "ln2_b"] += db
        dx = dx + dm
        # attention block
        if p + "w_o" in want:
            grads[p + "w_o"] += y.reshape(-1, D).T @ dx.reshape(-1, D)
        if p + "b_o" in want:
            grads[p + "b_o"] += dx.sum(axis=(0, 1))
        dy = _matmul_t(dx, t[p + "w_o"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        datt = dy @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dy
        # att is exactly 0 above the diagonal, so ds needs no extra masking
        ds = datt
        ds -= (datt * att).sum(axis=-1, keepdims=True)
        ds *= att
        ds *= 1.0 / np.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([g.transpose(0, 2, 1, 3).reshape(B, T, D) for g in (dq, dk, dv)],
                              axis=-1)
        if p + "w_qkv" in want:
            grads[p + "w_qkv"] += a_in.reshape(-1, D).T @ dqkv.reshape(-1, 3 * D)
        if p + "b_qkv" in want:
            grads[p + "b_qkv"] += dqkv.sum(axis=(0, 1))
        da, dg, db = _layernorm_back(_matmul_t(dqkv, t[p + "w_qkv"]), t[p + "ln1_g"], ln1)
        if p + "ln1_g" in want:
            grads[p + "ln1_g"] += dg
        if p + "ln1_b" in want:
            grads[p + "ln1_b"] += db
        dx = dx + da
    if "wpe" in want:
        grads["wpe"][:T] += dx.sum(axis=0)
    np.add.at(dwte, ids, dx)
    if "wte" in want:
        grads["wte"] += dwte
    return grads, fwd


def sequence_logprob(params: ModelParams, prefix: list[int], continuations: list[list[int]]):
    """Summed log-probability of each continuation after a shared prefix."""
    seqs = [TokenSequence(prefix + cont, [0.0] * len(prefix) + [1.0] * len(cont))
            for cont in continuations]
    res = forward(params, seqs)
    return res.token_logprobs[:, len(prefix):].sum(axis=1)


def extend_vocabulary(params: ModelParams, levels: int, size: int, init, n_suffix: int = 0,
                      text_rows=None) -> ModelParams:
    """Append ``levels * size`` SID rows (and ``n_suffix`` suffix rows) to ``E``.

    ``init`` is an :class:`~gti_lab.init_strategies.InitStrategy`. Every other
    tensor is copied bit-for-bit.
    """
    from .init_strategies import initial_rows

    if params.vocab.n_new:
        raise ValueError("vocabulary is already extended")
    vocab = Vocabulary(levels, size, n_suffix)
    E_text = params.E
    rows = initial_rows(init, E_text, vocab.n_new)
    tensors = {n: v.copy() for n, v in params.tensors.items()}
    tensors["wte"] = np.concatenate([E_text, rows], axis=0)
    lineage = params.lineage + [["extend", init.kind, int(init.seed)]]
    return ModelParams(params.config, vocab, tensors, lineage)
