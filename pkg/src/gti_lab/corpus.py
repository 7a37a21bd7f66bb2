"""Synthetic catalog with planted hierarchy, prompt templates, and dataset splits.

Each latent level ``l`` has ``ceil(log2(branching))`` binary features. Cluster
``k`` at level ``l`` switches each feature on or off according to the bits of
``k``; its embedding offset is the signed sum of per-feature Gaussian vectors
and its pseudo-word is a root syllable followed by one syllable per feature.
Roots start with a consonant unique within the level, so the first letter of a
word names its cluster; words that share feature syllables have correlated
offsets, so the text channel carries the same geometry the item embeddings do.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lm import TokenSequence
from .numerics import make_rng
from .vocab import Vocabulary

CATALOG_FORMAT = "gti-catalog/1"
INTERACTIONS_FORMAT = "gti-interactions/1"
LEVEL_NAMES = ("kind", "style", "tone", "cut", "hue", "fit", "trim", "mood")
CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"

SYSTEM = "You are a helpful assistant."
TEMPLATES = {
    # text -> new tokens
    "title2sid": ("Which item has the title: {{title}}?", "{{sid}}"),
    "desc2sid": ("Can you tell me what item is described as {{description}}?", "{{sid}}"),
    "titledesc2sid": ("What item is called {{title}} and described as {{description}}?", "{{sid}}"),
    # new tokens -> text
    "sid2title": ("Could you please tell me what item {{sid}} is called?", "{{title}}"),
    "sid2desc": ("Briefly describe item {{sid}}.", "{{description}}"),
    "sid2titledesc": ("What is the title and description of item {{sid}}?",
                      "{{title}}\n\n{{description}}"),
    # retrieval
    "retrieval1": ("The user has interacted with items {{inters}} in chronological order. "
                   "Can you predict the next possible item that the user may expect?", "{{sid}}"),
    "retrieval2": ("Based on the items that the user has interacted with: {{inters}}, "
                   "can you determine what item would be recommended to the user next?", "{{sid}}"),
    "retrieval3": ("Here is the item interaction history of the user: {{inters}}, "
                   "what to recommend to the user next?", "{{sid}}"),
    # text only, used for backbone pretraining
    "desc2title": ("What is the title of the item described as {{description}}?", "{{title}}"),
    "title2desc": ("Briefly describe the item {{title}}.", "{{description}}"),
}
TEXT_TO_SID = ("title2sid", "desc2sid", "titledesc2sid")
SID_TO_TEXT = ("sid2title", "sid2desc", "sid2titledesc")
RETRIEVAL = ("retrieval1", "retrieval2", "retrieval3")
# text-only backbone exchanges: (template, answer override)
TEXT_PRETRAIN = (("desc2title", None), ("title2desc", None),
                 ("title2sid", "{{description}}"), ("desc2sid", "{{title}}"),
                 ("titledesc2sid", "{{title}}"))

_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


@dataclass
class Item:
    item_id: str
    title: str
    description: str
    path: tuple[int, ...]
    z: np.ndarray


@dataclass
class SyntheticCatalog:
    items: list[Item]
    depth: int
    branching: int
    words: list[list[str]]        # [level][cluster]
    level_means: np.ndarray       # (depth, branching, dim)
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.level_means.shape[2]

    @property
    def ids(self) -> list[str]:
        return [it.item_id for it in self.items]

    def by_id(self) -> dict[str, Item]:
        return {it.item_id: it for it in self.items}

    def embeddings(self) -> np.ndarray:
        return np.stack([it.z for it in self.items])

    def path_mean(self, path) -> np.ndarray:
        return sum(self.level_means[l, c] for l, c in enumerate(path))

    def save(self, path) -> None:
        header = {"format": CATALOG_FORMAT, "depth": self.depth, "branching": self.branching,
                  "dim": self.dim, "seed": self.seed, "words": self.words,
                  "level_means": [[[x.hex() for x in v] for v in lvl] for lvl in self.level_means],
                  "fields": ["item_id", "title", "description", "path", "z"]}
        lines = [json.dumps(header, sort_keys=True)]
        for it in self.items:
            lines.append(json.dumps([it.item_id, it.title, it.description, list(it.path),
                                     [float(x).hex() for x in it.z]]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> SyntheticCatalog:
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        if header.get("format") != CATALOG_FORMAT:
            raise ValueError(f"{path}: not a {CATALOG_FORMAT} file")
        items = []
        for ln in lines[1:]:
            iid, title, desc, p, z = json.loads(ln)
            items.append(Item(iid, title, desc, tuple(p), np.array([float.fromhex(x) for x in z])))
        means = np.array([[[float.fromhex(x) for x in v] for v in lvl]
                          for lvl in header["level_means"]])
        return cls(items, header["depth"], header["branching"], header["words"], means,
                   header["seed"])


def _n_features(branching: int) -> int:
    return max(1, math.ceil(math.log2(branching)))


def _signs(k: int, n_feat: int) -> np.ndarray:
    return np.array([1.0 if (k >> f) & 1 else -1.0 for f in range(n_feat)])


def generate_catalog(n_items: int, depth: int = 4, branching: int = 8, noise: float = 0.02,
                     seed: int = 0, dim: int = 32, decay: float = 0.45,
                     offset: float = 1.0) -> SyntheticCatalog:
    """Items with hierarchical latent paths, verbalized descriptions and embeddings.

    ``z = offset * g + sum_l level_means[l, path[l]] + noise * N(0, I)``, with
    level scales shrinking geometrically by ``decay`` and ``g`` a standard
    Gaussian direction shared by every item (embedding spaces are rarely
    centred; the shared mean ends up in the first-level codewords).
    """
    if branching < 2 or depth < 1:
        raise ValueError("need branching >= 2 and depth >= 1")
    rng = make_rng(seed, 101)
    n_feat = _n_features(branching)
    syllables = [c + v for c in CONSONANTS for v in VOWELS]
    need = depth * n_feat * 2
    if need > len(syllables):
        raise ValueError("too many levels/features for the syllable inventory")
    if branching > len(CONSONANTS):
        raise ValueError("branching exceeds the number of distinct leading consonants")
    pick = rng.permutation(len(syllables))[:need]
    syl = np.array(syllables)[pick].reshape(depth, n_feat, 2)
    roots = [[CONSONANTS[c] + VOWELS[int(rng.integers(len(VOWELS)))]
              for c in rng.permutation(len(CONSONANTS))[:branching]] for _ in range(depth)]
    feats = rng.normal(size=(depth, n_feat, dim))
    means = np.zeros((depth, branching, dim))
    words = []
    for l in range(depth):
        scale = decay ** l / math.sqrt(n_feat)
        row = []
        for k in range(branching):
            s = _signs(k, n_feat)
            means[l, k] = scale * (s @ feats[l])
            row.append(roots[l][k] + "".join(syl[l, f, int(s[f] > 0)] for f in range(n_feat)))
        words.append(row)

    paths = rng.integers(0, branching, size=(n_items, depth))
    eps = rng.normal(size=(n_items, dim))
    shared = offset * make_rng(seed, 103).normal(size=dim)
    items = []
    for i in range(n_items):
        p = tuple(int(c) for c in paths[i])
        z = shared + sum(means[l, c] for l, c in enumerate(p)) + noise * eps[i]
        desc = f"{words[0][p[0]]} item" + "".join(
            f", {_level_name(l)} {words[l][c]}" for l, c in enumerate(p) if l)
        head = " ".join(words[l][c].capitalize() for l, c in enumerate(p[:2]))
        items.append(Item(f"i{i:04d}", f"{head} {i}", desc, p, np.asarray(z, dtype=np.float64)))
    return SyntheticCatalog(items, depth, branching, words, means, seed)


def _level_name(level: int) -> str:
    return LEVEL_NAMES[level] if level < len(LEVEL_NAMES) else f"tier{level}"


@dataclass
class InteractionDataset:
    sequences: dict[str, list[str]]
    home: dict[str, tuple[int, ...]] = field(default_factory=dict)
    seed: int = 0

    def users(self) -> list[str]:
        return sorted(self.sequences)

    def targets(self, user: str, split: str) -> list[int]:
        """Positions used as targets for ``split``: leave-one-out on the tail."""
        n = len(self.sequences[user])
        if split == "test":
            return [n - 1]
        if split == "valid":
            return [n - 2]
        if split == "train":
            return list(range(1, n - 2))
        raise ValueError(f"unknown split {split!r}")

    def save(self, path) -> None:
        lines = [json.dumps({"format": INTERACTIONS_FORMAT, "seed": self.seed,
                             "fields": ["user_id", "home", "items"]})]
        for u in self.users():
            lines.append(json.dumps([u, list(self.home.get(u, ())), self.sequences[u]]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> InteractionDataset:
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        if header.get("format") != INTERACTIONS_FORMAT:
            raise ValueError(f"{path}: not a {INTERACTIONS_FORMAT} file")
        seqs, home = {}, {}
        for ln in lines[1:]:
            u, h, items = json.loads(ln)
            seqs[u], home[u] = items, tuple(h)
        return cls(seqs, home, header["seed"])


def generate_interactions(catalog: SyntheticCatalog, n_users: int, seq_len_range=(4, 7),
                          affinity: float = 0.8, seed: int = 0,
                          home_level: int | None = 2) -> InteractionDataset:
    """Users that draw items from a home cluster with probability ``affinity``.

    The home cluster is the length-``home_level`` path prefix of a random
    catalog item (``None`` means the full leaf path). Each draw picks from the
    home cluster with probability ``affinity`` and uniformly from the catalog
    otherwise; draws avoid items already in the history while the pool allows.
    """
    lo, hi = seq_len_range
    if lo < 3 or hi < lo:
        raise ValueError("sequence lengths must satisfy 3 <= min <= max")
    level = catalog.depth if home_level is None else home_level
    rng = make_rng(seed, 202)
    ids = catalog.ids
    prefixes = [it.path[:level] for it in catalog.items]
    seqs, home = {}, {}
    for u in range(n_users):
        anchor = prefixes[int(rng.integers(len(ids)))]
        pool = [i for i, p in zip(ids, prefixes) if p == anchor]
        n = int(rng.integers(lo, hi + 1))
        seq = []
        for _ in range(n):
            src = pool if rng.random() < affinity else ids
            fresh = [i for i in src if i not in seq]
            choice = fresh if fresh else src
            seq.append(choice[int(rng.integers(len(choice)))])
        uid = f"u{u:04d}"
        seqs[uid], home[uid] = seq, tuple(anchor)
    return InteractionDataset(seqs, home, seed)


def render_prompt(template_id: str, bindings: dict, vocab: Vocabulary,
                  answer: str | None = None) -> TokenSequence:
    """Byte-level chat rendering with role markers as special tokens.

    Binding values are strings (encoded as bytes) or token-id lists (SIDs and
    interaction histories). ``answer`` replaces the template's assistant side.
    Only the assistant span and the closing ``<eos>`` carry loss weight.
    """
    if template_id not in TEMPLATES:
        raise KeyError(f"unknown template {template_id!r}")
    user, assistant = TEMPLATES[template_id]
    if answer is not None:
        assistant = answer
    prompt = ([vocab.bos, vocab.special("<system>")] + vocab.bytes_of(SYSTEM)
              + [vocab.special("<user>")] + _fill(user, bindings, vocab)
              + [vocab.special("<assistant>")])
    target = _fill(assistant, bindings, vocab) + [vocab.eos]
    return TokenSequence(prompt + target, [0.0] * len(prompt) + [1.0] * len(target))


def _fill(template: str, bindings: dict, vocab: Vocabulary) -> list[int]:
    out, pos = [], 0
    for m in _PLACEHOLDER.finditer(template):
        name = m.group(1)
        if name not in bindings:
            raise KeyError(f"unbound placeholder {{{{{name}}}}}")
        out += vocab.bytes_of(template[pos:m.start()])
        val = bindings[name]
        out += vocab.bytes_of(val) if isinstance(val, str) else [int(t) for t in val]
        pos = m.end()
    return out + vocab.bytes_of(template[pos:])


def prompt_length(seq: TokenSequence) -> int:
    """Number of leading tokens that carry no loss weight."""
    return next(i for i, w in enumerate(seq.weights) if w)


@dataclass
class GroundingExample:
    seq: TokenSequence
    direction: str  # "text->sid" or "sid->text"
    item_id: str

    @property
    def ids(self):
        return self.seq.ids

    @property
    def weights(self):
        return self.seq.weights

    def __len__(self):
        return len(self.seq)


def build_grounding_corpus(catalog: SyntheticCatalog, sid_map, vocab: Vocabulary,
                           bidirectional: bool = True) -> list[GroundingExample]:
    """One text->SID example per item, round-robin over the three templates,
    plus one SID->text example per item when ``bidirectional``."""
    out = []
    for idx, it in enumerate(catalog.items):
        if it.item_id not in sid_map.sids:
            raise KeyError(f"item {it.item_id} has no semantic ID")
        b = {"title": it.title, "description": it.description,
             "sid": vocab.sid_tokens(sid_map.sids[it.item_id])}
        out.append(GroundingExample(render_prompt(TEXT_TO_SID[idx % 3], b, vocab),
                                    "text->sid", it.item_id))
        if bidirectional:
            out.append(GroundingExample(render_prompt(SID_TO_TEXT[idx % 3], b, vocab),
                                        "sid->text", it.item_id))
    return out


@dataclass
class RetrievalExample:
    seq: TokenSequence
    user: str
    target: str
    split: str

    @property
    def ids(self):
        return self.seq.ids

    @property
    def weights(self):
        return self.seq.weights

    def __len__(self):
        return len(self.seq)


def history_tokens(history, sid_map, vocab: Vocabulary) -> list[int]:
    out = []
    for n, item in enumerate(history):
        if n:
            out += vocab.bytes_of(", ")
        out += vocab.sid_tokens(sid_map.sids[item])
    return out


def retrieval_examples(interactions: InteractionDataset, sid_map, vocab: Vocabulary,
                       split: str, max_history: int = 5) -> list[RetrievalExample]:
    """History -> next-item SID prompts for the targets of ``split``."""
    out = []
    for u in interactions.users():
        seq = interactions.sequences[u]
        for t in interactions.targets(u, split):
            hist = seq[max(0, t - max_history):t]
            b = {"inters": history_tokens(hist, sid_map, vocab),
                 "sid": vocab.sid_tokens(sid_map.sids[seq[t]])}
            tid = RETRIEVAL[len(out) % 3]
            out.append(RetrievalExample(render_prompt(tid, b, vocab), u, seq[t], split))
    return out


def build_sft_corpus(interactions: InteractionDataset, sid_map, vocab: Vocabulary,
                     mode: str = "vanilla", catalog: SyntheticCatalog | None = None,
                     max_history: int = 5) -> list:
    """Training sequences for fine-tuning.

    ``vanilla`` is retrieval prompts only; ``multitask`` interleaves them 1:1
    with alignment prompts in both directions drawn round-robin from the
    grounding templates.
    """
    retrieval = retrieval_examples(interactions, sid_map, vocab, "train", max_history)
    if mode == "vanilla":
        return retrieval
    if mode != "multitask":
        raise ValueError(f"unknown sft mode {mode!r}")
    if catalog is None:
        raise ValueError("multitask mode needs the catalog for alignment prompts")
    align = build_grounding_corpus(catalog, sid_map, vocab, bidirectional=True)
    out = []
    for n, ex in enumerate(retrieval):
        out.append(ex)
        out.append(align[n % len(align)])
    return out


def pretraining_corpus(catalog: SyntheticCatalog, vocab: Vocabulary) -> list[TokenSequence]:
    """Text-only sequences for the backbone: raw title/description lines and
    chat exchanges answered in text, including the text->SID questions answered
    with a title or description. Every token carries loss weight."""
    out = []
    for it in catalog.items:
        raw = [vocab.bos] + vocab.bytes_of(f"{it.title}: {it.description}") + [vocab.eos]
        out.append(TokenSequence(raw, [1.0] * len(raw)))
        b = {"title": it.title, "description": it.description}
        for tid, answer in TEXT_PRETRAIN:
            s = render_prompt(tid, b, vocab, answer)
            out.append(TokenSequence(s.ids, [1.0] * len(s)))
    return out
