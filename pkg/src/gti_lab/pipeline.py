"""On-disk experiment stages.

Layout under the workdir::

    data/        catalog.jsonl, interactions.jsonl
    rq/          codebooks.txt, sidmap.tsv, stats.json
    seed_<s>/    backbone.ckpt, pretrain_log.jsonl
    seed_<s>/init_<strategy>/   extended.ckpt, init.ckpt (+ ground_log.jsonl for gti)
    seed_<s>/<arm>/             model.ckpt, sft_log.jsonl, metrics.json,
                                rankings.tsv, diagnostics/
    report/      metrics.csv, gain_table.csv, k_sweep.csv, geometry.csv

Every directory carries a ``manifest.json`` with the config digest, the seed, the
code version and the sha256 of each file it describes. Nothing in a stage
depends on wall-clock time, so rerunning a stage rewrites identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentSpec
from .corpus import (InteractionDataset, SyntheticCatalog, build_grounding_corpus,
                     build_sft_corpus, generate_catalog, generate_interactions,
                     pretraining_corpus, retrieval_examples)
from .decode import (METRICS, SidTrie, evaluate, gain_table_csv, metric_rows, rows_to_csv)
from .diagnostics import diagnose_checkpoint
from .lm import ModelParams
from .rq import Assignment, CodebookStack, assign_all, codebook_stats, fit_codebooks
from .training import (ARM_LABELS, RunRecord, arm_name, build_backbone, extend_arm, finetune,
                       ground_arm)
from .vocab import Vocabulary

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "gti-manifest/1"


class MissingInput(RuntimeError):
    """A stage was asked to run before the stage producing its inputs."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir, spec: ExperimentSpec, stage: str, seed=None, extra=None) -> Path:
    out = Path(out_dir)
    files = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    body = {"format": MANIFEST_FORMAT, "stage": stage, "spec_sha256": spec.digest(),
            "seed": seed, "code_version": __version__,
            "files": {name: _sha256(out / name) for name in files}}
    if extra:
        body.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _need(path: Path, stage: str) -> Path:
    """``path`` if it exists and matches its directory manifest.

    A file without a manifest entry, or with a stale one, is a partial output
    from an interrupted stage and is never consumed.
    """
    manifest = path.parent / "manifest.json"
    if not path.exists() or not manifest.exists():
        raise MissingInput(f"{path} not found; run `{stage}` first")
    files = json.loads(manifest.read_text()).get("files", {})
    if files.get(path.name) != _sha256(path):
        raise MissingInput(f"{path} does not match its manifest; rerun `{stage}`")
    return path


def _log(event: str, **fields) -> None:
    log.info(json.dumps({"event": event, **fields}, sort_keys=True))


class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def rq(self) -> Path:
        return self.root / "rq"

    @property
    def report(self) -> Path:
        return self.root / "report"

    def seed(self, seed: int) -> Path:
        return self.root / f"seed_{seed}"

    def init(self, seed: int, strategy: str) -> Path:
        return self.seed(seed) / f"init_{strategy}"

    def arm(self, seed: int, arm: str) -> Path:
        return self.seed(seed) / arm


def arms_of(spec: ExperimentSpec) -> list[tuple[str, str, str]]:
    """``(arm, strategy, sft_mode)`` for every cell of the grid."""
    return [(arm_name(s, m), s, m) for s in spec.strategies for m in spec.sft_modes]


# --- data stages -----------------------------------------------------------

def gen_data(spec: ExperimentSpec, wd: Workdir) -> None:
    d = spec.data
    catalog = generate_catalog(d.n_items, d.depth, d.branching, d.noise, d.seed, d.dim, d.decay,
                               d.offset)
    inter = generate_interactions(catalog, d.n_users, (d.seq_len_min, d.seq_len_max),
                                  d.affinity, d.seed, d.home_level)
    wd.data.mkdir(parents=True, exist_ok=True)
    catalog.save(wd.data / "catalog.jsonl")
    inter.save(wd.data / "interactions.jsonl")
    write_manifest(wd.data, spec, "gen-data", d.seed)
    _log("gen-data", items=len(catalog.items), users=len(inter.sequences))


def fit_rq(spec: ExperimentSpec, wd: Workdir) -> None:
    catalog = SyntheticCatalog.load(_need(wd.data / "catalog.jsonl", "gen-data"))
    cb = fit_codebooks(catalog.embeddings(), spec.rq.levels, spec.rq.size, spec.rq.seed)
    wd.rq.mkdir(parents=True, exist_ok=True)
    cb.save(wd.rq / "codebooks.txt")
    write_manifest(wd.rq, spec, "fit-rq", spec.rq.seed)
    _log("fit-rq", levels=cb.levels, size=cb.size, dim=cb.dim)


def assign_sids(spec: ExperimentSpec, wd: Workdir) -> None:
    catalog = SyntheticCatalog.load(_need(wd.data / "catalog.jsonl", "gen-data"))
    cb = CodebookStack.load(_need(wd.rq / "codebooks.txt", "fit-rq"))
    amap = assign_all(catalog.ids, catalog.embeddings(), cb, spec.rq.collision_policy,
                      spec.rq.epsilon, spec.rq.iterations)
    amap.save(wd.rq / "sidmap.tsv")
    stats = codebook_stats(amap, cb.levels, cb.size)
    stats["sinkhorn_converged"] = amap.sinkhorn_converged
    (wd.rq / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    write_manifest(wd.rq, spec, "assign-sids", spec.rq.seed)
    _log("assign-sids", rerouted=stats["rerouted"], suffixed=stats["suffixed"],
         unique=stats["unique"])


@dataclass
class PreparedData:
    """Everything the training and evaluation stages read from ``data/`` and ``rq/``."""
    catalog: SyntheticCatalog
    interactions: InteractionDataset
    codebooks: CodebookStack
    sid_map: Assignment
    vocab: Vocabulary
    pretrain_corpus: list
    ground_corpus: list
    sft_corpus: dict
    eval_examples: list
    trie: SidTrie

    @property
    def n_suffix(self) -> int:
        return self.vocab.n_suffix


def load_prepared(spec: ExperimentSpec, wd: Workdir) -> PreparedData:
    catalog = SyntheticCatalog.load(_need(wd.data / "catalog.jsonl", "gen-data"))
    inter = InteractionDataset.load(_need(wd.data / "interactions.jsonl", "gen-data"))
    cb = CodebookStack.load(_need(wd.rq / "codebooks.txt", "fit-rq"))
    amap = Assignment.load(_need(wd.rq / "sidmap.tsv", "assign-sids"))
    return prepare(spec, catalog, inter, cb, amap)


def prepare(spec: ExperimentSpec, catalog, inter, cb, amap) -> PreparedData:
    vocab = Vocabulary(cb.levels, cb.size, max(0, amap.max_suffix))
    h = spec.data.max_history
    sft = {m: build_sft_corpus(inter, amap, vocab, m, catalog, h) for m in spec.sft_modes}
    return PreparedData(
        catalog, inter, cb, amap, vocab,
        pretrain_corpus=pretraining_corpus(catalog, Vocabulary()),
        ground_corpus=build_grounding_corpus(catalog, amap, vocab, spec.ground.bidirectional),
        sft_corpus=sft,
        eval_examples=retrieval_examples(inter, amap, vocab, spec.eval.split, h),
        trie=SidTrie(amap, vocab),
    )


def prepare_in_memory(spec: ExperimentSpec) -> PreparedData:
    """Data, codebooks and SIDs without touching the disk."""
    d = spec.data
    catalog = generate_catalog(d.n_items, d.depth, d.branching, d.noise, d.seed, d.dim, d.decay,
                               d.offset)
    inter = generate_interactions(catalog, d.n_users, (d.seq_len_min, d.seq_len_max),
                                  d.affinity, d.seed, d.home_level)
    cb = fit_codebooks(catalog.embeddings(), spec.rq.levels, spec.rq.size, spec.rq.seed)
    amap = assign_all(catalog.ids, catalog.embeddings(), cb, spec.rq.collision_policy,
                      spec.rq.epsilon, spec.rq.iterations)
    return prepare(spec, catalog, inter, cb, amap)


# --- model stages ----------------------------------------------------------

def _write_log(path: Path, record: RunRecord) -> None:
    path.write_text("".join(line + "\n" for line in record.step_lines()))


def pretrain_stage(spec: ExperimentSpec, wd: Workdir, data: PreparedData, seed: int) -> None:
    out = wd.seed(seed)
    out.mkdir(parents=True, exist_ok=True)
    params, rec = build_backbone(spec, data.pretrain_corpus, seed)
    params.save(out / "backbone.ckpt")
    _write_log(out / "pretrain_log.jsonl", rec)
    write_manifest(out, spec, "pretrain", seed)
    _log("pretrain", seed=seed, first_loss=rec.losses[0], final_loss=rec.losses[-1])


def extend_stage(spec: ExperimentSpec, wd: Workdir, data: PreparedData, seed: int) -> None:
    """Extended embedding tables, one directory per strategy.

    Every strategy gets ``extended.ckpt``. Mean and random rows are final, so
    their ``init.ckpt`` is the same table; the GTI ``init.ckpt`` is written by
    the ``ground`` stage (a stale one is removed here).
    """
    backbone = ModelParams.load(_need(wd.seed(seed) / "backbone.ckpt", "pretrain"))
    for strategy in spec.strategies:
        params = extend_arm(spec, backbone, strategy, seed, data.n_suffix)
        out = wd.init(seed, strategy)
        out.mkdir(parents=True, exist_ok=True)
        params.save(out / "extended.ckpt")
        if strategy == "gti":
            for stale in ("init.ckpt", "ground_log.jsonl"):
                (out / stale).unlink(missing_ok=True)
        else:
            params.save(out / "init.ckpt")
        write_manifest(out, spec, "extend", seed, {"strategy": strategy})
        _log("extend", seed=seed, strategy=strategy)


def ground_stage(spec: ExperimentSpec, wd: Workdir, data: PreparedData, seed: int) -> None:
    """Ground the extended GTI table into ``init.ckpt``."""
    if "gti" not in spec.strategies:
        return
    out = wd.init(seed, "gti")
    params = ModelParams.load(_need(out / "extended.ckpt", "extend"))
    params, rec = ground_arm(spec, params, data.ground_corpus, seed)
    params.save(out / "init.ckpt")
    _write_log(out / "ground_log.jsonl", rec)
    write_manifest(out, spec, "ground", seed, {"strategy": "gti"})
    _log("ground", seed=seed, first_loss=rec.losses[0], final_loss=rec.losses[-1])


def sft_stage(spec: ExperimentSpec, wd: Workdir, data: PreparedData, seed: int) -> None:
    for arm, strategy, mode in arms_of(spec):
        init_dir = wd.init(seed, strategy)
        start = ModelParams.load(_need(init_dir / "init.ckpt",
                                       "ground" if strategy == "gti" else "extend"))
        params, rec = finetune(spec, start, data.sft_corpus[mode], seed)
        out = wd.arm(seed, arm)
        out.mkdir(parents=True, exist_ok=True)
        params.save(out / "model.ckpt")
        _write_log(out / "sft_log.jsonl", rec)
        write_manifest(out, spec, "sft", seed, {"arm": arm, "strategy": strategy,
                                                 "sft_mode": mode})
        _log("sft", seed=seed, arm=arm, first_loss=rec.losses[0], final_loss=rec.losses[-1])


def eval_stage(spec: ExperimentSpec, wd: Workdir, data: PreparedData, seed: int) -> None:
    e = spec.eval
    for arm, _, _ in arms_of(spec):
        out = wd.arm(seed, arm)
        params = ModelParams.load(_need(out / "model.ckpt", "sft"))
        table, results = evaluate(params, data.eval_examples, data.trie, e.ks, e.beam_width,
                                  e.max_queries)
        body = {f"{m}@{k}": {"mean": mean, "stderr": se, "n": n}
                for (m, k), (mean, se, n) in sorted(table.items())}
        (out / "metrics.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        lines = ["query\ttarget\trank\ttop10"]
        for r in results:
            target = next(iter(r.relevant))
            rank = r.items.index(target) + 1 if target in r.items else 0
            lines.append(f"{r.query_id}\t{target}\t{rank}\t{','.join(r.items[:10])}")
        (out / "rankings.tsv").write_text("\n".join(lines) + "\n")
        write_manifest(out, spec, "eval", seed, {"arm": arm})
        _log("eval", seed=seed, arm=arm, **{f"recall@{k}": table[("recall", k)][0]
                                            for k in e.ks})


def diagnose_stage(spec: ExperimentSpec, wd: Workdir, data: PreparedData, seed: int) -> None:
    targets = [(wd.arm(seed, a) / "model.ckpt", wd.arm(seed, a) / "diagnostics")
               for a, _, _ in arms_of(spec)]
    targets += [(wd.init(seed, s) / "init.ckpt", wd.init(seed, s) / "diagnostics")
                for s in spec.strategies]
    for ckpt, out in targets:
        params = ModelParams.load(_need(ckpt, "sft"))
        report = diagnose_checkpoint(params, data.sid_map, data.codebooks, data.catalog,
                                     seed, spec.diagnostics.n_sample)
        report.write(out, spec.diagnostics.heatmaps, manifest=False)
        write_manifest(out, spec, "diagnose", seed, {"checkpoint": ckpt.parent.name,
                                                     "report": report.manifest_body()})
        _log("diagnose", seed=seed, checkpoint=ckpt.parent.name, erank=report.erank,
             rsa=report.rsa.pearson_r if report.rsa else None)


# --- report ------------------------------------------------------------------

def _median(values):
    return float(np.median(values)) if values else None


def collect(spec: ExperimentSpec, wd: Workdir) -> dict:
    """Per-arm, per-seed metrics and geometry read back from disk."""
    out = {}
    for arm, _, _ in arms_of(spec):
        for seed in spec.seeds:
            d = wd.arm(seed, arm)
            metrics = json.loads(_need(d / "metrics.json", "eval").read_text())
            geo = {}
            erank_path = d / "diagnostics" / "erank.csv"
            if erank_path.exists():
                rows = dict(line.split(",") for line in erank_path.read_text().splitlines()[1:])
                geo["erank"] = float(rows["entropy_effective_rank"])
                rsa_path = d / "diagnostics" / "rsa.csv"
                if rsa_path.exists():
                    geo["rsa_pearson"] = float(rsa_path.read_text().splitlines()[1].split(",")[1])
            out[(arm, seed)] = {"metrics": metrics, "geometry": geo}
    return out


def report_stage(spec: ExperimentSpec, wd: Workdir) -> dict:
    """Aggregate over seeds: metric table, relative-gain table, K sweep, geometry."""
    got = collect(spec, wd)
    arms = [a for a, _, _ in arms_of(spec)]
    ks = list(spec.eval.ks)
    tables, medians = {}, {}
    for arm in arms:
        tables[arm], medians[arm] = {}, {}
        for m in METRICS:
            for k in ks:
                vals = [got[(arm, s)]["metrics"][f"{m}@{k}"]["mean"] for s in spec.seeds]
                vals = [v for v in vals if v is not None]
                arr = np.asarray(vals)
                se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
                tables[arm][(m, k)] = (float(arr.mean()) if len(arr) else None, se, len(arr))
                medians[arm][(m, k)] = _median(vals)
    wd.report.mkdir(parents=True, exist_ok=True)
    baseline = spec.eval.baseline if spec.eval.baseline in arms else arms[0]
    (wd.report / "metrics.csv").write_text(rows_to_csv(metric_rows(tables, baseline)))
    means = {a: {key: v[0] for key, v in t.items()} for a, t in tables.items()}
    (wd.report / "gain_table.csv").write_text(gain_table_csv(means, ARM_LABELS, baseline, ks))
    sweep = ["arm,metric,k,mean,relative_gain_vs_baseline"]
    for arm in arms:
        for m in METRICS:
            for k in ks:
                base = means[baseline][(m, k)]
                gain = None if not base else 100.0 * (means[arm][(m, k)] - base) / base
                sweep.append(f"{arm},{m},{k},{means[arm][(m, k)]!r},"
                             + ("skip" if gain is None else f"{gain:+.2f}%"))
    (wd.report / "k_sweep.csv").write_text("\n".join(sweep) + "\n")
    geo_lines = ["arm,seed,erank,rsa_pearson"]
    for arm in arms:
        for seed in spec.seeds:
            g = got[(arm, seed)]["geometry"]
            geo_lines.append(f"{arm},{seed},{g.get('erank', '')!r},{g.get('rsa_pearson', '')!r}")
    (wd.report / "geometry.csv").write_text("\n".join(geo_lines) + "\n")
    write_manifest(wd.report, spec, "report", None, {"seeds": list(spec.seeds),
                                                     "baseline": baseline})
    _log("report", arms=arms, seeds=list(spec.seeds))
    return {"tables": tables, "medians": medians, "per_seed": got}


def run_seed(spec: ExperimentSpec, wd: Workdir, data: PreparedData, seed: int) -> None:
    pretrain_stage(spec, wd, data, seed)
    extend_stage(spec, wd, data, seed)
    ground_stage(spec, wd, data, seed)
    sft_stage(spec, wd, data, seed)
    eval_stage(spec, wd, data, seed)
    diagnose_stage(spec, wd, data, seed)


def run_all(spec: ExperimentSpec, wd: Workdir, jobs: int = 1) -> dict:
    gen_data(spec, wd)
    fit_rq(spec, wd)
    assign_sids(spec, wd)
    data = load_prepared(spec, wd)
    if jobs > 1 and len(spec.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(jobs, len(spec.seeds))) as pool:
            list(pool.map(_run_seed_job, [(spec, str(wd.root), s) for s in spec.seeds]))
    else:
        for seed in spec.seeds:
            run_seed(spec, wd, data, seed)
    return report_stage(spec, wd)


def _run_seed_job(args) -> None:
    spec, root, seed = args
    wd = Workdir(root)
    run_seed(spec, wd, load_prepared(spec, wd), seed)


