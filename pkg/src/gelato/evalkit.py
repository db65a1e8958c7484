"""Retrieval metrics, truncation sweeps, and the freeze-scope comparison
harness.

nDCG uses the graded gain 2^rel - 1 with a log2(rank+1) discount; ranking
ties break by ascending document id so every score is deterministic across
platforms. The sweep scores each configured truncation dimension with the
same embeddings, ranked by prefix cosine.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, UndefinedMetricError
from .registry import ModelBundle
from .trainer import FreezeScope, MixtureSpec, TrainConfig, train
from .embedder import embed


@dataclass
class RetrievalTask:
    """Queries, corpus, and graded relevance judgments."""

    queries: list          # of (query id, InputItem)
    corpus: list           # of (doc id, InputItem)
    qrels: dict            # (query id, doc id) -> relevance grade >= 0

    def __post_init__(self):
        qids = {q for q, _ in self.queries}
        dids = {d for d, _ in self.corpus}
        positives = {q: 0 for q in qids}
        for (q, d), rel in self.qrels.items():
            if q not in qids or d not in dids:
                raise ConfigurationError(f"qrel ({q!r}, {d!r}) references unknown ids")
            if rel < 0:
                raise ConfigurationError(f"negative relevance for ({q!r}, {d!r})")
            if rel > 0:
                positives[q] += 1
        missing = [q for q, n in positives.items() if n == 0]
        if missing:
            raise ConfigurationError(f"queries without positives: {sorted(missing)[:5]}")

    def rels_for(self, qid) -> dict:
        return {d: r for (q, d), r in self.qrels.items() if q == qid and r > 0}


def ndcg_at_k(ranked_doc_ids, rels: dict, k: int = 10) -> float:
    """Normalized discounted cumulative gain over the top k of a ranking.
    `rels` maps doc id -> grade for this query's judged documents."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    positives = sorted((r for r in rels.values() if r > 0), reverse=True)
    if not positives:
        raise UndefinedMetricError("query has no relevant documents")
    dcg = 0.0
    for i, did in enumerate(ranked_doc_ids[:k]):
        rel = rels.get(did, 0)
        if rel > 0:
            dcg += (2.0 ** rel - 1.0) / math.log2(i + 2)
    ideal = sum((2.0 ** r - 1.0) / math.log2(i + 2) for i, r in enumerate(positives[:k]))
    return dcg / ideal


@dataclass
class SweepEntry:
    label: str
    k: int
    ndcg: float


@dataclass
class SweepReport:
    entries: list = field(default_factory=list)

    def add(self, label: str, k: int, ndcg: float) -> None:
        self.entries.append(SweepEntry(label, k, ndcg))

    def score(self, label: str, k: int) -> float:
        for e in self.entries:
            if e.label == label and e.k == k:
                return e.ndcg
        raise KeyError((label, k))

    def to_text(self) -> str:
        lines = ["label\tk\tmean_ndcg_at_10"]
        for e in self.entries:
            lines.append(f"{e.label}\t{e.k}\t{e.ndcg:.6f}")
        return "\n".join(lines) + "\n"

    def plot_data(self) -> str:
        """Wide form: first column k, one column per label."""
        labels = []
        for e in self.entries:
            if e.label not in labels:
                labels.append(e.label)
        ks = sorted({e.k for e in self.entries})
        lines = ["k\t" + "\t".join(labels)]
        for k in ks:
            cells = []
            for label in labels:
                try:
                    cells.append(f"{self.score(label, k):.6f}")
                except KeyError:
                    cells.append("nan")
            lines.append(f"{k}\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"


def rank_corpus(query_state: np.ndarray, doc_ids: list, doc_states: np.ndarray,
                k_dim: int) -> list:
    """Rank documents by cosine of k-prefixes, ties broken by ascending doc
    id. States are pre-normalization pooled vectors."""
    q = query_state[:k_dim]
    d = doc_states[:, :k_dim]
    qn = np.linalg.norm(q)
    dn = np.linalg.norm(d, axis=1)
    sims = (d @ q) / (dn * qn)
    order = sorted(range(len(doc_ids)), key=lambda i: (-sims[i], doc_ids[i]))
    return [doc_ids[i] for i in order]


def retrieval_eval(task: RetrievalTask, bundle: ModelBundle, k_dims: list,
                   label: Optional[str] = None, ndcg_k: int = 10) -> SweepReport:
    """Mean nDCG over the task's queries at every truncation dimension."""
    label = label or bundle.profile.name
    d = bundle.profile.d_text
    for k in k_dims:
        if not 1 <= k <= d:
            raise ConfigurationError(f"truncation dim {k} outside [1, {d}]")

    doc_ids = [did for did, _ in task.corpus]
    doc_states = np.stack([embed(item, bundle).raw_last_state for _, item in task.corpus])
    query_states = {qid: embed(item, bundle).raw_last_state for qid, item in task.queries}

    report = SweepReport()
    for k in k_dims:
        scores = []
        for qid, _ in task.queries:
            ranked = rank_corpus(query_states[qid], doc_ids, doc_states, k)
            scores.append(ndcg_at_k(ranked, task.rels_for(qid), ndcg_k))
        report.add(label, k, float(np.mean(scores)))
    return report


def recall_at_1(task: RetrievalTask, bundle: ModelBundle, k_dim: Optional[int] = None) -> float:
    """Fraction of queries whose top-ranked document is relevant."""
    k_dim = k_dim or bundle.profile.d_text
    doc_ids = [did for did, _ in task.corpus]
    doc_states = np.stack([embed(item, bundle).raw_last_state for _, item in task.corpus])
    hits = 0
    for qid, item in task.queries:
        state = embed(item, bundle).raw_last_state
        top = rank_corpus(state, doc_ids, doc_states, k_dim)[0]
        if task.rels_for(qid).get(top, 0) > 0:
            hits += 1
    return hits / len(task.queries)


# ------------------------------------------------------------ ablation runs

@dataclass
class StageSpec:
    scope: FreezeScope
    lr_max: float
    steps: int


@dataclass
class AblationRunSpec:
    """One run of the comparison suite. `continue_from` names an earlier run
    whose final weights seed this one (two-stage continuation)."""

    name: str
    stages: list
    continue_from: Optional[str] = None
    released: bool = False


def vision_ablation_suite(steps: int, lr_fast: float = 2e-4, lr_slow: float = 1e-5) -> list:
    """Five vision freeze-scope runs: second projector layer only (the
    released recipe), widening to the first layer, widening to the encoder
    at a 20x lower rate, and the two continuations of run I."""
    fc2 = FreezeScope.custom("vproj/fc2/")
    fc12 = FreezeScope.custom("vproj/fc1/", "vproj/fc2/")
    enc = FreezeScope.custom("vproj/fc1/", "vproj/fc2/", "vision/")
    return [
        AblationRunSpec("I", [StageSpec(fc2, lr_fast, steps)], released=True),
        AblationRunSpec("II", [StageSpec(fc12, lr_fast, steps)]),
        AblationRunSpec("III", [StageSpec(enc, lr_slow, steps)]),
        AblationRunSpec("IV", [StageSpec(fc12, lr_fast, steps)], continue_from="I"),
        AblationRunSpec("V", [StageSpec(enc, lr_slow, steps)], continue_from="I"),
    ]


def audio_ablation_suite(steps: int, lr_fast: float = 2e-4, lr_slow: float = 1e-5) -> list:
    """Three audio freeze-scope runs: projector only (released), projector
    plus encoder from scratch, and the continuation of run I."""
    fc = FreezeScope.custom("aproj/")
    enc = FreezeScope.custom("aproj/", "audio/")
    return [
        AblationRunSpec("I", [StageSpec(fc, lr_fast, steps)], released=True),
        AblationRunSpec("II", [StageSpec(enc, lr_slow, steps)]),
        AblationRunSpec("III", [StageSpec(enc, lr_slow, steps)], continue_from="I"),
    ]


def _hash_params(bundle: ModelBundle, names) -> str:
    h = hashlib.sha256()
    for n in sorted(names):
        h.update(n.encode())
        h.update(bundle.params[n].value.tobytes())
    return h.hexdigest()


@dataclass
class AblationRunReport:
    name: str
    scope: str
    released: bool
    continue_from: Optional[str]
    reset_projector_hash: str          # primary projector weights at run start
    encoder_hash_before: str
    encoder_hash_after: str
    start_hash_over_parent_set: Optional[str]   # parent's trainable set, hashed at this run's start
    parent_final_hash: Optional[str]            # same set, hashed at the parent's end
    first_loss: float
    final_loss: float
    eval_history: list                 # of (step, score)


@dataclass
class AblationReport:
    runs: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)   # run name -> list of TraceRow

    def run(self, name: str) -> AblationRunReport:
        for r in self.runs:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_text(self) -> str:
        lines = [
            "run\treleased\tscope\tcontinue_from\treset_projector_hash"
            "\tencoder_changed\tfirst_loss\tfinal_loss\tfinal_eval"
        ]
        for r in self.runs:
            final_eval = r.eval_history[-1][1] if r.eval_history else float("nan")
            lines.append(
                f"{r.name}\t{'yes' if r.released else 'no'}\t{r.scope}"
                f"\t{r.continue_from or '-'}\t{r.reset_projector_hash[:12]}"
                f"\t{'yes' if r.encoder_hash_after != r.encoder_hash_before else 'no'}"
                f"\t{r.first_loss:.6f}\t{r.final_loss:.6f}\t{final_eval:.6f}"
            )
        return "\n".join(lines) + "\n"


def run_ablation_suite(specs: list, base_bundle: ModelBundle, data: MixtureSpec,
                       cfg: TrainConfig, eval_task: Optional[RetrievalTask] = None,
                       primary_prefix: str = "vproj/fc2/",
                       encoder_prefix: str = "vision/") -> AblationReport:
    """Execute the suite from one shared starting bundle, shared data, and a
    shared seed; runs are scored on the eval task at each stage end, and
    two-stage runs continue from their parent's final weights. The report is
    byte-reproducible for fixed seeds."""
    report = AblationReport()
    finals: dict = {}   # run name -> (bundle, trainable names, final hash over them)

    for spec in specs:
        parent_final_hash = None
        start_hash_over_parent_set = None
        if spec.continue_from is not None:
            if spec.continue_from not in finals:
                raise ConfigurationError(
                    f"run {spec.name!r} continues from {spec.continue_from!r}, "
                    "which has not run yet"
                )
            parent_bundle, parent_names, parent_final_hash = finals[spec.continue_from]
            work = parent_bundle.copy()
            start_hash_over_parent_set = _hash_params(work, parent_names)
        else:
            work = base_bundle.copy()

        primary_names = [n for n in work.params.names() if n.startswith(primary_prefix)]
        encoder_names = [n for n in work.params.names() if n.startswith(encoder_prefix)]
        reset_hash = _hash_params(work, primary_names)
        enc_before = _hash_params(work, encoder_names)

        trace = []
        eval_history = []
        scope_desc = []
        step_offset = 0
        for stage in spec.stages:
            stage_cfg = TrainConfig(
                lr_max=stage.lr_max,
                warmup_steps=min(cfg.warmup_steps, stage.steps),
                beta1=cfg.beta1, beta2=cfg.beta2,
                weight_decay=cfg.weight_decay, eps=cfg.eps,
                max_grad_norm=cfg.max_grad_norm,
                batch_size=cfg.batch_size,
                steps=stage.steps,
                tau=cfg.tau, k_set=cfg.k_set, seed=cfg.seed,
                scope=stage.scope,
                eval_interval=cfg.eval_interval,
            )
            scope_desc.append(stage.scope.describe())
            result = train(work, data, stage_cfg)
            for row in result.trace:
                trace.append(type(row)(row.step + step_offset, row.source, row.lr,
                                       row.loss, row.grad_norm_pre_clip))
            if eval_task is not None:
                eval_history.append(
                    (step_offset + stage.steps,
                     retrieval_eval(eval_task, work, [work.profile.d_text],
                                    label=spec.name).entries[0].ndcg)
                )
            step_offset += stage.steps

        final_names = spec.stages[-1].scope.resolve(work.params, work.profile)
        finals[spec.name] = (work, final_names, _hash_params(work, final_names))
        report.traces[spec.name] = trace
        report.runs.append(AblationRunReport(
            name=spec.name,
            scope="+".join(scope_desc),
            released=spec.released,
            continue_from=spec.continue_from,
            reset_projector_hash=reset_hash,
            encoder_hash_before=enc_before,
            encoder_hash_after=_hash_params(work, encoder_names),
            start_hash_over_parent_set=start_hash_over_parent_set,
            parent_final_hash=parent_final_hash,
            first_loss=trace[0].loss,
            final_loss=trace[-1].loss,
            eval_history=eval_history,
        ))
    return report
