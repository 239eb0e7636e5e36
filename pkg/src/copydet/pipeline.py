"""End-to-end seeded runs: world generation, staged training, evaluation.

A run manifest fully determines a run; all randomness flows from its one
seed through named sub-streams (world, train, eval), so any component can
be re-run in isolation. Reports embed the manifest hash: equal hashes mean
byte-identical reports.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import SyntheticWorld, gen_world, substream, write_world
from .embedding import EmbeddingSet, write_embeddings
from .metrics import GroundTruth, build_candidates, micro_ap, recall_at_precision
from .postprocess import NegSubConfig, subtract_negatives_batch
from .train import (
    Encoder,
    LossConfig,
    MemoryBank,
    StageConfig,
    default_stage_schedule,
    run_stage,
)

TOOL_VERSION = "0.1.0"

POSTPROCESS_TARGETS = ("queries", "references", "both")


@dataclass
class RunManifest:
    """Everything that determines a run, serialized beside its outputs."""

    seed: int
    out_dir: str
    n_train: int = 4096
    n_ref: int = 4096
    n_query: int = 1024
    d_in: int = 64
    copy_rate: float = 0.25
    world_tier: str = "strong"
    encoder_dim: int = 32
    encoder_hidden: int = 0
    bank_capacity: int = 2048
    pos_margin: float = 0.0
    neg_margin: float = 1.0
    momentum: float = 0.9
    stages: list[StageConfig] = field(default_factory=default_stage_schedule)
    negsub_n: int = 1
    negsub_k: int = 10
    negsub_beta: float = 0.35
    postprocess_targets: str = "both"
    per_query_k: int = 10
    tool_version: str = TOOL_VERSION

    def __post_init__(self) -> None:
        if self.postprocess_targets not in POSTPROCESS_TARGETS:
            raise ValueError(
                f"postprocess_targets must be one of {POSTPROCESS_TARGETS}"
            )
        self.stages = [
            s if isinstance(s, StageConfig) else StageConfig.from_dict(s)
            for s in self.stages
        ]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def negsub_config(self) -> NegSubConfig:
        return NegSubConfig(n=self.negsub_n, k=self.negsub_k, beta=self.negsub_beta)

    def loss_config(self) -> LossConfig:
        return LossConfig(pos_margin=self.pos_margin, neg_margin=self.neg_margin)


def _evaluate(
    queries: EmbeddingSet, references: EmbeddingSet, gt: GroundTruth, per_query_k: int
) -> tuple[float, float]:
    ranked = build_candidates(queries, references, per_query_k)
    return micro_ap(ranked, gt), recall_at_precision(ranked, gt, 0.90)


@dataclass
class TrainedRun:
    """Intermediate state shared by the trend and swap commands."""

    world: SyntheticWorld
    encoder: Encoder
    gt: GroundTruth
    query_emb: EmbeddingSet
    ref_emb: EmbeddingSet
    train_emb: EmbeddingSet
    stage_rows: list[dict]


def train_and_embed(manifest: RunManifest) -> TrainedRun:
    """World generation plus the staged schedule, evaluating after each stage."""
    world = gen_world(
        seed=manifest.seed,
        n_train=manifest.n_train,
        n_ref=manifest.n_ref,
        n_query=manifest.n_query,
        d_in=manifest.d_in,
        copy_rate=manifest.copy_rate,
        tier=manifest.world_tier,
    )
    gt = GroundTruth.from_pairs(world.gt)
    train_rng = substream(manifest.seed, "train")
    encoder = Encoder.init(
        manifest.d_in, manifest.encoder_dim, manifest.encoder_hidden, rng=train_rng
    )
    bank = MemoryBank(manifest.bank_capacity, manifest.encoder_dim)
    loss_cfg = manifest.loss_config()

    stage_rows: list[dict] = []
    query_emb = encoder.encode_set(world.queries)
    ref_emb = encoder.encode_set(world.reference)
    for stage in manifest.stages:
        _, stage_metrics = run_stage(
            encoder, world, stage, bank, train_rng, loss_cfg, manifest.momentum
        )
        query_emb = encoder.encode_set(world.queries)
        ref_emb = encoder.encode_set(world.reference)
        ap, r90 = _evaluate(query_emb, ref_emb, gt, manifest.per_query_k)
        stage_rows.append(
            {
                "stage": stage.index,
                "augmentation": stage.tier,
                "trained_with_reference": stage.include_reference_negatives,
                "trained_with_gt": stage.include_gt_positives,
                "post_process": False,
                "micro_ap": ap,
                "recall_at_p90": r90,
                "mean_loss": stage_metrics["mean_loss"],
            }
        )
    train_emb = encoder.encode_set(world.training)
    return TrainedRun(world, encoder, gt, query_emb, ref_emb, train_emb, stage_rows)


def _postprocess_eval(
    run: TrainedRun, negatives: EmbeddingSet, manifest: RunManifest
) -> tuple[float, float, EmbeddingSet, EmbeddingSet]:
    cfg = manifest.negsub_config()
    queries, refs = run.query_emb, run.ref_emb
    if manifest.postprocess_targets in ("queries", "both"):
        queries = subtract_negatives_batch(queries, negatives, cfg)
    if manifest.postprocess_targets in ("references", "both"):
        refs = subtract_negatives_batch(refs, negatives, cfg)
    ap, r90 = _evaluate(queries, refs, run.gt, manifest.per_query_k)
    return ap, r90, queries, refs


def reproduce_trend(manifest: RunManifest) -> dict:
    """Full staged run plus the subtraction post-process, with artifacts.

    Writes the world, encoder checkpoint, descriptor files, manifest, and
    both report forms under ``manifest.out_dir``; returns the report.
    """
    run = train_and_embed(manifest)
    post_ap, post_r90, post_q, post_r = _postprocess_eval(run, run.train_emb, manifest)

    last = run.stage_rows[-1] if run.stage_rows else {
        "augmentation": None, "trained_with_reference": False, "trained_with_gt": False,
    }
    rows = run.stage_rows + [
        {
            "stage": "post",
            "augmentation": last["augmentation"],
            "trained_with_reference": last["trained_with_reference"],
            "trained_with_gt": last["trained_with_gt"],
            "post_process": True,
            "micro_ap": post_ap,
            "recall_at_p90": post_r90,
        }
    ]
    report = {
        "command": "reproduce-trend",
        "manifest_hash": manifest.hash(),
        "tool_version": manifest.tool_version,
        "seed": manifest.seed,
        "positives": run.gt.positives,
        "rows": rows,
    }

    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_world(run.world, out / "world")
    run.encoder.save(out / "encoder.bin")
    emb_dir = out / "embeddings"
    emb_dir.mkdir(exist_ok=True)
    write_embeddings(run.train_emb, emb_dir / "training.emb")
    write_embeddings(run.ref_emb, emb_dir / "reference.emb")
    write_embeddings(run.query_emb, emb_dir / "queries.emb")
    write_embeddings(post_q, emb_dir / "queries_post.emb")
    if manifest.postprocess_targets in ("references", "both"):
        write_embeddings(post_r, emb_dir / "reference_post.emb")
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    (out / "report.json").write_text(render_report_json(report), encoding="utf-8")
    (out / "report.txt").write_text(format_trend_table(report), encoding="utf-8")
    return report


def negative_swap(manifest: RunManifest) -> dict:
    """Compare the post-process with the training pool against a disjoint twin pool.

    The twin pool is a fresh draw from the same distribution as the
    training set, never seen during training; everything else is shared.
    """
    run = train_and_embed(manifest)
    base_ap, base_r90 = _evaluate(run.query_emb, run.ref_emb, run.gt, manifest.per_query_k)

    train_ap, train_r90, _, _ = _postprocess_eval(run, run.train_emb, manifest)

    twin_rng = substream(manifest.seed, "eval")
    twin_raw = twin_rng.standard_normal((manifest.n_train, manifest.d_in))
    twin_set = EmbeddingSet(
        tuple(f"W{i:06d}" for i in range(manifest.n_train)),
        twin_raw.astype(np.float32),
        unit_norm=False,
    )
    twin_emb = run.encoder.encode_set(twin_set)
    twin_ap, twin_r90, _, _ = _postprocess_eval(run, twin_emb, manifest)

    report = {
        "command": "negative-swap",
        "manifest_hash": manifest.hash(),
        "tool_version": manifest.tool_version,
        "seed": manifest.seed,
        "positives": run.gt.positives,
        "baseline": {"micro_ap": base_ap, "recall_at_p90": base_r90},
        "training_pool": {"micro_ap": train_ap, "recall_at_p90": train_r90},
        "twin_pool": {"micro_ap": twin_ap, "recall_at_p90": twin_r90},
        "pool_delta_micro_ap": train_ap - twin_ap,
        "postprocess_gain_micro_ap": train_ap - base_ap,
    }
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    (out / "report.json").write_text(render_report_json(report), encoding="utf-8")
    return report


def render_report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def format_trend_table(report: dict) -> str:
    """Plain-text stage table: one row per stage plus the post-process row."""
    header = f"{'stage':>5}  {'augmentation':<13}{'ref':<5}{'gt':<5}{'post':<6}{'micro_ap':>9}  {'recall_at_p90':>13}"
    lines = [header, "-" * len(header)]
    for row in report["rows"]:
        lines.append(
            f"{str(row['stage']):>5}  "
            f"{(row['augmentation'] or '-'):<13}"
            f"{'yes' if row['trained_with_reference'] else '-':<5}"
            f"{'yes' if row['trained_with_gt'] else '-':<5}"
            f"{'yes' if row['post_process'] else '-':<6}"
            f"{row['micro_ap']:>9.4f}  "
            f"{row['recall_at_p90']:>13.4f}"
        )
    return "\n".join(lines) + "\n"
