"""Margin-based contrastive training with a cross-batch memory bank.

The encoder is a small affine map (optionally one tanh hidden layer)
followed by L2 normalization, trained with momentum SGD. Each batch pairs
two views of every training item; the loss counts all in-batch pairs plus
all pairs against a FIFO memory of embeddings from previous batches. Bank
entries are constants: no gradient flows into them. Training proceeds in
stages of increasing transform magnitude, later stages mixing in
unaugmented reference items as extra negatives and ground-truth
query/reference pairs as extra positives.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import TIERS, AugmentTier, SyntheticWorld, augment_vector, get_tier
from .embedding import ZERO_NORM, EmbeddingSet
from .errors import EmptyBatch, FormatError, ShapeMismatch, ZeroVector

ENCODER_MAGIC = b"ISCW"
ENCODER_VERSION = 1

_GRAD_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Margins for the pairwise hinge loss on Euclidean distance."""

    pos_margin: float = 0.0
    neg_margin: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.pos_margin < self.neg_margin:
            raise ValueError(
                f"need 0 <= pos_margin < neg_margin, got "
                f"{self.pos_margin} / {self.neg_margin}"
            )


class MemoryBank:
    """Fixed-capacity FIFO ring of (embedding, label) snapshots.

    Stored embeddings are plain copies of past batch outputs; they are
    never touched by gradients. Once full, each push evicts the oldest
    entries first.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._emb = np.zeros((capacity, dim), dtype=np.float64)
        self._labels = np.zeros(capacity, dtype=np.int64)
        self._size = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self._size

    @property
    def dim(self) -> int:
        return self._emb.shape[1]

    def push(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        """Append entries in batch order, evicting FIFO past capacity."""
        emb = np.asarray(embeddings, dtype=np.float64)
        labs = np.asarray(labels, dtype=np.int64)
        if emb.ndim != 2 or emb.shape[1] != self.dim or emb.shape[0] != labs.shape[0]:
            raise ShapeMismatch(
                f"push of {emb.shape} embeddings / {labs.shape} labels into "
                f"bank of dim {self.dim}"
            )
        for row, lab in zip(emb, labs):
            self._emb[self._cursor] = row
            self._labels[self._cursor] = lab
            self._cursor = (self._cursor + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def contents(self) -> tuple[np.ndarray, np.ndarray]:
        """Current entries oldest to newest."""
        if self._size < self.capacity:
            return self._emb[: self._size].copy(), self._labels[: self._size].copy()
        idx = (np.arange(self.capacity) + self._cursor) % self.capacity
        return self._emb[idx], self._labels[idx]


def contrastive_loss(
    embeddings: np.ndarray,
    labels: np.ndarray,
    bank: MemoryBank | None,
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Mean hinge loss over all counted pairs, plus descriptor gradients.

    Counted pairs are every in-batch pair i<j and every (batch, bank)
    pair. Same-label pairs contribute max(0, d - pos_margin), different
    labels max(0, neg_margin - d), with d the Euclidean distance. The mean
    runs over all counted pairs, active or not. Returns the loss and the
    gradient with respect to each batch embedding; bank entries get none.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    labs = np.asarray(labels)
    if E.ndim != 2 or E.shape[0] != labs.shape[0]:
        raise ShapeMismatch(f"embeddings {E.shape} vs labels {labs.shape}")
    b = E.shape[0]
    if b == 0:
        raise EmptyBatch("contrastive_loss needs a nonempty batch")
    if bank is not None and len(bank) > 0:
        bank_e, bank_labs = bank.contents()
    else:
        bank_e = np.zeros((0, E.shape[1]))
        bank_labs = np.zeros(0, dtype=np.int64)
    m = bank_e.shape[0]
    num_pairs = b * (b - 1) // 2 + b * m
    if num_pairs == 0:
        return 0.0, np.zeros_like(E)

    total = 0.0
    grad = np.zeros_like(E)

    if b > 1:
        dist = _pair_distances(E, E)
        same = labs[:, None] == labs[None, :]
        terms = np.where(
            same,
            np.maximum(0.0, dist - cfg.pos_margin),
            np.maximum(0.0, cfg.neg_margin - dist),
        )
        iu = np.triu_indices(b, k=1)
        total += terms[iu].sum()
        w = _hinge_weights(dist, same, cfg) / num_pairs
        # grad_i = sum_j w_ij (e_i - e_j), with w symmetric and zero diagonal
        grad += w.sum(axis=1)[:, None] * E - w @ E

    if m > 0:
        dist = _pair_distances(E, bank_e)
        same = labs[:, None] == bank_labs[None, :]
        terms = np.where(
            same,
            np.maximum(0.0, dist - cfg.pos_margin),
            np.maximum(0.0, cfg.neg_margin - dist),
        )
        total += terms.sum()
        w = _hinge_weights(dist, same, cfg) / num_pairs
        grad += w.sum(axis=1)[:, None] * E - w @ bank_e

    return total / num_pairs, grad


def _pair_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # True Euclidean distances (not the unit-sphere shortcut), so the
    # returned gradients stay exact even for off-sphere probe points.
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.sqrt(np.clip(sq, 0.0, None))


def _hinge_weights(dist: np.ndarray, same: np.ndarray, cfg: LossConfig) -> np.ndarray:
    # d/d(dist) of each active term, divided by dist to turn the distance
    # gradient into a vector-difference coefficient. Coincident pairs
    # (dist ~ 0) take subgradient zero.
    live = dist > _GRAD_EPS
    w = np.zeros_like(dist)
    w[same & (dist > cfg.pos_margin) & live] = 1.0
    w[~same & (dist < cfg.neg_margin) & live] = -1.0
    return np.divide(w, dist, out=w, where=live)


def sgd_momentum_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: list[np.ndarray] | None,
    lr: float,
    momentum: float = 0.9,
) -> list[np.ndarray]:
    """Classic momentum update in place: v <- momentum*v + g; p <- p - lr*v.

    Velocities start at zero when ``state`` is None. Returns the state for
    the next step.
    """
    if state is None:
        state = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state)):
        raise ShapeMismatch("params, grads, and state must have equal length")
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape} vs state {v.shape}")
        v *= momentum
        v += g
        p -= lr * v
    return state


class Encoder:
    """Affine map (optional tanh hidden layer) followed by L2 normalization.

    A stand-in for a full image backbone: small enough that its gradients
    can be checked against finite differences in tests.
    """

    def __init__(self, layers: list[tuple[np.ndarray, np.ndarray]]):
        if len(layers) not in (1, 2):
            raise ValueError("encoder supports 1 or 2 affine layers")
        self.layers = [
            (np.asarray(w, dtype=np.float64), np.asarray(b_, dtype=np.float64))
            for w, b_ in layers
        ]
        for w, b_ in self.layers:
            if w.ndim != 2 or b_.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer shapes {w.shape} / {b_.shape}")
        if len(self.layers) == 2 and self.layers[0][0].shape[1] != self.layers[1][0].shape[0]:
            raise ShapeMismatch("hidden layer width mismatch between layers")

    @classmethod
    def init(cls, d_in: int, d_out: int, hidden: int = 0, rng: np.random.Generator | None = None) -> "Encoder":
        """Random init, scaled by 1/sqrt(fan_in); biases zero."""
        if rng is None:
            rng = np.random.default_rng(0)
        if hidden > 0:
            w1 = rng.standard_normal((d_in, hidden)) / np.sqrt(d_in)
            w2 = rng.standard_normal((hidden, d_out)) / np.sqrt(hidden)
            return cls([(w1, np.zeros(hidden)), (w2, np.zeros(d_out))])
        w = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
        return cls([(w, np.zeros(d_out))])

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def d_out(self) -> int:
        return self.layers[-1][0].shape[1]

    def params(self) -> list[np.ndarray]:
        return [arr for layer in self.layers for arr in layer]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Unit-norm descriptors for raw input rows."""
        return self._forward_cached(np.atleast_2d(np.asarray(x, dtype=np.float64)))[0]

    def _forward_cached(self, x: np.ndarray):
        hidden = None
        if len(self.layers) == 2:
            (w1, b1), (w2, b2) = self.layers
            hidden = np.tanh(x @ w1 + b1)
            z = hidden @ w2 + b2
        else:
            w1, b1 = self.layers[0]
            z = x @ w1 + b1
        norms = np.linalg.norm(z, axis=1)
        if np.any(norms < ZERO_NORM):
            raise ZeroVector("encoder produced a zero descriptor")
        e = z / norms[:, None]
        return e, (x, hidden, e, norms)

    def _backward(self, cache, grad_e: np.ndarray) -> list[np.ndarray]:
        x, hidden, e, norms = cache
        # Through z -> z/||z||: dz = (g - (g.e) e) / ||z||, per row.
        grad_z = (grad_e - np.sum(grad_e * e, axis=1)[:, None] * e) / norms[:, None]
        if len(self.layers) == 2:
            (_, _), (w2, _) = self.layers
            gw2 = hidden.T @ grad_z
            gb2 = grad_z.sum(axis=0)
            grad_h = (grad_z @ w2.T) * (1.0 - hidden * hidden)
            gw1 = x.T @ grad_h
            gb1 = grad_h.sum(axis=0)
            return [gw1, gb1, gw2, gb2]
        gw1 = x.T @ grad_z
        gb1 = grad_z.sum(axis=0)
        return [gw1, gb1]

    def encode_set(self, es: EmbeddingSet) -> EmbeddingSet:
        """Encode a raw set into a unit-norm descriptor set, ids preserved."""
        out = self.forward(es.matrix.astype(np.float64))
        return EmbeddingSet(es.ids, out.astype(np.float32), unit_norm=True)

    def save(self, path: str | Path) -> None:
        """Checkpoint: magic ISCW, version, layer dims, float32 weights."""
        parts = [ENCODER_MAGIC, struct.pack("<II", ENCODER_VERSION, len(self.layers))]
        for w, b_ in self.layers:
            parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
            parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(b_, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path) -> "Encoder":
        blob = Path(path).read_bytes()
        if len(blob) < 12 or blob[:4] != ENCODER_MAGIC:
            raise FormatError(f"{path}: not an encoder checkpoint")
        version, n_layers = struct.unpack_from("<II", blob, 4)
        if version != ENCODER_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if n_layers not in (1, 2):
            raise FormatError(f"{path}: bad layer count {n_layers}")
        offset = 12
        layers = []
        for _ in range(n_layers):
            if offset + 8 > len(blob):
                raise FormatError(f"{path}: truncated layer header")
            di, do = struct.unpack_from("<II", blob, offset)
            offset += 8
            need = (di * do + do) * 4
            if offset + need > len(blob):
                raise FormatError(f"{path}: truncated layer payload")
            w = np.frombuffer(blob, dtype="<f4", count=di * do, offset=offset).reshape(di, do)
            offset += di * do * 4
            b_ = np.frombuffer(blob, dtype="<f4", count=do, offset=offset)
            offset += do * 4
            layers.append((w.astype(np.float64), b_.astype(np.float64)))
        if offset != len(blob):
            raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
        return cls(layers)


def encoder_loss_and_grads(
    encoder: Encoder,
    x: np.ndarray,
    labels: np.ndarray,
    bank: MemoryBank | None,
    cfg: LossConfig,
) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Loss over encoded inputs plus analytic parameter gradients.

    Returns (loss, gradients in ``encoder.params()`` order, embeddings).
    """
    e, cache = encoder._forward_cached(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    loss, grad_e = contrastive_loss(e, labels, bank, cfg)
    return loss, encoder._backward(cache, grad_e), e


def make_positive_pair(
    source: np.ndarray, tier: AugmentTier, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Two views of one raw item: a tier-strength transform and a weak one.

    Both views carry the item's identity. The "none" tier returns the
    source unchanged twice.
    """
    if tier.name == "none":
        src = np.asarray(source, dtype=np.float64)
        return src.copy(), src.copy()
    view_a = augment_vector(source, tier, rng)
    view_b = augment_vector(source, TIERS["weak"], rng)
    return view_a, view_b


@dataclass
class StageConfig:
    """One step of the progressive schedule."""

    index: int
    tier: str
    include_reference_negatives: bool = False
    include_gt_positives: bool = False
    epochs: int = 2
    lr: float = 0.1
    batch_size: int = 32
    ref_per_batch: int = 16
    gt_per_batch: int = 8

    def __post_init__(self) -> None:
        get_tier(self.tier)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(**d)


def default_stage_schedule() -> list[StageConfig]:
    """Four stages: rising transform magnitude, then reference rows join as
    negatives, then ground-truth pairs join as positives."""
    return [
        StageConfig(index=1, tier="weak", epochs=2, lr=0.5),
        StageConfig(index=2, tier="intermediate", epochs=2, lr=0.3),
        StageConfig(index=3, tier="strong", include_reference_negatives=True, epochs=2, lr=0.2),
        StageConfig(
            index=4,
            tier="none",
            include_reference_negatives=True,
            include_gt_positives=True,
            epochs=2,
            lr=0.1,
        ),
    ]


def run_stage(
    encoder: Encoder,
    world: SyntheticWorld,
    stage: StageConfig,
    bank: MemoryBank,
    rng: np.random.Generator,
    loss_cfg: LossConfig = LossConfig(),
    momentum: float = 0.9,
) -> tuple[Encoder, dict]:
    """Train one stage in place; returns the encoder and stage metrics.

    Every batch holds two augmented views per sampled training item. When
    enabled, unaugmented reference rows join the batch under their own
    labels (pure negatives) and ground-truth query/reference pairs join
    under a shared label (extra positives); reference and query rows are
    never augmented. After each optimizer step the batch embeddings are
    pushed into the bank.
    """
    tier = get_tier(stage.tier)
    train_raw = world.training.matrix.astype(np.float64)
    ref_raw = world.reference.matrix.astype(np.float64)
    query_raw = world.queries.matrix.astype(np.float64)
    n_train, n_ref = train_raw.shape[0], ref_raw.shape[0]
    qpos = {qid: i for i, qid in enumerate(world.queries.ids)}
    rpos = {rid: i for i, rid in enumerate(world.reference.ids)}
    gt_idx = [(qpos[q], rpos[r]) for q, r in world.gt]

    state: list[np.ndarray] | None = None
    epoch_losses: list[float] = []
    for _ in range(stage.epochs):
        order = rng.permutation(n_train)
        batch_losses: list[float] = []
        for start in range(0, n_train, stage.batch_size):
            rows: list[np.ndarray] = []
            labels: list[int] = []
            for t in order[start : start + stage.batch_size]:
                view_a, view_b = make_positive_pair(train_raw[t], tier, rng)
                rows += [view_a, view_b]
                labels += [int(t), int(t)]
            if stage.include_reference_negatives:
                for ri in rng.choice(n_ref, size=min(stage.ref_per_batch, n_ref), replace=False):
                    rows.append(ref_raw[ri])
                    labels.append(n_train + int(ri))
            if stage.include_gt_positives and gt_idx:
                picks = rng.choice(len(gt_idx), size=min(stage.gt_per_batch, len(gt_idx)), replace=False)
                for gi in picks:
                    qi, ri = gt_idx[gi]
                    rows.append(query_raw[qi])
                    labels.append(n_train + ri)
                    rows.append(ref_raw[ri])
                    labels.append(n_train + ri)
            loss, grads, emb = encoder_loss_and_grads(
                encoder, np.stack(rows), np.asarray(labels), bank, loss_cfg
            )
            state = sgd_momentum_step(encoder.params(), grads, state, stage.lr, momentum)
            bank.push(emb, np.asarray(labels))
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    return encoder, {
        "stage": stage.index,
        "tier": stage.tier,
        "epochs": stage.epochs,
        "mean_loss": epoch_losses,
    }
