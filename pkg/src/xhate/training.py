"""Head-only training: samplers, Adam/AdamW, the epoch loop and the grid runner."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .corpus import (
    ClassWeights,
    Corpus,
    SplitSpec,
    compute_class_weights,
    compute_stats,
    read_jsonl,
    split_train_val,
)
from .encoding import (
    FeatureMatrix,
    build_feature_cache,
    cache_path_for,
    choose_max_seq_len,
    encoder_fingerprint,
    make_backbone,
)
from .errors import ConfigError, DataError, NumericError, UsageError, XhateError
from .evaluation import EvalReport, evaluate, language_pair
from .model import (
    HeadParams,
    HeadSpec,
    head_forward,
    init_head,
    loss_and_gradients,
    save_head,
    weighted_cross_entropy,
)

log = logging.getLogger(__name__)

REFERENCE_LEARNING_RATES = (3e-4, 1e-4, 5e-5, 3e-5)
REFERENCE_EPOCHS = (5, 10, 15)
REFERENCE_BATCH_SIZES = (32, 64)
# (epochs, learning rate) columns of the published EN->FR tables
REFERENCE_TABLE_CELLS = ((5, 1e-4), (10, 3e-4), (15, 5e-5))
# report label for the middle column
MEDIUM_CELL = (10, 3e-4)
DEFAULT_WEIGHT_DECAYS = (0.0, 0.01)
SEQ_LEN_BOUNDS = (25, 35)
SEQ_LEN_COVERAGE = 0.95


class OptimizerKind(str, enum.Enum):
    ADAM = "adam"
    ADAMW = "adamw"


def format_lr(lr: float) -> str:
    """3e-4 style, as in the published tables."""
    mantissa, exp = f"{lr:e}".split("e")
    mantissa = mantissa.rstrip("0").rstrip(".")
    return f"{mantissa}e{int(exp)}"


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-4
    epochs: int = 5
    batch_size: int = 32
    optimizer: OptimizerKind = OptimizerKind.ADAM
    weight_decay: float = 0.0
    seed: int = 0
    max_seq_len: int | None = None
    d_hidden: int = 512
    dropout_p: float = 0.1
    extra_dense: bool = False
    use_dropout: bool = True
    class_weighting: bool = True
    clip_norm: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        # lr == 0 is accepted as a deliberate no-op run
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.weight_decay < 0 or self.seed < 0:
            raise ConfigError("weight_decay and seed must be non-negative")
        if self.max_seq_len is not None and self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")

    def head_spec(self, d_model: int) -> HeadSpec:
        return HeadSpec(d_model, self.d_hidden, self.dropout_p, self.extra_dense, self.use_dropout)

    @property
    def cell_label(self) -> str:
        return f"{self.epochs} epochs, {format_lr(self.learning_rate)}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameter(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: HeadParams
    v: HeadParams
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: HeadParams) -> "OptimizerState":
        return cls(params.zeros_like(), params.zeros_like())


def _adaptive_step(params, grads, state, lr, weight_decay):
    if lr < 0:
        raise ConfigError("learning rate must be >= 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    b1, b2, eps = state.beta1, state.beta2, state.eps
    t = state.t + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = getattr(grads, name)
        m = b1 * getattr(state.m, name) + (1.0 - b1) * g
        v = b2 * getattr(state.v, name) + (1.0 - b2) * g * g
        if weight_decay:
            theta = theta - lr * weight_decay * theta
        new_p[name] = theta - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v
    return HeadParams(**new_p), OptimizerState(HeadParams(**new_m), HeadParams(**new_v), t, b1, b2, eps)


def adam_step(params: HeadParams, grads: HeadParams, state: OptimizerState, lr: float):
    return _adaptive_step(params, grads, state, lr, 0.0)


def adamw_step(params: HeadParams, grads: HeadParams, state: OptimizerState, lr: float, weight_decay: float):
    """Adam with decoupled weight decay, applied before the adaptive update."""
    return _adaptive_step(params, grads, state, lr, weight_decay)


def clip_gradients(grads: HeadParams, max_norm: float) -> tuple[HeadParams, float, float]:
    norm = grads.global_norm()
    if norm <= max_norm:
        return grads, norm, norm
    scale = max_norm / norm
    clipped = grads.map(lambda g: g * scale)
    return clipped, norm, clipped.global_norm()


class ShuffleSampler:
    """A fresh permutation each epoch, seeded by (seed, epoch)."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.seed = seed

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n)


class SequentialSampler:
    def __init__(self, n: int):
        self.n = n

    def order(self, epoch: int = 0) -> np.ndarray:
        return np.arange(self.n)


def make_samplers(train, val, seed: int) -> tuple[ShuffleSampler, SequentialSampler]:
    if len(train) == 0 or len(val) == 0:
        raise DataError("samplers need non-empty train and validation sets")
    return ShuffleSampler(len(train), seed), SequentialSampler(len(val))


@dataclass
class TrainRun:
    run_id: str
    hyperparams: HyperParams
    head_spec: HeadSpec
    backbone_id: str = ""
    language_pair: str = ""
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    initial_digest: str = ""
    final_digest: str = ""
    seconds: float = 0.0
    params: HeadParams | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "hyperparams": self.hyperparams.to_dict(),
            "head_spec": self.head_spec.to_dict(),
            "backbone_id": self.backbone_id,
            "language_pair": self.language_pair,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "initial_digest": self.initial_digest,
            "final_digest": self.final_digest,
            "seconds": self.seconds,
        }


def _rows(features) -> np.ndarray:
    return np.asarray(getattr(features, "rows", features), dtype=np.float64)


def train(
    features,
    labels: Sequence[int],
    weights: ClassWeights | None,
    hyperparams: HyperParams,
    head_spec: HeadSpec | None = None,
    *,
    val_features=None,
    val_labels: Sequence[int] | None = None,
    run_id: str = "",
    backbone_id: str = "",
    language_pair: str = "",
) -> TrainRun:
    """Train a fresh head on precomputed (frozen) features.

    Each epoch shuffles, batches, runs the TRAIN-mode forward pass, takes
    analytic gradients of the weighted CE, clips them to ``clip_norm`` and
    applies one optimizer step per batch. Deterministic given the seed.
    """
    x = _rows(features)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise DataError("empty training set")
    if len(x) != len(y):
        raise DataError(f"{len(x)} feature rows but {len(y)} labels")
    hp = hyperparams
    spec = head_spec or hp.head_spec(x.shape[1])
    has_val = val_features is not None and val_labels is not None and len(val_labels) > 0
    if has_val:
        xv, yv = _rows(val_features), np.asarray(val_labels, dtype=np.int64)

    started = time.perf_counter()
    params = init_head(spec, hp.seed)
    run = TrainRun(run_id, hp, spec, backbone_id, language_pair, initial_digest=params.digest())
    state = OptimizerState.zeros(params)
    sampler = ShuffleSampler(len(x), hp.seed)
    dropout_rng = np.random.default_rng([hp.seed, 1])

    for epoch in range(hp.epochs):
        order = sampler.order(epoch)
        batch_losses = []
        for b, start in enumerate(range(0, len(x), hp.batch_size)):
            idx = order[start : start + hp.batch_size]
            try:
                loss, grads = loss_and_gradients(x[idx], y[idx], params, spec, weights, rng=dropout_rng)
                if not math.isfinite(loss):
                    raise NumericError("non-finite loss")
                grads, _, post = clip_gradients(grads, hp.clip_norm)
                if hp.optimizer is OptimizerKind.ADAMW:
                    params, state = adamw_step(params, grads, state, hp.learning_rate, hp.weight_decay)
                else:
                    params, state = adam_step(params, grads, state, hp.learning_rate)
            except NumericError as exc:
                raise NumericError(f"run {run_id or '?'} epoch {epoch} batch {b}: {exc}") from None
            run.grad_norms.append(post)
            batch_losses.append(loss)
        run.train_loss.append(float(np.mean(batch_losses)))
        if has_val:
            probs, _ = head_forward(xv, params, spec, "eval")
            run.val_loss.append(weighted_cross_entropy(probs, yv, weights))

    run.params = params
    run.final_digest = params.digest()
    run.seconds = time.perf_counter() - started
    return run


# --------------------------------------------------------------------------
# grid runner


@dataclass(frozen=True)
class GridCell:
    hyperparams: HyperParams
    backbone_id: str = "stub-32"
    run_id: str = ""


@dataclass
class GridSpec:
    cells: list
    train_corpus: Corpus
    test_corpus: Corpus
    split: SplitSpec = field(default_factory=SplitSpec)
    train_path: str = ""
    test_path: str = ""
    cache_dir: str | None = None
    model_dir: str | None = None

    def __post_init__(self):
        if not self.cells:
            raise ConfigError("grid has no cells")
        ids = [run_id_for(c, self.pair) for c in self.cells]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise ConfigError(f"duplicate run ids in grid: {sorted(dup)}")

    @property
    def pair(self) -> str:
        return language_pair(corpus_language(self.train_corpus), corpus_language(self.test_corpus))


@dataclass
class CellResult:
    run_id: str
    status: str
    run: TrainRun | None = None
    report: EvalReport | None = None
    error: str | None = None
    manifest: dict | None = None
    splits: dict | None = None

    def __iter__(self):
        return iter((self.run, self.report))


def corpus_language(corpus: Corpus) -> str:
    langs = sorted(corpus.language_mix)
    return "+".join(langs) if langs else "none"


def run_id_for(cell: GridCell, pair: str) -> str:
    if cell.run_id:
        return cell.run_id
    hp = cell.hyperparams
    parts = [
        cell.backbone_id,
        pair.replace("→", "-"),
        f"e{hp.epochs}",
        f"lr{format_lr(hp.learning_rate)}",
        f"bs{hp.batch_size}",
        hp.optimizer.value,
    ]
    if hp.weight_decay:
        parts.append(f"wd{hp.weight_decay:g}")
    if hp.extra_dense:
        parts.append("xdense")
    if not hp.use_dropout:
        parts.append("nodrop")
    if hp.max_seq_len is not None:
        parts.append(f"L{hp.max_seq_len}")
    parts.append(f"s{hp.seed}")
    base = "_".join(parts)
    # remaining knobs (d_hidden, dropout_p, ...) are folded into a short hash
    tail = hashlib.sha256(json.dumps(hp.to_dict(), sort_keys=True).encode()).hexdigest()[:6]
    return f"{base}_{tail}"


@dataclass
class _Features:
    train_all: FeatureMatrix
    test: FeatureMatrix
    max_seq_len: int
    fingerprint: str


class _FeatureStore:
    """Shares backbones and feature matrices between cells."""

    def __init__(self, grid: GridSpec):
        self.grid = grid
        self._backbones: dict = {}
        self._features: dict = {}

    def backbone(self, backbone_id: str):
        if backbone_id not in self._backbones:
            try:
                self._backbones[backbone_id] = make_backbone(backbone_id, 1, model_dir=self.grid.model_dir)
            except XhateError as exc:
                # remembered so every cell on this backbone fails the same way
                self._backbones[backbone_id] = exc
        found = self._backbones[backbone_id]
        if isinstance(found, XhateError):
            raise found
        return found

    def resolve_len(self, cell: GridCell) -> int:
        if cell.hyperparams.max_seq_len is not None:
            return cell.hyperparams.max_seq_len
        tokenizer, _ = self.backbone(cell.backbone_id)
        hist = compute_stats(self.grid.train_corpus, tokenizer.encode).token_length_histogram
        return choose_max_seq_len(hist, *SEQ_LEN_BOUNDS, SEQ_LEN_COVERAGE)

    def get(self, cell: GridCell) -> _Features:
        length = self.resolve_len(cell)
        key = (cell.backbone_id, length)
        if key not in self._features:
            tokenizer, encoder = self.backbone(cell.backbone_id)
            fp = encoder_fingerprint(replace(encoder.config, max_seq_len=length), tokenizer.spec)
            mats = []
            for corpus in (self.grid.train_corpus, self.grid.test_corpus):
                path = None
                if self.grid.cache_dir:
                    Path(self.grid.cache_dir).mkdir(parents=True, exist_ok=True)
                    path = cache_path_for(self.grid.cache_dir, corpus.digest(), fp)
                mats.append(build_feature_cache(corpus, tokenizer, encoder, length, path))
            self._features[key] = _Features(mats[0], mats[1], length, fp)
        return self._features[key]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_cell(cell: GridCell, grid: GridSpec, store: _FeatureStore | None = None) -> CellResult:
    """Split, train and evaluate one cell. Never raises for cell-level failures."""
    store = store or _FeatureStore(grid)
    pair = grid.pair
    run_id = run_id_for(cell, pair)
    started = _now()
    try:
        feats = store.get(cell)
        train_c, val_c = split_train_val(grid.train_corpus, grid.split)
        x_train = feats.train_all.take(train_c.ids)
        x_val = feats.train_all.take(val_c.ids)
        hp = cell.hyperparams
        weights = compute_class_weights(compute_stats(train_c)) if hp.class_weighting else None
        digest_before = feats.train_all.digest()
        run = train(
            x_train, train_c.labels, weights, hp,
            val_features=x_val, val_labels=val_c.labels,
            run_id=run_id, backbone_id=cell.backbone_id, language_pair=pair,
        )
        digest_after = feats.train_all.digest()
        if digest_after != digest_before:
            raise XhateError("feature cache changed during training")
        report = evaluate(
            run.params, run.head_spec, feats.test, grid.test_corpus.labels, pair, run_id,
            backbone_id=cell.backbone_id, cell_label=hp.cell_label,
        )
    except XhateError as exc:
        log.info("cell %s failed: %s", run_id, exc)
        return CellResult(run_id, "failed", error=f"{exc.__class__.__name__}: {exc}")

    manifest = {
        "toolkit_version": __version__,
        "run_id": run_id,
        "status": "complete",
        "hyperparams": hp.to_dict(),
        "head_spec": run.head_spec.to_dict(),
        "backbone_id": cell.backbone_id,
        "encoder_fingerprint": feats.fingerprint,
        "max_seq_len": feats.max_seq_len,
        "language_pair": pair,
        "split": asdict(grid.split),
        "class_weights": list(weights.w) if weights else None,
        "corpora": {
            "train": {"path": grid.train_path, "digest": grid.train_corpus.digest()},
            "train_part": {"digest": train_c.digest(), "n": len(train_c)},
            "val": {"digest": val_c.digest(), "n": len(val_c)},
            "test": {"path": grid.test_path, "digest": grid.test_corpus.digest()},
        },
        "digests": {
            "features_train_before": digest_before,
            "features_train_after": digest_after,
            "features_test": feats.test.digest(),
            "initial_head_params": run.initial_digest,
            "head_params": run.final_digest,
        },
        "timestamps": {"started": started, "finished": _now()},
        "wall_seconds": run.seconds,
    }
    splits = {"train_ids": train_c.ids, "val_ids": val_c.ids}
    return CellResult(run_id, "complete", run, report, manifest=manifest, splits=splits)


def write_run_dir(result: CellResult, run_dir: str | Path) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run = result.run
    head_sha = save_head(run.params, run.head_spec, run_dir / "head.json")
    report_json = result.report.to_json()
    (run_dir / "eval_report.json").write_text(report_json, encoding="utf-8")
    history = {"train": run.train_loss, "val": run.val_loss, "grad_norms": run.grad_norms}
    (run_dir / "loss_history.json").write_text(json.dumps(history, indent=1) + "\n", encoding="utf-8")
    (run_dir / "splits.json").write_text(json.dumps(result.splits, ensure_ascii=False) + "\n", encoding="utf-8")
    manifest = dict(result.manifest)
    manifest["digests"] = dict(manifest["digests"], head_file=head_sha, eval_report=_sha(report_json))
    (run_dir / "manifest.json").write_text(json.dumps(manifest, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def run_grid(grid: GridSpec, out_dir: str | Path | None = None, jobs: int = 1, overwrite: bool = False) -> list[CellResult]:
    """Run every cell independently; failures are recorded, not raised."""
    pair = grid.pair
    run_ids = [run_id_for(c, pair) for c in grid.cells]
    if out_dir is not None and not overwrite:
        taken = [r for r in run_ids if (Path(out_dir) / r).exists()]
        if taken:
            raise UsageError(f"run directories already exist (use overwrite): {taken}")
    store = _FeatureStore(grid)
    # build shared features up front so workers only read them
    unavailable = set()
    for cell in grid.cells:
        try:
            store.get(cell)
        except XhateError as exc:
            if cell.backbone_id not in unavailable:
                log.warning("features for %s unavailable: %s", cell.backbone_id, exc)
            unavailable.add(cell.backbone_id)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda c: run_cell(c, grid, store), grid.cells))
    else:
        results = [run_cell(c, grid, store) for c in grid.cells]

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for res in results:
            if res.status == "complete":
                write_run_dir(res, out_dir / res.run_id)
        summary = {
            "toolkit_version": __version__,
            "language_pair": pair,
            "cells": [
                {
                    "run_id": r.run_id,
                    "status": r.status,
                    "error": r.error,
                    "macro_avg_f1": r.report.macro_avg_f1 if r.report else None,
                    "weighted_avg_f1": r.report.weighted_avg_f1 if r.report else None,
                }
                for r in results
            ],
        }
        (out_dir / "grid_manifest.json").write_text(json.dumps(summary, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    return results


# --------------------------------------------------------------------------
# grid files and manifests


def _resolve(base: Path, p: str) -> str:
    path = Path(p)
    return str(path if path.is_absolute() else (base / path))


def load_grid_config(path: str | Path, cache_dir: str | None = None, model_dir: str | None = None) -> GridSpec:
    """Read a grid file.

    Keys: ``train`` and ``test`` (prepared JSONL paths, relative to the file),
    ``backbones`` (list), ``base`` (shared hyperparameters), ``cells`` (list of
    hyperparameter overrides, optionally with ``backbone_id``/``run_id``) and
    ``split``. Cells are crossed with backbones unless they name one.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid file {path}: {exc}") from None
    base_dir = path.parent
    try:
        train_path = _resolve(base_dir, doc["train"])
        test_path = _resolve(base_dir, doc["test"])
    except KeyError as exc:
        raise ConfigError(f"grid file lacks {exc}") from None
    backbones = doc.get("backbones", ["stub-32"])
    base = doc.get("base", {})
    cells = []
    for raw in doc.get("cells", [{}]):
        raw = dict(raw)
        run_id = raw.pop("run_id", "")
        named = raw.pop("backbone_id", None)
        hp = HyperParams.from_dict({**base, **raw})
        for b in [named] if named else backbones:
            cells.append(GridCell(hp, b, run_id if named or len(backbones) == 1 else ""))
    split = SplitSpec(**doc.get("split", {}))
    return GridSpec(
        cells, read_jsonl(train_path), read_jsonl(test_path), split,
        train_path, test_path, cache_dir or doc.get("cache_dir"), model_dir or doc.get("model_dir"),
    )


def grid_from_manifest(manifest_path: str | Path, cache_dir: str | None = None, model_dir: str | None = None) -> GridSpec:
    """Rebuild the single-cell grid that produced a run, checking corpus digests."""
    m = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    corpora = {}
    for role in ("train", "test"):
        info = m["corpora"][role]
        corpus = read_jsonl(info["path"])
        if corpus.digest() != info["digest"]:
            raise DataError(f"{role} corpus {info['path']} changed since the run (digest mismatch)")
        corpora[role] = corpus
    cell = GridCell(HyperParams.from_dict(m["hyperparams"]), m["backbone_id"], m["run_id"])
    return GridSpec(
        [cell], corpora["train"], corpora["test"], SplitSpec(**m["split"]),
        m["corpora"]["train"]["path"], m["corpora"]["test"]["path"], cache_dir, model_dir,
    )
