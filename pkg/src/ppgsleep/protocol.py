"""Training protocol: preprocessing caches, single-pool training with a
held-out validation split, and the leave-one-domain-out harness.

A training run never touches the target domain: the record-id audit is
enforced up front and the ids that fed gradient steps are logged so the
separation can be checked after the fact.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import dsp, metrics, models, neural
from .records import DatasetManifest, PatientMeta, load_manifest, load_record, read_labels
from .staging import StageTask


class DataError(RuntimeError):
    pass


class PlanError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Preprocessing cache

@dataclass
class CachedRecord:
    record_id: str
    tensor: dsp.EpochTensor
    stages: np.ndarray  # 4-class codes, -1 on invalid epochs
    meta: PatientMeta

    @property
    def mask(self) -> np.ndarray:
        return self.tensor.valid_mask & (self.stages >= 0)

    @property
    def n_epochs(self) -> int:
        return self.tensor.n_epochs


@dataclass
class CachedDataset:
    name: str
    kind: str  # "raw" or "ipr"
    records: list[CachedRecord]
    path: Path | None = None

    def record_ids(self) -> set[str]:
        return {r.record_id for r in self.records}


def _preprocess_one(entry, kind: str):
    record = load_record(entry)
    labels = read_labels(entry.label_path)
    if kind == "raw":
        tensor, hyp = dsp.preprocess_record(record, labels)
    elif kind == "ipr":
        beats = dsp.detect_peaks(record)
        ipr = dsp.ipr_from_beats(beats, duration_s=record.duration_s)
        tensor = dsp.ipr_slice(ipr, labels)
        from .staging import harmonize_hypnogram

        hyp4 = harmonize_hypnogram(labels)
        hyp = type(hyp4)(hyp4.stages[: tensor.n_epochs], tensor.valid_mask.copy(), space="four")
    else:
        raise ValueError(f"unknown cache kind {kind!r}")
    stages = np.where(hyp.valid_mask, hyp.stages, -1)
    return CachedRecord(entry.record_id, tensor, stages.astype(np.int64), entry.meta)


def build_cache(
    manifest: DatasetManifest, out_dir: str | Path, kind: str = "raw", threads: int = 1
) -> Path:
    """Preprocess every record of a manifest into a cache directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = sorted(manifest.records, key=lambda e: e.record_id)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cached = list(pool.map(lambda e: _preprocess_one(e, kind), entries))
    else:
        cached = [_preprocess_one(e, kind) for e in entries]
    index = []
    for entry, rec in zip(entries, cached):
        suffix = ".spg2" if kind == "raw" else ".spr2"
        tensor_name = rec.record_id + suffix
        stages_name = rec.record_id + ".stages.csv"
        dsp.save_epoch_tensor(out_dir / tensor_name, rec.tensor)
        (out_dir / stages_name).write_text("\n".join(str(int(s)) for s in rec.stages) + "\n")
        index.append(
            {
                "record_id": rec.record_id,
                "tensor": tensor_name,
                "stages": stages_name,
                "meta": entry.meta.to_dict(),
            }
        )
    (out_dir / "dataset.json").write_text(
        json.dumps({"name": manifest.name, "kind": kind, "records": index}, indent=2, sort_keys=True)
        + "\n"
    )
    return out_dir


def load_cache(path: str | Path) -> CachedDataset:
    path = Path(path)
    doc = json.loads((path / "dataset.json").read_text())
    records = []
    for item in doc["records"]:
        tensor = dsp.load_epoch_tensor(path / item["tensor"])
        stages = np.array(
            [int(line) for line in (path / item["stages"]).read_text().split()], dtype=np.int64
        )
        records.append(
            CachedRecord(item["record_id"], tensor, stages, PatientMeta.from_dict(item["meta"]))
        )
    return CachedDataset(doc["name"], doc["kind"], records, path)


def ensure_cache(source: str | Path, out_dir: str | Path, kind: str = "raw", threads: int = 1) -> Path:
    """Accept either a manifest JSON or an existing cache directory."""
    source = Path(source)
    if source.is_dir() and (source / "dataset.json").exists():
        return source
    if source.is_file():
        manifest = load_manifest(source)
        cache_dir = Path(out_dir) / f"{manifest.name}-{kind}"
        if (cache_dir / "dataset.json").exists():
            return cache_dir
        return build_cache(manifest, cache_dir, kind=kind, threads=threads)
    raise DataError(f"{source} is neither a manifest nor a cache directory")


# ---------------------------------------------------------------------------
# Train plans

@dataclass
class TrainPlan:
    sources: list[str]
    target: str | None = None
    model: str = "raw-mini-dsu"
    epochs: int = 10
    batch_size: int = 4
    lr: float = 3e-3
    seed: int = 0
    val_fraction: float = 0.1
    crop_epochs: int | None = 60
    out_dir: str | None = None

    def validate(self):
        if not self.sources:
            raise PlanError("plan needs at least one source dataset")
        resolved = {str(Path(s).resolve()) for s in self.sources}
        if self.target is not None and str(Path(self.target).resolve()) in resolved:
            raise PlanError("target domain must not appear among the sources")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise PlanError("epochs, batch size, and learning rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _batched(indices: list[int], size: int) -> list[list[int]]:
    chunks = [indices[i : i + size] for i in range(0, len(indices), size)]
    # a singleton batch breaks batch-statistics layers; fold it into its
    # predecessor
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    return chunks


def assemble_batch(
    records: list[CachedRecord],
    crop_epochs: int | None = None,
    rng: np.random.Generator | None = None,
):
    """Stack records into [B,1,spe*T] with label/mask padding to the longest.

    With ``crop_epochs`` a random contiguous window is taken per record
    (training-time augmentation that also bounds the step cost).
    """
    views = []
    for rec in records:
        n = rec.n_epochs
        if crop_epochs is not None and n > crop_epochs:
            start = int(rng.integers(0, n - crop_epochs + 1)) if rng is not None else 0
            sl = slice(start, start + crop_epochs)
        else:
            sl = slice(0, n)
        views.append((rec.tensor.data[sl], rec.stages[sl], rec.mask[sl]))
    spe = views[0][0].shape[1]
    t_max = max(v[0].shape[0] for v in views)
    B = len(views)
    x = np.zeros((B, 1, spe * t_max))
    labels = np.zeros((B, t_max), dtype=np.int64)
    mask = np.zeros((B, t_max), dtype=bool)
    for i, (data, stages, m) in enumerate(views):
        t = data.shape[0]
        x[i, 0, : spe * t] = data.reshape(-1)
        labels[i, :t] = np.maximum(stages, 0)
        mask[i, :t] = m
    return x, labels, mask


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    log_path: Path
    history: list[dict]
    best_val_kappa: float
    trained_record_ids: list[str]
    model: models.SleepStager


def _median_kappa(model: models.SleepStager, records: list[CachedRecord]) -> float:
    model.eval()
    kappas = []
    for rec in records:
        hyp, _ = models.predict_stages(model, rec.tensor)
        m = rec.mask
        if m.sum() == 0:
            continue
        kappas.append(metrics.cohen_kappa(rec.stages, hyp.stages, m, n_classes=4))
    if not kappas:
        raise DataError("no valid epochs in validation records")
    return float(np.median(kappas))


def evaluate_model_on_cache(
    model: models.SleepStager, cache: CachedDataset, tasks: tuple[StageTask, ...] = tuple(StageTask)
) -> dict[str, metrics.MetricsReport]:
    """Predict every record once and score it under each task collapse."""
    model.eval()
    evals = []
    for rec in cache.records:
        hyp, _ = models.predict_stages(model, rec.tensor)
        evals.append(metrics.PatientEval(rec.record_id, rec.stages, hyp.stages, rec.mask))
    return {task.value: metrics.evaluate_dataset(evals, task) for task in tasks}


def train(
    plan: TrainPlan,
    out_dir: str | Path | None = None,
    fold: str = "",
    resume: bool = False,
) -> TrainResult:
    """Adam on masked cross entropy over the pooled source records.

    Uniform sampling over records; 10% (>= 1 record) held out for
    validation; the checkpoint with the best validation median per-patient
    kappa is retained. Fixed seed gives a bit-identical trajectory, and a
    resumed run continues it exactly (epoch-level granularity).
    """
    plan.validate()
    out_dir = Path(out_dir or plan.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")

    sources = [load_cache(p) for p in plan.sources]
    target_ids: set[str] = set()
    if plan.target is not None:
        target_ids = load_cache(plan.target).record_ids()
    pool: list[CachedRecord] = []
    for ds in sources:
        pool.extend(ds.records)
    pool.sort(key=lambda r: r.record_id)
    overlap = {r.record_id for r in pool} & target_ids
    if overlap:
        raise DataError(f"target records leaked into the source pool: {sorted(overlap)}")
    if not pool:
        raise DataError("source pool is empty")

    rng_split = np.random.default_rng(np.random.SeedSequence([plan.seed, 9001]))
    n_val = max(1, int(round(plan.val_fraction * len(pool)))) if plan.val_fraction > 0 else 0
    perm = rng_split.permutation(len(pool))
    val_records = [pool[i] for i in perm[:n_val]]
    train_records = [pool[i] for i in perm[n_val:]]
    if not train_records:
        raise DataError("validation split consumed every record")
    if not val_records:
        val_records = train_records

    model = models.build(plan.model, seed=plan.seed)
    # checkpoint entries are name-sorted; keep optimizer state in that order
    param_names = sorted(model.named_params())
    adam = neural.Adam([model.named_params()[n] for n in param_names], lr=plan.lr)
    best_val = -np.inf
    start_epoch = 0
    history: list[dict] = []
    last_path = out_dir / "last.spw2"
    best_path = out_dir / "best.spw2"
    state_path = out_dir / "train_state.json"
    log_path = out_dir / "train_log.jsonl"

    if resume and last_path.exists() and state_path.exists():
        params, buffers, moments = neural.load_checkpoint(last_path)
        model.load_state(params, buffers)
        if moments is not None:
            m, v, t = moments
            adam.load_state([m[n] for n in param_names], [v[n] for n in param_names], t)
        state = json.loads(state_path.read_text())
        start_epoch = state["next_epoch"]
        best_val = state["best_val_kappa"]
        history = [json.loads(line) for line in log_path.read_text().splitlines()]
    else:
        log_path.write_text("")

    def save(path: Path):
        params = {k: t.data for k, t in model.named_params().items()}
        m = {n: adam.m[i] for i, n in enumerate(param_names)}
        v = {n: adam.v[i] for i, n in enumerate(param_names)}
        neural.save_checkpoint(path, params, model.named_buffers(), (m, v, adam.t))
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(models.config_to_dict(model.config), indent=2, sort_keys=True) + "\n"
        )
    with open(log_path, "a") as log_file:
        for epoch in range(start_epoch, plan.epochs):
            t0 = time.perf_counter()
            rng_epoch = np.random.default_rng(np.random.SeedSequence([plan.seed, 1000 + epoch]))
            model.rng = np.random.default_rng(np.random.SeedSequence([plan.seed, 2000 + epoch]))
            order = list(rng_epoch.permutation(len(train_records)))
            losses = []
            model.train()
            for batch_idx in _batched(order, plan.batch_size):
                batch = [train_records[i] for i in batch_idx]
                x, labels, mask = assemble_batch(batch, plan.crop_epochs, rng_epoch)
                if not mask.any():
                    continue
                logits = model.forward(x)
                loss = neural.masked_cross_entropy(logits, labels, mask)
                adam.zero_grad()
                loss.backward()
                adam.step()
                losses.append(float(loss.data))
            if not losses:
                raise DataError("no valid epochs in any training batch")
            val_kappa = _median_kappa(model, val_records)
            if val_kappa > best_val:
                best_val = val_kappa
                save(best_path)
            save(last_path)
            entry = {
                "fold": fold,
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "val_kappa": val_kappa,
                "wall_ms": round((time.perf_counter() - t0) * 1e3, 3),
            }
            history.append(entry)
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()
            state_path.write_text(
                json.dumps({"next_epoch": epoch + 1, "best_val_kappa": best_val}) + "\n"
            )

    params, buffers, _ = neural.load_checkpoint(best_path)
    model.load_state(params, buffers)
    model.eval()
    return TrainResult(
        best_path=best_path,
        last_path=last_path,
        log_path=log_path,
        history=history,
        best_val_kappa=best_val,
        trained_record_ids=sorted(r.record_id for r in train_records),
        model=model,
    )


# ---------------------------------------------------------------------------
# Leave-one-domain-out

@dataclass
class FoldResult:
    target: str
    reports: dict[str, metrics.MetricsReport] | None
    best_val_kappa: float | None
    error: str | None = None


def leave_one_out(
    cache_dirs: list[str | Path],
    base_plan: TrainPlan,
    out_dir: str | Path,
    tasks: tuple[StageTask, ...] = tuple(StageTask),
) -> dict[str, FoldResult]:
    """Train on all-but-one domain, evaluate on the holdout, repeat.

    A failing fold is recorded and the remaining folds still run.
    """
    cache_dirs = [Path(p) for p in cache_dirs]
    if len(cache_dirs) < 2:
        raise PlanError("leave-one-out needs at least 2 domains")
    out_dir = Path(out_dir)
    results: dict[str, FoldResult] = {}
    for i, target_dir in enumerate(cache_dirs):
        name = load_cache(target_dir).name
        fold_plan = replace(
            base_plan,
            sources=[str(p) for j, p in enumerate(cache_dirs) if j != i],
            target=str(target_dir),
        )
        fold_out = out_dir / f"fold_{name}"
        try:
            tr = train(fold_plan, fold_out, fold=name)
            reports = evaluate_model_on_cache(tr.model, load_cache(target_dir), tasks)
            for task_name, report in reports.items():
                metrics.save_report_json(fold_out / f"report_{task_name}.json", report)
            results[name] = FoldResult(name, reports, tr.best_val_kappa)
        except Exception as e:  # noqa: BLE001 - fold isolation is the contract
            results[name] = FoldResult(name, None, None, error=f"{type(e).__name__}: {e}")
    return results
