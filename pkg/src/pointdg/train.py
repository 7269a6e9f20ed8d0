"""Loss, AdamW, schedule, the epoch loop and the leave-one-out / ablation drivers."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, apply_primitive, backward, no_grad
from .checkpoint import save_checkpoint
from .config import ConfigError, TrainConfig, dump_config
from .data import (
    DomainDataset,
    IndexPlan,
    ProtocolError,
    _match_count,
    balanced_resample,
    dataset_hash,
    jitter_points,
    load_dataset,
    merged_pool,
    normalize_points,
    one_hot,
    pointmix_points,
)
from .model import PointSsmClassifier, build_model
from .msd import temperature_at
from .nn import Module
from .rng import Rng
from .scfa import select_partner

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "split", "loss", "accuracy", "mean_mask", "lr")


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss / optimizer / schedule


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of -sum y log softmax(logits); labels hard (ints) or on the simplex."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim == 1:
        labels = one_hot(labels.astype(np.int64), logits.shape[-1])
    if labels.shape != logits.shape:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if np.any(labels < -1e-6) or np.any(np.abs(labels.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("labels must lie on the probability simplex")
    probs = apply_primitive("softmax", logits, axis=-1)
    logp = apply_primitive("log", apply_primitive("clip", probs, lo=1e-12, hi=1.0))
    nll = apply_primitive("sum", logp * labels)
    return nll * (-1.0 / logits.shape[0])


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """Decoupled weight decay, then a bias-corrected Adam update (in place)."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        p -= lr * weight_decay * p
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class AdamW:
    def __init__(self, module: Module, betas=(0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, lr: float, weight_decay: float) -> None:
        named = dict(self.module.named_parameters())
        adamw_step(
            {k: p.data for k, p in named.items()},
            {k: p.grad for k, p in named.items()},
            self.state,
            lr,
            weight_decay,
            self.betas,
            self.eps,
        )


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from lr_init/W to lr_init at epoch W, then cosine to lr_final
    at the last epoch."""
    W, last = cfg.warmup_epochs, cfg.epochs - 1
    if W > 0 and epoch < W:
        start = cfg.lr_init / W
        return start + (cfg.lr_init - start) * epoch / W
    if epoch == W or last <= W:
        return cfg.lr_init
    phase = min((epoch - W) / (last - W), 1.0)
    if phase >= 1.0:
        return cfg.lr_final
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * phase))


# ---------------------------------------------------------------------------
# data plumbing


def source_pools(datasets: list[DomainDataset], target: int, policy: str) -> dict[int, DomainDataset]:
    splits = ("train", "test") if policy == "train+test" else ("train",)
    pools: dict[int, DomainDataset] = {}
    for d in sorted({ds.domain_id for ds in datasets}):
        if d == target:
            continue
        parts = [ds for ds in datasets if ds.domain_id == d and ds.split in splits]
        if parts:
            pools[d] = merged_pool(parts)
    if len(pools) < 2:
        raise ProtocolError(f"need at least 2 source domains, found {len(pools)}")
    return pools


def _stack(clouds, n_points: int) -> np.ndarray:
    return np.stack([_match_count(pc.points, n_points) for pc in clouds])


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    mean_mask: float
    lr: float
    tau: float
    keep_hist: list = field(default_factory=list)
    steps: int = 0


def epoch_batches(pools: dict[int, DomainDataset], plan: IndexPlan, cfg: TrainConfig, rng: Rng):
    """Per-step lists of (domain, class, pool_index), ``batch_size`` per domain."""
    lists = {}
    for d in sorted(pools):
        entries = [(c, int(i)) for c in sorted(plan.target_counts) for i in plan.entries.get((d, c), ())]
        perm = rng.substream(0, d).permutation(len(entries))
        lists[d] = [entries[k] for k in perm]
    n_steps = max(math.ceil(len(v) / cfg.batch_size) for v in lists.values())
    for step in range(n_steps):
        lo, hi = step * cfg.batch_size, (step + 1) * cfg.batch_size
        items = [(d, c, i) for d in sorted(lists) for c, i in lists[d][lo:hi]]
        if items:
            yield step, items


def train_epoch(
    model: PointSsmClassifier,
    opt: AdamW,
    pools: dict[int, DomainDataset],
    plan: IndexPlan,
    cfg: TrainConfig,
    epoch: int,
    rng: Rng,
    num_classes: int,
    dump_dir: Path | None = None,
) -> EpochMetrics:
    n_points = cfg.num_points
    lr = lr_at(epoch, cfg)
    tau = temperature_at(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end)
    erng = rng.substream(epoch)
    losses, weights, masks = [], [], []
    hist = np.zeros(10)
    steps = 0
    for step, items in epoch_batches(pools, plan, cfg, erng):
        brng = erng.substream(1, step)
        clouds = [pools[d].clouds[i] for d, _, i in items]
        labels = one_hot([c for _, c, _ in items], num_classes)
        pts = jitter_points(normalize_points(_stack(clouds, n_points)), cfg.jitter_sigma, cfg.jitter_clip, brng.substream(0))
        partners = None
        if model.needs_partner:
            prng = brng.substream(1)
            picks = [select_partner(d, c, i, plan, "train", prng) for d, c, i in items]
            partners = jitter_points(
                normalize_points(_stack([pools[d].clouds[i] for d, i in picks], n_points)),
                cfg.jitter_sigma,
                cfg.jitter_clip,
                brng.substream(2),
            )
        mrng = brng.substream(3)
        if mrng.random() < cfg.pointmix_prob:
            perm = mrng.permutation(len(items))
            lam = mrng.beta(1.0, 1.0, len(items))
            pts = pointmix_points(pts, pts[perm], lam)
            labels = lam[:, None] * labels + (1.0 - lam[:, None]) * labels[perm]
        starts = brng.substream(4).integers(0, n_points, len(items))
        res = model.forward(
            pts, train=True, rng=brng.substream(5), partner_points=partners, tau=tau, starts=starts
        )
        loss = cross_entropy(res.logits, labels)
        if res.mask is not None and cfg.mask_l1 > 0:
            loss = loss + apply_primitive("mean", res.mask.m) * cfg.mask_l1
        value = float(loss.data)
        if not np.isfinite(value):
            if dump_dir is not None:
                np.savez(Path(dump_dir) / "last_batch.npz", points=pts, labels=labels)
            raise TrainingAborted(f"non-finite loss at epoch {epoch} step {step}")
        model.zero_grad()
        backward(loss)
        opt.step(lr, cfg.weight_decay)
        losses.append(value)
        weights.append(len(items))
        if res.mask is not None:
            m = res.mask.m.data
            masks.append(float(m.mean()))
            hist += np.histogram(m, bins=10, range=(0.0, 1.0))[0]
        steps += 1
    return EpochMetrics(
        epoch,
        float(np.average(losses, weights=weights)),
        float(np.mean(masks)) if masks else float("nan"),
        lr,
        tau,
        hist.tolist(),
        steps,
    )


@dataclass
class EvalResult:
    accuracy: float
    per_class: list[float]
    features: np.ndarray
    sample_ids: list[str]
    class_ids: np.ndarray
    predictions: np.ndarray
    traces: list = field(default_factory=list)


def evaluate(model, dataset: DomainDataset, cfg: TrainConfig | None = None, batch_size: int = 64) -> EvalResult:
    """Inference-mode accuracy: noiseless MSD, self-pairing in SCFA, no augmentation."""
    if len(dataset) == 0:
        raise ProtocolError(f"empty evaluation set for domain {dataset.name or dataset.domain_id}")
    n_points = cfg.num_points if cfg is not None else model.cfg.num_points
    if cfg is not None:
        batch_size = cfg.eval_batch_size
    preds, feats, traces = [], [], []
    tau = cfg.tau_end if cfg is not None else 1.0
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            chunk = dataset.clouds[lo : lo + batch_size]
            pts = normalize_points(_stack(chunk, n_points))
            res = model.forward(pts, train=False, tau=tau, starts=0)
            preds.append(res.logits.data.argmax(axis=1))
            feats.append(res.pooled.data)
            traces.append(res.trace)
    pred = np.concatenate(preds)
    truth = np.array([pc.class_id for pc in dataset.clouds])
    per_class = []
    for c in range(dataset.num_classes):
        sel = truth == c
        per_class.append(float((pred[sel] == c).mean()) if sel.any() else float("nan"))
    return EvalResult(
        float((pred == truth).mean()),
        per_class,
        np.concatenate(feats),
        [pc.sample_id for pc in dataset.clouds],
        truth,
        pred,
        traces,
    )


# ---------------------------------------------------------------------------
# protocol drivers


@dataclass
class ProtocolRun:
    sources: list[int]
    target: int
    target_name: str
    metrics: list[dict]
    final_accuracy: float
    eval_result: EvalResult | None = None
    model: PointSsmClassifier | None = None


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_features(path: Path, ev: EvalResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "class_id"] + [f"f{i}" for i in range(ev.features.shape[1])])
        for sid, cid, row in zip(ev.sample_ids, ev.class_ids, ev.features):
            w.writerow([sid, int(cid)] + [repr(float(v)) for v in row])


def run_protocol(
    datasets: list[DomainDataset],
    target: int,
    cfg: TrainConfig,
    run_dir: Path | None = None,
    progress=None,
) -> ProtocolRun:
    """Train on every domain except ``target`` and evaluate on its test split."""
    cfg.validate()
    num_classes = datasets[0].num_classes
    pools = source_pools(datasets, target, cfg.source_policy)
    test = [ds for ds in datasets if ds.domain_id == target and ds.split == "test"]
    if not test:
        raise ProtocolError(f"no test split for target domain {target}")
    test = test[0]
    rng = Rng(cfg.seed, 0x7A1, target)
    plan = balanced_resample(list(pools.values()), rng.substream(0))
    model = build_model(cfg, num_classes)
    opt = AdamW(model)
    rows = []
    for epoch in range(cfg.epochs):
        m = train_epoch(model, opt, pools, plan, cfg, epoch, rng.substream(1), num_classes, run_dir)
        last = epoch == cfg.epochs - 1
        epoch_acc = float("nan")
        if last or (cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0):
            ev = evaluate(model, test, cfg)
            epoch_acc = ev.accuracy
        rows.append(
            {"epoch": epoch, "split": test.name, "loss": m.loss, "accuracy": epoch_acc, "mean_mask": m.mean_mask, "lr": m.lr}
        )
        if progress:
            progress(test.name, m, epoch_acc)
    return ProtocolRun(sorted(pools), target, test.name, rows, ev.accuracy, ev, model)


@dataclass
class LooResult:
    runs: list[ProtocolRun]
    run_dir: Path | None
    wall_time: float

    @property
    def accuracies(self) -> dict[str, float]:
        return {r.target_name: r.final_accuracy for r in self.runs}

    @property
    def average(self) -> float:
        return float(np.mean([r.final_accuracy for r in self.runs]))


def metrics_csv(runs: list[ProtocolRun]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in runs:
        for row in r.metrics:
            w.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
    for r in runs:
        w.writerow(["final", r.target_name, "", _fmt(r.final_accuracy), "", ""])
    return buf.getvalue()


def run_leave_one_out(
    root: str | Path,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    run_id: str | None = None,
    targets: list[int] | None = None,
    datasets: list[DomainDataset] | None = None,
    progress=None,
) -> LooResult:
    """Leave-one-domain-out over every domain (or ``targets``)."""
    cfg.validate()
    t0 = time.perf_counter()
    datasets = datasets if datasets is not None else load_dataset(root)
    domains = sorted({ds.domain_id for ds in datasets})
    if len(domains) < 3:
        raise ProtocolError(f"leave-one-out needs at least 3 domains, found {len(domains)}")
    names = {ds.domain_id: ds.name for ds in datasets}
    targets = domains if targets is None else targets
    run_dir = None
    if out_dir is not None:
        run_dir = Path(out_dir) / (run_id or f"loo-seed{cfg.seed}")
        run_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for target in targets:
        run = run_protocol(datasets, target, cfg, run_dir, progress)
        runs.append(run)
        if run_dir is not None:
            tname = names[target] or str(target)
            save_checkpoint(run_dir / f"checkpoint_{tname}.pdgm", run.model.state_dict())
            (run_dir / f"checkpoint_{tname}.cfg").write_text(dump_config(cfg))
            write_features(run_dir / f"features_{tname}.csv", run.eval_result)
    wall = time.perf_counter() - t0
    result = LooResult(runs, run_dir, wall)
    if run_dir is not None:
        (run_dir / "metrics.csv").write_text(metrics_csv(runs))
        summary = {
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "per_target_accuracy": result.accuracies,
            "average_accuracy": result.average,
            "per_class_accuracy": {r.target_name: r.eval_result.per_class for r in runs},
            "wall_time_s": wall,
            "dataset_hash": dataset_hash(root) if root is not None else None,
            "note": "synthetic benchmark; absolute numbers are not comparable to published real-data results",
        }
        (run_dir / "result.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# ablations


def ablation_presets(base: TrainConfig) -> dict[str, list[tuple[str, TrainConfig]]]:
    b = base
    return {
        "table2": [
            ("baseline", TrainConfig.baseline(**_keep(b))),
            ("+CDF", b.replace(msd="off", aggregation="scfa", global_prompt=False, scan="dds")),
            ("+CDF+GP", b.replace(msd="off", aggregation="scfa", global_prompt=True, scan="dds")),
            ("+CDF+GP+MSD", b.replace(msd="gumbel", aggregation="scfa", global_prompt=True, scan="dds")),
        ],
        "masks": [
            ("random", b.replace(msd="random")),
            ("similarity", b.replace(msd="similarity")),
            ("gumbel", b.replace(msd="gumbel")),
        ],
        "aggregation": [
            ("sum", b.replace(aggregation="sum")),
            ("concat", b.replace(aggregation="concat")),
            ("scfa", b.replace(aggregation="scfa")),
        ],
        "scans": [
            ("forward", b.replace(scan="forward")),
            ("backward", b.replace(scan="backward")),
            ("shuffle", b.replace(scan="shuffle")),
            ("ids", b.replace(scan="ids")),
            ("cds", b.replace(scan="cds")),
            ("dds", b.replace(scan="dds")),
        ],
        "positions": [
            (f"msd{m}-scfa{s}", b.replace(msd_position=m, scfa_position=s))
            for m, s in ((1, 1), (2, 2), (3, 3), (1, 2), (1, 3), (2, 3))
        ],
        "scales": [(s, b.replace(scale=s, width=0, num_stages=0)) for s in ("base", "small", "tiny")],
    }


def _keep(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    for k in ("msd", "aggregation", "scan"):
        d.pop(k)
    return d


@dataclass
class AblationRow:
    name: str
    seed: int
    accuracies: dict[str, float]

    @property
    def average(self) -> float:
        return float(np.mean(list(self.accuracies.values())))


def run_ablation_matrix(
    root: str | Path,
    grid: list[tuple[str, TrainConfig]],
    seeds: list[int],
    out_dir: str | Path | None = None,
    targets: list[int] | None = None,
    datasets: list[DomainDataset] | None = None,
) -> list[AblationRow]:
    """Run every grid entry with the same seeds; rows come back in grid order."""
    for name, cfg in grid:
        try:
            cfg.validate()
        except ConfigError as exc:
            raise ConfigError(f"grid entry {name!r}: {exc}") from None
    datasets = datasets if datasets is not None else load_dataset(root)
    rows = []
    for name, cfg in grid:
        for seed in seeds:
            res = run_leave_one_out(root, cfg.replace(seed=seed), None, targets=targets, datasets=datasets)
            rows.append(AblationRow(name, seed, res.accuracies))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(ablation_csv(rows))
        (out / "ablation.txt").write_text(render_table(summarize_ablation(rows)))
    return rows


def summarize_ablation(rows: list[AblationRow]) -> list[list[str]]:
    names = list(dict.fromkeys(r.name for r in rows))
    targets = list(rows[0].accuracies) if rows else []
    table = [["config"] + targets + ["avg"]]
    for n in names:
        sel = [r for r in rows if r.name == n]
        per = [np.mean([r.accuracies[t] for r in sel]) for t in targets]
        table.append([n] + [f"{100 * v:.2f}" for v in per] + [f"{100 * np.mean(per):.2f}"])
    return table


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    targets = list(rows[0].accuracies) if rows else []
    w.writerow(["config", "seed"] + targets + ["avg"])
    for r in rows:
        w.writerow([r.name, r.seed] + [_fmt(r.accuracies[t]) for t in targets] + [_fmt(r.average)])
    return buf.getvalue()


def render_table(table: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    return "".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n" for row in table)
