"""Point cloud datasets: on-disk layout, synthetic multi-domain generator,
normalization/jitter, PointMix and domain-balanced resampling."""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

log = logging.getLogger(__name__)

CLASSES = ("box", "chair_frame", "pole_with_shade", "rounded_slab", "plane_on_legs")
DOMAINS = ("D0", "D1", "D2", "D3")
DOMAIN_TRANSFORMS = {
    "D0": "clean dense sampling",
    "D1": "half-space occlusion, 60-80% kept, resampled to full count",
    "D2": "additive gaussian noise, sigma=0.03",
    "D3": "non-uniform density biased toward one octant",
}
SPLITS = ("train", "test")
MIN_POINTS = 64
POINTS_PER_CLOUD = 1024
DENSE_POINTS = 4096
NOISE_SIGMA = 0.03


class DataFormatError(Exception):
    pass


class ProtocolError(Exception):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    class_id: int
    domain_id: int
    sample_id: str


@dataclass
class DomainDataset:
    clouds: list[PointCloud]
    domain_id: int
    split: str
    num_classes: int
    name: str = ""
    class_counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_counts:
            counts = [0] * self.num_classes
            for c in self.clouds:
                counts[c.class_id] += 1
            self.class_counts = counts

    def __len__(self) -> int:
        return len(self.clouds)


# ---------------------------------------------------------------------------
# shape primitives (surface samplers)


def _box_surface(rng: Rng, n: int, size, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, (n, 3)) * np.array(size)
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    uv[np.arange(n), axis] = sign * np.array(size)[axis]
    return uv + np.asarray(center)


def _box_area(size) -> float:
    sx, sy, sz = size
    return 2 * (sx * sy + sy * sz + sx * sz)


def _cylinder_surface(rng: Rng, n: int, radius: float, height: float, center) -> np.ndarray:
    theta = rng.uniform(0, 2 * np.pi, n)
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    is_cap = rng.random(n) < (2 * cap) / (side + 2 * cap)
    r = np.where(is_cap, radius * np.sqrt(rng.random(n)), radius)
    z = np.where(is_cap, np.where(rng.random(n) < 0.5, -0.5, 0.5) * height, rng.uniform(-0.5, 0.5, n) * height)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts + np.asarray(center)


def _frustum_surface(rng: Rng, n: int, r_bottom: float, r_top: float, height: float, center) -> np.ndarray:
    # area-uniform on the lateral surface: radius grows linearly, density ~ r
    u = rng.random(n)
    if abs(r_top - r_bottom) < 1e-9:
        s = u
    else:
        s = (np.sqrt(r_bottom**2 + u * (r_top**2 - r_bottom**2)) - r_bottom) / (r_top - r_bottom)
    r = r_bottom + s * (r_top - r_bottom)
    theta = rng.uniform(0, 2 * np.pi, n)
    z = (s - 0.5) * height
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1) + np.asarray(center)


def _superquadric_surface(rng: Rng, n: int, radii, power: float) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    scaled = d / np.asarray(radii)
    k = (np.abs(scaled) ** power).sum(axis=1) ** (1.0 / power)
    return d / k[:, None]


def _compose(rng: Rng, n: int, parts) -> np.ndarray:
    """parts: list of (area, sampler(rng, count))."""
    areas = np.array([a for a, _ in parts])
    counts = rng.gen.multinomial(n, areas / areas.sum())
    chunks = [sampler(rng, int(k)) for (_, sampler), k in zip(parts, counts) if k > 0]
    return np.concatenate(chunks, axis=0)


def _legs(w, d, leg_h, thick, z_top):
    parts = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            c = (sx * (w / 2 - thick), sy * (d / 2 - thick), z_top - leg_h / 2)
            size = (thick, thick, leg_h)
            parts.append((_box_area(size), lambda r, k, s=size, c=c: _box_surface(r, k, s, c)))
    return parts


def sample_shape(class_id: int, rng: Rng, n: int) -> np.ndarray:
    """Surface samples of one jittered instance of a parametric class."""
    j = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    name = CLASSES[class_id]
    if name == "box":
        size = (j(0.6, 1.0), j(0.4, 0.7), j(0.9, 1.4))
        return _box_surface(rng, n, size)
    if name == "chair_frame":
        w, d = j(0.45, 0.6), j(0.45, 0.6)
        seat_h, back_h, t = j(0.4, 0.5), j(0.45, 0.65), j(0.04, 0.07)
        seat = (w, d, t)
        back = (w, t, back_h)
        parts = [
            (_box_area(seat), lambda r, k: _box_surface(r, k, seat, (0, 0, seat_h))),
            (_box_area(back), lambda r, k: _box_surface(r, k, back, (0, -d / 2 + t / 2, seat_h + back_h / 2))),
        ]
        parts += _legs(w, d, seat_h, t, seat_h - t / 2)
        return _compose(rng, n, parts)
    if name == "pole_with_shade":
        base_r, pole_h = j(0.18, 0.28), j(0.9, 1.3)
        shade_h, rb, rt = j(0.25, 0.4), j(0.25, 0.38), j(0.1, 0.18)
        pole_r = 0.03
        parts = [
            (2 * np.pi * base_r * (base_r + 0.04), lambda r, k: _cylinder_surface(r, k, base_r, 0.04, (0, 0, 0.02))),
            (2 * np.pi * pole_r * pole_h, lambda r, k: _cylinder_surface(r, k, pole_r, pole_h, (0, 0, pole_h / 2))),
            (np.pi * (rb + rt) * shade_h, lambda r, k: _frustum_surface(r, k, rb, rt, shade_h, (0, 0, pole_h))),
        ]
        return _compose(rng, n, parts)
    if name == "rounded_slab":
        radii = (j(0.8, 1.1), j(0.35, 0.5), j(0.18, 0.28))
        return _superquadric_surface(rng, n, radii, power=j(3.0, 5.0))
    if name == "plane_on_legs":
        w, d = j(0.9, 1.3), j(0.5, 0.8)
        h, t = j(0.55, 0.75), j(0.03, 0.06)
        top = (w, d, t)
        parts = [(_box_area(top), lambda r, k: _box_surface(r, k, top, (0, 0, h)))]
        parts += _legs(w, d, h, j(0.04, 0.07), h - t / 2)
        return _compose(rng, n, parts)
    raise ValueError(f"unknown class id {class_id}")


def generate_sample(seed: int, domain_id: int, split: str, class_id: int, index: int):
    """Return ``(clean, cloud, meta)`` for one synthetic sample.

    ``clean`` is the D0-style version of the same underlying instance, so every
    corrupted cloud can be compared against its clean counterpart.
    """
    rng = Rng(seed, domain_id, SPLITS.index(split), class_id, index)
    dense = sample_shape(class_id, rng, DENSE_POINTS)
    c = dense.mean(axis=0)
    dense = dense - c
    dense /= np.linalg.norm(dense, axis=1).max()
    pick = rng.choice(DENSE_POINTS, POINTS_PER_CLOUD, replace=False)
    clean = dense[pick]
    meta: dict = {}
    name = DOMAINS[domain_id]
    if name == "D0":
        cloud = clean
    elif name == "D1":
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        proj = dense @ normal
        offset = float(np.quantile(proj, rng.uniform(0.6, 0.8)))
        kept = np.flatnonzero(proj <= offset)
        cloud = dense[rng.choice(kept, POINTS_PER_CLOUD, replace=False)]
        meta["plane"] = [*normal.tolist(), offset]
    elif name == "D2":
        cloud = clean + rng.normal(0.0, NOISE_SIGMA, clean.shape)
    elif name == "D3":
        octant = rng.choice([-1.0, 1.0], size=3) / np.sqrt(3.0)
        w = np.exp(4.0 * (dense @ octant))
        cloud = dense[rng.choice(DENSE_POINTS, POINTS_PER_CLOUD, replace=False, p=w / w.sum())]
        meta["octant"] = octant.tolist()
    else:
        raise ValueError(f"unknown domain {domain_id}")
    return clean, cloud, meta


def sample_id_for(domain: str, split: str, cls: str, index: int) -> str:
    return f"{domain}-{split}-{cls}-{index:05d}"


def write_xyz(path: Path, points: np.ndarray) -> None:
    # repr is the shortest exact round-trip decimal form
    text = "\n".join(" ".join(repr(v) for v in row) for row in points.tolist()) + "\n"
    path.write_bytes(text.encode("utf-8"))


def read_xyz(path: Path) -> np.ndarray:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
        rows = [line.split(" ") for line in lines if line]
        if any(len(r) != 3 for r in rows):
            raise ValueError("expected 3 space-separated values per line")
        pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(pts)):
        raise DataFormatError(f"{path}: non-finite coordinate")
    return pts


def generate_synthetic_benchmark(
    root: str | Path,
    seed: int,
    train_per_class: int = 200,
    test_per_class: int = 50,
    force: bool = False,
) -> dict:
    """Write the 5-class x 4-domain benchmark under ``root`` and return the manifest."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} is not empty (use force to overwrite)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    per_split = {"train": train_per_class, "test": test_per_class}
    counts: dict = {}
    planes: dict = {}
    for d, dname in enumerate(DOMAINS):
        counts[dname] = {}
        for split in SPLITS:
            counts[dname][split] = {}
            for c, cname in enumerate(CLASSES):
                folder = root / dname / split / cname
                folder.mkdir(parents=True, exist_ok=True)
                for i in range(per_split[split]):
                    _, cloud, meta = generate_sample(seed, d, split, c, i)
                    sid = sample_id_for(dname, split, cname, i)
                    write_xyz(folder / f"{sid}.xyz", cloud)
                    if "plane" in meta:
                        planes[sid] = meta["plane"]
                counts[dname][split][cname] = per_split[split]
    manifest = {
        "domains": list(DOMAINS),
        "domain_transforms": DOMAIN_TRANSFORMS,
        "classes": list(CLASSES),
        "splits": list(SPLITS),
        "counts": counts,
        "seed": int(seed),
        "points_per_cloud": POINTS_PER_CLOUD,
        "occlusion_planes": planes,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DataFormatError(f"missing manifest: {path}")
    return json.loads(path.read_text())


def load_dataset(root: str | Path) -> list[DomainDataset]:
    """One DomainDataset per (domain, split), clouds ordered by sample_id."""
    root = Path(root)
    manifest = read_manifest(root)
    classes = manifest["classes"]
    out = []
    for d, dname in enumerate(manifest["domains"]):
        for split in manifest["splits"]:
            clouds = []
            for c, cname in enumerate(classes):
                folder = root / dname / split / cname
                files = sorted(folder.glob("*.xyz")) if folder.is_dir() else []
                if not files:
                    log.warning("no clouds for class %s in %s/%s", cname, dname, split)
                for f in files:
                    pts = read_xyz(f)
                    if len(pts) < MIN_POINTS:
                        raise DataFormatError(f"sample {f.stem} has {len(pts)} points (< {MIN_POINTS})")
                    clouds.append(PointCloud(pts, c, d, f.stem))
            clouds.sort(key=lambda pc: pc.sample_id)
            out.append(DomainDataset(clouds, d, split, len(classes), name=dname))
    return out


def dataset_hash(root: str | Path) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# preprocessing and augmentation


class NormalizationError(ValueError):
    pass


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale to unit max norm; works on (N,3) or (B,N,3)."""
    centered = points - points.mean(axis=-2, keepdims=True)
    radius = np.linalg.norm(centered, axis=-1).max(axis=-1)
    if np.any(radius <= 1e-12):
        raise NormalizationError("degenerate cloud: all points identical")
    return centered / radius[..., None, None] if points.ndim == 3 else centered / radius


def jitter_points(points: np.ndarray, sigma: float, clip: float, rng: Rng) -> np.ndarray:
    if sigma < 0:
        raise ValueError("jitter sigma must be >= 0")
    if sigma == 0:
        return points.copy()
    return points + np.clip(rng.normal(0.0, sigma, points.shape), -clip, clip)


def normalize_and_jitter(
    cloud: PointCloud,
    train: bool,
    jitter_sigma: float = 0.01,
    clip: float = 0.05,
    rng: Rng | None = None,
) -> PointCloud:
    if jitter_sigma < 0:
        raise ValueError("jitter sigma must be >= 0")
    pts = normalize_points(cloud.points)
    if train and jitter_sigma > 0:
        pts = jitter_points(pts, jitter_sigma, clip, rng or Rng(0))
    return PointCloud(pts, cloud.class_id, cloud.domain_id, cloud.sample_id)


def _match_count(b: np.ndarray, n: int) -> np.ndarray:
    if len(b) == n:
        return b
    idx = np.floor(np.linspace(0, len(b), n, endpoint=False)).astype(int)
    return b[idx]


def greedy_pairing(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For (B,N,3) clouds, index into b of the partner of each a point.

    Points of ``a`` are visited in order; each takes its nearest unclaimed
    point of ``b`` (ties to the lowest index).
    """
    nb, n, _ = a.shape
    taken = np.zeros((nb, n), dtype=bool)
    assign = np.empty((nb, n), dtype=np.int64)
    rows = np.arange(nb)
    for i in range(n):
        d = ((b - a[:, i, None, :]) ** 2).sum(axis=-1)
        d[taken] = np.inf
        j = d.argmin(axis=1)
        assign[:, i] = j
        taken[rows, j] = True
    return assign


def pointmix_points(a: np.ndarray, b: np.ndarray, lam) -> np.ndarray:
    """Batched PointMix on (B,N,3) arrays with per-sample ratios ``lam``."""
    lam = np.asarray(lam, dtype=np.float64).reshape(-1, 1, 1)
    paired = np.take_along_axis(b, greedy_pairing(a, b)[..., None], axis=1)
    return lam * a + (1.0 - lam) * paired


def pointmix(a: PointCloud, b: PointCloud, lam: float, y_a: np.ndarray, y_b: np.ndarray):
    """Mix two clouds and their one-hot labels; returns ``(cloud, soft_label)``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    bpts = _match_count(b.points, len(a.points))
    mixed = pointmix_points(a.points[None], bpts[None], lam)[0]
    label = lam * np.asarray(y_a, dtype=np.float64) + (1.0 - lam) * np.asarray(y_b, dtype=np.float64)
    return PointCloud(mixed, a.class_id, a.domain_id, a.sample_id), label


# ---------------------------------------------------------------------------
# balanced resampling


@dataclass
class IndexPlan:
    """Per (domain, class) index lists of equal length M_c into each source pool."""

    entries: dict[tuple[int, int], np.ndarray]
    domains_for_class: dict[int, list[int]]
    target_counts: dict[int, int]

    def participating(self, class_id: int) -> list[int]:
        return self.domains_for_class.get(class_id, [])


def balanced_resample(datasets: list[DomainDataset], rng: Rng) -> IndexPlan:
    if len(datasets) < 2:
        raise ProtocolError("balanced resampling needs at least 2 source domains")
    num_classes = datasets[0].num_classes
    entries: dict[tuple[int, int], np.ndarray] = {}
    domains_for_class: dict[int, list[int]] = {}
    targets: dict[int, int] = {}
    for c in range(num_classes):
        pools = {
            ds.domain_id: np.array([i for i, pc in enumerate(ds.clouds) if pc.class_id == c], dtype=np.int64)
            for ds in datasets
        }
        m_c = max(len(p) for p in pools.values())
        if m_c == 0:
            raise ProtocolError(f"class {c} is absent from every source domain")
        present = []
        for d, pool in pools.items():
            if len(pool) == 0:
                log.warning("class %d absent from domain %d; excluded from pairing", c, d)
                continue
            extra = rng.choice(pool, m_c - len(pool), replace=True) if m_c > len(pool) else pool[:0]
            entries[(d, c)] = rng.permutation(np.concatenate([pool, extra]))
            present.append(d)
        domains_for_class[c] = present
        targets[c] = m_c
    return IndexPlan(entries, domains_for_class, targets)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def merged_pool(datasets: list[DomainDataset]) -> DomainDataset:
    """Union of several splits of one domain (e.g. train+test sources)."""
    if not datasets:
        raise ProtocolError("nothing to merge")
    clouds = sorted((pc for ds in datasets for pc in ds.clouds), key=lambda pc: pc.sample_id)
    first = datasets[0]
    split = "+".join(ds.split for ds in datasets)
    return DomainDataset(clouds, first.domain_id, split, first.num_classes, name=first.name)


__all__ = [
    "CLASSES",
    "DOMAINS",
    "PointCloud",
    "DomainDataset",
    "IndexPlan",
    "generate_synthetic_benchmark",
    "generate_sample",
    "load_dataset",
    "normalize_and_jitter",
    "pointmix",
    "balanced_resample",
]
