"""Dataset contract, on-disk format, and the synthetic compositional dataset.

A dataset directory holds three files:

* ``manifest``     -- UTF-8 ``key: value`` text (version, mode, classes,
  label names, stage shapes, per-class positive counts).
* ``records``      -- one JSON object per line: ``sample_id``, label index
  list, and per-stage byte offsets into the feature blob.
* ``features.bin`` -- raw little-endian float32 patch features.

The synthetic generator plants class-defining "clue" vectors into patch
grids so that ground truth is known by construction: every class owns one
private clue (plus optional shared ones), and a sample is positive for a
class exactly when all of that class's clues appear among its patches.
``clue_oracle_predict`` inverts this construction and serves as the
independent baseline any trained model is compared against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError

FEATURE_DTYPE = np.dtype("<f4")
MANIFEST_VERSION = 1

MODE_MULTI_LABEL = "multi-label"
MODE_MULTI_CLASS = "multi-class"


@dataclass
class PatchFeatureMap:
    """One stage's grid of patch embeddings, flattened row-major to P x D."""

    patches: np.ndarray  # (P, D) float32
    grid: tuple[int, int]  # (H, W) with H * W == P

    def validate(self, sample_id: str = "?") -> None:
        h, w = self.grid
        if self.patches.ndim != 2 or self.patches.shape[0] != h * w:
            raise DataError(
                f"sample {sample_id}: patch matrix {self.patches.shape} does not "
                f"match grid {h}x{w}"
            )
        if not np.isfinite(self.patches).all():
            raise DataError(f"sample {sample_id}: non-finite patch features")


@dataclass
class MultiLabelSample:
    sample_id: str
    features_by_stage: list[PatchFeatureMap]  # ordered shallow -> deep
    labels: np.ndarray  # (C,) 0/1

    def label_indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.labels)]


@dataclass
class DatasetManifest:
    num_classes: int
    label_names: list[str]
    stage_shapes: list[tuple[int, int, int]]  # (H, W, D) per stage
    mode: str = MODE_MULTI_LABEL
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    num_samples: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise DataError("manifest: num_classes must be >= 1")
        if len(self.label_names) != self.num_classes:
            raise DataError("manifest: label_names length != num_classes")
        if self.mode not in (MODE_MULTI_LABEL, MODE_MULTI_CLASS):
            raise DataError(f"manifest: unknown mode {self.mode!r}")
        if len(self.counts) != self.num_classes:
            raise DataError("manifest: counts length != num_classes")
        if (self.counts < 0).any():
            raise DataError("manifest: negative class count")


@dataclass
class Dataset:
    """Fully materialized split: manifest plus sample list."""

    manifest: DatasetManifest
    samples: list[MultiLabelSample]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[MultiLabelSample]:
        return iter(self.samples)

    def labels_matrix(self) -> np.ndarray:
        return np.stack([s.labels for s in self.samples]).astype(np.int64)


def class_counts(samples, num_classes: int) -> np.ndarray:
    """Number of samples positive for each class, as a single-pass tally."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for sample in samples:
        counts += sample.labels.astype(np.int64)
    return counts


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Knobs for the compositional generator.

    ``imbalance_exponent`` shapes the class prior, prior(c) ~ (c+1)**(-e),
    so exponent 0 is balanced and larger exponents are longer-tailed.
    ``noise_std`` perturbs planted clue patches; 0 makes the task exactly
    solvable by nearest-clue lookup.
    """

    num_classes: int = 6
    num_clues: int = 6
    stage_shapes: tuple[tuple[int, int, int], ...] = ((3, 3, 16), (2, 2, 24))
    samples_per_split: tuple[int, int, int] = (600, 200, 200)
    imbalance_exponent: float = 1.0
    noise_std: float = 0.0
    seed: int = 0
    mode: str = MODE_MULTI_LABEL
    clue_scale: float = 4.0
    background_std: float = 0.25
    extra_label_rate: float = 0.3
    clue_redundancy: int = 1  # patches planted per required clue

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("synthetic spec: need at least 2 classes")
        if self.num_clues < self.num_classes:
            raise ConfigError("synthetic spec: num_clues must be >= num_classes")
        if not self.stage_shapes:
            raise ConfigError("synthetic spec: need at least one stage shape")
        for h, w, d in self.stage_shapes:
            if h < 1 or w < 1 or d < 1:
                raise ConfigError(f"synthetic spec: bad stage shape {(h, w, d)}")
        if len(self.samples_per_split) != 3 or any(n < 0 for n in self.samples_per_split):
            raise ConfigError("synthetic spec: samples_per_split must be 3 non-negatives")
        if self.noise_std < 0 or self.background_std < 0:
            raise ConfigError("synthetic spec: negative std")
        if self.mode not in (MODE_MULTI_LABEL, MODE_MULTI_CLASS):
            raise ConfigError(f"synthetic spec: unknown mode {self.mode!r}")
        if not 0.0 <= self.extra_label_rate <= 1.0:
            raise ConfigError("synthetic spec: extra_label_rate outside [0, 1]")
        if self.clue_redundancy < 1:
            raise ConfigError("synthetic spec: clue_redundancy must be >= 1")


@dataclass
class ClueDictionary:
    """Generator ground truth: per-stage clue vectors and class clue sets."""

    vectors_by_stage: list[np.ndarray]  # each (num_clues, D_s)
    required: list[tuple[int, ...]]  # clue ids per class
    match_radius: list[float]  # per stage

    @property
    def num_clues(self) -> int:
        return self.vectors_by_stage[0].shape[0]


def class_priors(num_classes: int, exponent: float) -> np.ndarray:
    """Power-law prior over class indices, prior(c) ~ (c+1)**(-exponent)."""
    raw = (np.arange(1, num_classes + 1, dtype=np.float64)) ** (-exponent)
    return raw / raw.sum()


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` seats; ties go to lower index."""
    floors = np.floor(quotas).astype(np.int64)
    remainders = quotas - floors
    missing = total - int(floors.sum())
    order = np.lexsort((np.arange(len(quotas)), -remainders))
    out = floors.copy()
    out[order[:missing]] += 1
    return out


def _build_clues(spec: SyntheticSpec, rng: np.random.Generator) -> ClueDictionary:
    vectors = []
    radii = []
    for _, _, d in spec.stage_shapes:
        v = rng.standard_normal((spec.num_clues, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v *= spec.clue_scale
        vectors.append(v.astype(np.float64))
        if spec.num_clues > 1:
            dist = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)
            np.fill_diagonal(dist, np.inf)
            radii.append(0.45 * float(dist.min()))
        else:
            radii.append(0.45 * spec.clue_scale)

    # Clue c is private to class c; classes may add shared clues from the
    # remainder of the pool (sets of size 1..3).
    shared_pool = list(range(spec.num_classes, spec.num_clues))
    required: list[tuple[int, ...]] = []
    min_patches = min(h * w for h, w, _ in spec.stage_shapes)
    for c in range(spec.num_classes):
        extras = 0
        if shared_pool:
            extras = int(rng.integers(0, min(2, len(shared_pool)) + 1))
        chosen = (
            sorted(rng.choice(shared_pool, size=extras, replace=False).tolist())
            if extras
            else []
        )
        clue_set = (c, *chosen)
        if len(clue_set) * spec.clue_redundancy > min_patches:
            raise ConfigError(
                f"synthetic spec: class {c} requires {len(clue_set)} clues "
                f"(x{spec.clue_redundancy} patches) but the smallest stage grid "
                f"has only {min_patches} patches"
            )
        required.append(clue_set)
    return ClueDictionary(vectors, required, radii)


def _assign_labels(
    spec: SyntheticSpec, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Deal labels so per-class totals follow the prior via apportionment.

    Apportioning the total label mass (rather than drawing i.i.d.) keeps
    exponent-0 class counts within one of each other.
    """
    c = spec.num_classes
    priors = class_priors(c, spec.imbalance_exponent)
    n_extra = 0
    if spec.mode == MODE_MULTI_LABEL:
        n_extra = int(round(spec.extra_label_rate * n))
    total = n + n_extra
    per_class = _largest_remainder(priors * total, total)

    pool = np.repeat(np.arange(c), per_class)
    rng.shuffle(pool)
    labels = np.zeros((n, c), dtype=np.int8)
    for i in range(n):
        labels[i, pool[i]] = 1
    for x in pool[n:]:
        # Random eligible sample: lacks class x and still has a single label.
        for _ in range(64):
            i = int(rng.integers(0, n))
            if labels[i, x] == 0 and labels[i].sum() < 2:
                labels[i, x] = 1
                break
        else:
            eligible = np.flatnonzero((labels[:, x] == 0) & (labels.sum(axis=1) < 2))
            if len(eligible):
                labels[int(rng.choice(eligible)), x] = 1
    return labels


def _render_sample(
    spec: SyntheticSpec,
    clues: ClueDictionary,
    labels: np.ndarray,
    sample_id: str,
    rng: np.random.Generator,
) -> MultiLabelSample:
    needed = sorted({k for c in np.flatnonzero(labels) for k in clues.required[c]})
    planted = [k for k in needed for _ in range(spec.clue_redundancy)]
    stages = []
    for s, (h, w, d) in enumerate(spec.stage_shapes):
        p = h * w
        if len(planted) > p:
            raise ConfigError(
                f"synthetic spec: sample {sample_id} needs {len(planted)} clue "
                f"patches but stage {s} has only {p}"
            )
        patches = rng.normal(0.0, spec.background_std, size=(p, d))
        positions = rng.choice(p, size=len(planted), replace=False)
        for pos, clue_id in zip(positions, planted):
            noise = rng.normal(0.0, spec.noise_std, size=d) if spec.noise_std > 0 else 0.0
            patches[pos] = clues.vectors_by_stage[s][clue_id] + noise
        stages.append(PatchFeatureMap(patches.astype(FEATURE_DTYPE), (h, w)))
    return MultiLabelSample(sample_id, stages, labels.copy())


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[Dataset, Dataset, Dataset, ClueDictionary]:
    """Build train/val/test splits plus the generator's clue dictionary."""
    spec.validate()
    seeds = np.random.SeedSequence(spec.seed).spawn(4)
    clues = _build_clues(spec, np.random.default_rng(seeds[0]))

    label_names = [f"intent{c:02d}" for c in range(spec.num_classes)]
    splits = []
    for split_idx, (split_name, n) in enumerate(
        zip(("train", "val", "test"), spec.samples_per_split)
    ):
        rng = np.random.default_rng(seeds[1 + split_idx])
        labels = _assign_labels(spec, n, rng)
        samples = [
            _render_sample(spec, clues, labels[i], f"{split_name}-{i:06d}", rng)
            for i in range(n)
        ]
        manifest = DatasetManifest(
            num_classes=spec.num_classes,
            label_names=label_names,
            stage_shapes=list(spec.stage_shapes),
            mode=spec.mode,
            counts=class_counts(samples, spec.num_classes),
            num_samples=n,
        )
        splits.append(Dataset(manifest, samples))
    return splits[0], splits[1], splits[2], clues


def clue_oracle_predict(clues: ClueDictionary, samples) -> np.ndarray:
    """Nearest-clue lookup baseline.

    A clue counts as detected when some patch in some stage lies within the
    stage's match radius of the clue vector; a class is predicted when all
    of its required clues are detected. Exact on noise-free data.
    """
    num_classes = len(clues.required)
    preds = np.zeros((len(samples), num_classes), dtype=np.int8)
    for i, sample in enumerate(samples):
        detected: set[int] = set()
        for s, fmap in enumerate(sample.features_by_stage):
            dist = np.linalg.norm(
                fmap.patches.astype(np.float64)[:, None, :]
                - clues.vectors_by_stage[s][None, :, :],
                axis=2,
            )
            hits = np.flatnonzero((dist <= clues.match_radius[s]).any(axis=0))
            detected.update(int(k) for k in hits)
        for c, req in enumerate(clues.required):
            if all(k in detected for k in req):
                preds[i, c] = 1
    return preds


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _format_stage_shapes(shapes) -> str:
    return ";".join(f"{h}x{w}x{d}" for h, w, d in shapes)


def parse_stage_shapes(text: str) -> list[tuple[int, int, int]]:
    shapes = []
    for part in text.split(";"):
        dims = part.strip().split("x")
        if len(dims) != 3:
            raise DataError(f"bad stage shape {part!r} (expected HxWxD)")
        try:
            shapes.append(tuple(int(v) for v in dims))
        except ValueError as exc:
            raise DataError(f"bad stage shape {part!r}: {exc}") from exc
    return shapes


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write manifest / records / features.bin into ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest
    for name in manifest.label_names:
        if "," in name:
            raise DataError(f"label name {name!r} may not contain a comma")

    offset = 0
    with open(out / "features.bin", "wb") as blob, open(
        out / "records", "w", encoding="utf-8"
    ) as records:
        for sample in dataset.samples:
            offsets = []
            for fmap in sample.features_by_stage:
                data = np.ascontiguousarray(fmap.patches, dtype=FEATURE_DTYPE)
                offsets.append(offset)
                blob.write(data.tobytes())
                offset += data.nbytes
            records.write(
                json.dumps(
                    {
                        "sample_id": sample.sample_id,
                        "labels": sample.label_indices(),
                        "offsets": offsets,
                    }
                )
                + "\n"
            )

    lines = [
        f"version: {MANIFEST_VERSION}",
        f"mode: {manifest.mode}",
        f"num_classes: {manifest.num_classes}",
        f"label_names: {','.join(manifest.label_names)}",
        f"stage_shapes: {_format_stage_shapes(manifest.stage_shapes)}",
        f"counts: {','.join(str(int(v)) for v in manifest.counts)}",
        f"num_samples: {len(dataset.samples)}",
    ]
    (out / "manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_manifest(path: Path) -> DatasetManifest:
    fields: dict[str, str] = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise DataError(f"manifest: malformed line {raw!r}")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    try:
        version = int(fields["version"])
        if version != MANIFEST_VERSION:
            raise DataError(f"manifest: unsupported version {version}")
        manifest = DatasetManifest(
            num_classes=int(fields["num_classes"]),
            label_names=fields["label_names"].split(","),
            stage_shapes=parse_stage_shapes(fields["stage_shapes"]),
            mode=fields["mode"],
            counts=np.array(
                [int(v) for v in fields["counts"].split(",")] if fields["counts"] else [],
                dtype=np.int64,
            ),
            num_samples=int(fields["num_samples"]),
        )
    except KeyError as exc:
        raise DataError(f"manifest: missing field {exc}") from exc
    except ValueError as exc:
        raise DataError(f"manifest: {exc}") from exc
    if manifest.num_samples == 0 and len(manifest.counts) == 0:
        manifest.counts = np.zeros(manifest.num_classes, dtype=np.int64)
    manifest.validate()
    return manifest


def load_dataset(
    path: str | Path,
) -> tuple[DatasetManifest, Iterator[MultiLabelSample]]:
    """Open a dataset directory; samples stream lazily.

    Per-sample invariants are checked as the stream is consumed, and the
    manifest's class counts are verified against a recount when the stream
    is exhausted.
    """
    root = Path(path)
    manifest = _read_manifest(root / "manifest")

    def stream() -> Iterator[MultiLabelSample]:
        tally = np.zeros(manifest.num_classes, dtype=np.int64)
        n_seen = 0
        blob = open(root / "features.bin", "rb")
        try:
            with open(root / "records", "r", encoding="utf-8") as records:
                for line_no, line in enumerate(records, start=1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        sample_id = rec["sample_id"]
                        label_idx = rec["labels"]
                        offsets = rec["offsets"]
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise DataError(f"records line {line_no}: {exc}") from exc
                    sample = _load_sample(manifest, blob, sample_id, label_idx, offsets)
                    tally += sample.labels.astype(np.int64)
                    n_seen += 1
                    yield sample
        finally:
            blob.close()
        if n_seen != manifest.num_samples:
            raise DataError(
                f"records hold {n_seen} samples, manifest says {manifest.num_samples}"
            )
        if not np.array_equal(tally, manifest.counts):
            raise DataError(
                f"manifest counts {manifest.counts.tolist()} do not match "
                f"recount {tally.tolist()}"
            )

    return manifest, stream()


def _load_sample(
    manifest: DatasetManifest, blob, sample_id: str, label_idx, offsets
) -> MultiLabelSample:
    if len(offsets) != len(manifest.stage_shapes):
        raise DataError(
            f"sample {sample_id}: {len(offsets)} offsets for "
            f"{len(manifest.stage_shapes)} stages"
        )
    labels = np.zeros(manifest.num_classes, dtype=np.int8)
    for idx in label_idx:
        if not 0 <= idx < manifest.num_classes:
            raise DataError(f"sample {sample_id}: label index {idx} out of range")
        labels[idx] = 1
    n_pos = int(labels.sum())
    if n_pos < 1:
        raise DataError(f"sample {sample_id}: no positive label")
    if manifest.mode == MODE_MULTI_CLASS and n_pos != 1:
        raise DataError(f"sample {sample_id}: {n_pos} labels in multi-class mode")

    stages = []
    for (h, w, d), offset in zip(manifest.stage_shapes, offsets):
        nbytes = h * w * d * FEATURE_DTYPE.itemsize
        blob.seek(offset)
        raw = blob.read(nbytes)
        if len(raw) != nbytes:
            raise DataError(
                f"sample {sample_id}: short read in features.bin "
                f"(wanted {nbytes} bytes at offset {offset})"
            )
        patches = np.frombuffer(raw, dtype=FEATURE_DTYPE).reshape(h * w, d).copy()
        fmap = PatchFeatureMap(patches, (h, w))
        fmap.validate(sample_id)
        stages.append(fmap)
    return MultiLabelSample(sample_id, stages, labels)


def read_dataset(path: str | Path) -> Dataset:
    """Eagerly load and fully validate a dataset directory."""
    manifest, stream = load_dataset(path)
    return Dataset(manifest, list(stream))


# ---------------------------------------------------------------------------
# Clue dictionary serialization (generator metadata, used by oracles/tests)
# ---------------------------------------------------------------------------


def save_clues(clues: ClueDictionary, path: str | Path) -> None:
    payload = {
        "required": [list(r) for r in clues.required],
        "match_radius": clues.match_radius,
        "vectors_by_stage": [v.tolist() for v in clues.vectors_by_stage],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_clues(path: str | Path) -> ClueDictionary:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return ClueDictionary(
        vectors_by_stage=[np.array(v, dtype=np.float64) for v in payload["vectors_by_stage"]],
        required=[tuple(r) for r in payload["required"]],
        match_radius=[float(r) for r in payload["match_radius"]],
    )
