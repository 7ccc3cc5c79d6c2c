"""Windowed sensor datasets: canonical storage, ingestion, splits, synthesis.

Canonical directory layout (all binary files little-endian, row-major)::

    meta.json     shape [N, C_in, 1, T], class/domain names, sampling rate,
                  provenance and any dataset-specific extras
    samples.bin   float32, N*C_in*T values
    labels.bin    uint32 class labels, N values
    domains.bin   uint32 domain labels, N values
"""

from __future__ import annotations

import enum
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

FORMAT = "ccil-windowed-v1"


class IngestError(ValueError):
    """Raw input could not be parsed; names the offending file (and line)."""

    def __init__(self, path, message: str, line: int | None = None):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


@dataclass
class WindowedDataset:
    samples: np.ndarray  # float32 [N, C_in, 1, T]
    class_labels: np.ndarray  # int64 [N]
    domain_labels: np.ndarray  # int64 [N]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        self.domain_labels = np.asarray(self.domain_labels, dtype=np.int64)
        self.meta.setdefault("class_names", [str(c) for c in range(int(self.class_labels.max(initial=-1)) + 1)])
        self.meta.setdefault("domain_names", [str(d) for d in range(int(self.domain_labels.max(initial=-1)) + 1)])
        self.validate()

    def validate(self) -> None:
        n = self.samples.shape[0]
        if self.samples.ndim != 4 or self.samples.shape[2] != 1:
            raise ValueError(f"samples must be [N, C_in, 1, T], got {self.samples.shape}")
        if self.class_labels.shape != (n,) or self.domain_labels.shape != (n,):
            raise ValueError("samples, class labels and domain labels disagree on N")
        nc, nd = self.num_classes, self.num_domains
        if n and (self.class_labels.min() < 0 or self.class_labels.max() >= nc):
            raise ValueError(f"class labels outside [0, {nc})")
        if n and (self.domain_labels.min() < 0 or self.domain_labels.max() >= nd):
            raise ValueError(f"domain labels outside [0, {nd})")
        empty = sorted(set(range(nd)) - set(np.unique(self.domain_labels).tolist()))
        if empty:
            raise ValueError(f"declared domains without samples: {empty}")

    @property
    def num_classes(self) -> int:
        return len(self.meta["class_names"])

    @property
    def num_domains(self) -> int:
        return len(self.meta["domain_names"])

    @property
    def name(self) -> str:
        return self.meta.get("name", "unnamed")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = dict(self.meta)
        meta["format"] = FORMAT
        meta["shape"] = list(self.samples.shape)
        (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        (out / "samples.bin").write_bytes(np.ascontiguousarray(self.samples, dtype="<f4").tobytes())
        (out / "labels.bin").write_bytes(self.class_labels.astype("<u4").tobytes())
        (out / "domains.bin").write_bytes(self.domain_labels.astype("<u4").tobytes())
        return out

    @classmethod
    def load(cls, path: str | Path) -> "WindowedDataset":
        path = Path(path)
        meta = json.loads((path / "meta.json").read_text())
        if meta.pop("format", None) != FORMAT:
            raise ValueError(f"{path}: not a canonical windowed dataset")
        shape = tuple(meta.pop("shape"))
        samples = np.fromfile(path / "samples.bin", dtype="<f4")
        if samples.size != math.prod(shape):
            raise ValueError(f"{path}/samples.bin holds {samples.size} values, meta says {shape}")
        labels = np.fromfile(path / "labels.bin", dtype="<u4").astype(np.int64)
        domains = np.fromfile(path / "domains.bin", dtype="<u4").astype(np.int64)
        return cls(samples.reshape(shape).astype(np.float32), labels, domains, meta)


# --------------------------------------------------------------------------
# windowing
# --------------------------------------------------------------------------


def window_stride(window: int, overlap: float) -> int:
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    return max(1, int(math.floor(window * (1.0 - overlap) + 0.5)))


def sliding_window(series: np.ndarray, window: int, overlap: float) -> np.ndarray:
    """Cut ``[C_in, L]`` into ``[K, C_in, 1, window]``; trailing partial windows are dropped.

    A recording shorter than one window yields zero windows and a warning.
    """
    series = np.asarray(series)
    if series.ndim != 2:
        raise ValueError(f"series must be [C_in, L], got {series.shape}")
    if window < 1:
        raise ValueError("window must be positive")
    stride = window_stride(window, overlap)
    c, length = series.shape
    if window > length:
        warnings.warn(f"recording of length {length} is shorter than window {window}; no windows produced")
        return np.zeros((0, c, 1, window), dtype=series.dtype)
    starts = np.arange(0, length - window + 1, stride)
    win = np.lib.stride_tricks.sliding_window_view(series, window, axis=1)[:, starts, :]
    return np.ascontiguousarray(win.transpose(1, 0, 2))[:, :, None, :]


class Recording(NamedTuple):
    series: np.ndarray  # [C_in, L]
    label: int
    subject: int
    rate: float


def windows_from_recordings(
    recordings: Iterable[Recording],
    window: int,
    overlap: float,
    meta: dict,
    domain_of=lambda rec: rec.subject,
) -> WindowedDataset:
    chunks, labels, domains = [], [], []
    for rec in recordings:
        w = sliding_window(rec.series, window, overlap)
        if not len(w):
            continue
        chunks.append(w.astype(np.float32))
        labels.append(np.full(len(w), rec.label))
        domains.append(np.full(len(w), domain_of(rec)))
    if not chunks:
        raise ValueError("no windows produced from the supplied recordings")
    meta = dict(meta, window=window, overlap=overlap)
    return WindowedDataset(np.concatenate(chunks), np.concatenate(labels), np.concatenate(domains), meta)


def decimate(series: np.ndarray, factor: int) -> np.ndarray:
    """Boxcar low-pass then keep one sample per block of ``factor``."""
    if factor < 1:
        raise ValueError("decimation factor must be >= 1")
    if factor == 1:
        return series
    c, length = series.shape
    keep = (length // factor) * factor
    return series[:, :keep].reshape(c, keep // factor, factor).mean(axis=2)


# --------------------------------------------------------------------------
# raw readers
# --------------------------------------------------------------------------


def _read_table(path: Path, ncols: int, delimiter: str | None) -> np.ndarray:
    """Numeric text table; on failure locate and report the first bad line."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            arr = np.loadtxt(path, delimiter=delimiter, ndmin=2)
        if arr.shape[1] == ncols and arr.size:
            return arr
    except ValueError:
        pass
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.strip().split(delimiter) if line.strip() else []
            if not parts:
                continue
            if len(parts) != ncols:
                raise IngestError(path, f"expected {ncols} columns, found {len(parts)}", lineno)
            try:
                [float(p) for p in parts]
            except ValueError as exc:
                raise IngestError(path, f"non-numeric value ({exc})", lineno) from None
    raise IngestError(path, "empty or unreadable table")


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise IngestError(path, f"missing {what} directory")
    return path


DSADS_ACTIVITIES = [
    "sitting", "standing", "lying_back", "lying_right", "ascending_stairs", "descending_stairs",
    "standing_elevator", "moving_elevator", "walking_parking_lot", "walking_treadmill_flat",
    "walking_treadmill_inclined", "running_treadmill", "stepper", "cross_trainer",
    "cycling_horizontal", "cycling_vertical", "rowing", "jumping", "basketball",
]  # fmt: skip
DSADS_POSITIONS = ["torso", "right_arm", "left_arm", "right_leg", "left_leg"]


def load_dsads_recordings(raw_dir: str | Path) -> list[Recording]:
    """``a01..a19/p1..p8/s01..s60.txt``, each 125 rows x 45 columns at 25 Hz.

    Segments of one (activity, subject) pair are concatenated in order.
    """
    root = Path(raw_dir)
    if (root / "data").is_dir():
        root = root / "data"
    _require_dir(root / "a01", "DSADS activity a01")
    recs = []
    for a in range(1, 20):
        act_dir = _require_dir(root / f"a{a:02d}", f"DSADS activity a{a:02d}")
        for p in range(1, 9):
            subj_dir = _require_dir(act_dir / f"p{p}", f"DSADS subject p{p}")
            segs = sorted(subj_dir.glob("s*.txt"))
            if not segs:
                raise IngestError(subj_dir, "no segment files")
            series = np.concatenate([_read_table(s, 45, ",") for s in segs], axis=0)
            recs.append(Recording(series.T, a - 1, p - 1, 25.0))
    return recs


USC_HAD_ACTIVITIES = [
    "walking_forward", "walking_left", "walking_right", "walking_upstairs", "walking_downstairs",
    "running_forward", "jumping", "sitting", "standing", "sleeping", "elevator_up", "elevator_down",
]  # fmt: skip


def load_usc_had_recordings(raw_dir: str | Path) -> list[Recording]:
    """``Subject1..Subject14/a{1..12}t{1..5}.mat`` with ``sensor_readings`` [L, 6] at 100 Hz."""
    from scipy.io import loadmat

    root = Path(raw_dir)
    recs = []
    for s in range(1, 15):
        sdir = _require_dir(root / f"Subject{s}", f"USC-HAD Subject{s}")
        for a in range(1, 13):
            for f in sorted(sdir.glob(f"a{a}t*.mat")):
                try:
                    readings = np.asarray(loadmat(f)["sensor_readings"], dtype=np.float64)
                except Exception as exc:  # scipy raises a zoo of types for bad files
                    raise IngestError(f, f"unreadable .mat file ({exc})") from None
                if readings.ndim != 2 or readings.shape[1] != 6:
                    raise IngestError(f, f"expected [L, 6] sensor_readings, got {readings.shape}")
                if not np.all(np.isfinite(readings)):
                    raise IngestError(f, "non-finite sensor readings")
                recs.append(Recording(readings.T, a - 1, s - 1, 100.0))
    return recs


PAMAP2_ACTIVITY_IDS = [1, 2, 3, 4, 5, 6, 7, 12, 13, 16, 17, 24]
PAMAP2_ACTIVITIES = [
    "lying", "sitting", "standing", "walking", "running", "cycling", "nordic_walking",
    "ascending_stairs", "descending_stairs", "vacuum_cleaning", "ironing", "rope_jumping",
]  # fmt: skip
# acc (+-16g), gyroscope, magnetometer for the hand, chest and ankle IMUs
PAMAP2_COLUMNS = [
    c for base in (3, 20, 37) for c in (*range(base + 1, base + 4), *range(base + 7, base + 10), *range(base + 10, base + 13))
]


def _read_pamap2_file(path: Path) -> np.ndarray:
    import pandas as pd

    try:
        df = pd.read_csv(path, sep=" ", header=None, dtype=np.float64, engine="c")
    except (ValueError, pd.errors.ParserError):
        df = None
    # short rows come back NaN-padded, so field counts are checked line by line
    if df is None or df.shape[1] != 54 or np.isnan(df.to_numpy()).any():
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if len(parts) != 54:
                    raise IngestError(path, f"expected 54 columns, found {len(parts)}", lineno)
                try:
                    [float(p) for p in parts]
                except ValueError as exc:
                    raise IngestError(path, f"non-numeric value ({exc})", lineno) from None
        if df is None or df.shape[1] != 54:
            raise IngestError(path, "unreadable table")
    return df.to_numpy()


def load_pamap2_recordings(raw_dir: str | Path) -> list[Recording]:
    """``Protocol/subject101.dat..subject109.dat``; 54 space-separated columns at 100 Hz.

    Transient rows (activity 0) are dropped, each contiguous activity run
    becomes one recording, and sensor dropouts (NaN) are linearly interpolated.
    """
    root = Path(raw_dir)
    if (root / "Protocol").is_dir():
        root = root / "Protocol"
    recs = []
    for s in range(9):
        f = root / f"subject10{s + 1}.dat"
        if not f.exists():
            raise IngestError(f, "missing subject file")
        table = _read_pamap2_file(f)
        act = table[:, 1]
        change = np.flatnonzero(np.diff(act) != 0) + 1
        for seg in np.split(np.arange(len(act)), change):
            aid = int(act[seg[0]])
            if aid not in PAMAP2_ACTIVITY_IDS:
                continue
            block = table[np.ix_(seg, PAMAP2_COLUMNS)].T
            block = _interpolate_nan(block)
            if block is None:
                continue
            recs.append(Recording(block, PAMAP2_ACTIVITY_IDS.index(aid), s, 100.0))
    return recs


def _interpolate_nan(block: np.ndarray) -> np.ndarray | None:
    out = block.copy()
    t = np.arange(block.shape[1])
    for ch in out:
        bad = ~np.isfinite(ch)
        if bad.all():
            return None
        if bad.any():
            ch[bad] = np.interp(t[bad], t[~bad], ch[~bad])
    return out


UCI_HAR_ACTIVITIES = ["walking", "walking_upstairs", "walking_downstairs", "sitting", "standing", "laying"]
UCI_HAR_SIGNALS = ["total_acc_x", "total_acc_y", "total_acc_z", "body_gyro_x", "body_gyro_y", "body_gyro_z"]


def load_uci_har_recordings(raw_dir: str | Path) -> list[Recording]:
    """Pre-windowed 128-sample segments at 50 Hz; each becomes its own recording."""
    root = Path(raw_dir)
    if (root / "UCI HAR Dataset").is_dir():
        root = root / "UCI HAR Dataset"
    recs = []
    for part in ("train", "test"):
        pdir = _require_dir(root / part, f"UCI-HAR {part}")
        subjects = _read_table(pdir / f"subject_{part}.txt", 1, None)[:, 0].astype(int)
        labels = _read_table(pdir / f"y_{part}.txt", 1, None)[:, 0].astype(int)
        sigs = np.stack(
            [_read_table(pdir / "Inertial Signals" / f"{sig}_{part}.txt", 128, None) for sig in UCI_HAR_SIGNALS],
            axis=1,
        )
        if not (len(subjects) == len(labels) == len(sigs)):
            raise IngestError(pdir, "signal, label and subject files disagree on row count")
        for x, y, s in zip(sigs, labels, subjects):
            recs.append(Recording(x, int(y) - 1, int(s) - 1, 50.0))
    return recs


def _meta(name, class_names, domain_names, rate, provenance, domain_kind, **extra) -> dict:
    return dict(
        name=name,
        class_names=list(class_names),
        domain_names=list(domain_names),
        sampling_rate=rate,
        provenance=provenance,
        domain_kind=domain_kind,
        **extra,
    )


def ingest_dsads(raw_dir, out_dir=None) -> WindowedDataset:
    """Cross-person layout: samples (45, 1, 125), one domain per subject."""
    recs = load_dsads_recordings(raw_dir)
    meta = _meta("dsads", DSADS_ACTIVITIES, [f"p{i}" for i in range(1, 9)], 25.0, f"DSADS raw: {raw_dir}", "subject")
    ds = windows_from_recordings(recs, 125, 0.5, meta)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


def ingest_dsads_position(raw_dir, out_dir=None) -> WindowedDataset:
    """Cross-position layout: each window split into five (9, 1, 125) samples, domain = body position."""
    base = ingest_dsads(raw_dir)
    n = len(base)
    samples = base.samples.reshape(n, 5, 9, 1, 125).transpose(1, 0, 2, 3, 4).reshape(5 * n, 9, 1, 125)
    meta = _meta("dsads_position", DSADS_ACTIVITIES, DSADS_POSITIONS, 25.0, f"DSADS raw: {raw_dir}", "position",
                 window=125, overlap=0.5)  # fmt: skip
    ds = WindowedDataset(samples, np.tile(base.class_labels, 5), np.repeat(np.arange(5), n), meta)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


def ingest_usc_had(raw_dir, out_dir=None) -> WindowedDataset:
    recs = load_usc_had_recordings(raw_dir)
    meta = _meta("usc_had", USC_HAD_ACTIVITIES, [f"Subject{i}" for i in range(1, 15)], 100.0,
                 f"USC-HAD raw: {raw_dir}", "subject")  # fmt: skip
    ds = windows_from_recordings(recs, 200, 0.5, meta)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


def ingest_pamap2(raw_dir, out_dir=None) -> WindowedDataset:
    recs = load_pamap2_recordings(raw_dir)
    meta = _meta("pamap2", PAMAP2_ACTIVITIES, [f"subject10{i}" for i in range(1, 10)], 100.0,
                 f"PAMAP2 raw: {raw_dir}", "subject")  # fmt: skip
    ds = windows_from_recordings(recs, 200, 0.5, meta)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


def ingest_uci_har(raw_dir, out_dir=None) -> WindowedDataset:
    recs = load_uci_har_recordings(raw_dir)
    meta = _meta("uci_har", UCI_HAR_ACTIVITIES, [f"subject{i}" for i in range(1, 31)], 50.0,
                 f"UCI-HAR raw: {raw_dir}", "subject")  # fmt: skip
    ds = windows_from_recordings(recs, 128, 0.5, meta)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


RECORDING_LOADERS = {
    "dsads": load_dsads_recordings,
    "usc_had": load_usc_had_recordings,
    "pamap2": load_pamap2_recordings,
    "uci_har": load_uci_har_recordings,
}


def load_cross_dataset_mapping(path: str | Path | None = None) -> dict:
    if path is None:
        text = resources.files("ccil").joinpath("cross_dataset_mapping.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def ingest_cross_dataset(raw_dirs: dict[str, str | Path], out_dir=None, mapping: dict | str | Path | None = None,
                         recordings: dict[str, list[Recording]] | None = None) -> WindowedDataset:  # fmt: skip
    """Merge datasets into one domain each, keeping the shared activities and channels.

    Every recording is decimated to the mapping's target rate before
    windowing. ``recordings`` may supply already-loaded recordings per dataset
    (used in place of reading ``raw_dirs``).
    """
    if not isinstance(mapping, dict):
        mapping = load_cross_dataset_mapping(mapping)
    activities = mapping["activities"]
    rate = float(mapping["target_rate"])
    names = [n for n in mapping["datasets"] if n in (recordings or raw_dirs)]
    if len(names) < 2:
        raise ValueError("cross-dataset merging needs at least two datasets")
    selected = []
    for d, name in enumerate(names):
        spec = mapping["datasets"][name]
        recs = recordings[name] if recordings and name in recordings else RECORDING_LOADERS[name](raw_dirs[name])
        local_to_shared = {int(v): activities.index(k) for k, v in spec["classes"].items()}
        for rec in recs:
            if rec.label not in local_to_shared:
                continue
            factor = rec.rate / rate
            if abs(factor - round(factor)) > 1e-9:
                raise ValueError(f"{name}: rate {rec.rate} Hz is not an integer multiple of {rate} Hz")
            series = decimate(rec.series[spec["channels"]], int(round(factor)))
            selected.append(Recording(series, local_to_shared[rec.label], d, rate))
    meta = _meta("cross_dataset", activities, names, rate, f"merged: {sorted(names)} mapping v{mapping['version']}",
                 "dataset", mapping_version=mapping["version"])  # fmt: skip
    ds = windows_from_recordings(selected, int(mapping["window"]), float(mapping["overlap"]), meta)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


INGESTORS = {
    "dsads": ingest_dsads,
    "dsads_position": ingest_dsads_position,
    "usc_had": ingest_usc_had,
    "pamap2": ingest_pamap2,
    "uci_har": ingest_uci_har,
}


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def fit_normalization(dataset: WindowedDataset, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over the given (source-train) samples, in float64."""
    if len(indices) == 0:
        raise ValueError("cannot fit normalization on an empty index list")
    x = dataset.samples[np.asarray(indices)].astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std < 1e-12] = 1.0
    return mean, std


def apply_normalization(samples: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return (x - mean[None, :, None, None]) / std[None, :, None, None]


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------


class Protocol(str, enum.Enum):
    CROSS_PERSON = "cross_person"
    CROSS_POSITION = "cross_position"
    CROSS_DATASET = "cross_dataset"
    ONE_TO_ANOTHER = "one_to_another"


# subject groups per dataset; subjects are 0-based
DOMAIN_GROUPS = {
    "dsads": [[0, 1], [2, 3], [4, 5], [6, 7]],
    # ID-order assignment: three groups of four plus a final pair
    "usc_had": [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11], [12, 13]],
    "pamap2": [[2, 3, 8], [1, 5], [0, 7], [4, 6]],
}
# (target, source): train on the second subject, test on the first
ONE_TO_ANOTHER_PAIRS = [(0, 1), (2, 3), (4, 5), (6, 7)]

_PROTOCOL_DOMAIN_KIND = {
    Protocol.CROSS_PERSON: ("subject",),
    Protocol.CROSS_POSITION: ("position",),
    Protocol.CROSS_DATASET: ("dataset",),
    Protocol.ONE_TO_ANOTHER: ("subject",),
}


@dataclass(frozen=True)
class SplitPlan:
    protocol: Protocol
    fold: int
    source_domains: tuple[int, ...]
    target_domains: tuple[int, ...]
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if set(self.source_domains) & set(self.target_domains):
            raise ValueError("target domains overlap source domains")
        if not self.source_domains:
            raise ValueError("a split needs at least one source domain")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocol"] = self.protocol.value
        d["source_domains"] = list(self.source_domains)
        d["target_domains"] = list(self.target_domains)
        return d


@dataclass
class Split:
    plan: SplitPlan
    train: np.ndarray
    val: np.ndarray
    target: np.ndarray


def domain_groups(dataset: WindowedDataset, protocol: Protocol | str) -> list[list[int]]:
    """Held-out units for a protocol, indexed by fold."""
    protocol = Protocol(protocol)
    kind = dataset.meta.get("domain_kind", "subject")
    if kind not in _PROTOCOL_DOMAIN_KIND[protocol] and kind != "synthetic":
        raise ValueError(f"protocol {protocol.value} does not apply to a dataset whose domains are {kind!r}")
    override = dataset.meta.get("domain_groups", {}).get(protocol.value)
    if override is not None:
        return [list(g) for g in override]
    if protocol is Protocol.ONE_TO_ANOTHER:
        return [[t, s] for t, s in ONE_TO_ANOTHER_PAIRS if max(t, s) < dataset.num_domains]
    if protocol is Protocol.CROSS_PERSON and dataset.name in DOMAIN_GROUPS:
        return DOMAIN_GROUPS[dataset.name]
    return [[d] for d in range(dataset.num_domains)]


def num_folds(dataset: WindowedDataset, protocol: Protocol | str) -> int:
    return len(domain_groups(dataset, protocol))


def make_split(
    dataset: WindowedDataset, protocol: Protocol | str, fold: int, seed: int = 0, val_fraction: float = 0.2
) -> Split:
    """Deterministic hold-out split with a seeded 8:2 train/validation cut of the sources."""
    protocol = Protocol(protocol)
    groups = domain_groups(dataset, protocol)
    if not 0 <= fold < len(groups):
        raise ValueError(f"fold {fold} out of range for {protocol.value} (0..{len(groups) - 1})")
    if protocol is Protocol.ONE_TO_ANOTHER:
        target, source = groups[fold]
        targets, sources = (target,), (source,)
    else:
        targets = tuple(sorted(groups[fold]))
        sources = tuple(sorted(d for i, g in enumerate(groups) if i != fold for d in g))
    plan = SplitPlan(protocol, fold, sources, targets, val_fraction, seed)
    src_idx = np.flatnonzero(np.isin(dataset.domain_labels, sources))
    tgt_idx = np.flatnonzero(np.isin(dataset.domain_labels, targets))
    if len(src_idx) < 2:
        raise ValueError("source domains hold fewer than two samples")
    perm = np.random.default_rng(seed).permutation(src_idx)
    n_val = min(len(perm) - 1, max(1, int(math.floor(val_fraction * len(perm) + 0.5))))
    return Split(plan, np.sort(perm[n_val:]), np.sort(perm[:n_val]), tgt_idx)


# --------------------------------------------------------------------------
# synthetic domain shift
# --------------------------------------------------------------------------

WAVEFORMS = ("sine", "square", "chirp", "ar", "sawtooth", "triangle")


@dataclass
class SynthSpec:
    n_classes: int = 6
    n_domains: int = 4
    n_channels: int = 3
    window_len: int = 50
    samples_per_class_per_domain: int = 40
    gain_range: tuple[float, float] = (0.6, 1.4)
    offset_range: tuple[float, float] = (-0.3, 0.3)
    phase_jitter: float = 1.0
    # per-domain, per-channel phase lag as a fraction of pi
    domain_phase: float = 0.25
    amplitude_range: tuple[float, float] = (0.2, 0.6)
    freq_range: tuple[float, float] = (0.8, 3.0)
    noise_sigma: float = 0.1
    sampling_rate: float = 25.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("gain_range", "offset_range", "amplitude_range", "freq_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("gain_range", "offset_range", "amplitude_range", "freq_range"):
            d[key] = list(d[key])
        return d


def _template(kind: str, t: np.ndarray, freq: float, phase: float, rng: np.random.Generator) -> np.ndarray:
    arg = 2 * np.pi * freq * t + phase
    if kind == "sine":
        return np.sin(arg)
    if kind == "square":
        return np.sign(np.sin(arg)) + (np.sin(arg) == 0)
    if kind == "chirp":
        return np.sin(2 * np.pi * freq * t * (0.5 + t / (2 * t[-1] + 1e-12)) + phase)
    if kind == "sawtooth":
        return 2 * ((arg / (2 * np.pi)) % 1.0) - 1
    if kind == "triangle":
        return 2 * np.abs(2 * ((arg / (2 * np.pi)) % 1.0) - 1) - 1
    if kind == "ar":
        out = np.empty_like(t)
        prev = np.sin(phase)
        eps = rng.normal(0.0, 0.45, size=t.size)
        for i in range(t.size):
            prev = 0.9 * prev + eps[i]
            out[i] = prev
        return out / 1.5
    raise ValueError(f"unknown waveform {kind!r}")


def synth_domain_shift(spec: SynthSpec | dict | None = None, seed: int | None = None) -> WindowedDataset:
    """Class-specific waveforms seen through per-domain channel gains, offsets, jitter and noise.

    Classes are told apart by waveform shape, frequency and per-channel
    amplitude profile; domains distort amplitudes and baselines, so a model
    fitted to some domains faces a real covariate shift on the others.
    """
    if spec is None:
        spec = SynthSpec()
    elif isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    if seed is not None:
        spec = SynthSpec.from_dict({**spec.to_dict(), "seed": seed})
    if spec.n_classes < 2 or spec.n_domains < 2:
        raise ValueError("synthetic data needs at least 2 classes and 2 domains")
    rng = np.random.default_rng(spec.seed)
    c, t_len = spec.n_channels, spec.window_len
    t = np.arange(t_len) / spec.sampling_rate

    kinds = [WAVEFORMS[k % len(WAVEFORMS)] for k in range(spec.n_classes)]
    freqs = rng.uniform(*spec.freq_range, size=spec.n_classes)
    profiles = rng.uniform(*spec.amplitude_range, size=(spec.n_classes, c))
    gains = rng.uniform(*spec.gain_range, size=(spec.n_domains, c))
    offsets = rng.uniform(*spec.offset_range, size=(spec.n_domains, c))
    lags = rng.uniform(-np.pi, np.pi, size=(spec.n_domains, c)) * spec.domain_phase

    n_each = spec.samples_per_class_per_domain
    samples, labels, domains = [], [], []
    for d in range(spec.n_domains):
        for k in range(spec.n_classes):
            for _ in range(n_each):
                phase = rng.uniform(-np.pi, np.pi) * spec.phase_jitter
                x = np.empty((c, t_len))
                for ch in range(c):
                    wave = _template(kinds[k], t, freqs[k], phase + 0.5 * ch + lags[d, ch], rng)
                    x[ch] = gains[d, ch] * profiles[k, ch] * wave + offsets[d, ch]
                x += rng.normal(0.0, spec.noise_sigma, size=x.shape)
                samples.append(x)
                labels.append(k)
                domains.append(d)
    meta = _meta(
        "synthetic",
        [f"{kinds[k]}_{k}" for k in range(spec.n_classes)],
        [f"domain{d}" for d in range(spec.n_domains)],
        spec.sampling_rate,
        f"synth_domain_shift seed={spec.seed}",
        "synthetic",
        synth_spec=spec.to_dict(),
    )
    arr = np.stack(samples)[:, :, None, :].astype(np.float32)
    return WindowedDataset(arr, np.array(labels), np.array(domains), meta)
