"""OpenHAR-style ingest, 10 Hz consolidation, label merging, windowing and splits.

Also hosts the synthetic multi-client generator used in place of the real
corpus.  Synthetic data goes through exactly the same record -> window path
as CSV input, so generated CSV files re-ingest to identical datasets.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedmtl.model import ACTIVITY, POSITION

log = logging.getLogger(__name__)

TASKS = (ACTIVITY, POSITION)
CSV_HEADER = ["user_id", "activity", "position", "timestamp_ms", "x", "y", "z"]
BIN_MS = 100


@dataclass(slots=True)
class SensorRecord:
    user_id: str
    activity: str | None
    position: str | None
    timestamp: int
    x: float
    y: float
    z: float

    def label(self, task: str) -> str | None:
        return self.activity if task == ACTIVITY else self.position


@dataclass
class LabelMap:
    """Per-task raw -> canonical label mapping.

    With ``passthrough`` unmapped labels are kept as they are; otherwise an
    unmapped label is an error.
    """

    activity: dict[str, str] = field(default_factory=dict)
    position: dict[str, str] = field(default_factory=dict)
    passthrough: bool = False

    def table(self, task: str) -> dict[str, str]:
        return self.activity if task == ACTIVITY else self.position

    def apply(self, task: str, raw: str | None) -> str | None:
        if raw is None:
            return None
        table = self.table(task)
        if raw in table:
            return table[raw]
        if self.passthrough or raw in table.values():
            return raw
        raise KeyError(raw)


WALKING_VARIANTS = ["Walking", "Walking inc. stairs", "Walking stairs up",
                    "Walking stairs down", "Walking at stairs"]
LEG_FOOT_VARIANTS = ["Foot", "Foot, left", "Foot, right", "Leg", "Leg, left", "Leg, right",
                     "Lower leg", "Shin", "Ankle", "Leg/Foot"]


def default_label_map() -> LabelMap:
    return LabelMap(
        activity={v: "Walking" for v in WALKING_VARIANTS},
        position={v: "Leg/Foot" for v in LEG_FOOT_VARIANTS},
        passthrough=True,
    )


@dataclass
class WindowedSample:
    window: np.ndarray  # (L, 3)
    labels: dict[str, int]
    client_id: str


@dataclass
class ClientDataset:
    client_id: str
    train: list[WindowedSample]
    test: list[WindowedSample]
    task_availability: dict[str, bool]

    @property
    def n_k(self) -> int:
        return len(self.train)

    def arrays(self, part: str = "train", tasks=TASKS) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        samples = self.train if part == "train" else self.test
        if not samples:
            return np.zeros((0, 0, 3)), {t: np.zeros(0, dtype=np.int64) for t in tasks}
        X = np.stack([s.window for s in samples])
        Y = {t: np.array([s.labels.get(t, -1) for s in samples], dtype=np.int64) for t in tasks}
        return X, Y

    def n_labelled(self, task: str, part: str = "test") -> int:
        samples = self.train if part == "train" else self.test
        return sum(1 for s in samples if task in s.labels)


# --- ingest -------------------------------------------------------------------

def _label_cell(text: str) -> str | None:
    text = text.strip()
    return text or None


def ingest_csv(path) -> list[SensorRecord]:
    """Parse a CSV in the ingest format.

    Records are grouped per user (first-appearance order), keeping file order
    within each user; use :func:`split_streams` to cut recordings.
    """
    path = Path(path)
    per_user: dict[str, list[SensorRecord]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise ValueError(f"{path}: header must be {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{line}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                ts = int(row[3])
                x, y, z = float(row[4]), float(row[5]), float(row[6])
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: malformed row ({exc})") from None
            if not all(math.isfinite(v) for v in (x, y, z)):
                raise ValueError(f"{path}:{line}: non-finite acceleration")
            rec = SensorRecord(row[0].strip(), _label_cell(row[1]), _label_cell(row[2]), ts, x, y, z)
            per_user.setdefault(rec.user_id, []).append(rec)
    return [r for recs in per_user.values() for r in recs]


def split_streams(records: list[SensorRecord]) -> list[list[SensorRecord]]:
    """Cut at user changes and at every backwards timestamp jump."""
    streams: list[list[SensorRecord]] = []
    cuts = 0
    for rec in records:
        if streams and streams[-1][-1].user_id == rec.user_id:
            if rec.timestamp < streams[-1][-1].timestamp:
                cuts += 1
                streams.append([rec])
            else:
                streams[-1].append(rec)
        else:
            streams.append([rec])
    if cuts:
        log.warning("split %d stream(s) at non-monotone timestamps", cuts)
    return streams


def write_csv(path, records: list[SensorRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.user_id, r.activity or "", r.position or "", r.timestamp,
                        repr(r.x), repr(r.y), repr(r.z)])


# --- resampling -----------------------------------------------------------------

def _mode(values):
    # Counter preserves first-seen order, so ties go to the earliest value
    return Counter(values).most_common(1)[0][0]


def resample_to_10hz(stream: list[SensorRecord], native_hz: float) -> list[list[SensorRecord]]:
    """Bin-mean downsampling into 100 ms bins anchored at the segment start.

    An empty bin ends the current segment; the next record starts a new one.
    Returns the list of contiguous 10 Hz segments.
    """
    if native_hz < 10:
        raise ValueError("upsampling unsupported")
    segments: list[list[SensorRecord]] = []
    current: list[SensorRecord] = []
    t0 = None
    bin_idx = -1
    bucket: list[SensorRecord] = []

    def flush():
        if not bucket:
            return
        ts = t0 + bin_idx * BIN_MS
        current.append(SensorRecord(
            bucket[0].user_id,
            _mode([r.activity for r in bucket]),
            _mode([r.position for r in bucket]),
            ts,
            float(np.mean([r.x for r in bucket])),
            float(np.mean([r.y for r in bucket])),
            float(np.mean([r.z for r in bucket])),
        ))

    for rec in stream:
        if t0 is None:
            t0, bin_idx, bucket = rec.timestamp, 0, [rec]
            continue
        idx = (rec.timestamp - t0) // BIN_MS
        if idx == bin_idx:
            bucket.append(rec)
        elif idx == bin_idx + 1:
            flush()
            bin_idx, bucket = idx, [rec]
        else:
            flush()
            segments.append(current)
            current = []
            t0, bin_idx, bucket = rec.timestamp, 0, [rec]
    flush()
    if current:
        segments.append(current)
    return segments


def merge_labels(records: list[SensorRecord], label_map: LabelMap) -> list[SensorRecord]:
    out = []
    unmapped: dict[str, set] = {ACTIVITY: set(), POSITION: set()}
    for r in records:
        labels = {}
        for task in TASKS:
            try:
                labels[task] = label_map.apply(task, r.label(task))
            except KeyError:
                unmapped[task].add(r.label(task))
        if any(unmapped.values()):
            continue
        out.append(SensorRecord(r.user_id, labels[ACTIVITY], labels[POSITION], r.timestamp, r.x, r.y, r.z))
    if any(unmapped.values()):
        detail = "; ".join(f"{t}: {sorted(v)}" for t, v in unmapped.items() if v)
        raise ValueError(f"labels without a mapping: {detail}")
    return out


# --- windowing ------------------------------------------------------------------

def window_count(T: int, L: int, S: int) -> int:
    return (T - L) // S + 1 if T >= L else 0


def _majority(labels: list, center):
    present = [v for v in labels if v is not None]
    if not present:
        return None
    counts = Counter(present)
    top = max(counts.values())
    tied = [v for v, c in counts.items() if c == top]
    if len(tied) == 1:
        return tied[0]
    return center if center in tied else sorted(tied)[0]


def window(stream: list[SensorRecord], L: int, S: int) -> list[tuple[np.ndarray, dict[str, str]]]:
    """Sliding windows of ``L`` samples with stride ``S``.

    Each window gets a per-task majority label (ties broken by the centre
    sample).  Tasks with no labelled sample in the window are omitted.
    """
    if L < 1 or S < 1:
        raise ValueError("window length and stride must be >= 1")
    n = window_count(len(stream), L, S)
    if n == 0:
        return []
    xyz = np.array([(r.x, r.y, r.z) for r in stream], dtype=np.float64)
    out = []
    for i in range(n):
        s = i * S
        chunk = stream[s:s + L]
        labels = {}
        for task in TASKS:
            lab = _majority([r.label(task) for r in chunk], chunk[L // 2].label(task))
            if lab is not None:
                labels[task] = lab
        out.append((xyz[s:s + L].copy(), labels))
    return out


def split_train_test(samples: list, ratio: float = 0.8, seed: int = 0, key=None):
    """Seeded shuffle split, stratified by ``key(sample)`` for strata of >= 5.

    Each large stratum sends ``ceil(ratio * m)`` samples to train; strata
    smaller than five are pooled and split the same way.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    if not samples:
        return [], []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    if key is None:
        groups = {None: list(order)}
    else:
        groups: dict = {}
        for i in order:
            groups.setdefault(key(samples[i]), []).append(i)
        small = [k for k, v in groups.items() if len(v) < 5]
        if small:
            pooled = [i for i in order if key(samples[i]) in small]
            for k in small:
                del groups[k]
            groups[("__pooled__",)] = pooled
    train_idx, test_idx = [], []
    for idx in groups.values():
        cut = math.ceil(ratio * len(idx))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    train_idx.sort()
    test_idx.sort()
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


def label_key(sample: WindowedSample):
    return tuple(sorted(sample.labels.items()))


# --- client datasets --------------------------------------------------------------

@dataclass
class DataConfig:
    window_length: int = 24
    stride: int = 12
    train_ratio: float = 0.8
    availability_threshold: int = 2
    native_hz: float = 10.0
    normalize: bool = True


def windows_from_records(records: list[SensorRecord], cfg: DataConfig, label_map: LabelMap | None):
    out = []
    for stream in split_streams(records):
        for seg in resample_to_10hz(stream, cfg.native_hz):
            if label_map is not None:
                seg = merge_labels(seg, label_map)
            out.extend(window(seg, cfg.window_length, cfg.stride))
    return out


def build_client_dataset(client_id: str, windows: list[tuple[np.ndarray, dict[str, str]]],
                         vocab: dict[str, list[str]], cfg: DataConfig, seed: int) -> ClientDataset:
    """Index labels, decide task availability, split and normalise."""
    index = {t: {lab: i for i, lab in enumerate(v)} for t, v in vocab.items()}
    samples = []
    for win, labels in windows:
        idx = {}
        for task, lab in labels.items():
            if task not in index:
                continue
            if lab not in index[task]:
                raise ValueError(f"client {client_id}: {task} label {lab!r} not in vocabulary")
            idx[task] = index[task][lab]
        samples.append(WindowedSample(win, idx, client_id))
    availability = {}
    for task in vocab:
        distinct = {s.labels[task] for s in samples if task in s.labels}
        availability[task] = len(distinct) >= cfg.availability_threshold
    kept = []
    for s in samples:
        labels = {t: v for t, v in s.labels.items() if availability[t]}
        if labels:
            kept.append(WindowedSample(s.window, labels, client_id))
    train, test = split_train_test(kept, cfg.train_ratio, seed, key=label_key)
    if cfg.normalize and train:
        stacked = np.concatenate([s.window for s in train])
        mu = stacked.mean(axis=0)
        sd = stacked.std(axis=0)
        sd[sd < 1e-12] = 1.0
        train = [WindowedSample((s.window - mu) / sd, s.labels, client_id) for s in train]
        test = [WindowedSample((s.window - mu) / sd, s.labels, client_id) for s in test]
    return ClientDataset(client_id, train, test, availability)


# --- synthetic corpus -------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Desk-scale stand-in for a heterogeneous multi-dataset corpus.

    Every client carries all activity classes.  The last ``position_clients``
    clients carry ``position_classes`` positions; the others wear the device in
    one fixed position, which leaves their position task unavailable.

    ``skew="disjoint"`` gives each client its own class -> signature
    assignment (a cyclic shift over a shared signature pool) such that no two
    clients share a signature for the same class.
    """

    num_clients: int = 4
    activity_classes: int = 3
    position_classes: int = 3
    position_clients: int = 1
    samples_per_class: int = 40
    noise: float = 0.5
    skew: str = "none"
    gap_ms: int = 1000

    def validate(self):
        if self.num_clients < 1 or self.samples_per_class < 1:
            raise ValueError("num_clients and samples_per_class must be positive")
        if self.activity_classes < 1 or self.position_classes < 1:
            raise ValueError("degenerate synthetic spec: zero classes")
        if not 0 <= self.position_clients <= self.num_clients:
            raise ValueError("position_clients out of range")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.skew not in ("none", "disjoint"):
            raise ValueError(f"unknown skew {self.skew!r}")

    def client_ids(self) -> list[str]:
        return [f"client{k}" for k in range(self.num_clients)]

    def vocab(self) -> dict[str, list[str]]:
        return {ACTIVITY: [f"A{c}" for c in range(self.activity_classes)],
                POSITION: [f"P{p}" for p in range(self.position_classes)]}

    def has_positions(self, k: int) -> bool:
        return k >= self.num_clients - self.position_clients


def activity_signature(sig: int, n_sig: int, L: int) -> np.ndarray:
    t = np.arange(L) / 10.0
    freq = 0.4 + 2.8 * sig / max(n_sig, 1)
    axes = [np.sin(2 * np.pi * freq * t + 2 * np.pi * (sig + 1) * (a + 1) / (n_sig + 2))
            for a in range(3)]
    return np.stack(axes, axis=1)


def position_offset(p: int, n_pos: int) -> np.ndarray:
    ang = np.pi * p / max(n_pos, 1)
    return 1.5 * np.array([np.cos(ang), np.sin(ang), np.cos(2 * ang)])


def synthetic_records(spec: SyntheticSpec, L: int, seed: int) -> dict[str, list[SensorRecord]]:
    """Per-client 10 Hz records; every window is its own gap-separated recording."""
    spec.validate()
    pool = max(spec.activity_classes, spec.num_clients) if spec.skew == "disjoint" else spec.activity_classes
    out = {}
    for k, cid in enumerate(spec.client_ids()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        recs: list[SensorRecord] = []
        t = 0
        for c in range(spec.activity_classes):
            sig = (c + k) % pool if spec.skew == "disjoint" else c
            base = activity_signature(sig, pool, L)
            for j in range(spec.samples_per_class):
                p = j % spec.position_classes if spec.has_positions(k) else 0
                sig_xyz = base + position_offset(p, spec.position_classes)
                if spec.noise > 0:
                    sig_xyz = sig_xyz + rng.normal(0.0, spec.noise, size=sig_xyz.shape)
                for i in range(L):
                    x, y, z = (float(v) for v in sig_xyz[i])
                    recs.append(SensorRecord(cid, f"A{c}", f"P{p}", t + i * BIN_MS, x, y, z))
                t += L * BIN_MS + spec.gap_ms
        out[cid] = recs
    return out


def generate_synthetic(spec: SyntheticSpec, cfg: DataConfig, seed: int) -> list[ClientDataset]:
    records = synthetic_records(spec, cfg.window_length, seed)
    vocab = spec.vocab()
    return [build_client_dataset(cid, windows_from_records(recs, cfg, None), vocab, cfg, seed)
            for cid, recs in records.items()]
