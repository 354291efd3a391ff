"""Trajectories, windows, normalisation statistics and CSV/JSON persistence."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DOMAINS = ("source", "target")


class DataError(ValueError):
    """Malformed or inconsistent trajectory data."""


class EmptyWindowError(DataError):
    pass


@dataclass
class Trajectory:
    id: str
    dt: float
    states: np.ndarray
    actions: np.ndarray
    domain_tag: str = "source"

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise DataError(f"trajectory {self.id}: states/actions must be 2-D")
        if self.states.shape[0] != self.actions.shape[0]:
            raise DataError(f"trajectory {self.id}: {self.states.shape[0]} state rows "
                            f"vs {self.actions.shape[0]} action rows")
        if not self.dt > 0:
            raise DataError(f"trajectory {self.id}: dt must be positive")
        if self.domain_tag not in DOMAINS:
            raise DataError(f"trajectory {self.id}: unknown domain {self.domain_tag!r}")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.actions))):
            raise DataError(f"trajectory {self.id}: non-finite entries")

    def __len__(self):
        return self.states.shape[0]

    @property
    def n_s(self) -> int:
        return self.states.shape[1]

    @property
    def n_a(self) -> int:
        return self.actions.shape[1]


@dataclass
class Window:
    trajectory_id: str
    start_index: int
    data: np.ndarray
    channel_means: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.channel_means is None:
            self.channel_means = np.zeros(self.data.shape[1])

    @property
    def end_index(self) -> int:
        """Index of the last trajectory row covered by the window."""
        return self.start_index + self.data.shape[0] - 1


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    flagged: list[int] = field(default_factory=list)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "flagged": list(self.flagged)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float),
                   list(d.get("flagged", [])))


@dataclass
class DatasetManifest:
    domain: str
    n_s: int
    n_a: int
    dt: float
    files: list[str]
    norm: NormStats | None = None
    trajectories: list[Trajectory] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"domain": self.domain, "n_s": self.n_s, "n_a": self.n_a, "dt": self.dt,
                "files": list(self.files), "norm": self.norm.to_dict() if self.norm else None}


# ---------------------------------------------------------------------------
# windowing


def make_windows(traj: Trajectory, N: int, stride: int = 1) -> list[Window]:
    """Overlapping length-``N`` windows; window i covers rows [i*stride, i*stride + N)."""
    if stride < 1 or N < 1:
        raise ValueError("N and stride must be >= 1")
    T = len(traj)
    if N > T:
        raise EmptyWindowError(f"trajectory {traj.id}: window length {N} exceeds length {T}")
    return [Window(traj.id, s, traj.states[s:s + N].copy()) for s in range(0, T - N + 1, stride)]


def window_array(traj: Trajectory, N: int, stride: int = 1) -> np.ndarray:
    """Same windows as ``make_windows`` stacked into (K, N, N_S) without copies."""
    T = len(traj)
    if N > T:
        raise EmptyWindowError(f"trajectory {traj.id}: window length {N} exceeds length {T}")
    view = np.lib.stride_tricks.sliding_window_view(traj.states, N, axis=0)  # K, N_S, N
    return view[::stride].transpose(0, 2, 1)


def history_window(states: np.ndarray, t: int, N: int) -> np.ndarray:
    """Most recent ``N`` rows ending at row ``t``, zero-padded before the start."""
    lo = t - N + 1
    if lo >= 0:
        return states[lo:t + 1]
    out = np.zeros((N, states.shape[1]))
    out[-lo:] = states[:t + 1]
    return out


def bulk_windows(trajs: Iterable[Trajectory], N: int, stride: int = 1) -> tuple[np.ndarray, list[tuple[str, int]]]:
    """Window a collection, skipping short trajectories; ordered by (id, start)."""
    arrays, refs = [], []
    for tr in sorted(trajs, key=lambda t: t.id):
        if len(tr) < N:
            log.warning("skipping trajectory %s: length %d < window %d", tr.id, len(tr), N)
            continue
        w = window_array(tr, N, stride)
        arrays.append(w)
        refs.extend((tr.id, int(s)) for s in range(0, len(tr) - N + 1, stride))
    if not arrays:
        return np.zeros((0, N, 0)), refs
    return np.concatenate(arrays, axis=0), refs


# ---------------------------------------------------------------------------
# normalisation


def compute_stats(trajs: Sequence[Trajectory]) -> NormStats:
    if not trajs:
        raise DataError("cannot normalise an empty dataset")
    x = np.concatenate([t.states for t in trajs], axis=0)
    if x.shape[0] == 0:
        raise DataError("cannot normalise a dataset with no samples")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flagged = [int(i) for i in np.flatnonzero(~(std > 0))]
    for i in flagged:
        log.warning("channel %d has zero variance; std set to 1", i)
    std = np.where(std > 0, std, 1.0)
    return NormStats(mean, std, flagged)


def normalize(trajs: Sequence[Trajectory], stats: NormStats | None = None) -> tuple[list[Trajectory], NormStats]:
    """Per-channel standardisation; pass ``stats`` to reuse source statistics."""
    stats = stats if stats is not None else compute_stats(trajs)
    out = [Trajectory(t.id, t.dt, stats.apply(t.states), t.actions.copy(), t.domain_tag) for t in trajs]
    return out, stats


def denormalize(trajs: Sequence[Trajectory], stats: NormStats) -> list[Trajectory]:
    return [Trajectory(t.id, t.dt, stats.invert(t.states), t.actions.copy(), t.domain_tag) for t in trajs]


def align_mean(content: Window, style: Window) -> Window:
    """Shift ``style`` per channel so its means match ``content``'s."""
    if content.data.shape != style.data.shape:
        raise DataError(f"align_mean shape mismatch: {content.data.shape} vs {style.data.shape}")
    data, means = align_mean_arrays(content.data, style.data)
    return Window(style.trajectory_id, style.start_index, data, means)


def align_mean_arrays(content: np.ndarray, style: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Array form of ``align_mean``; works on (N, C) or batched (B, N, C)."""
    if content.shape != style.shape:
        raise DataError(f"align_mean shape mismatch: {content.shape} vs {style.shape}")
    s_mean = style.mean(axis=-2, keepdims=True)
    c_mean = content.mean(axis=-2, keepdims=True)
    return style - s_mean + c_mean, np.squeeze(s_mean, axis=-2)


# ---------------------------------------------------------------------------
# persistence


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trajectory_csv(path: Path, traj: Trajectory) -> None:
    header = ["t"] + [f"s{i}" for i in range(traj.n_s)] + [f"a{i}" for i in range(traj.n_a)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(len(traj)):
            w.writerow([str(t)] + [_fmt(v) for v in traj.states[t]] + [_fmt(v) for v in traj.actions[t]])


def read_trajectory_csv(path: Path, n_s: int, n_a: int, dt: float, domain: str) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing trajectory file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    expected = ["t"] + [f"s{i}" for i in range(n_s)] + [f"a{i}" for i in range(n_a)]
    if rows[0] != expected:
        raise DataError(f"{path}: malformed header, expected {len(expected)} columns "
                        f"{expected[:3]}..., got {len(rows[0])}")
    data = np.empty((len(rows) - 1, n_s + n_a))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(expected):
            raise DataError(f"{path}: row {r} has {len(row)} columns, expected {len(expected)}")
        for c, cell in enumerate(row[1:], start=2):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r} column {c}: cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {r} column {c}: non-finite value {cell!r}")
            data[r - 2, c - 2] = v
    return Trajectory(path.stem, dt, data[:, :n_s], data[:, n_s:], domain)


def save_dataset(path, trajs: Sequence[Trajectory], domain: str, dt: float | None = None,
                 n_s: int | None = None, n_a: int | None = None,
                 norm: NormStats | None = None) -> DatasetManifest:
    """Write one CSV per trajectory plus ``manifest.json`` into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    trajs = sorted(trajs, key=lambda t: t.id)
    if trajs:
        dt = trajs[0].dt if dt is None else dt
        n_s = trajs[0].n_s if n_s is None else n_s
        n_a = trajs[0].n_a if n_a is None else n_a
    files = []
    for tr in trajs:
        if tr.n_s != n_s or tr.n_a != n_a:
            raise DataError(f"trajectory {tr.id}: channel counts differ from dataset")
        name = f"{tr.id}.csv"
        write_trajectory_csv(root / name, tr)
        files.append(name)
    manifest = DatasetManifest(domain, int(n_s or 0), int(n_a or 0), float(dt or 0.0), files, norm, list(trajs))
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(path) -> DatasetManifest:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"missing manifest {mpath}")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: {exc}") from None
    for key in ("domain", "n_s", "n_a", "dt", "files"):
        if key not in m:
            raise DataError(f"{mpath}: missing field {key!r}")
    trajs = [read_trajectory_csv(root / f, m["n_s"], m["n_a"], m["dt"], m["domain"]) for f in m["files"]]
    norm = NormStats.from_dict(m["norm"]) if m.get("norm") else None
    return DatasetManifest(m["domain"], m["n_s"], m["n_a"], m["dt"], list(m["files"]), norm, trajs)
