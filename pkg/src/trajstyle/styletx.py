"""Gram-matrix style transfer on normalised trajectory windows.

Windows are optimised directly: starting from the content window, Adam
descends ``w_c * content + w_s * style`` where both losses are computed on
frozen (eval-mode) encoder features.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numkern import AdamState, ShapeError, adam_step
from .trajdata import Window, align_mean_arrays
from .vae import CONTENT_LAYERS, STYLE_LAYERS, _to_net

log = logging.getLogger(__name__)


class TransferDiverged(FloatingPointError):
    pass


@dataclass
class TransferConfig:
    ratio: float = 0.02  # content weight relative to style weight
    style_weight: float = 1.0
    lr: float = 0.01
    iterations: int = 1000
    content_layers: tuple = CONTENT_LAYERS
    style_layers: tuple = STYLE_LAYERS
    early_stop: float | None = None  # relative change of the total loss
    chunk: int = 64
    log_history: bool = True

    def __post_init__(self):
        if not self.ratio > 0:
            raise ValueError("content/style ratio must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        self.content_layers = tuple(self.content_layers)
        self.style_layers = tuple(self.style_layers)

    @property
    def content_weight(self) -> float:
        return self.ratio * self.style_weight if self.style_weight > 0 else self.ratio


# ---------------------------------------------------------------------------
# losses on (C, M) or batched (B, C, M) feature arrays


def gram(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    return F @ np.swapaxes(F, -1, -2)


def _check_stacks(a, b):
    if len(a) != len(b):
        raise ShapeError(f"feature stacks have {len(a)} and {len(b)} layers")
    for x, y in zip(a, b):
        if np.shape(x) != np.shape(y):
            raise ShapeError(f"feature shapes differ: {np.shape(x)} vs {np.shape(y)}")


def content_loss(F_c, F_g) -> float | np.ndarray:
    """Sum over layers of squared feature differences / (2 * channels)."""
    _check_stacks(F_c, F_g)
    total = 0.0
    for c, g in zip(F_c, F_g):
        n = np.shape(c)[-2]
        total = total + np.sum((np.asarray(c) - np.asarray(g)) ** 2, axis=(-2, -1)) / (2.0 * n)
    return total


def style_loss(F_s, F_g) -> float | np.ndarray:
    """Sum over layers of squared Gram differences / (4 N^2 M^2)."""
    _check_stacks(F_s, F_g)
    total = 0.0
    for s, g in zip(F_s, F_g):
        n, m = np.shape(s)[-2:]
        total = total + np.sum((gram(s) - gram(g)) ** 2, axis=(-2, -1)) / (4.0 * n * n * m * m)
    return total


# ---------------------------------------------------------------------------
# objective


class TransferObjective:
    """Per-window losses and input gradients for a batch of generated windows."""

    def __init__(self, vae, content: np.ndarray, style: np.ndarray, cfg: TransferConfig):
        self.vae = vae
        self.cfg = cfg
        self.c_layers = list(cfg.content_layers)
        self.s_layers = list(cfg.style_layers)
        self.layers = sorted(set(self.c_layers) | set(self.s_layers))
        content = vae._check(content)
        style = vae._check(style)
        if content.shape != style.shape:
            raise ShapeError("content and style batches differ in shape")
        fc = self._features(content)
        fs = self._features(style)
        self.F_c = [fc[i] for i in self.c_layers]
        self.G_s = [gram(fs[i]) for i in self.s_layers]

    def _features(self, x):
        if not self.layers:
            return {}
        _, taps = self.vae.encoder.forward(_to_net(x), train=False, upto=max(self.layers), taps=self.layers)
        return taps

    def __call__(self, x: np.ndarray, weights: tuple[float, float] | None = None, grad: bool = True):
        """Return (total, content, style) per window and d total / d x."""
        w_c, w_s = weights if weights is not None else (self.cfg.content_weight, self.cfg.style_weight)
        feats = self._features(x)
        B = x.shape[0]
        lc = np.zeros(B)
        ls = np.zeros(B)
        tap_grads = {}
        for F_c, i in zip(self.F_c, self.c_layers):
            n = F_c.shape[1]
            d = feats[i] - F_c
            lc += np.sum(d * d, axis=(1, 2)) / (2.0 * n)
            tap_grads[i] = tap_grads.get(i, 0.0) + w_c * d / n
        for G_s, i in zip(self.G_s, self.s_layers):
            F = feats[i]
            n, m = F.shape[1:]
            dG = gram(F) - G_s
            ls += np.sum(dG * dG, axis=(1, 2)) / (4.0 * n * n * m * m)
            tap_grads[i] = tap_grads.get(i, 0.0) + w_s * (dG @ F) / (n * n * m * m)
        total = w_c * lc + w_s * ls
        if not grad:
            return total, lc, ls, None
        if not self.layers:
            return total, lc, ls, np.zeros_like(x)
        g = self.vae.encoder.backward(None, tap_grads=tap_grads, param_grads=False)
        return total, lc, ls, g.transpose(0, 2, 1)


@dataclass
class TransferHistory:
    total: np.ndarray  # (iterations + 1, B), weighted
    content: np.ndarray  # unweighted
    style: np.ndarray  # unweighted
    iterations: int = 0

    def final(self) -> dict:
        return {"total": self.total[-1], "content": self.content[-1], "style": self.style[-1]}


def transfer_batch(content: np.ndarray, style: np.ndarray, vae, cfg: TransferConfig | None = None,
                   ) -> tuple[np.ndarray, TransferHistory]:
    """Optimise generated windows for a batch of (content, style) pairs.

    Windows are independent: the encoder runs in eval mode and Adam acts
    elementwise, so batching only changes throughput.
    """
    cfg = cfg or TransferConfig()
    content = vae._check(content)
    obj = TransferObjective(vae, content, style, cfg)
    x = content.copy()
    params = {"x": x}
    opt = AdamState(lr=cfg.lr)
    totals, contents, styles = [], [], []
    prev = None
    it = 0
    for it in range(cfg.iterations + 1):
        total, lc, ls, g = obj(x, grad=it < cfg.iterations)
        if not (np.all(np.isfinite(total)) and (g is None or np.all(np.isfinite(g)))):
            raise TransferDiverged(f"non-finite transfer loss at iteration {it}")
        cur = float(np.sum(total))
        stop = g is None or (cfg.early_stop is not None and prev is not None
                             and abs(prev - cur) <= cfg.early_stop * abs(prev))
        if cfg.log_history or stop or it == 0:
            totals.append(total)
            contents.append(lc)
            styles.append(ls)
        if stop:
            break
        prev = cur
        adam_step(params, {"x": g}, opt)
    hist = TransferHistory(np.array(totals), np.array(contents), np.array(styles), it)
    return x, hist


def transfer(content: Window, style: Window, vae, cfg: TransferConfig | None = None
             ) -> tuple[Window, TransferHistory]:
    """Single-window transfer; ``style`` should already be mean-aligned to ``content``."""
    gen, hist = transfer_batch(content.data[None], style.data[None], vae, cfg)
    return Window(content.trajectory_id, content.start_index, gen[0], content.channel_means.copy()), hist


def transfer_chunked(content: np.ndarray, style: np.ndarray, vae, cfg: TransferConfig,
                     progress=None) -> tuple[np.ndarray, dict]:
    """Run ``transfer_batch`` over fixed-size chunks; returns windows and final losses."""
    out = np.empty_like(np.asarray(content, dtype=np.float64))
    finals = {k: np.empty(len(content)) for k in ("total", "content", "style", "style0", "content0")}
    for lo in range(0, len(content), cfg.chunk):
        hi = min(lo + cfg.chunk, len(content))
        gen, hist = transfer_batch(content[lo:hi], style[lo:hi], vae, cfg)
        out[lo:hi] = gen
        for k, v in hist.final().items():
            finals[k][lo:hi] = v
        finals["style0"][lo:hi] = hist.style[0]
        finals["content0"][lo:hi] = hist.content[0]
        if progress:
            progress(hi, len(content))
    return out, finals


# ---------------------------------------------------------------------------
# weight sweep

DEFAULT_RATIOS = (0.002, 0.005, 0.02, 0.1, 0.5)


def weight_sweep(content: np.ndarray, style: np.ndarray, vae, ratios=DEFAULT_RATIOS,
                 cfg: TransferConfig | None = None) -> list[dict]:
    """Final unweighted losses for each content/style ratio on one batch.

    ``mean_style`` is normalised by the initial style loss of each pair and
    ``mean_content`` by the largest raw content mean in the sweep; the raw
    batch means are kept alongside.
    """
    cfg = cfg or TransferConfig()
    content = np.asarray(content, dtype=np.float64)
    style, _ = align_mean_arrays(content, np.asarray(style, dtype=np.float64))
    rows = []
    for r in sorted(ratios):
        c = TransferConfig(**{**asdict(cfg), "ratio": float(r), "log_history": False})
        _, fin = transfer_chunked(content, style, vae, c)
        s0 = np.where(fin["style0"] > 0, fin["style0"], 1.0)
        rows.append({"ratio": float(r), "raw_content": float(np.mean(fin["content"])),
                     "raw_style": float(np.mean(fin["style"])),
                     "mean_style": float(np.mean(fin["style"] / s0))})
    cmax = max((row["raw_content"] for row in rows), default=0.0)
    for row in rows:
        row["mean_content"] = row["raw_content"] / cmax if cmax > 0 else 0.0
    return rows


def sweep_trend_ok(rows: list[dict]) -> bool:
    """Content loss nonincreasing and style loss nondecreasing in the ratio."""
    rows = sorted(rows, key=lambda r: r["ratio"])
    c = [r["raw_content"] for r in rows]
    s = [r["raw_style"] for r in rows]
    return all(b <= a for a, b in zip(c, c[1:])) and all(b >= a for a, b in zip(s, s[1:]))


def write_sweep_csv(rows: list[dict], path) -> None:
    keys = ["ratio", "mean_content", "mean_style", "raw_content", "raw_style"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(float(r[k])) for k in keys])


# ---------------------------------------------------------------------------
# adapted dataset


@dataclass
class AdaptedDataset:
    windows: np.ndarray  # (K, N, N_S) normalised
    labels: np.ndarray  # (K, N_A) physical actions
    provenance: list[dict] = field(default_factory=list)
    source: str = "off-policy"

    def __len__(self):
        return len(self.windows)

    def save(self, path) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        K, N, C = self.windows.shape if len(self.windows) else (0, 0, 0)
        with open(root / "windows.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["window", "t"] + [f"s{i}" for i in range(C)])
            for k in range(K):
                for t in range(N):
                    w.writerow([k, t] + [repr(float(v)) for v in self.windows[k, t]])
        with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            n_a = self.labels.shape[1] if self.labels.ndim == 2 else 0
            w.writerow(["window"] + [f"a{i}" for i in range(n_a)])
            for k in range(len(self.labels)):
                w.writerow([k] + [repr(float(v)) for v in self.labels[k]])
        meta = {"count": int(K), "window": int(N), "n_s": int(C), "source": self.source,
                "records": self.provenance}
        (root / "provenance.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "AdaptedDataset":
        root = Path(path)
        meta = json.loads((root / "provenance.json").read_text())
        K, N, C = meta["count"], meta["window"], meta["n_s"]
        raw = np.loadtxt(root / "windows.csv", delimiter=",", skiprows=1, ndmin=2)
        windows = raw[:, 2:].reshape(K, N, C) if K else np.zeros((0, N, C))
        lab = np.loadtxt(root / "labels.csv", delimiter=",", skiprows=1, ndmin=2)
        labels = lab[:, 1:] if K else np.zeros((0, 0))
        return cls(windows, labels, meta["records"], meta.get("source", "off-policy"))


def build_adapted_dataset(pairing, content: np.ndarray, content_refs, labels: np.ndarray,
                          style: np.ndarray, style_refs, vae, cfg: TransferConfig | None = None,
                          progress=None) -> AdaptedDataset:
    """Translate every content window towards its matched style window.

    ``labels[i]`` is the expert action taken at the final row of content
    window ``i``. With a zero style weight the optimiser cannot leave the
    content window, so the content windows are returned as they are.
    """
    cfg = cfg or TransferConfig()
    content = np.asarray(content, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    K = len(content)
    if len(labels) != K:
        raise ValueError(f"missing expert actions: {len(labels)} labels for {K} content windows")
    if len(pairing.matches) != K:
        raise ValueError("pairing does not cover the content set")
    matched = np.asarray(style)[pairing.matches]
    aligned, _ = align_mean_arrays(content, matched)
    if cfg.style_weight == 0:
        gen = content.copy()
        obj = TransferObjective(vae, content, aligned, cfg) if K else None
        if obj is not None:
            _, lc, ls, _ = obj(gen, grad=False)
        else:
            lc = ls = np.zeros(0)
        finals = {"content": lc, "style": ls, "total": cfg.content_weight * lc}
    else:
        gen, finals = transfer_chunked(content, aligned, vae, cfg, progress)
    prov = []
    for i in range(K):
        j = int(pairing.matches[i])
        prov.append({"index": i, "content_id": str(content_refs[i][0]), "content_start": int(content_refs[i][1]),
                     "style_idx": j, "style_id": str(style_refs[j][0]), "style_start": int(style_refs[j][1]),
                     "similarity": float(pairing.similarity[i]),
                     "content_loss": float(finals["content"][i]), "style_loss": float(finals["style"][i])})
    return AdaptedDataset(gen, labels.copy(), prov)
