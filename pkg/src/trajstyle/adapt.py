"""Window-conditioned policy network, expert distillation and behavioural cloning."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cutsim import N_A, Episode, SimConfig, episode_seeds, run_episode, scripted_expert, ExpertParams
from .evalstat import episode_metrics
from .numkern import (AdamState, BatchNorm1d, Conv1d, Flatten, LeakyReLU, Linear, Sequential,
                      ShapeError, Tanh, adam_step, conv_out_len, load_arrays, save_arrays)
from .trajdata import NormStats, history_window

log = logging.getLogger(__name__)


class BcDiverged(FloatingPointError):
    pass


@dataclass
class PolicyArch:
    n_channels: int = 7
    window: int = 100
    channels: tuple = (32, 64, 128)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    slope: float = 0.2
    n_actions: int = N_A

    def trunk_length(self) -> int:
        L = self.window
        for _ in self.channels:
            L = conv_out_len(L, self.kernel, self.stride, self.padding)
        return L


@dataclass
class BcConfig:
    lr: float = 1e-3
    batch: int = 128
    epochs: int = 20
    val_split: float = 0.2
    seed: int = 0
    freeze_bn: bool = True
    skip_below: float = 1e-20  # batch losses at round-off level carry no signal

    def __post_init__(self):
        if not (self.lr > 0 and self.batch > 0 and self.epochs >= 0):
            raise ValueError("lr and batch must be positive, epochs nonnegative")
        if not 0 < self.val_split < 1:
            raise ValueError("val_split must lie in (0, 1)")


def build_trunk(arch: PolicyArch, rng: np.random.Generator) -> Sequential:
    """conv/bn/act blocks (indices 0-8), flatten (9), linear (10), tanh (11)."""
    layers, cin = [], arch.n_channels
    for cout in arch.channels:
        layers += [Conv1d(cin, cout, arch.kernel, arch.stride, arch.padding, rng=rng, bias=False),
                   BatchNorm1d(cout), LeakyReLU(arch.slope)]
        cin = cout
    layers += [Flatten(), Linear(cin * arch.trunk_length(), arch.n_actions, rng=rng, slope=1.0), Tanh()]
    return Sequential(layers)


class PolicyNet:
    """Maps a raw observation window to a bounded physical action.

    Inputs are standardised with fixed statistics; the tanh output in
    [-1, 1] is mapped affinely onto the action box, so every output is a
    valid action.
    """

    def __init__(self, norm: NormStats, bounds, arch: PolicyArch | None = None, seed: int = 0):
        self.arch = arch or PolicyArch()
        self.norm = norm
        self.lo = np.asarray(bounds[0], dtype=np.float64)
        self.hi = np.asarray(bounds[1], dtype=np.float64)
        self.net = build_trunk(self.arch, np.random.default_rng(seed))
        self.window = self.arch.window

    # -- unit conversions ---------------------------------------------------
    def to_unit(self, actions: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(actions, dtype=np.float64) - self.lo) / (self.hi - self.lo) - 1.0

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return self.lo + 0.5 * (u + 1.0) * (self.hi - self.lo)

    # -- inference ----------------------------------------------------------
    def forward_unit(self, windows_norm: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(windows_norm, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.arch.window, self.arch.n_channels):
            raise ShapeError(f"policy expects windows ({self.arch.window}, {self.arch.n_channels}), got {x.shape[1:]}")
        out, _ = self.net.forward(np.ascontiguousarray(x.transpose(0, 2, 1)), train=train)
        return out

    def act_batch(self, windows_raw: np.ndarray) -> np.ndarray:
        return self.from_unit(self.forward_unit(self.norm.apply(np.asarray(windows_raw, dtype=np.float64))))

    def __call__(self, window_raw: np.ndarray) -> np.ndarray:
        return self.act_batch(window_raw[None])[0]

    # -- parameters / persistence -------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        return self.net.parameters("pi.")

    def gradients(self) -> dict[str, np.ndarray]:
        return self.net.gradients("pi.")

    def save(self, path) -> None:
        save_arrays(path, self.net.state("pi."))
        meta = {"arch": asdict(self.arch), "norm": self.norm.to_dict(),
                "bounds": [self.lo.tolist(), self.hi.tolist()]}
        Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PolicyNet":
        meta = json.loads(Path(str(path) + ".json").read_text())
        arch = meta["arch"]
        arch["channels"] = tuple(arch["channels"])
        pol = cls(NormStats.from_dict(meta["norm"]), meta["bounds"], PolicyArch(**arch))
        pol.net.load_state(load_arrays(path), "pi.")
        return pol


def clone_expert_policy(expert: PolicyNet, arch: PolicyArch | None = None) -> PolicyNet:
    """Independent copy with identical parameters and normalisation."""
    if arch is not None and asdict(arch) != asdict(expert.arch):
        raise ShapeError("cannot clone into a different architecture")
    return copy.deepcopy(expert)


# ---------------------------------------------------------------------------
# supervised training


def _loss_and_grads(policy: PolicyNet, x: np.ndarray, target_u: np.ndarray, train: bool):
    out = policy.forward_unit(x, train=train)
    diff = out - target_u
    loss = float(np.mean(diff * diff))
    policy.net.backward(2.0 * diff / diff.size)
    return loss, policy.gradients()


def bc_loss_and_grads(policy: PolicyNet, windows_norm: np.ndarray, labels: np.ndarray, train: bool = False):
    """Mean squared error in [-1, 1] action units and its parameter gradient."""
    return _loss_and_grads(policy, windows_norm, policy.to_unit(labels), train)


def _eval_loss(policy: PolicyNet, x: np.ndarray, target_u: np.ndarray, batch: int = 512) -> float:
    if len(x) == 0:
        return float("nan")
    sq = 0.0
    for lo in range(0, len(x), batch):
        d = policy.forward_unit(x[lo:lo + batch]) - target_u[lo:lo + batch]
        sq += float(np.sum(d * d))
    return sq / target_u.size


def train_bc(policy: PolicyNet, windows_norm: np.ndarray, labels: np.ndarray, cfg: BcConfig | None = None,
             progress=None) -> tuple[PolicyNet, list[dict]]:
    """Fit ``policy`` to (window, action) pairs by mini-batch Adam on the MSE.

    Batch-norm layers stay in eval mode when ``cfg.freeze_bn`` (fine-tuning
    from a trained net), so running statistics are not disturbed. Batches
    already fitted to round-off (loss below ``cfg.skip_below``) are not
    stepped: their gradients are pure rounding noise, which Adam would
    rescale into finite parameter moves.
    """
    cfg = cfg or BcConfig()
    x = np.asarray(windows_norm, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("train_bc needs a nonempty dataset")
    if len(x) != len(y):
        raise ValueError(f"{len(x)} windows but {len(y)} labels")
    if np.any(y < policy.lo - 1e-9) or np.any(y > policy.hi + 1e-9):
        raise ValueError("labels outside the action bounds")
    u = policy.to_unit(y)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    perm = rng.permutation(len(x))
    n_val = int(round(cfg.val_split * len(x))) if len(x) > 1 else 0
    val, tr = perm[:n_val], perm[n_val:]
    params = policy.parameters()
    opt = AdamState(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = tr[rng.permutation(tr.size)]
        sq, cnt = 0.0, 0
        for b, lo in enumerate(range(0, order.size, cfg.batch)):
            idx = np.sort(order[lo:lo + cfg.batch])
            train_mode = not cfg.freeze_bn and idx.size > 1
            loss, grads = _loss_and_grads(policy, x[idx], u[idx], train_mode)
            if not np.isfinite(loss):
                raise BcDiverged(f"BC loss is {loss} at epoch {epoch} batch {b}")
            if loss >= cfg.skip_below:
                try:
                    adam_step(params, grads, opt)
                except FloatingPointError as exc:
                    raise BcDiverged(f"epoch {epoch} batch {b}: {exc}") from None
            sq += loss * idx.size
            cnt += idx.size
        rec = {"epoch": epoch, "train": sq / max(cnt, 1),
               "val": _eval_loss(policy, x[val], u[val]) if n_val else float("nan")}
        history.append(rec)
        log.info("bc epoch %d train %.3e val %.3e", epoch, rec["train"], rec["val"])
        if progress:
            progress(rec)
    return policy, history


# ---------------------------------------------------------------------------
# expert distillation


@dataclass
class DistillConfig:
    episodes: int = 24
    dagger_rounds: int = 2
    dagger_episodes: int = 8
    epochs: int = 30
    dagger_epochs: int = 10
    lr: float = 1e-3
    batch: int = 128
    seed: int = 0
    expert: ExpertParams = field(default_factory=ExpertParams)


def expert_windows(ep: Episode, N: int) -> np.ndarray:
    """Zero-padded raw history window at every step of an episode."""
    s = ep.trajectory.states
    return np.stack([history_window(s, t, N) for t in range(len(s))]) if len(s) else np.zeros((0, N, s.shape[1]))


def distill_expert(cfg: SimConfig, norm: NormStats, dcfg: DistillConfig | None = None,
                   arch: PolicyArch | None = None, progress=None) -> tuple[PolicyNet, dict]:
    """Regress a PolicyNet onto the scripted expert, with DAgger relabelling rounds."""
    dcfg = dcfg or DistillConfig()
    arch = arch or PolicyArch(n_channels=len(norm.mean), window=cfg.window)
    bounds = cfg.action_bounds()
    policy = PolicyNet(norm, bounds, arch, seed=dcfg.seed)
    expert = lambda w: scripted_expert(w, dcfg.expert)  # noqa: E731
    seeds = episode_seeds(dcfg.seed + 7919, dcfg.episodes + dcfg.dagger_rounds * dcfg.dagger_episodes)
    X, Y = [], []
    for k in range(dcfg.episodes):
        ep = run_episode(cfg, expert, seed=seeds[k], episode_id=f"distill{k:03d}")
        X.append(expert_windows(ep, arch.window))
        Y.append(ep.trajectory.actions)
    info = {"rounds": []}
    base = BcConfig(lr=dcfg.lr, batch=dcfg.batch, epochs=dcfg.epochs, seed=dcfg.seed, freeze_bn=False,
                    val_split=0.1)
    for rnd in range(dcfg.dagger_rounds + 1):
        x = norm.apply(np.concatenate(X))
        y = np.concatenate(Y)
        bc = base if rnd == 0 else BcConfig(**{**asdict(base), "epochs": dcfg.dagger_epochs, "seed": dcfg.seed + rnd})
        policy, hist = train_bc(policy, x, y, bc, progress)
        info["rounds"].append({"round": rnd, "samples": int(len(x)), "final_train": hist[-1]["train"] if hist else None,
                               "final_val": hist[-1]["val"] if hist else None})
        if rnd == dcfg.dagger_rounds:
            break
        for k in range(dcfg.dagger_episodes):
            i = dcfg.episodes + rnd * dcfg.dagger_episodes + k
            ep = run_episode(cfg, policy, seed=seeds[i], episode_id=f"dagger{rnd}_{k:03d}")
            w = expert_windows(ep, arch.window)
            X.append(w)
            Y.append(np.stack([expert(wi) for wi in w]) if len(w) else np.zeros((0, N_A)))
    return policy, info


def distillation_error(policy: PolicyNet, cfg: SimConfig, n_episodes: int = 4, seed: int = 12345,
                       params: ExpertParams | None = None) -> float:
    """RMS gap (in [-1, 1] action units) between policy and scripted expert on held-out expert windows."""
    params = params or ExpertParams()
    errs = []
    for k, s in enumerate(episode_seeds(seed, n_episodes)):
        ep = run_episode(cfg, lambda w: scripted_expert(w, params), seed=s, episode_id=f"held{k}")
        w = expert_windows(ep, policy.window)
        pred = policy.to_unit(policy.act_batch(w))
        ref = policy.to_unit(ep.trajectory.actions)
        errs.append((pred - ref) ** 2)
    return float(np.sqrt(np.mean(np.concatenate(errs))))


# ---------------------------------------------------------------------------
# evaluation


def evaluate_policy(policy, cfg: SimConfig, n_episodes: int, seed: int, strategy: str = "policy",
                    references=(), seeds=None, keep_episodes: bool = False):
    """Roll out ``policy`` and compute metrics; faults are recorded, not raised."""
    seeds = list(seeds) if seeds is not None else episode_seeds(seed, n_episodes)
    rows, eps = [], []
    for k, s in enumerate(seeds[:n_episodes]):
        ep = run_episode(cfg, policy, seed=s, episode_id=f"{strategy}_{k:03d}")
        m = episode_metrics(ep.trajectory, ep.meta, references, cfg.action_bounds(), ep.blocks,
                            cfg.cutter.width * 1000.0)
        rows.append({"strategy": strategy, "material": cfg.material.name, "geometry": cfg.geometry.kind,
                     "completion_time": m.completion_time, "path_dev": m.avg_path_deviation,
                     "avg_force": m.avg_force, "mrv": m.mrv, "dtw": m.dtw_to_expert, "seed": int(s),
                     "fault": bool(ep.meta["fault"])})
        if keep_episodes:
            eps.append(ep)
    return (rows, eps) if keep_episodes else rows
