"""Windowed trajectory VAE: strided conv encoder, transposed-conv decoder, ELBO.

Encoder layer enumeration (feature taps for style transfer use these indices)::

    0 conv1   1 bn1   2 act1
    3 conv2   4 bn2   5 act2
    6 conv3   7 bn3   8 act3
    9 flatten 10 linear -> (mu, log_var)

Windows are (N, N_S) arrays, time along rows; networks consume (B, N_S, N).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numkern import (AdamState, BatchNorm1d, Conv1d, ConvTranspose1d, Flatten, LeakyReLU, Linear,
                      NonFiniteError, Sequential, ShapeError, Unflatten, adam_step, conv_out_len, load_arrays,
                      save_arrays)

log = logging.getLogger(__name__)

STYLE_LAYERS = (2, 5, 7)
CONTENT_LAYERS = (5,)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class VaeArch:
    n_channels: int = 7
    window: int = 100
    latent_dim: int = 130
    channels: tuple = (128, 256, 512)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    slope: float = 0.2

    def lengths(self) -> list[int]:
        """Sequence lengths after each conv block, starting with the window."""
        ls = [self.window]
        for _ in self.channels:
            ls.append(conv_out_len(ls[-1], self.kernel, self.stride, self.padding))
        return ls


@dataclass
class VaeTrainConfig:
    lr: float = 1e-3
    batch: int = 128
    epochs: int = 50
    kl_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.epochs < 0:
            raise ValueError("lr and batch must be positive, epochs >= 0")


@dataclass
class LatentCode:
    mu: np.ndarray
    log_var: np.ndarray
    sample: np.ndarray
    eps: np.ndarray


def build_encoder(arch: VaeArch, rng: np.random.Generator) -> Sequential:
    c1, c2, c3 = arch.channels
    k, s, p, a = arch.kernel, arch.stride, arch.padding, arch.slope
    L3 = arch.lengths()[-1]
    return Sequential([
        Conv1d(arch.n_channels, c1, k, s, p, rng=rng, bias=False), BatchNorm1d(c1), LeakyReLU(a),
        Conv1d(c1, c2, k, s, p, rng=rng, bias=False), BatchNorm1d(c2), LeakyReLU(a),
        Conv1d(c2, c3, k, s, p, rng=rng, bias=False), BatchNorm1d(c3), LeakyReLU(a),
        Flatten(),
        Linear(c3 * L3, 2 * arch.latent_dim, rng=rng),
    ])


def build_decoder(arch: VaeArch, rng: np.random.Generator) -> Sequential:
    c1, c2, c3 = arch.channels
    k, s, p, a = arch.kernel, arch.stride, arch.padding, arch.slope
    L0, L1, L2, L3 = arch.lengths()

    def up(cin, cout, lin, lout, bias=False):
        op = lout - ((lin - 1) * s - 2 * p + k)
        return ConvTranspose1d(cin, cout, k, s, p, op, rng=rng, bias=bias)

    # layers feeding batch norm carry no bias: it would be cancelled exactly
    return Sequential([
        Linear(arch.latent_dim, c3 * L3, rng=rng), Unflatten(c3, L3), BatchNorm1d(c3), LeakyReLU(a),
        up(c3, c2, L3, L2), BatchNorm1d(c2), LeakyReLU(a),
        up(c2, c1, L2, L1), BatchNorm1d(c1), LeakyReLU(a),
        up(c1, arch.n_channels, L1, L0, bias=True),
    ])


def kl_divergence(mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)) per row."""
    return -0.5 * np.sum(1.0 + log_var - mu**2 - np.exp(log_var), axis=-1)


def elbo_loss(window: np.ndarray, enc_out: tuple[np.ndarray, np.ndarray], dec_out: np.ndarray,
              kl_weight: float = 1.0) -> tuple[float, float, float]:
    """Negated ELBO ``(total, recon, kl)`` summed over the given windows.

    ``recon`` is half the squared error (unit-variance Gaussian likelihood with
    constants dropped).
    """
    mu, log_var = enc_out
    recon = 0.5 * float(np.sum((np.asarray(dec_out) - np.asarray(window)) ** 2))
    kl = float(np.sum(kl_divergence(np.atleast_2d(mu), np.atleast_2d(log_var))))
    total = recon + kl_weight * kl
    if not np.isfinite(total):
        raise NonFiniteError("non-finite ELBO term")
    return total, recon, kl


def _to_net(windows: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(windows, dtype=np.float64).transpose(0, 2, 1))


class VAE:
    def __init__(self, arch: VaeArch | None = None, seed: int = 0):
        self.arch = arch or VaeArch()
        rng = np.random.default_rng(seed)
        self.encoder = build_encoder(self.arch, rng)
        self.decoder = build_decoder(self.arch, rng)

    # -- parameters ---------------------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.encoder.parameters("enc."), **self.decoder.parameters("dec.")}

    def gradients(self) -> dict[str, np.ndarray]:
        return {**self.encoder.gradients("enc."), **self.decoder.gradients("dec.")}

    def bind(self, params: dict[str, np.ndarray]) -> None:
        """Point layer parameters at the arrays in ``params`` (shared, not copied)."""
        for prefix, net in (("enc.", self.encoder), ("dec.", self.decoder)):
            for i, layer in enumerate(net.layers):
                for k in layer.params:
                    layer.params[k] = params[f"{prefix}{i}.{k}"]

    def state(self) -> dict[str, np.ndarray]:
        return {**self.encoder.state("enc."), **self.decoder.state("dec.")}

    def save(self, path) -> None:
        save_arrays(path, self.state())
        Path(str(path) + ".json").write_text(json.dumps(asdict(self.arch), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "VAE":
        arch_d = json.loads(Path(str(path) + ".json").read_text())
        arch_d["channels"] = tuple(arch_d["channels"])
        vae = cls(VaeArch(**arch_d))
        state = load_arrays(path)
        vae.encoder.load_state(state, "enc.")
        vae.decoder.load_state(state, "dec.")
        return vae

    # -- inference ----------------------------------------------------------
    def _check(self, windows: np.ndarray) -> np.ndarray:
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim == 2:
            w = w[None]
        if w.shape[1:] != (self.arch.window, self.arch.n_channels):
            raise ShapeError(f"expected windows of shape ({self.arch.window}, {self.arch.n_channels}), "
                             f"got {w.shape[1:]}")
        return w

    def encode_batch(self, windows: np.ndarray, train: bool = False) -> tuple[np.ndarray, np.ndarray]:
        h, _ = self.encoder.forward(_to_net(self._check(windows)), train=train)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError("non-finite encoder activation")
        L = self.arch.latent_dim
        return h[:, :L], h[:, L:]

    def encode(self, window: np.ndarray, eps: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> LatentCode:
        """Posterior parameters for one window plus a reparametrised sample."""
        mu, lv = self.encode_batch(window)
        mu, lv = mu[0], lv[0]
        if eps is None:
            eps = (rng if rng is not None else np.random.default_rng(0)).standard_normal(mu.shape)
        return LatentCode(mu, lv, mu + np.exp(0.5 * lv) * eps, np.asarray(eps, dtype=np.float64))

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z = np.atleast_2d(z)
        if z.shape[1] != self.arch.latent_dim:
            raise ShapeError(f"latent must have {self.arch.latent_dim} dims, got {z.shape[1]}")
        if not np.all(np.isfinite(z)):
            raise NonFiniteError("non-finite latent code")
        out, _ = self.decoder.forward(z, train=False)
        out = out.transpose(0, 2, 1)
        return out[0] if single else out

    def extract_features(self, window: np.ndarray, layer_indices) -> list[np.ndarray]:
        """(C_l, M_l) feature matrices for one window at each requested layer (eval mode)."""
        feats = self.features_batch(self._check(window), layer_indices)
        return [f[0] for f in feats]

    def features_batch(self, windows: np.ndarray, layer_indices) -> list[np.ndarray]:
        idx = list(layer_indices)
        if not idx:
            return []
        for i in idx:
            if not 0 <= i < len(self.encoder):
                raise IndexError(f"layer index {i} outside encoder enumeration 0..{len(self.encoder) - 1}")
        _, taps = self.encoder.forward(_to_net(windows), train=False, upto=max(idx), taps=idx)
        return [taps[i] for i in idx]

    # -- training -----------------------------------------------------------
    def loss_and_grads(self, windows: np.ndarray, eps: np.ndarray, kl_weight: float = 1.0,
                       train: bool = True) -> tuple[tuple[float, float, float], dict[str, np.ndarray]]:
        """Batch-mean negated ELBO and its gradient for fixed reparametrisation noise."""
        x = _to_net(windows)
        B = x.shape[0]
        L = self.arch.latent_dim
        h, _ = self.encoder.forward(x, train=train)
        mu, lv = h[:, :L], h[:, L:]
        std = np.exp(0.5 * lv)
        z = mu + std * eps
        xr, _ = self.decoder.forward(z, train=train)
        diff = xr - x
        recon = 0.5 * np.sum(diff**2) / B
        kl = float(np.sum(kl_divergence(mu, lv))) / B
        total = recon + kl_weight * kl
        gz = self.decoder.backward(diff / B)
        gmu = gz + kl_weight * mu / B
        glv = gz * 0.5 * std * eps + kl_weight * 0.5 * (np.exp(lv) - 1.0) / B
        self.encoder.backward(np.concatenate([gmu, glv], axis=1))
        return (float(total), float(recon), kl), self.gradients()


def train_vae(windows: np.ndarray, config: VaeTrainConfig, vae: VAE | None = None,
              arch: VaeArch | None = None, checkpoint: str | Path | None = None,
              progress=None) -> tuple[VAE, list[dict]]:
    """Mini-batch Adam on the negated ELBO; returns the model and per-epoch history."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.shape[0] == 0:
        raise ValueError("train_vae needs a nonempty window set")
    if vae is None:
        arch = arch or VaeArch(n_channels=windows.shape[2], window=windows.shape[1])
        vae = VAE(arch, seed=config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    params = vae.parameters()
    opt = AdamState(lr=config.lr)
    history = []
    K = windows.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(K)
        sums = np.zeros(3)
        for b, lo in enumerate(range(0, K, config.batch)):
            idx = order[lo:lo + config.batch]
            eps = rng.standard_normal((idx.size, vae.arch.latent_dim))
            (total, recon, kl), grads = vae.loss_and_grads(windows[idx], eps, config.kl_weight)
            if not np.isfinite(total):
                raise TrainingDiverged(f"loss is {total} at epoch {epoch} batch {b}")
            try:
                adam_step(params, grads, opt)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}") from None
            sums += np.array([recon, kl, total]) * idx.size
        rec = {"epoch": epoch, "recon": sums[0] / K, "kl": sums[1] / K, "total": sums[2] / K}
        history.append(rec)
        log.info("vae epoch %d recon %.4f kl %.4f total %.4f", epoch, rec["recon"], rec["kl"], rec["total"])
        if progress:
            progress(rec)
    if checkpoint is not None:
        vae.save(checkpoint)
        Path(str(checkpoint) + ".history.json").write_text(json.dumps(history, indent=1) + "\n")
    return vae, history


def reconstruction_rmse(vae: VAE, windows: np.ndarray) -> float:
    mu, _ = vae.encode_batch(windows)
    rec = vae.decode(mu)
    return float(np.sqrt(np.mean((rec - windows) ** 2)))
