"""Pipeline stages. Each stage reads declared artifacts from a run directory and writes its own."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evalstat
from .adapt import (PolicyArch, PolicyNet, bc_loss_and_grads, clone_expert_policy, distill_expert,
                    distillation_error, evaluate_policy, train_bc)
from .config import RunConfig
from .cutsim import (SURROGATE_MATERIALS, ConstantPolicy, Geometry, RandomActionPolicy,
                     ScriptedExpert, SimConfig, episode_seeds, run_episode, target_config)
from .numkern import (BatchNorm1d, Conv1d, ConvTranspose1d, grad_check)
from .pairing import PairingResult, embed_dataset, export_embeddings, match
from .styletx import (AdaptedDataset, TransferConfig, TransferObjective, build_adapted_dataset, sweep_trend_ok,
                      weight_sweep, write_sweep_csv)
from .trajdata import DataError, NormStats, bulk_windows, compute_stats, load_dataset, normalize, save_dataset
from .vae import VAE, VaeArch, train_vae

log = logging.getLogger(__name__)

STREAM_SOURCE, STREAM_TARGET, STREAM_CONTENT, STREAM_EVAL = 1, 2, 3, 4
GEOMETRIES = ("flat", "offset", "curved")


class MissingArtifact(DataError):
    pass


class NumericalFailure(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# run-directory helpers


def _json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def require(run: Path, rel: str, producer: str) -> Path:
    p = run / rel
    if not p.exists():
        raise MissingArtifact(f"missing artifact {rel} in {run}; run `trajstyle {producer}` first")
    stamp = p / "stage.json" if p.is_dir() else p.parent / "stage.json"
    if stamp.exists():
        other = json.loads(stamp.read_text()).get("config_hash")
        current = _CURRENT_HASH.get(str(run))
        if current and other and other != current:
            log.warning("artifact %s was produced with config %s, current config is %s", rel, other, current)
    return p


_CURRENT_HASH: dict[str, str] = {}


def stamp(run: Path, rel: str, stage: str, rc: RunConfig, extra: dict | None = None) -> None:
    _json(run / rel / "stage.json", {"stage": stage, "config_hash": rc.hash(), "seed": rc.seed, **(extra or {})})


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run: Path, rc: RunConfig) -> dict:
    files = {}
    for p in sorted(run.rglob("*")):
        if p.is_file() and p.name not in ("MANIFEST.json", "runlog.json"):
            files[p.relative_to(run).as_posix()] = {"sha256": sha256(p), "bytes": p.stat().st_size}
    man = {"config_hash": rc.hash(), "seed": rc.seed, "profile": rc.profile, "files": files}
    _json(run / "MANIFEST.json", man)
    return man


def append_runlog(run: Path, entry: dict) -> None:
    path = run / "runlog.json"
    log_ = json.loads(path.read_text()) if path.exists() else []
    log_.append(entry)
    _json(path, log_)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def source_norm(run: Path):
    man = load_dataset(require(run, "source", "simulate"))
    if man.norm is None:
        raise DataError("source manifest has no normalisation statistics")
    return man


# ---------------------------------------------------------------------------
# data generation


def _source_job(args):
    rc_d, i, seed = args
    rc = RunConfig.from_dict(rc_d)
    cfg = replace(rc.sim, geometry=Geometry(GEOMETRIES[i % 3]), window=rc.data.window)
    frac = rc.data.expert_fraction
    if int((i + 1) * frac) > int(i * frac):
        policy = ScriptedExpert(rc.distill.expert)
    else:
        policy = RandomActionPolicy(cfg.action_bounds(), np.random.default_rng([seed, 1]))
    ep = run_episode(cfg, policy, seed=seed, episode_id=f"src{i:04d}", domain="source")
    return ep.trajectory, ep.meta


def _target_job(args):
    rc_d, i, seed = args
    rc = RunConfig.from_dict(rc_d)
    names = list(SURROGATE_MATERIALS)
    cfg = replace(target_config(rc.sim, rc.target), material=SURROGATE_MATERIALS[names[i % len(names)]],
                  geometry=Geometry(GEOMETRIES[(i // len(names)) % 3]), window=rc.data.window)
    policy = RandomActionPolicy(cfg.action_bounds(), np.random.default_rng([seed, 1]))
    ep = run_episode(cfg, policy, seed=seed, episode_id=f"tgt{i:04d}", domain="target")
    return ep.trajectory, ep.meta


def stage_simulate(rc: RunConfig, run: Path, count: int | None = None, jobs: int = 1) -> dict:
    n = rc.data.n_source if count is None else count
    seeds = episode_seeds(rc.seed, n, STREAM_SOURCE)
    out = _map(_source_job, [(rc.to_dict(), i, s) for i, s in enumerate(seeds)], jobs)
    trajs = [t for t, _ in out]
    norm = compute_stats(trajs) if trajs and sum(len(t) for t in trajs) else None
    save_dataset(run / "source", trajs, "source", rc.sim.obs_dt, 7, 5, norm)
    _json(run / "source" / "episodes.json", [m for _, m in out])
    stamp(run, "source", "simulate", rc, {"count": n})
    return {"trajectories": n, "faults": sum(m["fault"] for _, m in out)}


def stage_gen_target(rc: RunConfig, run: Path, count: int | None = None, jobs: int = 1) -> dict:
    n = rc.data.n_target if count is None else count
    seeds = episode_seeds(rc.seed, n, STREAM_TARGET)
    out = _map(_target_job, [(rc.to_dict(), i, s) for i, s in enumerate(seeds)], jobs)
    save_dataset(run / "target", [t for t, _ in out], "target", rc.sim.obs_dt, 7, 5)
    _json(run / "target" / "episodes.json", [m for _, m in out])
    stamp(run, "target", "gen-target", rc, {"count": n})
    return {"trajectories": n, "faults": sum(m["fault"] for _, m in out)}


# ---------------------------------------------------------------------------
# models


def stage_train_vae(rc: RunConfig, run: Path) -> dict:
    man = source_norm(run)
    trajs, _ = normalize(man.trajectories, man.norm)
    W, _ = bulk_windows(trajs, rc.data.window, rc.data.vae_stride)
    if len(W) == 0:
        raise DataError("no source windows: trajectories shorter than the window length")
    arch = replace(rc.vae_arch, n_channels=W.shape[2], window=W.shape[1])
    (run / "vae").mkdir(parents=True, exist_ok=True)
    vae, hist = train_vae(W, rc.vae, arch=arch, checkpoint=run / "vae" / "vae.ck")
    stamp(run, "vae", "train-vae", rc, {"windows": int(len(W))})
    return {"windows": int(len(W)), "final": hist[-1] if hist else None}


def content_windows(rc: RunConfig, run: Path):
    """Normalised content windows, refs and the expert action at each window's last row."""
    man = source_norm(run)
    content = load_dataset(require(run, "content", "distill"))
    trajs, _ = normalize(content.trajectories, man.norm)
    N = rc.data.window
    W, refs = bulk_windows(trajs, N, rc.content.stride)
    by_id = {t.id: t for t in content.trajectories}
    labels = np.array([by_id[tid].actions[s + N - 1] for tid, s in refs]).reshape(-1, 5)
    return W, refs, labels


def style_windows(rc: RunConfig, run: Path):
    man = source_norm(run)
    target = load_dataset(require(run, "target", "gen-target"))
    trajs, _ = normalize(target.trajectories, man.norm)
    return bulk_windows(trajs, rc.data.window, rc.data.target_stride)


def _content_cfg(rc: RunConfig, i: int) -> SimConfig:
    return replace(rc.sim, geometry=Geometry(GEOMETRIES[i % 3]), window=rc.data.window)


def stage_distill(rc: RunConfig, run: Path) -> dict:
    """Distil the scripted expert into a network and roll out the content episodes with it."""
    man = source_norm(run)
    cfg = replace(rc.sim, window=rc.data.window)
    arch = replace(rc.policy_arch, n_channels=len(man.norm.mean), window=rc.data.window)
    dcfg = replace(rc.distill, seed=rc.distill.seed + rc.seed)
    policy, info = distill_expert(cfg, man.norm, dcfg, arch)
    info["heldout_rms"] = distillation_error(policy, cfg, params=rc.distill.expert)
    (run / "expert").mkdir(parents=True, exist_ok=True)
    policy.save(run / "expert" / "policy.ck")
    stamp(run, "expert", "distill", rc, info)
    seeds = episode_seeds(rc.seed, rc.content.episodes, STREAM_CONTENT)
    eps = [run_episode(_content_cfg(rc, i), policy, seed=s, episode_id=f"content{i:03d}", domain="source")
           for i, s in enumerate(seeds)]
    save_dataset(run / "content", [e.trajectory for e in eps], "source", rc.sim.obs_dt, 7, 5)
    _json(run / "content" / "episodes.json", [e.meta for e in eps])
    stamp(run, "content", "distill", rc, {"episodes": len(eps)})
    return info


def _load_vae(run: Path) -> VAE:
    return VAE.load(require(run, "vae/vae.ck", "train-vae"))


def stage_pair(rc: RunConfig, run: Path) -> dict:
    vae = _load_vae(run)
    C, crefs, _ = content_windows(rc, run)
    S, srefs = style_windows(rc, run)
    ce = embed_dataset(C, vae, crefs, "source")
    se = embed_dataset(S, vae, srefs, "target")
    res = match(ce, se)
    out = run / "pairing"
    out.mkdir(parents=True, exist_ok=True)
    res.save(out / "pairing.json")
    export_embeddings(ce, se, res, out / "embeddings.csv")
    stamp(run, "pairing", "pair", rc, {"content": len(ce), "style": len(se)})
    return {"content": len(ce), "style": len(se), "coverage": res.coverage, "gini": res.gini}


def load_pairing(run: Path):
    d = json.loads(require(run, "pairing/pairing.json", "pair").read_text())
    matches = np.array([p["style_idx"] for p in d["pairs"]], dtype=np.int64)
    sim = np.array([p["similarity"] for p in d["pairs"]])
    return PairingResult(matches, sim, np.zeros(0, dtype=np.int64), d["coverage"], d["gini"])


def stage_transfer(rc: RunConfig, run: Path, progress=None) -> dict:
    vae = _load_vae(run)
    pairing = load_pairing(run)
    C, crefs, labels = content_windows(rc, run)
    S, srefs = style_windows(rc, run)
    if len(pairing.matches) != len(C):
        raise DataError("pairing does not match the content windows; rerun `trajstyle pair`")
    out = {}
    for name, cfg in (("style-transfer", rc.transfer), ("identity", replace(rc.transfer, style_weight=0.0))):
        ds = build_adapted_dataset(pairing, C, crefs, labels, S, srefs, vae, cfg, progress)
        ds.save(run / "transfer" / name)
        out[name] = {"windows": len(ds),
                     "mean_style_loss": float(np.mean([r["style_loss"] for r in ds.provenance])) if len(ds) else 0.0}
    stamp(run, "transfer", "transfer", rc, out)
    return out


def _load_expert(run: Path) -> PolicyNet:
    return PolicyNet.load(require(run, "expert/policy.ck", "distill"))


def stage_adapt(rc: RunConfig, run: Path, suffix: str = "") -> dict:
    expert = _load_expert(run)
    out_dir = run / f"policies{suffix}"
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for strategy, variant in (("bc-identity", "identity"), ("style-transfer", "style-transfer")):
        ds = AdaptedDataset.load(require(run, f"transfer/{variant}", "transfer"))
        policy = clone_expert_policy(expert)
        policy, hist = train_bc(policy, ds.windows, ds.labels, rc.bc)
        policy.save(out_dir / f"{strategy}.ck")
        _json(out_dir / f"{strategy}.history.json", hist)
        summary[strategy] = hist[-1] if hist else None
    stamp(run, f"policies{suffix}", "adapt", rc, {"bc_seed": rc.bc.seed})
    return summary


def eval_cells(rc: RunConfig) -> list[tuple[str, str, int]]:
    ev = rc.eval
    cells = [(g, m, r) for g in ev.geometries for m in ev.materials for r in range(ev.episodes_per_material)]
    seeds = episode_seeds(ev.seed, len(cells), STREAM_EVAL)
    return [(g, m, s) for (g, m, _), s in zip(cells, seeds)]


def stage_evaluate(rc: RunConfig, run: Path, suffix: str = "") -> dict:
    """Roll out every strategy in the target domain; strategies share the seed of each cell."""
    expert = _load_expert(run)
    content = load_dataset(require(run, "content", "distill"))
    refs = [t.actions for t in content.trajectories if len(t)]
    policies = {}
    for s in rc.eval.strategies:
        if s == "expert":
            policies[s] = expert
        elif s == "baseline":
            policies[s] = ConstantPolicy()
        elif s in ("bc-identity", "style-transfer"):
            policies[s] = PolicyNet.load(require(run, f"policies{suffix}/{s}.ck", "adapt"))
        else:
            raise ValueError(f"unknown strategy {s!r}")
    rows = []
    for geom, mat, seed in eval_cells(rc):
        cfg = replace(target_config(rc.sim, rc.target), material=SURROGATE_MATERIALS[mat],
                      geometry=Geometry(geom), window=rc.data.window)
        for s in rc.eval.strategies:
            rows += evaluate_policy(policies[s], cfg, 1, 0, s, refs, seeds=[seed])
    out = run / f"eval{suffix}"
    out.mkdir(parents=True, exist_ok=True)
    evalstat.write_metrics_csv(rows, out / "metrics.csv")
    stamp(run, f"eval{suffix}", "evaluate", rc, {"episodes": len(rows)})
    return {"episodes": len(rows)}


def stage_report(rc: RunConfig, run: Path, suffix: str = "") -> dict:
    rows = evalstat.read_metrics_csv(require(run, f"eval{suffix}/metrics.csv", "evaluate"))
    report = evalstat.build_report(rows)
    out = run / f"report{suffix}"
    evalstat.write_report(report, out)
    with open(out / "panels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "strategy", "geometry", "material", "value"])
        for col in ("completion_time", "path_dev", "avg_force", "mrv", "dtw"):
            for r in rows:
                w.writerow([col, r["strategy"], r["geometry"], r["material"], repr(float(r[col]))])
    stamp(run, f"report{suffix}", "report", rc)
    return {"strategies": report["strategies"]}


def stage_sweep(rc: RunConfig, run: Path) -> dict:
    vae = _load_vae(run)
    pairing = load_pairing(run)
    C, _, _ = content_windows(rc, run)
    S, _ = style_windows(rc, run)
    n = min(rc.sweep.pairs, len(C))
    idx = np.unique(np.linspace(0, len(C) - 1, n).round().astype(int))
    cfg = replace(rc.transfer, iterations=rc.sweep.iterations)
    rows = weight_sweep(C[idx], S[pairing.matches[idx]], vae, rc.sweep.ratios, cfg)
    out = run / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    ok = sweep_trend_ok(rows)
    stamp(run, "sweep", "sweep-weights", rc, {"pairs": int(len(idx)), "trend_ok": ok})
    return {"pairs": int(len(idx)), "trend_ok": ok, "rows": rows}


# ---------------------------------------------------------------------------
# gradient suite


def gradient_suite(trials: int = 20, seed: int = 0, tolerance: float = 1e-4) -> dict:
    """Finite-difference checks of every backward pass on small random instances.

    Each kind (conv, transposed conv, batch norm, ELBO, transfer objective,
    BC loss) is checked on ``trials`` seeded instances.
    """
    results = {k: [] for k in ("conv1d", "conv_transpose1d", "batchnorm", "elbo", "style_transfer", "bc_loss")}
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        # conv
        C, O, L = rng.integers(1, 4), rng.integers(1, 4), rng.integers(3, 8)
        k, s, p = rng.integers(1, 4), rng.integers(1, 3), rng.integers(0, 2)
        if (L + 2 * p - k) // s + 1 < 1:
            p = k
        layer = Conv1d(int(C), int(O), int(k), int(s), int(p), rng=rng)
        results["conv1d"].append(_layer_check(layer, rng.standard_normal((2, int(C), int(L))), rng))
        ct = ConvTranspose1d(int(C), int(O), 3, 2, 1, int(rng.integers(0, 2)), rng=rng)
        results["conv_transpose1d"].append(_layer_check(ct, rng.standard_normal((2, int(C), int(L))), rng))
        bn = BatchNorm1d(2)
        bn.params["gamma"] = rng.standard_normal(2)
        bn.params["beta"] = rng.standard_normal(2)
        results["batchnorm"].append(_layer_check(bn, rng.standard_normal((2, 2, 4)), rng, train=True))
        # ELBO
        arch = VaeArch(n_channels=3, window=16, latent_dim=4, channels=(4, 5, 6))
        vae = VAE(arch, seed=int(rng.integers(1 << 30)))
        x = rng.standard_normal((2, 16, 3))
        eps = rng.standard_normal((2, 4))
        def f_elbo(prm):
            (total, _, _), grads = vae.loss_and_grads(x, eps)
            return total, grads
        results["elbo"].append(grad_check(f_elbo, vae.parameters(), tolerance).max_rel_error)
        # style transfer objective w.r.t. the generated window
        c, st = rng.standard_normal((1, 16, 3)), rng.standard_normal((1, 16, 3))
        obj = TransferObjective(vae, c, st, TransferConfig(ratio=float(rng.uniform(0.01, 1.0)),
                                                            content_layers=(5,), style_layers=(2, 5, 7)))
        g0 = c + 0.3 * rng.standard_normal(c.shape)

        def f_st(prm):
            total, _, _, g = obj(prm["x"])
            return float(total.sum()), {"x": g}
        results["style_transfer"].append(grad_check(f_st, {"x": g0}, tolerance).max_rel_error)
        # BC loss
        parch = PolicyArch(n_channels=3, window=16, channels=(3, 4, 5))
        pol = PolicyNet(NormStats(np.zeros(3), np.ones(3)), (np.full(5, -1.0), np.full(5, 2.0)), parch,
                        seed=int(rng.integers(1 << 30)))
        xw = rng.standard_normal((3, 16, 3))
        y = rng.uniform(-1.0, 2.0, (3, 5))
        train = bool(t % 2)
        results["bc_loss"].append(grad_check(lambda prm: bc_loss_and_grads(pol, xw, y, train), pol.parameters(),
                                             tolerance).max_rel_error)
    summary = {k: {"trials": len(v), "max_rel_error": float(max(v)), "passed": bool(max(v) < tolerance)}
               for k, v in results.items()}
    summary["instances"] = sum(len(v) for v in results.values())
    summary["passed"] = all(v["passed"] for k, v in summary.items() if isinstance(v, dict))
    return summary


def _layer_check(layer, x, rng, train: bool = False) -> float:
    w = rng.standard_normal(layer.forward(x, train=train).shape)

    def f(prm):
        xx = prm["__x"]
        out = layer.forward(xx, train=train)
        gx = layer.backward(w)
        return float(np.sum(out * w)), {"__x": gx, **{k: layer.grads[k] for k in layer.params}}
    params = {"__x": x.copy(), **layer.params}
    return grad_check(f, params).max_rel_error


def stage_grad_check(rc: RunConfig, run: Path, trials: int = 20) -> dict:
    t0 = time.perf_counter()
    res = gradient_suite(trials, rc.seed)
    res_file = {k: v for k, v in res.items()}
    _json(run / "gradcheck" / "report.json", res_file)
    log.info("gradient suite: %d instances in %.1f s", res["instances"], time.perf_counter() - t0)
    if not res["passed"]:
        raise NumericalFailure("gradient check failed: " + ", ".join(
            k for k, v in res.items() if isinstance(v, dict) and not v["passed"]))
    return res
