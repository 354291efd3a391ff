"""Latent-space matching of content windows to style windows by cosine similarity."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkern import ShapeError


class ZeroNormError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    domain_tag: str
    refs: list  # (trajectory_id, start_index) per row
    embeddings: np.ndarray
    norms: np.ndarray = field(init=False)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ShapeError("embeddings must be a 2-D matrix")
        if len(self.refs) != self.embeddings.shape[0]:
            raise ShapeError(f"{len(self.refs)} refs for {self.embeddings.shape[0]} embedding rows")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("non-finite embedding")
        self.norms = np.linalg.norm(self.embeddings, axis=1)

    def __len__(self):
        return self.embeddings.shape[0]


@dataclass
class PairingResult:
    matches: np.ndarray  # style index per content row
    similarity: np.ndarray  # best similarity per content row
    counts: np.ndarray  # times each style window was matched
    coverage: float
    gini: float

    def histogram(self) -> dict[int, int]:
        """Number of style windows matched exactly k times, for each k."""
        ks, n = np.unique(self.counts, return_counts=True)
        return {int(k): int(c) for k, c in zip(ks, n)}

    def to_dict(self) -> dict:
        return {
            "pairs": [{"content_idx": i, "style_idx": int(j), "similarity": float(s)}
                      for i, (j, s) in enumerate(zip(self.matches, self.similarity))],
            "coverage": self.coverage,
            "gini": self.gini,
            "match_histogram": {str(k): v for k, v in self.histogram().items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def embed_dataset(windows: np.ndarray, vae, refs=None, domain_tag: str = "source",
                  batch: int = 256) -> EmbeddingSet:
    """Posterior means of every window, computed in fixed-size batches."""
    windows = np.asarray(windows, dtype=np.float64)
    L = vae.arch.latent_dim
    refs = list(refs) if refs is not None else [("", i) for i in range(len(windows))]
    if len(windows) == 0:
        return EmbeddingSet(domain_tag, refs, np.zeros((0, L)))
    if windows.ndim != 3:
        raise ShapeError("windows must be (K, N, N_S)")
    mus = []
    for lo in range(0, len(windows), batch):
        chunk = windows[lo:lo + batch]
        n = len(chunk)
        if n < batch:  # fixed chunk shape keeps each row's arithmetic independent of where it falls
            chunk = np.concatenate([chunk, np.zeros((batch - n,) + chunk.shape[1:])])
        mus.append(vae.encode_batch(chunk)[0][:n])
    return EmbeddingSet(domain_tag, refs, np.concatenate(mus, axis=0))


def _check_norms(s: EmbeddingSet, what: str) -> None:
    bad = np.flatnonzero(s.norms == 0)
    if bad.size:
        i = int(bad[0])
        raise ZeroNormError(f"{what} embedding {i} (window {s.refs[i]}) has zero norm")


def similarity_matrix(content: EmbeddingSet, style: EmbeddingSet) -> np.ndarray:
    """Cosine similarity between every content row and every style row."""
    if content.embeddings.shape[1] != style.embeddings.shape[1]:
        raise ShapeError("content and style embeddings differ in dimension")
    _check_norms(content, "content")
    _check_norms(style, "style")
    S = (content.embeddings @ style.embeddings.T) / np.outer(content.norms, style.norms)
    return np.clip(S, -1.0, 1.0)


def gini(counts) -> float:
    """Gini coefficient of a nonnegative count vector (0 = evenly spread)."""
    x = np.sort(np.asarray(counts, dtype=np.float64))
    n = x.size
    if n == 0 or x.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float((2.0 * np.sum(ranks * x) / (n * x.sum())) - (n + 1.0) / n)


def match(content: EmbeddingSet, style: EmbeddingSet) -> PairingResult:
    """Best style window per content window; ties go to the lowest style index."""
    if len(content) == 0 or len(style) == 0:
        raise ValueError("match needs nonempty content and style sets")
    S = similarity_matrix(content, style)
    j = np.argmax(S, axis=1)  # argmax returns the first maximum
    sim = S[np.arange(S.shape[0]), j]
    counts = np.bincount(j, minlength=len(style))
    return PairingResult(j, sim, counts, float(np.mean(counts > 0)), gini(counts))


EMBED_HEADER_FIXED = ["domain", "index", "trajectory_id", "start_index", "match_count", "best_similarity"]


def export_embeddings(content: EmbeddingSet, style: EmbeddingSet, pairing: PairingResult | None, path) -> None:
    """CSV with one row per window of both sets.

    Content rows carry the similarity of their best match and a match count of
    zero; style rows carry how often they were matched and the best similarity
    among the content rows matched to them (empty if unmatched).
    """
    dim = content.embeddings.shape[1] if len(content) else style.embeddings.shape[1] if len(style) else 0
    header = EMBED_HEADER_FIXED + [f"z{i}" for i in range(dim)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        if pairing is None:
            return
        for i in range(len(content)):
            tid, start = content.refs[i]
            w.writerow([content.domain_tag, i, tid, start, 0, repr(float(pairing.similarity[i]))]
                       + [repr(float(v)) for v in content.embeddings[i]])
        for j in range(len(style)):
            tid, start = style.refs[j]
            hit = pairing.matches == j
            best = repr(float(pairing.similarity[hit].max())) if np.any(hit) else ""
            w.writerow([style.domain_tag, j, tid, start, int(pairing.counts[j]), best]
                       + [repr(float(v)) for v in style.embeddings[j]])


def read_embeddings(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["index"] = int(r["index"])
        r["start_index"] = int(r["start_index"])
        r["match_count"] = int(r["match_count"])
    return rows
