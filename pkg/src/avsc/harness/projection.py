"""Two-dimensional PCA view of the event and object classifier weight rows."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .report import write_csv

PROJECTION_HEADER = ("label", "modality", "class_index", "x", "y")


@dataclass
class Projection:
    labels: list[str]
    modality: list[str]
    class_index: list[int]
    coords: np.ndarray  # [n_rows, n_axes], n_axes <= 2
    eigenvalues: np.ndarray
    components: np.ndarray  # [n_axes, D]

    def rows(self) -> list[dict]:
        out = []
        for i, label in enumerate(self.labels):
            row = {"label": label, "modality": self.modality[i], "class_index": self.class_index[i]}
            for axis, col in enumerate(("x", "y")):
                row[col] = float(self.coords[i, axis]) if axis < self.coords.shape[1] else None
            out.append(row)
        return out

    def write(self, path) -> Path:
        meta = {"eigenvalues": " ".join(f"{v:.17g}" for v in self.eigenvalues)}
        return write_csv(path, PROJECTION_HEADER, self.rows(), meta)


def top_components(X: np.ndarray, n_components: int = 2, rel_tol: float = 1e-10):
    """Leading eigenpairs of ``XᵀX / n`` for an already centered ``X``.

    Returns ``(eigenvalues, vectors)`` with vectors as rows, largest first.
    Eigenvalues below ``rel_tol`` times the trace count as zero, so fewer than
    ``n_components`` pairs come back when the rows have low rank. Each vector's
    largest-magnitude entry is made positive so the output is reproducible.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    cov = X.T @ X / max(n, 1)
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1].T
    keep = min(n_components, d, int(np.sum(vals > rel_tol * max(float(np.trace(cov)), np.finfo(float).tiny))))
    vals, vecs = vals[:keep], vecs[:keep]
    flip = vecs[np.arange(keep), np.argmax(np.abs(vecs), axis=1)] < 0
    vecs[flip] *= -1
    return vals, vecs


def project_rows(rows: np.ndarray, n_components: int = 2):
    """Center ``rows`` and project them onto the leading principal axes."""
    rows = np.asarray(rows, dtype=np.float64)
    centered = rows - rows.mean(axis=0)
    vals, vecs = top_components(centered, n_components)
    if len(vals) < n_components:
        warnings.warn(
            f"weight rows have rank {len(vals)} < {n_components}; projecting onto the available axes only",
            RuntimeWarning,
            stacklevel=2,
        )
    return centered @ vecs.T, vals, vecs


def export_projection(ckpt: Checkpoint, out_path=None) -> Projection:
    W_e = ckpt.params["audio.head.W"]
    W_o = ckpt.params["visual.head.W"]
    coords, vals, vecs = project_rows(np.concatenate([W_e, W_o], axis=0))
    C_e, C_o = len(W_e), len(W_o)
    proj = Projection(
        labels=[f"event_{i}" for i in range(C_e)] + [f"object_{j}" for j in range(C_o)],
        modality=["event"] * C_e + ["object"] * C_o,
        class_index=list(range(C_e)) + list(range(C_o)),
        coords=coords,
        eigenvalues=vals,
        components=vecs,
    )
    if out_path is not None:
        proj.write(out_path)
    return proj
