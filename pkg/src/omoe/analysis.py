"""Representation taps, diversity reports and a small PCA for plotting."""

from __future__ import annotations

import csv

import numpy as np

from .errors import ContractError
from .layer import pairwise_diversity, records_from_tap
from .tensor import no_grad


def collect_taps(model, batch, layers=None, targets=None, n_tokens=None):
    """Tap adapters while running ``batch`` in eval mode.

    Only the scored position of each sequence is kept (one token per
    sequence), for the first ``n_tokens`` sequences.  ``layers`` are 0-based.
    Returns a list of :class:`LayerTapRecord` ordered by layer, target, token.
    """
    if n_tokens is not None:
        batch = batch.take(slice(0, n_tokens))
    model.set_capture(True, layers, targets)
    try:
        with no_grad():
            model(batch.tokens, positions=batch.positions)
        B = len(batch)
        T = batch.tokens.shape[1]
        flat = np.arange(B) * T + batch.positions
        records = []
        for _, ad in model.adapters():
            if ad.capture and ad.last_tap is not None:
                records.extend(records_from_tap(ad.last_tap, ad.layer_index, ad.target, index=flat))
    finally:
        model.set_capture(False)
    return records


def diversity_report(records):
    """``{layer_index: {"pre": .., "post": .., "pairs": .., "skipped": ..}}``."""
    pre = pairwise_diversity(records, "pre")
    post = pairwise_diversity(records, "post")
    return {k: {"pre": pre[k].mean_abs_cos, "post": post[k].mean_abs_cos,
                "pairs": post[k].n_pairs, "skipped": post[k].skipped}
            for k in sorted(post)}


def pca_2d(X, n_iter=500, seed=0, tol=1e-12):
    """Top-two principal directions by power iteration with deflation.

    Returns ``(projection [N, 2], components [2, d], variances [2])``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError("pca_2d needs a 2-D array with at least two rows")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (X.shape[0] - 1)
    rng = np.random.default_rng(seed)
    comps, variances = [], []
    for _ in range(min(2, X.shape[1])):
        v = rng.normal(size=C.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(n_iter):
            w = C @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol
            v = w
            lam = norm
            if done:
                break
        lam = float(v @ C @ v)
        # fixed sign: largest-magnitude coordinate positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        variances.append(lam)
        C = C - lam * np.outer(v, v)
    comps = np.array(comps)
    return Xc @ comps.T, comps, np.array(variances)


def write_vectors_csv(path, records):
    """One row per (token, expert, stage) with the full vector."""
    if not records:
        raise ContractError("no records to write")
    d = records[0].pre.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token", "layer", "target", "expert", "stage", "gate"] + [f"v{i}" for i in range(d)])
        for t, rec in enumerate(records):
            for stage in ("pre", "post"):
                E = getattr(rec, stage)
                for j in range(E.shape[1]):
                    w.writerow([t, rec.layer_index + 1, rec.target, j, stage, repr(float(rec.gates[j]))]
                               + [repr(float(x)) for x in E[:, j]])


def write_pca_csv(path, records, seed=0):
    """Project every pre/post vector of ``records`` onto a shared 2-D PCA basis."""
    rows, X = [], []
    for t, rec in enumerate(records):
        for stage in ("pre", "post"):
            E = getattr(rec, stage)
            for j in range(E.shape[1]):
                rows.append((t, rec.layer_index + 1, j, stage))
                X.append(E[:, j])
    proj, _, _ = pca_2d(np.array(X), seed=seed)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token", "layer", "expert", "stage", "pc1", "pc2"])
        for (t, layer, j, stage), (a, b) in zip(rows, proj):
            w.writerow([t, layer, j, stage, repr(float(a)), repr(float(b))])
