"""Recurrent baseline predictors: plain RNN, LSTM and GRU.

Baselines consume only the usage pair and external vector per timestep (no
heatmaps, no attention) over the same lookback window, with the final hidden
state mapped to the two outputs by an affine readout.  They train through the
same harness and are evaluated on byte-identical sample sets as the main
model.
"""

from __future__ import annotations

import numpy as np

from atcor.model import (
    Fingerprint, ModelError, ModelParams, _cell_w, _gru_step,
    _gru_step_backward, _lstm_step, _lstm_step_backward,
    _accumulate_cell_grads,
)

BASELINE_KINDS = ("rnn", "lstm", "gru")


def baseline_fingerprint(kind: str, d: int, lookback: int = 24,
                         ex_dim: int = 4, seed: int = 0,
                         usage_scaling: bool = True) -> Fingerprint:
    if kind not in BASELINE_KINDS:
        raise ModelError(f"unknown baseline scheme {kind!r}; "
                         f"expected one of {BASELINE_KINDS} or 'persistence'")
    return Fingerprint(kind=kind, d=d, lookback=lookback, rows=0, cols=0,
                       channels=0, conv_spec=(), ex_dim=ex_dim,
                       usage_scaling=usage_scaling, heatmap_scaling=False,
                       seed=seed)


def _rnn_step(x, h_prev, w, b):
    z = np.concatenate([h_prev, x], axis=-1)
    h = np.tanh(z @ w.T + b)
    return h, (z, h)


def _rnn_step_backward(dh, w, cache, d):
    z, h = cache
    da = dh * (1.0 - h * h)
    gw = da.T @ z
    gb = da.sum(axis=0)
    dz = da @ w
    return dz[:, :d], dz[:, d:], gw, gb


def baseline_apply(params: ModelParams, batch: dict[str, np.ndarray],
                   train: bool = False, dropout: float = 0.0,
                   rng: np.random.Generator | None = None):
    """Forward over (B, T, 2) usage + (B, T+1, ex) externals -> (B, 2)."""
    fp = params.fingerprint
    t = params.tensors
    usage, ex = batch["usage"], batch["externals"]
    b, tt = usage.shape[0], usage.shape[1]
    if tt != fp.lookback:
        raise ModelError(f"window length {tt} != lookback {fp.lookback}")
    x_seq = np.concatenate([usage, ex[:, :tt, :]], axis=2)

    h = np.zeros((b, fp.d))
    caches = []
    if fp.kind == "lstm":
        c = np.zeros((b, fp.d))
        cw = _cell_w(params, "cell")
        for step in range(tt):
            h, c, cache = _lstm_step(x_seq[:, step, :], h, c, cw)
            caches.append(cache)
    elif fp.kind == "gru":
        w = {"Wz": t["cell_Wz"], "Wr": t["cell_Wr"], "Wh": t["cell_Wh"],
             "bz": t["cell_bz"], "br": t["cell_br"], "bh": t["cell_bh"]}
        for step in range(tt):
            h, cache = _gru_step(x_seq[:, step, :], h, w)
            caches.append(cache)
    elif fp.kind == "rnn":
        for step in range(tt):
            h, cache = _rnn_step(x_seq[:, step, :], h, t["cell_Wh"], t["cell_bh"])
            caches.append(cache)
    else:
        raise ModelError(f"not a trainable baseline: {fp.kind}")

    if train and dropout > 0.0:
        if rng is None:
            raise ModelError("dropout in training mode needs an rng")
        keep = 1.0 - dropout
        mask = (rng.random(h.shape) < keep) / keep
    else:
        mask = np.ones_like(h)
    h_out = h * mask
    pred = h_out @ t["out_w"].T + t["out_b"]
    return pred, {"caches": caches, "h_out": h_out, "mask": mask,
                  "b": b, "tt": tt}


def baseline_backward(params: ModelParams, cache,
                      dpred: np.ndarray) -> dict[str, np.ndarray]:
    fp = params.fingerprint
    t = params.tensors
    b, tt = cache["b"], cache["tt"]
    grads = {k: np.zeros_like(v) for k, v in t.items()}
    grads["out_w"] += dpred.T @ cache["h_out"]
    grads["out_b"] += dpred.sum(axis=0)
    dh = (dpred @ t["out_w"]) * cache["mask"]

    if fp.kind == "lstm":
        cw = _cell_w(params, "cell")
        dc = np.zeros((b, fp.d))
        for step in reversed(range(tt)):
            dh, dc, _, gw, gb = _lstm_step_backward(
                dh, dc, cw, cache["caches"][step], fp.d)
            _accumulate_cell_grads(grads, "cell", gw, gb, fp.tied_candidate)
    elif fp.kind == "gru":
        w = {"Wz": t["cell_Wz"], "Wr": t["cell_Wr"], "Wh": t["cell_Wh"]}
        for step in reversed(range(tt)):
            dh, _, gw, gb = _gru_step_backward(dh, w, cache["caches"][step], fp.d)
            for k, v in gw.items():
                grads[f"cell_{k}"] += v
            for k, v in gb.items():
                grads[f"cell_{k}"] += v
    else:  # rnn
        for step in reversed(range(tt)):
            dh, _, gw, gb = _rnn_step_backward(
                dh, t["cell_Wh"], cache["caches"][step], fp.d)
            grads["cell_Wh"] += gw
            grads["cell_bh"] += gb
    return grads


def baseline_predict_windows(params: ModelParams, usage_full: np.ndarray,
                             externals_full: np.ndarray,
                             end_indices: np.ndarray) -> np.ndarray:
    """Batched one-step predictions for windows ending at ``end_indices``."""
    fp = params.fingerprint
    tt = fp.lookback
    ends = np.asarray(end_indices, dtype=int)
    if (ends < tt).any() or (ends >= len(externals_full)).any():
        raise ModelError("window end index out of range")
    gather = ends[:, None] + np.arange(-tt, 0)[None, :]
    batch = {"usage": usage_full[gather],
             "externals": externals_full[np.concatenate(
                 [gather, ends[:, None]], axis=1)]}
    pred, _ = baseline_apply(params, batch)
    return pred


def persistence_forward(usage_window: np.ndarray) -> np.ndarray:
    """Repeat the last observed usage pair: the no-model reference scheme."""
    usage_window = np.asarray(usage_window, dtype=float)
    if usage_window.ndim == 2:
        return usage_window[-1].copy()
    return usage_window[:, -1, :].copy()


def baseline_forward(scheme: str, window_usage: np.ndarray,
                     window_externals: np.ndarray,
                     params: ModelParams | None = None) -> np.ndarray:
    """One prediction from one window for any baseline scheme."""
    if scheme == "persistence":
        return persistence_forward(window_usage)
    if scheme not in BASELINE_KINDS:
        raise ModelError(f"unknown baseline scheme {scheme!r}")
    if params is None or params.fingerprint.kind != scheme:
        raise ModelError(f"scheme {scheme} needs trained params of that kind")
    batch = {"usage": np.asarray(window_usage, float)[None],
             "externals": np.asarray(window_externals, float)[None]}
    pred, _ = baseline_apply(params, batch)
    return pred[0]
