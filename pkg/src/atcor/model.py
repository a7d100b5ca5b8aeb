"""The usage predictor: per-timestep CNN over station-centered heatmaps, an
LSTM encoder over the lookback window, a temporal-attention decoder step fed
with external features, and an affine readout to next-interval pick-ups and
drop-offs.

Everything is float64 numpy with hand-written backward passes; gradients are
validated against scalar-loop references and finite differences in the test
suite.  Shapes are pinned by a ``Fingerprint`` so checkpoints are rejected
when loaded under an incompatible configuration.

Equation conventions:
  gates   i,f,o = sigmoid(W_q [h_prev, x_t] + b_q)
  cand          = tanh(W_c [h_prev, x_t] + b_c)
  cell    c_t   = f * c_prev + i * cand
  hidden  h_t   = tanh(c_t) * o
  scores  lam_t' = v . tanh(W_a [h_dec, c_dec] + U_a h_t' + b_a)
  weights gamma  = softmax(lam) over encoder steps
  context        = sum_t' gamma_t' h_t'
The published form reuses the input-gate weights for the candidate; that
reads as a typo and we default to a distinct candidate weight set, with
``tied_candidate=True`` reproducing the shared-weight variant exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

DEFAULT_CONV_SPEC = ((3, 3, 256), (3, 3, 128), (2, 2, 64))
EX_DIM = 4


class ModelError(ValueError):
    """Shape or configuration mismatch."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Fingerprint and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fingerprint:
    """Everything that determines tensor shapes and input semantics.

    A checkpoint stores its fingerprint; loaders must refuse a mismatch.
    """

    kind: str = "atcor"  # atcor | rnn | lstm | gru
    d: int = 1024
    lookback: int = 24
    rows: int = 11
    cols: int = 11
    channels: int = 15
    conv_spec: tuple[tuple[int, int, int], ...] = DEFAULT_CONV_SPEC
    ex_dim: int = EX_DIM
    encoder_externals: bool = False
    tied_candidate: bool = False
    decoder_init: str = "encoder"  # encoder | zeros
    heatmap_scaling: bool = True
    usage_scaling: bool = True
    seed: int = 0

    def key(self) -> str:
        raw = asdict(self)
        raw["conv_spec"] = [list(c) for c in self.conv_spec]
        return json.dumps(raw, sort_keys=True)


@dataclass
class ModelParams:
    """Named trainable tensors plus the fingerprint that shaped them.

    ``aux`` carries non-trainable state a checkpoint must preserve: the
    per-station usage scale map and the heatmap channel divisors.
    """

    fingerprint: Fingerprint
    tensors: dict[str, np.ndarray]
    aux: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.fingerprint,
                           {k: v.copy() for k, v in self.tensors.items()},
                           json.loads(json.dumps(self.aux)))

    def check_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def _conv_output_dims(rows: int, cols: int,
                      conv_spec) -> tuple[list[tuple[int, int]], int, int]:
    """Spatial dims after each layer. Odd kernels convolve 'same', even ones
    'valid'; a 2x2 stride-2 max pool (floor) follows every layer but the last.
    """
    dims = []
    h, w = rows, cols
    for li, (kh, kw, _) in enumerate(conv_spec):
        if kh % 2 == 0:
            if h < kh or w < kw:
                raise ModelError(
                    f"conv layer {li}: input {h}x{w} smaller than kernel {kh}x{kw}")
            h, w = h - kh + 1, w - kw + 1
        if li < len(conv_spec) - 1:
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ModelError(f"conv layer {li}: pooled away to {h}x{w}")
        dims.append((h, w))
    return dims, h, w


def _gate_names(tied: bool) -> list[str]:
    return ["i", "f", "o"] if tied else ["i", "f", "o", "c"]


def param_shapes(fp: Fingerprint) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; also fixes parameter creation order."""
    shapes: dict[str, tuple[int, ...]] = {}
    d = fp.d
    if fp.kind == "atcor":
        cin = fp.channels
        for li, (kh, kw, cout) in enumerate(fp.conv_spec):
            shapes[f"conv{li}_w"] = (kh, kw, cin, cout)
            shapes[f"conv{li}_b"] = (cout,)
            cin = cout
        _, hf, wf = _conv_output_dims(fp.rows, fp.cols, fp.conv_spec)
        flat = hf * wf * fp.conv_spec[-1][2]
        shapes["cnn_out_w"] = (flat,)
        shapes["cnn_out_b"] = (1,)
        l_enc = 3 + (fp.ex_dim if fp.encoder_externals else 0)
        for g in _gate_names(fp.tied_candidate):
            shapes[f"enc_W{g}"] = (d, d + l_enc)
            shapes[f"enc_b{g}"] = (d,)
        l_dec = d + fp.ex_dim
        for g in _gate_names(fp.tied_candidate):
            shapes[f"dec_W{g}"] = (d, d + l_dec)
            shapes[f"dec_b{g}"] = (d,)
        shapes["att_v"] = (d,)
        shapes["att_W"] = (d, 2 * d)
        shapes["att_U"] = (d, d)
        shapes["att_b"] = (d,)
    elif fp.kind in ("rnn", "lstm", "gru"):
        l = 2 + fp.ex_dim
        gates = {"rnn": ["h"], "lstm": _gate_names(fp.tied_candidate),
                 "gru": ["z", "r", "h"]}[fp.kind]
        for g in gates:
            shapes[f"cell_W{g}"] = (d, d + l)
            shapes[f"cell_b{g}"] = (d,)
    else:
        raise ModelError(f"unknown model kind {fp.kind!r}")
    shapes["out_w"] = (2, d)
    shapes["out_b"] = (2,)
    return shapes


def init_params(fp: Fingerprint) -> ModelParams:
    """Uniform fan-in-scaled weights, zero biases, from the fingerprint seed."""
    rng = np.random.default_rng(fp.seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(fp).items():
        if "_b" in name:  # every bias name: enc_bi, dec_bf, att_b, conv0_b, out_b
            tensors[name] = np.zeros(shape)
            continue
        if name.startswith("conv"):
            fan_in = shape[0] * shape[1] * shape[2]
        elif len(shape) == 1:
            fan_in = shape[0]
        else:
            fan_in = shape[-1]
        s = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-s, s, size=shape)
    return ModelParams(fingerprint=fp, tensors=tensors)


# ---------------------------------------------------------------------------
# Conv / pool / dense primitives (batched, with caches for backward)
# ---------------------------------------------------------------------------

def _conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """'same' padding for odd kernels, 'valid' for even; relu activation."""
    n, h, wdt, _ = x.shape
    kh, kw, cin, cout = w.shape
    if kh % 2 == 1:
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        ho, wo = h, wdt
    else:
        xp = x
        ho, wo = h - kh + 1, wdt - kw + 1
    cols = np.empty((n, ho, wo, kh, kw, cin))
    for u in range(kh):
        for v in range(kw):
            cols[:, :, :, u, v, :] = xp[:, u:u + ho, v:v + wo, :]
    flat = cols.reshape(n * ho * wo, kh * kw * cin)
    pre = flat @ w.reshape(kh * kw * cin, cout) + b
    pre = pre.reshape(n, ho, wo, cout)
    out = np.maximum(pre, 0.0)
    return out, (flat, pre, x.shape, (kh, kw, cin, cout))


def _conv2d_backward(dout: np.ndarray, w: np.ndarray, cache):
    flat, pre, x_shape, (kh, kw, cin, cout) = cache
    n, h, wdt, _ = x_shape
    _, ho, wo, _ = dout.shape
    dpre = (dout * (pre > 0)).reshape(n * ho * wo, cout)
    dw = (flat.T @ dpre).reshape(kh, kw, cin, cout)
    db = dpre.sum(axis=0)
    dcols = (dpre @ w.reshape(kh * kw * cin, cout).T) \
        .reshape(n, ho, wo, kh, kw, cin)
    if kh % 2 == 1:
        ph, pw = kh // 2, kw // 2
        dxp = np.zeros((n, h + 2 * ph, wdt + 2 * pw, cin))
    else:
        ph = pw = 0
        dxp = np.zeros((n, h, wdt, cin))
    for u in range(kh):
        for v in range(kw):
            dxp[:, u:u + ho, v:v + wo, :] += dcols[:, :, :, u, v, :]
    dx = dxp[:, ph:ph + h, pw:pw + wdt, :] if ph or pw else dxp
    return dx, dw, db


def _maxpool_forward(x: np.ndarray):
    """2x2 window, stride 2, floor semantics (odd trailing row/col dropped)."""
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    xr = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c) \
        .transpose(0, 1, 3, 2, 4, 5).reshape(n, ho, wo, 4, c)
    am = xr.argmax(axis=3)
    out = np.take_along_axis(xr, am[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, (am, x.shape)


def _maxpool_backward(dout: np.ndarray, cache):
    am, x_shape = cache
    n, h, w, c = x_shape
    ho, wo = h // 2, w // 2
    dxr = np.zeros((n, ho, wo, 4, c))
    np.put_along_axis(dxr, am[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    dx = np.zeros(x_shape)
    dx[:, :2 * ho, :2 * wo, :] = dxr.reshape(n, ho, wo, 2, 2, c) \
        .transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * ho, 2 * wo, c)
    return dx


def cnn_forward_batch(h_maps: np.ndarray, params: ModelParams):
    """(N, rows, cols, channels) -> (N,) scalar features, with cache."""
    fp = params.fingerprint
    if h_maps.shape[1:] != (fp.rows, fp.cols, fp.channels):
        raise ModelError(
            f"heatmap shape {h_maps.shape[1:]} does not match fingerprint "
            f"({fp.rows}, {fp.cols}, {fp.channels})")
    x = h_maps
    caches = []
    n_layers = len(fp.conv_spec)
    for li in range(n_layers):
        x, ccache = _conv2d_forward(x, params.tensors[f"conv{li}_w"],
                                    params.tensors[f"conv{li}_b"])
        pcache = None
        if li < n_layers - 1:
            x, pcache = _maxpool_forward(x)
        caches.append((ccache, pcache))
    flat = x.reshape(x.shape[0], -1)
    out = flat @ params.tensors["cnn_out_w"] + params.tensors["cnn_out_b"][0]
    return out, (caches, flat, x.shape)


def cnn_backward_batch(dout: np.ndarray, params: ModelParams, cache,
                       grads: dict[str, np.ndarray]) -> None:
    caches, flat, last_shape = cache
    grads["cnn_out_w"] += flat.T @ dout
    grads["cnn_out_b"] += np.array([dout.sum()])
    dx = np.outer(dout, params.tensors["cnn_out_w"]).reshape(last_shape)
    for li in reversed(range(len(params.fingerprint.conv_spec))):
        ccache, pcache = caches[li]
        if pcache is not None:
            dx = _maxpool_backward(dx, pcache)
        dx, dw, db = _conv2d_backward(dx, params.tensors[f"conv{li}_w"], ccache)
        grads[f"conv{li}_w"] += dw
        grads[f"conv{li}_b"] += db


def cnn_forward(h_map: np.ndarray, params: ModelParams) -> float:
    """Scalar spatial feature of one heatmap. Deterministic, pure."""
    out, _ = cnn_forward_batch(h_map[None].astype(float), params)
    return float(out[0])


# ---------------------------------------------------------------------------
# Recurrent cells
# ---------------------------------------------------------------------------

def _cell_w(params: ModelParams, prefix: str) -> dict[str, np.ndarray]:
    """Gate weights for one cell; tied mode aliases the candidate to the
    input gate's arrays, reproducing the shared-weight published variant."""
    t = params.tensors
    tied = params.fingerprint.tied_candidate
    w = {g: t[f"{prefix}_W{g}"] for g in ("i", "f", "o")}
    b = {g: t[f"{prefix}_b{g}"] for g in ("i", "f", "o")}
    w["c"] = t[f"{prefix}_Wi"] if tied else t[f"{prefix}_Wc"]
    b["c"] = t[f"{prefix}_bi"] if tied else t[f"{prefix}_bc"]
    return {"W": w, "b": b}


def _lstm_step(x, h_prev, c_prev, cw):
    z = np.concatenate([h_prev, x], axis=-1)
    gi = sigmoid(z @ cw["W"]["i"].T + cw["b"]["i"])
    gf = sigmoid(z @ cw["W"]["f"].T + cw["b"]["f"])
    go = sigmoid(z @ cw["W"]["o"].T + cw["b"]["o"])
    cand = np.tanh(z @ cw["W"]["c"].T + cw["b"]["c"])
    c = gf * c_prev + gi * cand
    tc = np.tanh(c)
    h = tc * go
    return h, c, (z, gi, gf, go, cand, c_prev, tc)


def _lstm_step_backward(dh, dc, cw, cache, d):
    z, gi, gf, go, cand, c_prev, tc = cache
    do = dh * tc
    dct = dc + dh * go * (1.0 - tc * tc)
    dgf = dct * c_prev
    dc_prev = dct * gf
    dgi = dct * cand
    dcand = dct * gi
    da = {
        "i": dgi * gi * (1.0 - gi),
        "f": dgf * gf * (1.0 - gf),
        "o": do * go * (1.0 - go),
        "c": dcand * (1.0 - cand * cand),
    }
    gw = {f"W{g}": da[g].T @ z for g in da}
    gb = {f"b{g}": da[g].sum(axis=0) for g in da}
    dz = sum(da[g] @ cw["W"][g] for g in da)
    return dz[:, :d], dc_prev, dz[:, d:], gw, gb


def _accumulate_cell_grads(grads, prefix, gw, gb, tied):
    for g in ("i", "f", "o", "c"):
        tgt = "i" if (tied and g == "c") else g
        grads[f"{prefix}_W{tgt}"] += gw[f"W{g}"]
        grads[f"{prefix}_b{tgt}"] += gb[f"b{g}"]


def lstm_cell(x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
              weights: dict[str, np.ndarray],
              tied_candidate: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """One cell step from explicit gate weights.

    ``weights`` holds Wi,bi,Wf,bf,Wo,bo and (unless tied) Wc,bc, with each
    W of shape (d, d+l) acting on the concatenation [h_prev, x_t].
    """
    x_t, h_prev, c_prev = (np.asarray(a, dtype=float) for a in (x_t, h_prev, c_prev))
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t, h_prev, c_prev = x_t[None], h_prev[None], c_prev[None]
    d = h_prev.shape[-1]
    gate_names = ("Wi", "Wf", "Wo") if tied_candidate else ("Wi", "Wf", "Wo", "Wc")
    for name in gate_names:
        if weights[name].shape != (d, d + x_t.shape[-1]):
            raise ModelError(
                f"{name} shape {weights[name].shape} incompatible with "
                f"d={d}, input size {x_t.shape[-1]}")
    cw = {"W": {"i": weights["Wi"], "f": weights["Wf"], "o": weights["Wo"],
                "c": weights["Wi"] if tied_candidate else weights["Wc"]},
          "b": {"i": weights["bi"], "f": weights["bf"], "o": weights["bo"],
                "c": weights["bi"] if tied_candidate else weights["bc"]}}
    h, c, _ = _lstm_step(x_t, h_prev, c_prev, cw)
    return (h[0], c[0]) if squeeze else (h, c)


def gru_cell(x_t: np.ndarray, h_prev: np.ndarray,
             weights: dict[str, np.ndarray]) -> np.ndarray:
    """One GRU step: update gate z, reset gate r, candidate on reset state."""
    x_t, h_prev = np.asarray(x_t, float), np.asarray(h_prev, float)
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t, h_prev = x_t[None], h_prev[None]
    h, _ = _gru_step(x_t, h_prev, weights)
    return h[0] if squeeze else h


def _gru_step(x, h_prev, w):
    z_in = np.concatenate([h_prev, x], axis=-1)
    gz = sigmoid(z_in @ w["Wz"].T + w["bz"])
    gr = sigmoid(z_in @ w["Wr"].T + w["br"])
    r_in = np.concatenate([gr * h_prev, x], axis=-1)
    cand = np.tanh(r_in @ w["Wh"].T + w["bh"])
    h = (1.0 - gz) * h_prev + gz * cand
    return h, (z_in, r_in, gz, gr, cand, h_prev)


def _gru_step_backward(dh, w, cache, d):
    z_in, r_in, gz, gr, cand, h_prev = cache
    dgz = dh * (cand - h_prev)
    dcand = dh * gz
    dh_prev = dh * (1.0 - gz)
    dah = dcand * (1.0 - cand * cand)
    gw = {"Wh": dah.T @ r_in}
    gb = {"bh": dah.sum(axis=0)}
    dr_in = dah @ w["Wh"]
    drh = dr_in[:, :d]
    dx = dr_in[:, d:].copy()
    dgr = drh * h_prev
    dh_prev = dh_prev + drh * gr
    daz = dgz * gz * (1.0 - gz)
    dar = dgr * gr * (1.0 - gr)
    gw["Wz"] = daz.T @ z_in
    gb["bz"] = daz.sum(axis=0)
    gw["Wr"] = dar.T @ z_in
    gb["br"] = dar.sum(axis=0)
    dz_in = daz @ w["Wz"] + dar @ w["Wr"]
    dh_prev = dh_prev + dz_in[:, :d]
    dx += dz_in[:, d:]
    return dh_prev, dx, gw, gb


# ---------------------------------------------------------------------------
# Temporal attention
# ---------------------------------------------------------------------------

def _attention_forward(h_dec, c_dec, enc_h, params):
    """Batched scores/weights/context.  enc_h: (B, T, d)."""
    t = params.tensors
    z = np.concatenate([h_dec, c_dec], axis=-1)          # (B, 2d)
    s = z @ t["att_W"].T                                  # (B, d)
    s = s[:, None, :] + enc_h @ t["att_U"].T + t["att_b"]  # (B, T, d)
    a = np.tanh(s)
    lam = a @ t["att_v"]                                  # (B, T)
    lam_shift = lam - lam.max(axis=1, keepdims=True)      # softmax stability
    e = np.exp(lam_shift)
    gamma = e / e.sum(axis=1, keepdims=True)
    ctx = np.einsum("bt,btd->bd", gamma, enc_h)
    return ctx, gamma, (z, a, gamma)


def _attention_backward(dctx, dgamma_extra, enc_h, params, cache, grads):
    """Returns (d_enc_h, dz).  dgamma_extra allows callers that consume the
    weights directly; the forward path passes zeros."""
    t = params.tensors
    z, a, gamma = cache
    dgamma = np.einsum("bd,btd->bt", dctx, enc_h) + dgamma_extra
    d_enc = gamma[:, :, None] * dctx[:, None, :]
    dlam = gamma * (dgamma - (gamma * dgamma).sum(axis=1, keepdims=True))
    grads["att_v"] += np.einsum("bt,btd->d", dlam, a)
    ds = dlam[:, :, None] * t["att_v"] * (1.0 - a * a)    # (B, T, d)
    grads["att_b"] += ds.sum(axis=(0, 1))
    grads["att_W"] += np.einsum("btd,be->de", ds, z)
    grads["att_U"] += np.einsum("btd,bte->de", ds, enc_h)
    dz = np.einsum("btd,de->be", ds, t["att_W"])
    d_enc += np.einsum("btd,de->bte", ds, t["att_U"])
    return d_enc, dz


def temporal_attention(decoder_state: tuple[np.ndarray, np.ndarray],
                       encoder_states: np.ndarray,
                       params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Context vector and attention weights over encoder hidden states.

    encoder_states: (T, d).  Returns (context (d,), gamma (T,)); gamma is a
    softmax, so it is non-negative, sums to one, and is invariant to adding
    a constant to every score.
    """
    h_dec, c_dec = decoder_state
    enc = np.asarray(encoder_states, dtype=float)
    if enc.ndim != 2 or enc.shape[0] == 0:
        raise ModelError("encoder states must be a non-empty (T, d) array")
    ctx, gamma, _ = _attention_forward(np.asarray(h_dec, float)[None],
                                       np.asarray(c_dec, float)[None],
                                       enc[None], params)
    return ctx[0], gamma[0]


# ---------------------------------------------------------------------------
# Full network forward/backward
# ---------------------------------------------------------------------------

@dataclass
class InputWindow:
    """One sample: lookback-window features plus the target interval's
    externals.  ``usage`` is already scaled by the per-station maxima when
    usage scaling is on; the train/evaluate layers own that scaling."""

    heatmaps: np.ndarray    # (T, rows, cols, channels)
    usage: np.ndarray       # (T, 2)
    externals: np.ndarray   # (T+1, ex_dim); last row is the target interval

    def validate(self, fp: Fingerprint) -> None:
        t = fp.lookback
        if self.heatmaps.shape != (t, fp.rows, fp.cols, fp.channels):
            raise ModelError(
                f"window heatmaps {self.heatmaps.shape} != "
                f"({t}, {fp.rows}, {fp.cols}, {fp.channels})")
        if self.usage.shape != (t, 2):
            raise ModelError(f"window usage {self.usage.shape} != ({t}, 2)")
        if self.externals.shape != (t + 1, fp.ex_dim):
            raise ModelError(
                f"window externals {self.externals.shape} != ({t + 1}, {fp.ex_dim}); "
                "the target interval's external vector is required")


def _batch_from_windows(windows: list[InputWindow]) -> dict[str, np.ndarray]:
    return {
        "heatmaps": np.stack([w.heatmaps for w in windows]).astype(float),
        "usage": np.stack([w.usage for w in windows]).astype(float),
        "externals": np.stack([w.externals for w in windows]).astype(float),
    }


def atcor_apply(params: ModelParams, batch: dict[str, np.ndarray],
                train: bool = False, dropout: float = 0.0,
                rng: np.random.Generator | None = None):
    """Batched forward pass.  Returns (predictions (B, 2), cache)."""
    fp = params.fingerprint
    t = params.tensors
    hmaps, usage, ex = batch["heatmaps"], batch["usage"], batch["externals"]
    b, tt = usage.shape[0], usage.shape[1]
    if tt != fp.lookback:
        raise ModelError(f"window length {tt} != lookback {fp.lookback}")
    if ex.shape[1] != tt + 1:
        raise ModelError("externals must cover the lookback plus the target interval")

    cnn_out, cnn_cache = cnn_forward_batch(
        hmaps.reshape(b * tt, *hmaps.shape[2:]), params)
    cnn_seq = cnn_out.reshape(b, tt)

    x_parts = [cnn_seq[:, :, None], usage]
    if fp.encoder_externals:
        x_parts.append(ex[:, :tt, :])
    x_seq = np.concatenate(x_parts, axis=2)              # (B, T, l_enc)

    enc_w = _cell_w(params, "enc")
    h = np.zeros((b, fp.d))
    c = np.zeros((b, fp.d))
    enc_caches = []
    enc_h = np.empty((b, tt, fp.d))
    for step in range(tt):
        h, c, cache = _lstm_step(x_seq[:, step, :], h, c, enc_w)
        enc_caches.append(cache)
        enc_h[:, step, :] = h

    if fp.decoder_init == "encoder":
        h0d, c0d = h, c
    else:
        h0d = np.zeros((b, fp.d))
        c0d = np.zeros((b, fp.d))

    ctx, gamma, att_cache = _attention_forward(h0d, c0d, enc_h, params)
    x_dec = np.concatenate([ctx, ex[:, tt, :]], axis=1)
    dec_w = _cell_w(params, "dec")
    h_dec, c_dec, dec_cache = _lstm_step(x_dec, h0d, c0d, dec_w)

    if train and dropout > 0.0:
        if rng is None:
            raise ModelError("dropout in training mode needs an rng")
        keep = 1.0 - dropout
        mask = (rng.random(h_dec.shape) < keep) / keep
    else:
        mask = np.ones_like(h_dec)
    h_out = h_dec * mask
    pred = h_out @ t["out_w"].T + t["out_b"]

    cache = {"cnn_cache": cnn_cache, "x_seq": x_seq, "enc_caches": enc_caches,
             "enc_h": enc_h, "att_cache": att_cache, "dec_cache": dec_cache,
             "h_out": h_out, "mask": mask, "gamma": gamma,
             "b": b, "tt": tt}
    return pred, cache


def atcor_backward(params: ModelParams, cache, dpred: np.ndarray,
                   ) -> dict[str, np.ndarray]:
    """Gradients of every tensor given d(loss)/d(predictions)."""
    fp = params.fingerprint
    t = params.tensors
    b, tt = cache["b"], cache["tt"]
    grads = {k: np.zeros_like(v) for k, v in t.items()}

    grads["out_w"] += dpred.T @ cache["h_out"]
    grads["out_b"] += dpred.sum(axis=0)
    dh_dec = (dpred @ t["out_w"]) * cache["mask"]

    dec_w = _cell_w(params, "dec")
    dh0d, dc0d, dx_dec, gw, gb = _lstm_step_backward(
        dh_dec, np.zeros((b, fp.d)), dec_w, cache["dec_cache"], fp.d)
    _accumulate_cell_grads(grads, "dec", gw, gb, fp.tied_candidate)
    dctx = dx_dec[:, :fp.d]

    d_enc_h, dz = _attention_backward(dctx, np.zeros((b, tt)), cache["enc_h"],
                                      params, cache["att_cache"], grads)
    dh0d = dh0d + dz[:, :fp.d]
    dc0d = dc0d + dz[:, fp.d:]

    if fp.decoder_init == "encoder":
        dh_next, dc_next = dh0d, dc0d
    else:
        dh_next = np.zeros((b, fp.d))
        dc_next = np.zeros((b, fp.d))

    enc_w = _cell_w(params, "enc")
    dx_seq = np.empty_like(cache["x_seq"])
    for step in reversed(range(tt)):
        dh_step = dh_next + d_enc_h[:, step, :]
        dh_next, dc_next, dx, gw, gb = _lstm_step_backward(
            dh_step, dc_next, enc_w, cache["enc_caches"][step], fp.d)
        _accumulate_cell_grads(grads, "enc", gw, gb, fp.tied_candidate)
        dx_seq[:, step, :] = dx

    dcnn = dx_seq[:, :, 0].reshape(b * tt)
    cnn_backward_batch(dcnn, params, cache["cnn_cache"], grads)
    return grads


def atcor_forward(window: InputWindow, params: ModelParams) -> np.ndarray:
    """Predicted (pick-ups, drop-offs) for the interval after the window.

    Pure function of (window, params); outputs are real-valued and may be
    negative, the serving layer clamps for display only.
    """
    window.validate(params.fingerprint)
    pred, _ = atcor_apply(params, _batch_from_windows([window]))
    return pred[0]


def mse_loss_and_grads(params: ModelParams, batch: dict[str, np.ndarray],
                       apply_fn, backward_fn, train: bool = False,
                       dropout: float = 0.0,
                       rng: np.random.Generator | None = None):
    """Mean squared error over the two outputs, plus parameter gradients."""
    y = batch["targets"]
    pred, cache = apply_fn(params, batch, train=train, dropout=dropout, rng=rng)
    err = pred - y
    loss = float((err ** 2).mean())
    dpred = 2.0 * err / err.size
    grads = backward_fn(params, cache, dpred)
    return loss, grads, pred


# ---------------------------------------------------------------------------
# Rolling prediction helper
# ---------------------------------------------------------------------------

def cnn_series(params: ModelParams, heatmap_tensor: np.ndarray) -> np.ndarray:
    """CNN scalar per timestep for a whole (n_t, rows, cols, P) stack.

    Inference-time cache: consecutive windows share heatmaps, so the per-
    timestep CNN output is computed once and windows index into it.
    """
    out, _ = cnn_forward_batch(heatmap_tensor.astype(float), params)
    return out


def atcor_predict_windows(params: ModelParams, cnn_seq_full: np.ndarray,
                          usage_full: np.ndarray, externals_full: np.ndarray,
                          end_indices: np.ndarray) -> np.ndarray:
    """Batched one-step predictions for windows ending at ``end_indices``.

    Window k covers [end-T, end); the prediction targets interval ``end``.
    ``usage_full`` must already be scaled like the training inputs.
    """
    fp = params.fingerprint
    tt = fp.lookback
    ends = np.asarray(end_indices, dtype=int)
    # target interval `end` needs its external vector, so end < series length
    if (ends < tt).any() or (ends >= len(externals_full)).any():
        raise ModelError("window end index out of range")
    gather = ends[:, None] + np.arange(-tt, 0)[None, :]
    batch = {
        "heatmaps": None,
        "usage": usage_full[gather],
        "externals": externals_full[np.concatenate([gather, ends[:, None]], axis=1)],
    }
    b = len(ends)
    x_parts = [cnn_seq_full[gather][:, :, None], batch["usage"]]
    if fp.encoder_externals:
        x_parts.append(batch["externals"][:, :tt, :])
    x_seq = np.concatenate(x_parts, axis=2)

    enc_w = _cell_w(params, "enc")
    h = np.zeros((b, fp.d))
    c = np.zeros((b, fp.d))
    enc_h = np.empty((b, tt, fp.d))
    for step in range(tt):
        h, c, _ = _lstm_step(x_seq[:, step, :], h, c, enc_w)
        enc_h[:, step, :] = h
    if fp.decoder_init == "encoder":
        h0d, c0d = h, c
    else:
        h0d = np.zeros((b, fp.d))
        c0d = np.zeros((b, fp.d))
    ctx, _, _ = _attention_forward(h0d, c0d, enc_h, params)
    x_dec = np.concatenate([ctx, batch["externals"][:, tt, :]], axis=1)
    h_dec, _, _ = _lstm_step(x_dec, h0d, c0d, _cell_w(params, "dec"))
    return h_dec @ params.tensors["out_w"].T + params.tensors["out_b"]


# ---------------------------------------------------------------------------
# Checkpoint persistence (layout in docs/formats.md)
# ---------------------------------------------------------------------------

_MAGIC = b"ATCK"
_VERSION = 1


def save_checkpoint(params: ModelParams, path: Path) -> None:
    fp_blob = params.fingerprint.key().encode()
    aux_blob = json.dumps(params.aux, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, len(fp_blob), len(aux_blob)))
        fh.write(fp_blob)
        fh.write(aux_blob)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, arr in params.tensors.items():
            enc = name.encode()
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path: Path,
                    expected: Fingerprint | None = None) -> ModelParams:
    """Load a checkpoint; refuses a fingerprint mismatch when one is expected."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ModelError(f"{path}: not a checkpoint file")
        version, fp_len, aux_len = struct.unpack("<III", fh.read(12))
        if version != _VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        fp_raw = json.loads(fh.read(fp_len).decode())
        aux = json.loads(fh.read(aux_len).decode())
        fp_raw["conv_spec"] = tuple(tuple(c) for c in fp_raw["conv_spec"])
        fp = Fingerprint(**fp_raw)
        if expected is not None and expected.key() != fp.key():
            raise ModelError(
                f"{path}: fingerprint mismatch\n  stored:   {fp.key()}\n"
                f"  expected: {expected.key()}")
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(
                fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    want = param_shapes(fp)
    got = {k: v.shape for k, v in tensors.items()}
    if {k: tuple(v) for k, v in got.items()} != want:
        raise ModelError(f"{path}: tensor inventory does not match fingerprint")
    return ModelParams(fingerprint=fp, tensors=tensors, aux=aux)
