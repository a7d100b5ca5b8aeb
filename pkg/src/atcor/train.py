"""Training: cross-station sample assembly and the per-cluster loop.

One model per cluster, trained on the cluster's active-existing stations by
minimizing MSE over the two outputs.  Every epoch draws one uniformly random
batch from the pooled samples (reshuffled each epoch); runs are bit-for-bit
reproducible from the config seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from atcor.baselines import baseline_apply, baseline_backward
from atcor.model import (ModelParams, atcor_apply, atcor_backward,
                         mse_loss_and_grads, save_checkpoint)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, checkpoint: Path | None):
        self.epoch = epoch
        self.checkpoint = checkpoint
        where = f"; last finite state saved to {checkpoint}" if checkpoint else ""
        super().__init__(f"loss became non-finite at epoch {epoch}{where}")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 5000
    lookback: int = 24
    d: int = 1024
    seed: int = 0
    optimizer: str = "adam"  # adam | sgd
    grad_clip_norm: float = 5.0
    dropout: float = 0.5
    cluster_id: int = 0
    monitor_fraction: float = 0.1
    early_stop: bool = False
    early_stop_patience: int = 200
    finite_check_every: int = 100

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "lookback", "d"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")


@dataclass
class StationData:
    """Aligned per-station feature arrays over one span.

    ``usage_scaled`` is usage divided by the per-station training maxima in
    ``scale`` (guarded at 1); ``valid`` masks intervals a window may cover.
    ``heatmaps`` is None for baseline schemes.
    """

    station_id: str
    usage_raw: np.ndarray            # (n_t, 2)
    usage_scaled: np.ndarray         # (n_t, 2)
    externals: np.ndarray            # (n_t, ex_dim)
    scale: np.ndarray                # (2,)
    heatmaps: np.ndarray | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(len(self.usage_raw), dtype=bool)


def usage_scale(usage_raw: np.ndarray, train_limit: int | None = None) -> np.ndarray:
    """Per-column maxima over the training part of a series, floored at 1."""
    part = usage_raw[:train_limit] if train_limit else usage_raw
    return np.maximum(part.max(axis=0) if len(part) else np.ones(2), 1.0).astype(float)


@dataclass
class SampleSet:
    """Sliding-window samples pooled across a cluster's stations."""

    stations: list[StationData]
    index: np.ndarray  # (n_samples, 2): station idx, window end idx
    lookback: int

    def __len__(self) -> int:
        return len(self.index)

    def sample_hash(self) -> str:
        """Stable digest of the exact (station, target-interval) set, recorded
        into reports so schemes provably score the same samples."""
        import hashlib
        payload = "\n".join(
            f"{self.stations[s].station_id},{e}" for s, e in self.index)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def gather(self, rows: np.ndarray, with_heatmaps: bool = True,
               ) -> dict[str, np.ndarray]:
        t = self.lookback
        picked = self.index[rows]
        usage = np.empty((len(rows), t, 2))
        ex_dim = self.stations[0].externals.shape[1]
        externals = np.empty((len(rows), t + 1, ex_dim))
        targets = np.empty((len(rows), 2))
        targets_raw = np.empty((len(rows), 2))
        hmaps = None
        if with_heatmaps and self.stations[0].heatmaps is not None:
            hshape = self.stations[0].heatmaps.shape[1:]
            hmaps = np.empty((len(rows), t, *hshape))
        for k, (s, e) in enumerate(picked):
            st = self.stations[s]
            usage[k] = st.usage_scaled[e - t:e]
            externals[k] = st.externals[e - t:e + 1]
            targets[k] = st.usage_scaled[e]
            targets_raw[k] = st.usage_raw[e]
            if hmaps is not None:
                hmaps[k] = st.heatmaps[e - t:e]
        batch = {"usage": usage, "externals": externals, "targets": targets,
                 "targets_raw": targets_raw}
        if hmaps is not None:
            batch["heatmaps"] = hmaps
        return batch


def make_samples(stations: list[StationData], lookback: int,
                 start: int = 0, stop: int | None = None) -> SampleSet:
    """All windows sliding by one interval with targets in [start+T, stop).

    A window contributes a sample only if its T inputs, the target interval
    and the target's external row are all inside the series and valid;
    windows crossing gaps are dropped.  Stations shorter than T+1 intervals
    are excluded with a warning.
    """
    rows = []
    for si, st in enumerate(stations):
        n = len(st.usage_raw)
        if n < lookback + 1:
            log.warning("station %s: series length %d < %d, excluded",
                        st.station_id, n, lookback + 1)
            continue
        hi = min(stop if stop is not None else n, n)
        for end in range(max(lookback, start + lookback), hi):
            if st.valid[end - lookback:end + 1].all():
                rows.append((si, end))
    index = np.array(rows, dtype=int) if rows else np.zeros((0, 2), dtype=int)
    return SampleSet(stations=stations, index=index, lookback=lookback)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class AdamState:
    """Adaptive-moment gradient descent (b1=0.9, b2=0.999, eps=1e-8)."""

    def __init__(self, params: ModelParams):
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def update(self, params: ModelParams, grads: dict[str, np.ndarray],
               lr: float) -> None:
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            step = lr * (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + eps)
            params.tensors[k] -= step


class SgdState:
    def __init__(self, params: ModelParams):
        pass

    def update(self, params, grads, lr):
        for k, g in grads.items():
            params.tensors[k] -= lr * g


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Global L2-norm clipping; guards the long-unroll backward pass."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _dispatch(kind: str):
    if kind == "atcor":
        return atcor_apply, atcor_backward
    return baseline_apply, baseline_backward


@dataclass
class TrainResult:
    params: ModelParams
    loss_trace: np.ndarray            # (epochs,)
    monitor_trace: list[tuple[int, float]] = field(default_factory=list)
    sample_hash: str = ""


def evaluate_loss(params: ModelParams, batch: dict[str, np.ndarray]) -> float:
    apply_fn, _ = _dispatch(params.fingerprint.kind)
    pred, _ = apply_fn(params, batch)
    return float(((pred - batch["targets"]) ** 2).mean())


def train_cluster(samples: SampleSet, params: ModelParams, cfg: TrainConfig,
                  monitor: SampleSet | None = None,
                  diverge_checkpoint: Path | None = None) -> TrainResult:
    """Run the fixed-epoch training loop on one cluster's samples.

    Per epoch: one uniformly random batch (reshuffled each epoch), MSE over
    the two outputs, clipped gradient step.  Deterministic given cfg.seed.
    Divergence (non-finite loss or tensors) aborts with the last finite state
    saved to ``diverge_checkpoint`` when given.
    """
    if len(samples) == 0:
        raise ValueError("no training samples")
    apply_fn, backward_fn = _dispatch(params.fingerprint.kind)
    with_heatmaps = params.fingerprint.kind == "atcor"
    seq = np.random.SeedSequence(cfg.seed)
    batch_rng, drop_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    opt = AdamState(params) if cfg.optimizer == "adam" else SgdState(params)

    n = len(samples)
    take = min(cfg.batch_size, n)
    if take < cfg.batch_size:
        log.warning("only %d samples (< batch size %d); using all per epoch",
                    n, cfg.batch_size)

    monitor_batch = None
    if monitor is not None and len(monitor):
        monitor_batch = monitor.gather(np.arange(len(monitor)),
                                       with_heatmaps=with_heatmaps)

    trace = np.empty(cfg.epochs)
    monitor_trace: list[tuple[int, float]] = []
    best_monitor = np.inf
    stale = 0
    last_good = params.copy()

    for epoch in range(cfg.epochs):
        rows = batch_rng.permutation(n)[:take]
        batch = samples.gather(rows, with_heatmaps=with_heatmaps)
        loss, grads, _ = mse_loss_and_grads(
            params, batch, apply_fn, backward_fn,
            train=True, dropout=cfg.dropout, rng=drop_rng)
        if not np.isfinite(loss):
            if diverge_checkpoint is not None:
                save_checkpoint(last_good, diverge_checkpoint)
            raise TrainingDiverged(epoch, diverge_checkpoint)
        clip_gradients(grads, cfg.grad_clip_norm)
        opt.update(params, grads, cfg.learning_rate)
        trace[epoch] = loss

        if (epoch + 1) % cfg.finite_check_every == 0:
            if not params.check_finite():
                if diverge_checkpoint is not None:
                    save_checkpoint(last_good, diverge_checkpoint)
                raise TrainingDiverged(epoch, diverge_checkpoint)
            last_good = params.copy()
            if monitor_batch is not None:
                mloss = evaluate_loss(params, monitor_batch)
                monitor_trace.append((epoch, mloss))
                if cfg.early_stop:
                    if mloss < best_monitor - 1e-12:
                        best_monitor = mloss
                        stale = 0
                    else:
                        stale += cfg.finite_check_every
                        if stale >= cfg.early_stop_patience:
                            trace = trace[:epoch + 1]
                            break

    return TrainResult(params=params, loss_trace=trace,
                       monitor_trace=monitor_trace,
                       sample_hash=samples.sample_hash())


def write_loss_trace(result: TrainResult, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(result.loss_trace):
            fh.write(f"{i},{v:.9g}\n")
        if result.monitor_trace:
            fh.write("# monitor\n")
            for e, v in result.monitor_trace:
                fh.write(f"{e},{v:.9g}\n")
