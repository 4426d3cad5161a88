"""BatchNorm state with global and per-class running statistics.

A BN layer keeps the usual global running mean/variance plus one row of
running statistics per class. Rows are updated by an exponential moving
average with momentum ``eps_mom``; the calculator below answers how many
mixed batches are needed before every class row can be trusted.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from lpld import tensor as T
from lpld.errors import LabelStoreError, ShapeError

GLOBAL = None  # sentinel class-id for the global statistics row

STATS_MAGIC = b"LPLDSTAT"
STATS_VERSION = 1


@dataclass
class BNLayerState:
    """Scale/shift parameters plus global and per-class running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    global_rm: np.ndarray
    global_rv: np.ndarray
    classwise_rm: np.ndarray  # [num_classes, channels]
    classwise_rv: np.ndarray
    eps_mom: float = 0.1
    eps_div: float = 1e-5

    @classmethod
    def create(cls, channels: int, num_classes: int, eps_mom: float = 0.1,
               eps_div: float = 1e-5, dtype=np.float32) -> "BNLayerState":
        if not 0.0 < eps_mom < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {eps_mom}")
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            global_rm=np.zeros(channels, dtype=dtype),
            global_rv=np.ones(channels, dtype=dtype),
            classwise_rm=np.zeros((num_classes, channels), dtype=dtype),
            classwise_rv=np.ones((num_classes, channels), dtype=dtype),
            eps_mom=eps_mom,
            eps_div=eps_div,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def num_classes(self) -> int:
        return self.classwise_rm.shape[0]

    def seed_classwise_from_global(self):
        """Copy global rows into every class row (bounded initial deviation)."""
        self.classwise_rm[:] = self.global_rm[None, :]
        self.classwise_rv[:] = self.global_rv[None, :]

    def select(self, class_id):
        """Running statistics for GLOBAL or a class row."""
        if class_id is GLOBAL:
            return self.global_rm, self.global_rv
        class_id = int(class_id)
        if not 0 <= class_id < self.num_classes:
            raise ShapeError(f"class id {class_id} out of range [0, {self.num_classes})")
        return self.classwise_rm[class_id], self.classwise_rv[class_id]


def bn_apply(state: BNLayerState, x, mode: str = "eval", class_id=GLOBAL,
             gamma=None, beta=None):
    """Apply the BN transform.

    Train mode normalizes by batch statistics (population variance over
    batch x spatial elements per channel) and returns them; eval mode
    normalizes by the selected running statistics. Running statistics are
    never mutated here; see :func:`update_running`. ``gamma``/``beta`` may be
    graph tensors sharing the state buffers (so their gradients are recorded).
    """
    data = x.data if isinstance(x, T.Tensor) else np.asarray(x)
    channels = data.shape[1]
    if channels != state.channels:
        raise ShapeError(f"bn_apply: input has {channels} channels, state has {state.channels}")
    gamma = state.gamma if gamma is None else gamma
    beta = state.beta if beta is None else beta
    if mode == "train":
        y, mu, var = T.batchnorm_train(x, gamma, beta, state.eps_div)
        return y, mu, var
    if mode == "eval":
        rm, rv = state.select(class_id)
        return T.batchnorm_eval(x, gamma, beta, rm, rv, state.eps_div)
    raise ValueError(f"unknown mode {mode!r}")


def update_running(state: BNLayerState, class_id, batch_mu, batch_var=None):
    """EMA step for one row: RM <- (1-eps)*RM + eps*mu, same for RV.

    ``batch_var=None`` skips the variance update (degenerate class subsets).
    Only the addressed row changes.
    """
    rm, rv = state.select(class_id)
    eps = state.eps_mom
    mu = np.asarray(batch_mu, dtype=rm.dtype)
    rm *= (1.0 - eps)
    rm += eps * mu
    if batch_var is not None:
        var = np.asarray(batch_var, dtype=rv.dtype)
        if np.any(var < 0):
            raise ValueError("negative batch variance")
        rv *= (1.0 - eps)
        rv += eps * var


# ---- class stats table serialization --------------------------------------

def save_class_stats(states: list[BNLayerState], path):
    """Write all layers' global and per-class statistics (little-endian real32)."""
    if states:
        num_classes = states[0].num_classes
    else:
        num_classes = 0
    buf = io.BytesIO()
    buf.write(STATS_MAGIC)
    buf.write(struct.pack("<HHI", STATS_VERSION, len(states), num_classes))
    for st in states:
        buf.write(struct.pack("<I", st.channels))
        for arr in (st.global_rm, st.global_rv, st.classwise_rm, st.classwise_rv):
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as f:
        f.write(payload)
    return len(payload)


def class_stats_file_bytes(channel_counts, num_classes: int) -> int:
    """Exact size of the stats file for the given BN channel counts."""
    header = len(STATS_MAGIC) + struct.calcsize("<HHI")
    per_layer = sum(4 + 4 * (2 * c + 2 * num_classes * c) for c in channel_counts)
    return header + per_layer


def load_class_stats(path) -> list[dict]:
    """Read a stats file into per-layer dicts of arrays."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(STATS_MAGIC) + 8 or data[:8] != STATS_MAGIC:
        raise LabelStoreError(f"{path}: not a class-stats file")
    version, num_layers, num_classes = struct.unpack_from("<HHI", data, 8)
    if version != STATS_VERSION:
        raise LabelStoreError(f"{path}: unsupported stats version {version}")
    offset = 16
    layers = []
    for li in range(num_layers):
        if offset + 4 > len(data):
            raise LabelStoreError(f"{path}: truncated at layer {li}")
        (channels,) = struct.unpack_from("<I", data, offset)
        offset += 4
        need = 4 * (2 * channels + 2 * num_classes * channels)
        if offset + need > len(data):
            raise LabelStoreError(f"{path}: truncated at layer {li} payload")
        vecs = np.frombuffer(data, dtype="<f4", count=need // 4, offset=offset)
        offset += need
        c = channels
        layers.append({
            "channels": c,
            "global_rm": vecs[:c].copy(),
            "global_rv": vecs[c:2 * c].copy(),
            "classwise_rm": vecs[2 * c:2 * c + num_classes * c].reshape(num_classes, c).copy(),
            "classwise_rv": vecs[2 * c + num_classes * c:].reshape(num_classes, c).copy(),
        })
    if offset != len(data):
        raise LabelStoreError(f"{path}: {len(data) - offset} trailing bytes")
    return layers


def apply_class_stats(states: list[BNLayerState], layers: list[dict]):
    """Load table rows into live BN states, validating channel counts."""
    if len(states) != len(layers):
        raise LabelStoreError(f"stats file has {len(layers)} layers, network has {len(states)}")
    for i, (st, rec) in enumerate(zip(states, layers)):
        if st.channels != rec["channels"]:
            raise LabelStoreError(f"layer {i}: stats channels {rec['channels']} != network {st.channels}")
        if rec["classwise_rm"].shape[0] != st.num_classes:
            raise LabelStoreError(f"layer {i}: stats classes {rec['classwise_rm'].shape[0]} != network {st.num_classes}")
        st.global_rm[:] = rec["global_rm"]
        st.global_rv[:] = rec["global_rv"]
        st.classwise_rm[:] = rec["classwise_rm"]
        st.classwise_rv[:] = rec["classwise_rv"]


# ---- update-count bound -----------------------------------------------------

@dataclass
class BoundInputs:
    """Inputs for the stabilization bound on per-class statistic updates.

    T: total failure probability; delta: relative deviation tolerance for
    batch appearance counts; eps_mom: BN momentum; C: bound on the initial
    deviation of a row from its target; tau: convergence tolerance;
    min_pc: smallest per-image class probability; batch_size: images per batch.
    """

    T: float
    delta: float
    eps_mom: float
    C: float
    tau: float
    min_pc: float
    batch_size: int

    def __post_init__(self):
        if not 0.0 < self.T < 1.0:
            raise ValueError(f"T must be in (0,1), got {self.T}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0,1), got {self.delta}")
        if not 0.0 < self.eps_mom < 1.0:
            raise ValueError(f"eps_mom must be in (0,1), got {self.eps_mom}")
        if self.C <= 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.min_pc < 1.0:
            raise ValueError(f"min_pc must be in (0,1), got {self.min_pc}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class BoundResult:
    n_chernoff: float
    n_convergence: float
    n: int
    min_qc: float
    warning: str | None = None


def class_appearance_prob(min_pc: float, batch_size: int) -> float:
    """Probability that a class with image-probability min_pc shows up in a batch."""
    if not 0.0 < min_pc < 1.0:
        raise ValueError(f"min_pc must be in (0,1), got {min_pc}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return 1.0 - (1.0 - min_pc) ** batch_size


def required_updates(inputs: BoundInputs) -> BoundResult:
    """Number of batches after which all class rows are stable w.p. >= 1-T.

    The count is the max of a Chernoff term (rare classes appear often
    enough) and a convergence term (enough EMA steps to shrink the initial
    deviation below tau), each evaluated at the rarest class.
    """
    q = class_appearance_prob(inputs.min_pc, inputs.batch_size)
    n_chernoff = -2.0 * math.log(inputs.T / 2.0) / (inputs.delta ** 2 * q)
    n_convergence = math.log(inputs.C / inputs.tau) / ((1.0 - inputs.delta) * inputs.eps_mom * q)
    warning = None
    if inputs.tau >= inputs.C:
        warning = "tau >= C: convergence term is vacuous, bound uses Chernoff term only"
        n = math.ceil(n_chernoff)
    else:
        n = math.ceil(max(n_chernoff, n_convergence))
    return BoundResult(n_chernoff=n_chernoff, n_convergence=n_convergence, n=n, min_qc=q, warning=warning)


def monte_carlo_convergence(num_classes: int, class_probs, batch_size: int,
                            eps_mom: float, C: float, tau: float, n: int,
                            trials: int = 500, seed: int = 0) -> float:
    """Fraction of simulated runs where every class row converged within tau.

    Each trial samples n batch compositions; a class row's deviation starts
    at C and shrinks by (1-eps) whenever the class appears in a batch.
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    if probs.shape[0] != num_classes:
        raise ShapeError(f"class_probs has {probs.shape[0]} entries, expected {num_classes}")
    if not np.isclose(probs.sum(), 1.0, atol=1e-8):
        raise ValueError(f"class_probs must sum to 1, got {probs.sum()}")
    if n <= 0:
        return 0.0 if C > tau else 1.0
    # updates needed per class grows like ln(C/tau) / -ln(1-eps)
    need = 0 if C <= tau else math.ceil(math.log(C / tau) / -math.log1p(-eps_mom))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D63]))
    successes = 0
    for _ in range(trials):
        counts = rng.multinomial(batch_size, probs, size=n)  # [n, num_classes]
        appearances = (counts > 0).sum(axis=0)
        if np.all(appearances >= need):
            successes += 1
    return successes / trials
