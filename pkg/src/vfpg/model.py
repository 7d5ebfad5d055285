"""The path generator: 2-D Gaussian latent, repeated as LSTM input, mixture heads.

A latent vector z is drawn from a standard normal, repeated for every time
stamp, and run through an LSTM from zero initial states.  A dense head maps
each hidden state to ``n_components`` triples (mixing logit, mean, std
preactivation); softmax, identity, and softplus + floor turn those into a
Gaussian mixture per stamp.  Given z the per-stamp distributions are
independent, so paths are drawn by parallel per-stamp sampling and the path
log-density is the sum of per-stamp mixture log-densities evaluated at the
sampled positions, conditional on the generating z.

Endpoints are never clamped; the endpoint penalty terms of the training loss
pull the first and last stamps onto the required positions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import (DenseParams, LstmCellParams, Tensor, affine,
                       gmm_log_prob, slice_cols, softmax, softplus)
from .lattice import LatticeSpec, PathBatch

__all__ = [
    "SIGMA_FLOOR",
    "LATENT_DIM",
    "ModelParams",
    "GmmSequence",
    "UnrolledMixture",
    "init_model",
    "unroll",
    "encode_latent",
    "sample_paths",
    "path_log_prob",
    "stamp_log_prob_sum",
    "gmm_sequence_log_prob",
    "sample_mixture_stamp",
    "save_checkpoint",
    "load_checkpoint",
]

SIGMA_FLOOR = 1e-4
LATENT_DIM = 2
_CHECKPOINT_MAGIC = "vfpg-checkpoint"
_CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """All trainable tensors of the generator plus its shape metadata."""

    lstm: LstmCellParams
    head: DenseParams
    hidden_size: int
    n_components: int
    n_tau: int
    latent_dim: int = LATENT_DIM

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.latent_dim != LATENT_DIM:
            raise ValueError(f"latent_dim is fixed to {LATENT_DIM}")
        self.lstm.validate()
        if self.head.weights.value.shape != (self.hidden_size, 3 * self.n_components):
            raise ValueError("head weights shape inconsistent with metadata")
        for name, t in self.parameters():
            if not np.all(np.isfinite(t.value)):
                raise ValueError(f"parameter {name} contains non-finite values")

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [
            ("lstm.input_weights", self.lstm.input_weights),
            ("lstm.hidden_weights", self.lstm.hidden_weights),
            ("lstm.bias", self.lstm.bias),
            ("head.weights", self.head.weights),
            ("head.bias", self.head.bias),
        ]


@dataclass
class GmmSequence:
    """Per-stamp mixture parameters, shaped (batch, n_tau, n_components)."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w, m, s = (np.asarray(a, dtype=float) for a in
                   (self.weights, self.means, self.stds))
        if not (w.shape == m.shape == s.shape) or w.ndim != 3:
            raise ValueError("mixture arrays must share a (batch, n_tau, n_c) shape")
        sums = w.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-9) or np.any(w < -1e-12):
            raise ValueError("mixing weights must lie on the simplex")
        if np.any(s < SIGMA_FLOOR * (1.0 - 1e-12)):
            raise ValueError(f"stds must respect the {SIGMA_FLOOR} floor")
        self.weights, self.means, self.stds = w, m, s

    @property
    def batch_size(self) -> int:
        return self.weights.shape[0]

    @property
    def n_tau(self) -> int:
        return self.weights.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[2]


def init_model(rng: np.random.Generator, n_tau: int, hidden_size: int = 64,
               n_components: int = 8, feedback_input: bool = False,
               mean_offset: float = 0.0) -> ModelParams:
    """Fresh generator parameters.

    ``mean_offset`` shifts the bias of the mean head, so initial paths start
    near that position instead of zero; campaigns set it to the endpoint
    midpoint to spare the early mean-path journey.  ``feedback_input`` is
    reserved for a variant that feeds sampled positions back into the
    recurrence; it is not implemented.
    """
    if feedback_input:
        raise NotImplementedError(
            "sampled-position feedback is reserved but not implemented"
        )
    lstm = ad.init_lstm_params(rng, LATENT_DIM, hidden_size)
    head = ad.init_dense_params(rng, hidden_size, 3 * n_components)
    if mean_offset != 0.0:
        head.bias.value[n_components:2 * n_components] = mean_offset
    return ModelParams(lstm=lstm, head=head, hidden_size=hidden_size,
                       n_components=n_components, n_tau=n_tau)


@dataclass
class UnrolledMixture:
    """Stamp-major mixture tensors from one unroll: rows are (stamp, batch).

    ``weights``/``means``/``stds`` have shape (n_tau * batch, n_components)
    with stamp k occupying rows [k * batch, (k + 1) * batch).  Keeping the
    whole sequence in three tensors keeps tapes short.
    """

    weights: Tensor
    means: Tensor
    stds: Tensor
    batch_size: int
    n_tau: int

    def stamp(self, k: int) -> Tuple[Tensor, Tensor, Tensor]:
        k = k % self.n_tau
        lo, hi = k * self.batch_size, (k + 1) * self.batch_size
        return (ad.slice_rows(self.weights, lo, hi),
                ad.slice_rows(self.means, lo, hi),
                ad.slice_rows(self.stds, lo, hi))


def unroll(model: ModelParams, z: Tensor) -> UnrolledMixture:
    """Run the repeated-input LSTM and mixture heads over all stamps.

    Records on the active tape, so the returned tensors are differentiable
    with respect to the model parameters.  The input projection of z is shared
    by every stamp and computed once; the head applies to all hidden states in
    one affine map.
    """
    if z.value.ndim != 2 or z.value.shape[1] != model.latent_dim:
        raise ValueError(f"z must be (batch, {model.latent_dim}), got {z.value.shape}")
    batch = z.value.shape[0]
    nc = model.n_components
    base = affine(z, model.lstm.input_weights, model.lstm.bias)
    h = Tensor(np.zeros((batch, model.hidden_size)))
    c = Tensor(np.zeros((batch, model.hidden_size)))
    hiddens = []
    for _ in range(model.n_tau):
        h, c = ad.lstm_step_fused(base, model.lstm.hidden_weights, h, c)
        hiddens.append(h)
    stacked = ad.concat_rows(hiddens)
    head = affine(stacked, model.head.weights, model.head.bias)
    gamma = softmax(slice_cols(head, 0, nc), axis=-1)
    mu = slice_cols(head, nc, 2 * nc)
    sigma = ad.add(softplus(slice_cols(head, 2 * nc, 3 * nc)),
                   ad.constant(SIGMA_FLOOR))
    return UnrolledMixture(weights=gamma, means=mu, stds=sigma,
                           batch_size=batch, n_tau=model.n_tau)


def _to_batch_major(flat: np.ndarray, batch: int, n_tau: int) -> np.ndarray:
    return flat.reshape(n_tau, batch, -1).transpose(1, 0, 2)


def encode_latent(model: ModelParams, z: np.ndarray) -> GmmSequence:
    """Deterministic map from latent draws to per-stamp mixture parameters."""
    um = unroll(model, Tensor(np.asarray(z, dtype=float)))
    b, t = um.batch_size, um.n_tau
    return GmmSequence(
        weights=_to_batch_major(um.weights.value, b, t),
        means=_to_batch_major(um.means.value, b, t),
        stds=_to_batch_major(um.stds.value, b, t),
    )


def sample_mixture_stamp(weights: np.ndarray, means: np.ndarray,
                         stds: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One position per batch row from a (batch, n_c) mixture.

    Consumes one uniform draw (component choice) then one normal draw per row,
    in that order; callers rely on this for reproducibility.
    """
    u = rng.random(weights.shape[0])
    cum = np.cumsum(weights, axis=-1)
    idx = np.minimum((u[:, None] > cum).sum(axis=-1), weights.shape[1] - 1)
    eps = rng.standard_normal(weights.shape[0])
    rows = np.arange(weights.shape[0])
    return means[rows, idx] + stds[rows, idx] * eps


def gmm_sequence_log_prob(gmm: GmmSequence, positions: np.ndarray) -> np.ndarray:
    """Sum over stamps of the mixture log-density at the given positions."""
    x = np.asarray(positions, dtype=float)
    if x.shape != gmm.weights.shape[:2]:
        raise ValueError(f"positions shape {x.shape} does not match mixture "
                         f"shape {gmm.weights.shape[:2]}")
    z = (x[..., None] - gmm.means) / gmm.stds
    log_norm = -0.5 * np.log(2.0 * np.pi) - np.log(gmm.stds) - 0.5 * z * z
    with np.errstate(divide="ignore"):
        comp = np.where(gmm.weights > 0,
                        np.log(np.maximum(gmm.weights, 1e-300)), -np.inf) + log_norm
    mx = comp.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    per_stamp = (mx + np.log(np.exp(comp - mx).sum(axis=-1, keepdims=True))).squeeze(-1)
    return np.cumsum(per_stamp, axis=1)[:, -1]


def sample_paths(model: ModelParams, z: np.ndarray, lat: LatticeSpec,
                 rng: np.random.Generator) -> PathBatch:
    """Draw one path per latent row; log_q is conditional on that row's z.

    Per stamp: component ~ Categorical(weights), position ~ Normal(mean, std).
    Endpoint stamps are sampled like any other; nothing is clamped.
    """
    if model.n_tau != lat.n_tau:
        raise ValueError(f"model built for n_tau={model.n_tau}, lattice has "
                         f"{lat.n_tau}")
    gmm = encode_latent(model, z)
    batch = gmm.batch_size
    positions = np.empty((batch, lat.n_tau))
    for k in range(lat.n_tau):
        positions[:, k] = sample_mixture_stamp(
            gmm.weights[:, k, :], gmm.means[:, k, :], gmm.stds[:, k, :], rng
        )
    log_q = gmm_sequence_log_prob(gmm, positions)
    return PathBatch(positions=positions, log_q=log_q)


def path_log_prob(model: ModelParams, z, paths) -> Tensor:
    """Differentiable conditional log-density of given paths under given z.

    Accepts a single (latent, path) pair or batched arrays; returns a tensor
    of per-row log-densities.
    """
    z = np.asarray(z, dtype=float)
    x = np.asarray(paths, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    if x.ndim == 1:
        x = x[None, :]
    if x.shape != (z.shape[0], model.n_tau):
        raise ValueError(f"paths shape {x.shape} does not match batch "
                         f"{z.shape[0]} x n_tau {model.n_tau}")
    um = unroll(model, Tensor(z))
    return stamp_log_prob_sum(um, x)


def stamp_log_prob_sum(um: UnrolledMixture, positions: np.ndarray) -> Tensor:
    """Per-row sums of stamp mixture log-densities for an unrolled sequence."""
    flat = ad.constant(positions.T.reshape(-1))  # stamp-major like the tensors
    per_row = gmm_log_prob(um.weights, um.means, um.stds, flat)
    return ad.tensor_sum(ad.reshape(per_row, (um.n_tau, um.batch_size)), axis=0)


# ----------------------------------------------------------------------------
# checkpoint format: text header, then little-endian float64 arrays in order
# ----------------------------------------------------------------------------

def save_checkpoint(model: ModelParams, path) -> None:
    names = [name for name, _ in model.parameters()]
    tensors = dict(model.parameters())
    buf = io.StringIO()
    buf.write(f"{_CHECKPOINT_MAGIC} {_CHECKPOINT_VERSION}\n")
    buf.write(f"hidden_size {model.hidden_size}\n")
    buf.write(f"n_components {model.n_components}\n")
    buf.write(f"n_tau {model.n_tau}\n")
    buf.write(f"latent_dim {model.latent_dim}\n")
    for name in names:
        shape = " ".join(str(n) for n in tensors[name].value.shape)
        buf.write(f"tensor {name} {shape}\n")
    buf.write("end\n")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue().encode("ascii"))
        for name in names:
            fh.write(np.ascontiguousarray(tensors[name].value, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    header_end = raw.index(b"end\n") + len(b"end\n")
    lines = raw[:header_end].decode("ascii").splitlines()
    magic = lines[0].split()
    if magic[0] != _CHECKPOINT_MAGIC or int(magic[1]) != _CHECKPOINT_VERSION:
        raise ValueError(f"not a recognized checkpoint: {lines[0]!r}")
    meta = {}
    tensor_specs = []
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "end":
            break
        if parts[0] == "tensor":
            tensor_specs.append((parts[1], tuple(int(v) for v in parts[2:])))
        else:
            meta[parts[0]] = int(parts[1])
    offset = header_end
    arrays = {}
    for name, shape in tensor_specs:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arrays[name] = np.frombuffer(
            raw, dtype="<f8", count=count, offset=offset
        ).reshape(shape).astype(float)
        offset += nbytes
    lstm = LstmCellParams(
        input_weights=Tensor(arrays["lstm.input_weights"], requires_grad=True),
        hidden_weights=Tensor(arrays["lstm.hidden_weights"], requires_grad=True),
        bias=Tensor(arrays["lstm.bias"], requires_grad=True),
    )
    head = DenseParams(weights=Tensor(arrays["head.weights"], requires_grad=True),
                       bias=Tensor(arrays["head.bias"], requires_grad=True))
    return ModelParams(lstm=lstm, head=head, hidden_size=meta["hidden_size"],
                       n_components=meta["n_components"], n_tau=meta["n_tau"],
                       latent_dim=meta["latent_dim"])
