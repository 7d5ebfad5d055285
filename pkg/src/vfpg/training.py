"""Training: free-energy loss, score-function gradients, Adam, run statistics.

The loss per batch is the sampled free energy over hbar plus the endpoint
penalties.  The free-energy part is not differentiable through the mixture
sampling, so its gradient uses the likelihood-ratio form

    mean over batch of (F[x]/hbar - b) * grad log q(x | z),

with the batch mean of F/hbar as baseline b (valid because the expected score
is zero).  The penalties are ordinary backprop through the mixture parameters
of the first and last stamps.  One epoch is one pass over freshly drawn
latents; the latent pool is redrawn every epoch.

Randomness is counter-based: every generator is seeded from an entropy tuple
(seed, stream, epoch, batch), so runs are reproducible and batches are
independent.  Stream 0 is parameter initialization, stream 1 is sampling.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .lattice import LatticeSpec, PathBatch, Potential, action_batch
from .model import (GmmSequence, ModelParams, init_model, save_checkpoint,
                    stamp_log_prob_sum, unroll)

__all__ = [
    "TrainConfig",
    "RunStats",
    "AdamState",
    "TrainingAbort",
    "per_path_free_energy",
    "free_energy_values",
    "kl_loss",
    "endpoint_penalties",
    "score_function_gradients",
    "loss_gradient_step",
    "adam_update",
    "train",
    "batch_rng",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingAbort(RuntimeError):
    """Raised when training hits a non-finite loss or gradient."""

    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class TrainConfig:
    lattice: LatticeSpec
    potential: Potential
    learning_rate: float = 1e-4
    latent_sample_count: int = 2048
    batch_size: int = 128
    max_epochs: int = 3000
    seed: int = 0
    checkpoint_interval: int = 0
    checkpoint_dir: Optional[str] = None
    hidden_size: int = 64
    n_components: Optional[int] = None   # None: one component per batch row
    penalty_weight: float = 1.0
    midpoint_start: bool = False         # initialize mean head at the midpoint

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.latent_sample_count % self.batch_size != 0:
            raise ValueError("latent_sample_count must be divisible by batch_size")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.checkpoint_interval > 0 and self.checkpoint_dir is None:
            raise ValueError("checkpoint_interval set but no checkpoint_dir")

    @property
    def resolved_components(self) -> int:
        return self.batch_size if self.n_components is None else self.n_components


@dataclass
class RunStats:
    """Per-epoch training record; lengths all equal the epoch count."""

    f_mean: List[float] = field(default_factory=list)
    f_std: List[float] = field(default_factory=list)
    l1: List[float] = field(default_factory=list)
    l2: List[float] = field(default_factory=list)
    endpoint_dev_start: List[float] = field(default_factory=list)
    endpoint_dev_end: List[float] = field(default_factory=list)

    CSV_HEADER = "epoch,F_mean,F_std,L1,L2,endpoint_dev_start,endpoint_dev_end"

    def append(self, f_mean, f_std, l1, l2, dev_start, dev_end):
        if f_std < 0:
            raise ValueError("ensemble standard deviation cannot be negative")
        self.f_mean.append(float(f_mean))
        self.f_std.append(float(f_std))
        self.l1.append(float(l1))
        self.l2.append(float(l2))
        self.endpoint_dev_start.append(float(dev_start))
        self.endpoint_dev_end.append(float(dev_end))

    @property
    def n_epochs(self) -> int:
        return len(self.f_mean)

    @property
    def final_free_energy(self) -> float:
        return self.f_mean[-1]

    @property
    def final_free_energy_std(self) -> float:
        return self.f_std[-1]

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for i in range(self.n_epochs):
            lines.append(",".join([
                str(i),
                *(format(v, ".17g") for v in (
                    self.f_mean[i], self.f_std[i], self.l1[i], self.l2[i],
                    self.endpoint_dev_start[i], self.endpoint_dev_end[i],
                )),
            ]))
        return "\n".join(lines) + "\n"


def batch_rng(seed: int, stream: int, epoch: int = 0, batch: int = 0
              ) -> np.random.Generator:
    """Counter-based generator: entropy tuple (seed, stream, epoch, batch)."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=[int(seed), int(stream), int(epoch), int(batch)])
    )


def per_path_free_energy(path, log_q: float, lat: LatticeSpec,
                         pot: Potential) -> float:
    """F[x] = S_E[x] + hbar log q(x) for a single path."""
    from .lattice import euclidean_action
    return euclidean_action(path, lat, pot) + lat.hbar * float(log_q)


def free_energy_values(batch: PathBatch, lat: LatticeSpec,
                       pot: Potential) -> np.ndarray:
    """Per-path F over a batch; fills the batch's action in passing."""
    if batch.log_q is None:
        raise ValueError("batch has no log_q; sample it from the generator")
    if batch.action is None:
        batch.action = action_batch(batch.positions, lat, pot)
    return batch.action + lat.hbar * batch.log_q


def kl_loss(f_values, hbar: float) -> float:
    """mean(F)/hbar; the objective up to the constant log-partition shift."""
    f = np.asarray(f_values, dtype=float)
    if f.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(f)) / hbar


def endpoint_penalties(gmm: GmmSequence, lat: LatticeSpec) -> Tuple[float, float]:
    """Batch-averaged penalties pulling first/last stamps onto the endpoints.

    L1 = n_tau * sum_j [(mu_j(0) - x_start)^2 + sigma_j(0)^2], mirrored at the
    last stamp for L2.
    """
    def one(stamp: int, target: float) -> float:
        mu = gmm.means[:, stamp, :]
        sig = gmm.stds[:, stamp, :]
        per_row = ((mu - target) ** 2 + sig ** 2).sum(axis=-1)
        return lat.n_tau * float(per_row.mean())

    return one(0, lat.x_start), one(-1, lat.x_end)


def _penalty_tensor(um, stamp: int, target: float, n_tau: int) -> Tensor:
    _, mu, sigma = um.stamp(stamp)
    d = ad.sub(mu, ad.constant(target))
    per_row = ad.tensor_sum(ad.add(ad.mul(d, d), ad.mul(sigma, sigma)), axis=1)
    return ad.mul(ad.constant(float(n_tau)), ad.tensor_mean(per_row))


def score_function_gradients(model: ModelParams, z: np.ndarray,
                             positions: np.ndarray, coefficients: np.ndarray,
                             penalty_weight: float, lat: LatticeSpec
                             ) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
    """Gradients of mean(coefficients * log q) plus the endpoint penalties.

    ``coefficients`` are treated as constants, so the first part is exactly
    the likelihood-ratio estimate of the free-energy gradient when they are
    set to (F/hbar - baseline).  Returns gradients keyed by parameter name
    plus the penalty values.
    """
    coeff = np.asarray(coefficients, dtype=float) / len(coefficients)
    with Tape() as tape:
        um = unroll(model, Tensor(np.asarray(z, dtype=float)))
        log_q_vec = stamp_log_prob_sum(um, positions)
        surrogate = ad.tensor_sum(ad.mul(ad.constant(coeff), log_q_vec))
        l1 = _penalty_tensor(um, 0, lat.x_start, lat.n_tau)
        l2 = _penalty_tensor(um, -1, lat.x_end, lat.n_tau)
        penalty = ad.mul(ad.constant(penalty_weight), ad.add(l1, l2))
        total = ad.add(surrogate, penalty)
    grads = backward(tape, total)
    named = {}
    for name, tensor in model.parameters():
        g = grads.get(tensor)
        named[name] = np.zeros_like(tensor.value) if g is None else g
    info = {"l1": float(l1.value), "l2": float(l2.value),
            "log_q_check": log_q_vec.value}
    return named, info


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, model: ModelParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.value) for name, t in model.parameters()},
            v={name: np.zeros_like(t.value) for name, t in model.parameters()},
        )


def adam_update(model: ModelParams, grads: Dict[str, np.ndarray],
                state: AdamState, learning_rate: float) -> ModelParams:
    """One Adam step; parameters are swapped in as fresh tensors."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    new_values = {}
    for name, tensor in model.parameters():
        g = grads[name]
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        new_values[name] = tensor.value - learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return _rebuild(model, new_values)


def _rebuild(model: ModelParams, values: Dict[str, np.ndarray]) -> ModelParams:
    lstm = ad.LstmCellParams(
        input_weights=Tensor(values["lstm.input_weights"], requires_grad=True),
        hidden_weights=Tensor(values["lstm.hidden_weights"], requires_grad=True),
        bias=Tensor(values["lstm.bias"], requires_grad=True),
    )
    head = ad.DenseParams(weights=Tensor(values["head.weights"], requires_grad=True),
                          bias=Tensor(values["head.bias"], requires_grad=True))
    return ModelParams(lstm=lstm, head=head, hidden_size=model.hidden_size,
                       n_components=model.n_components, n_tau=model.n_tau,
                       latent_dim=model.latent_dim)


def sample_and_step(model: ModelParams, lat: LatticeSpec, pot: Potential,
                    z: np.ndarray, opt_state: AdamState, learning_rate: float,
                    penalty_weight: float, rng: np.random.Generator
                    ) -> Tuple[ModelParams, PathBatch, Dict[str, float]]:
    """Sample a batch and apply one step, sharing a single unroll.

    Equivalent to ``sample_paths`` followed by ``loss_gradient_step`` (the rng
    is consumed in the same per-stamp order), but the forward pass is not
    repeated.
    """
    from .model import (GmmSequence, gmm_sequence_log_prob,
                        sample_mixture_stamp, unroll)
    z = np.asarray(z, dtype=float)
    batch = z.shape[0]
    with Tape() as tape:
        um = unroll(model, Tensor(z))
        w = um.weights.value.reshape(model.n_tau, batch, -1)
        mu = um.means.value.reshape(model.n_tau, batch, -1)
        sg = um.stds.value.reshape(model.n_tau, batch, -1)
        positions = np.empty((batch, model.n_tau))
        for k in range(model.n_tau):
            positions[:, k] = sample_mixture_stamp(w[k], mu[k], sg[k], rng)
        gmm = GmmSequence(weights=w.transpose(1, 0, 2),
                          means=mu.transpose(1, 0, 2),
                          stds=sg.transpose(1, 0, 2))
        log_q = gmm_sequence_log_prob(gmm, positions)
        paths = PathBatch(positions=positions, log_q=log_q)
        paths.action = action_batch(positions, lat, pot)
        f = paths.action + lat.hbar * log_q
        f_over_h = f / lat.hbar
        coeff = (f_over_h - f_over_h.mean()) / batch
        log_q_vec = stamp_log_prob_sum(um, positions)
        surrogate = ad.tensor_sum(ad.mul(ad.constant(coeff), log_q_vec))
        l1 = _penalty_tensor(um, 0, lat.x_start, lat.n_tau)
        l2 = _penalty_tensor(um, -1, lat.x_end, lat.n_tau)
        penalty = ad.mul(ad.constant(penalty_weight), ad.add(l1, l2))
        total = ad.add(surrogate, penalty)
    grads = backward(tape, total)
    named = {}
    for name, tensor in model.parameters():
        g = grads.get(tensor)
        named[name] = np.zeros_like(tensor.value) if g is None else g
        if not np.all(np.isfinite(named[name])):
            raise TrainingAbort(f"non-finite gradient in {name}")
    new_model = adam_update(model, named, opt_state, learning_rate)
    diagnostics = {
        "f_mean": float(f.mean()),
        "f_std": float(f.std(ddof=1)) if f.size > 1 else 0.0,
        "kl_loss": kl_loss(f, lat.hbar),
        "l1": float(l1.value),
        "l2": float(l2.value),
        "endpoint_dev_start": float(np.mean(np.abs(positions[:, 0] - lat.x_start))),
        "endpoint_dev_end": float(np.mean(np.abs(positions[:, -1] - lat.x_end))),
    }
    return new_model, paths, diagnostics


def loss_gradient_step(model: ModelParams, lat: LatticeSpec, pot: Potential,
                       batch: Tuple[np.ndarray, PathBatch], opt_state: AdamState,
                       learning_rate: float, penalty_weight: float = 1.0
                       ) -> Tuple[ModelParams, Dict[str, float]]:
    """One optimizer step from a batch of (z, sampled paths with log_q).

    The batch must have been sampled from the current parameters; the stored
    log_q values are re-derived on the tape and checked against the inputs.
    """
    z, paths = batch
    f = free_energy_values(paths, lat, pot)
    f_over_h = f / lat.hbar
    baseline = f_over_h.mean()
    coeff = f_over_h - baseline
    grads, info = score_function_gradients(
        model, z, paths.positions, coeff, penalty_weight, lat
    )
    mismatch = np.max(np.abs(info["log_q_check"] - paths.log_q))
    if mismatch > 1e-8:
        raise ValueError(
            f"batch log_q disagrees with the current parameters by {mismatch:.3e}; "
            "sample the batch from the model being stepped"
        )
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient in {name}")
    new_model = adam_update(model, grads, opt_state, learning_rate)
    dev_start = float(np.mean(np.abs(paths.positions[:, 0] - lat.x_start)))
    dev_end = float(np.mean(np.abs(paths.positions[:, -1] - lat.x_end)))
    diagnostics = {
        "f_mean": float(f.mean()),
        "f_std": float(f.std(ddof=1)) if f.size > 1 else 0.0,
        "kl_loss": kl_loss(f, lat.hbar),
        "l1": info["l1"],
        "l2": info["l2"],
        "endpoint_dev_start": dev_start,
        "endpoint_dev_end": dev_end,
    }
    return new_model, diagnostics


def train(config: TrainConfig,
          initial_model: Optional[ModelParams] = None,
          epoch_callback=None) -> Tuple[ModelParams, RunStats]:
    """Full training loop; reproducible from the config seed.

    Per epoch, ``latent_sample_count`` latents are drawn in batches of
    ``batch_size``; each batch is sampled, scored, and stepped.  Checkpoints
    land in ``checkpoint_dir`` every ``checkpoint_interval`` epochs.  A
    non-finite loss or gradient aborts with the last good checkpoint retained.
    """
    lat, pot = config.lattice, config.potential
    if initial_model is None:
        init_rng = batch_rng(config.seed, 0)
        offset = 0.5 * (lat.x_start + lat.x_end) if config.midpoint_start else 0.0
        model = init_model(init_rng, n_tau=lat.n_tau,
                           hidden_size=config.hidden_size,
                           n_components=config.resolved_components,
                           mean_offset=offset)
    else:
        model = initial_model
    opt_state = AdamState.fresh(model)
    stats = RunStats()
    n_batches = config.latent_sample_count // config.batch_size
    last_checkpoint = None

    def write_checkpoint(tag: str) -> str:
        path = os.path.join(config.checkpoint_dir, f"checkpoint_{tag}.bin")
        save_checkpoint(model, path)
        return path

    for epoch in range(config.max_epochs):
        ep_f, ep_l1, ep_l2, ep_ds, ep_de = [], [], [], [], []
        for b in range(n_batches):
            rng = batch_rng(config.seed, 1, epoch, b)
            z = rng.standard_normal((config.batch_size, model.latent_dim))
            try:
                model, paths, diag = sample_and_step(
                    model, lat, pot, z, opt_state,
                    config.learning_rate, config.penalty_weight, rng,
                )
            except TrainingAbort as err:
                raise TrainingAbort(
                    f"epoch {epoch} batch {b}: {err}", last_checkpoint
                ) from err
            ep_f.append(paths.action + lat.hbar * paths.log_q)
            ep_l1.append(diag["l1"])
            ep_l2.append(diag["l2"])
            ep_ds.append(diag["endpoint_dev_start"])
            ep_de.append(diag["endpoint_dev_end"])
        f_all = np.concatenate(ep_f)
        if not np.all(np.isfinite(f_all)):
            raise TrainingAbort(f"non-finite free energy at epoch {epoch}",
                                last_checkpoint)
        stats.append(f_all.mean(), f_all.std(ddof=1),
                     np.mean(ep_l1), np.mean(ep_l2),
                     np.mean(ep_ds), np.mean(ep_de))
        if (config.checkpoint_interval > 0
                and (epoch + 1) % config.checkpoint_interval == 0):
            last_checkpoint = write_checkpoint(f"{epoch + 1:06d}")
        if epoch_callback is not None:
            epoch_callback(epoch, model, stats)
    if config.checkpoint_dir is not None:
        last_checkpoint = write_checkpoint("final")
    return model, stats
