"""Variational generator of fixed-endpoint Euclidean lattice paths.

Samples paths targeting the exp(-S_E/hbar) weight from a low-dimensional
latent space, trains by minimizing a variational free energy, and turns
trained generators into kernel and ground-state-density estimates checked
against independent oracles.
"""

from .lattice import (LatticeSpec, PathBatch, Potential, euclidean_action,
                      minimal_action_path, potential_value,
                      target_log_density_unnormalized)
from .model import (GmmSequence, ModelParams, encode_latent, init_model,
                    load_checkpoint, path_log_prob, sample_paths,
                    save_checkpoint)
from .training import (RunStats, TrainConfig, endpoint_penalties, kl_loss,
                       loss_gradient_step, per_path_free_energy, train)
from .estimator import (PropagatorEstimate, ScatterDiagnostic, error_bars,
                        estimate_free_energy, estimate_propagator,
                        ground_state_density, propagator_scan,
                        scatter_diagnostic)

__version__ = "0.1.0"
