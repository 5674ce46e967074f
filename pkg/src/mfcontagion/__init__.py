"""Mean-field control with contagion through killing: particles, finite elements, policy gradients."""
from .errors import ConvergenceError, IllConditionedStep, NumericalBlowup
from .fem import SpdePath, assemble_A, evolve_batch, evolve_spde, mc_cost, path_costs, semi_implicit_step, spde_cost
from .measures import AtomicSubProb, Grid1D, SubProbGrid, dist_dp, empirical_of, mass_and_loss, moment, pair, wasserstein
from .model import CoefficientBundle, ScenarioConfig, bailout_coefficients, scenario_bailout, validate
from .particle import (NoisePath, ParticleEnsemble, kill_gap_stats, make_noise, martingale_variance, noise_paths,
                       simulate_particles)
from .policy import PolicyParams, init_params, load_checkpoint, params_for, policy_eval, save_checkpoint
from .singular import LossPathFamily, intensity_sweep, minimal_iteration, monotone_limit
from .train import TrainConfig, fd_gradient, grad_cost, sweep, train

__version__ = "0.1.0"
