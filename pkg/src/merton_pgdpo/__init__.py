"""Pontryagin-guided direct policy optimization for the Merton consumption-investment problem."""

from .errors import CheckpointError, ConfigError, DomainError, NumericError, PgdpoError, UsageError
from .model import (Domain, MarketParams, closed_form_consumption, closed_form_nu, closed_form_pi,
                    closed_form_policies, kappa_from_epsilon, utility, utility_prime)
from .nn import AdamState, Mlp, adam_step, mlp_init
from .pgdpo import (AdjointEstimate, PmpControls, TrainConfig, Trainer, adjoint_at_origin,
                    alignment_penalty, pmp_controls, train_pgdpo, train_pgdpo_reg)
from .evaluation import MetricsReport, empirical_utility, metrics_report, relative_mse

__version__ = "0.1.0"
