"""Robust attribution training: autodiff, Integrated Gradients, robust objectives and attacks."""

from .adversary import IfiaConfig, PgdConfig, ifia_topk, pgd_inner_max, pgd_prediction_attack
from .attribution import (ONE_NORM, SUM, AttributionMap, PathSpec, SizeFunction,
                          completeness_residual, ig_input, ig_layer, one_norm_pow, size)
from .metrics import EvalReport, evaluate, kendall_tau, topk_intersection
from .nn import Network, Sample, mlp
from .objectives import Neighborhood, ObjectiveSpec, Variant, inner_value, objective_grad

__version__ = "0.1.0"
