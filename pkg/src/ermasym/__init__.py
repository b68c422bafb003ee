"""Asymptotic performance of convex ERM for binary linear classification.

Predictions for a given loss, the best correlation any convex loss can reach,
the loss that reaches it, and Monte Carlo checks of all three.
"""
from .errors import (AchievabilityFailed, DensityNotDifferentiable, DivergingIterates,
                     ErmasymError, MeanNotPositive, NoConvergence, NonConvexInner,
                     NonFiniteIntegrand, NoRoot, NotTwiceDifferentiable, OptimizerDiverged,
                     ProxNonConvergence, QuadratureNonConvergence, SeparableData,
                     SeparableDataError, SigmaTooSmall)
from .limits import (density_w, fisher_w, kappa, ls_suboptimality, sigma_opt,
                     stam_lower_bound)
from .link_models import (GaussianSY, Logistic, NoisySigned, Probit, Signed, TabulatedModel,
                          load_tabulated_model, make_model, sample_pairs)
from .losses import (LAD, Exponential, Hinge, LogisticLoss, ScaledLoss, Square, TabulatedLoss,
                     envelope, make_loss, prox)
from .optimal_loss import (build_optimal_loss, logconcavity_check, load_loss_table,
                           verify_achievability)
from .quadrature import expect_gsy, make_rule
from .saddle import (SaddleSolution, SolverOptions, ls_closed_form, solve_system,
                     stationarity_check)
from .simulate import (Experiment, is_separable, run_experiment, separability_threshold,
                       threshold_curve)

__version__ = "0.1.0"
