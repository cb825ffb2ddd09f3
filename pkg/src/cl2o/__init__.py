"""Learned optimizers that stay convergent by construction.

The package decomposes every update rule into a plain gradient step (which
carries the convergence certificate) plus a learnable finite-energy
innovation term, meta-trains the innovation through unrolled
differentiation, and ships executable diagnostics for the certificates.
"""

__version__ = "0.1.0"

from .autodiff import (
    AutodiffError,
    ComputationTape,
    NonFiniteError,
    ParamVector,
    Var,
    evaluate_with_tape,
    finite_difference_check,
    reverse_gradient,
)
from .objectives import (
    SmoothObjective,
    effective_beta,
    estimate_beta,
    make_classifier_objective,
    make_nonconvex_family,
    make_quadratic,
    make_separable_least_squares,
)
from .operators import (
    ContractingRecurrentOperator,
    FeatureNetwork,
    ImpulseSignal,
    InnovationEngine,
    assemble_features,
    innovation_batch,
    innovation_full,
    load_checkpoint,
    save_checkpoint,
)
from .rules import (
    CyclicRule,
    FullGradientRule,
    SequenceInnovation,
    StepsizeSchedule,
    Trajectory,
    rollout,
    schedule_energy,
    step_cyclic,
    step_full,
)
from .baselines import BaselineOptimizer, baseline_rollout, baseline_step, tune_learning_rate
from .metatrain import (
    MetaLossConfig,
    MetaTrainReport,
    TaskDistribution,
    estimate_expected_metaloss,
    meta_train,
    metaloss,
)
from .convergence import (
    ConvergenceReport,
    ReconstructedInnovation,
    equivalence_test,
    lemma1_monitor,
    mstep_recursion_residual,
    reconstruct_innovation,
    square_sum_diagnostics,
    theorem2_assumption_probe,
)
