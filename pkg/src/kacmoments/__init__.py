"""Moment formulas for additive functionals of one-dimensional diffusions.

The engine evaluates iterated time-space integrals of heat-kernel products
against Revuz measures (occupation densities plus atoms), covering k-th
moments, ordered and permutation-summed mixed moments, killed-process
variants and exponential-moment bounds.  A path-simulation module provides
an independent Monte Carlo cross-check for every formula.
"""

from .kernels import (
    BrownianKernel,
    DomainError,
    DriftBrownianKernel,
    DualPair,
    ExtendedKernel,
    KilledBrownianKernel,
    ReflectedBrownianKernel,
    StateSpace,
    TransitionKernel,
    check_chapman_kolmogorov,
    check_duality,
    check_resolvent_equation,
    check_symmetry,
    default_lattice,
    drift_pair,
    eval_density,
    make_kernel,
    potential_density,
    survival_mass,
)
from .measures import (
    Density,
    KatoReport,
    PotentialProfile,
    RevuzMeasure,
    gaussian_bump,
    indicator_measure,
    integrate,
    kato_classify,
    lebesgue,
    point_mass,
    potential_of_measure,
    potential_profile,
)
from .moments import (
    ExpBoundReport,
    MomentRequest,
    MomentResult,
    Terminal,
    dispatch,
    exponential_bound,
    first_moment_with_terminal,
    kac_step,
    killed_variant,
    kth_moment,
    mixed_second_moment,
    moment_sequence,
    ordered_product_moment,
    permutation_sum_moment,
    restrict_to_domain,
    terminal_expectation,
)
from .montecarlo import (
    CompareResult,
    Composite,
    ConfigurationError,
    Discounted,
    LocalTime,
    McEstimate,
    Occupation,
    PathScheme,
    check_additivity,
    compare,
    estimate_discounted,
    estimate_moment,
    richardson_bias,
)
from .quadrature import DEFAULT_SPEC, NumericError, QuadratureSpec

__version__ = "0.1.0"
