"""misteri: causal inference with possibly invalid instruments.

Estimates the effect of a treatment on a continuous outcome together with an
odds-ratio selection-bias parameter, using instruments that may violate the
independence and exclusion assumptions.  Identification comes from
instrument-dependent outcome variance (heteroscedasticity).
"""

from .errors import (
    IdentificationError,
    InputError,
    MisteriError,
    NumericError,
    VarianceOverflowError,
)
from .estimators import (
    ClosedFormInput,
    EstimateResult,
    closed_form_binary,
    closed_form_from_moments,
    cmle_fit,
    one_step_update,
    stage1_fit,
    stage2_fit,
    stage3_fit,
    three_stage,
    tsls_baseline,
    wald_ci,
)
from .likelihood import (
    DiagnosticsReport,
    LikelihoodEval,
    evaluate,
    het_test,
    hessian,
    kappa_hat,
    loglik,
    score,
)
from .mixture import (
    MixtureFit,
    MixtureParams,
    alternating_fit,
    fit_mixture_residuals,
    mixture_conditional_mean,
    mixture_estimate,
    mixture_loglik,
    mixture_weights,
)
from .model import (
    Dataset,
    StageOneFit,
    Theta,
    center_treatment,
    mu_eval,
    sigma2_eval,
    standardized_residuals,
)
from .semiparam import (
    SemiparamFit,
    fit_np_mean,
    fit_np_variance,
    ghat_eval,
    semiparam_fit,
)
from .simulation import (
    KappaSweepResult,
    MonteCarloSummary,
    Scenario,
    default_mixture,
    fit_method,
    generate,
    kappa_sweep,
    run_monte_carlo,
    true_theta,
)

__version__ = "0.1.0"
