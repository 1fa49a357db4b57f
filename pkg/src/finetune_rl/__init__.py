"""Offline-to-online fine-tuning for linear MDPs: exact visitations, coverage
coefficients, experiment design and policy elimination."""

from ._validation import (
    BudgetExceededError,
    DimensionMismatchError,
    UnsatisfiableCoverageError,
    check_random_state,
)
from .design import (
    DesignObjective,
    EpisodicEnv,
    OraclePlanner,
    PolicyUCB,
    conditioned_cov,
    fw_regret,
    objective_eval,
    opt_cov,
)
from .ftpedel import eliminate, estimate_reward, ftpedel, ftpedel_se, propagate_visitation
from .instances import (
    InstanceBundle,
    gen_mab_verification,
    gen_minimax,
    gen_random_tabular,
    gen_separation,
)
from .mdp import (
    DeterministicPolicy,
    LinearMdp,
    MixturePolicy,
    NoiseModel,
    SoftmaxPolicy,
    StochasticPolicy,
    load_mdp,
    rollout,
    sample_episode,
    save_mdp,
    uniform_policy,
)
from .offline import (
    OfflineDataset,
    StepCovariates,
    c_o2o,
    concentrability,
    generate_offline,
    offline_covariates,
    t_o2o,
)
from .verify import (
    check_verifiability_condition,
    cover_softmax_class,
    offline_verify,
    verify_policy,
)
from .visitation import (
    PolicyClass,
    class_profiles,
    covariance_best_response,
    enumerate_det_policies,
    exact_profile,
    optimal_policy,
    policy_value,
    softmax_grid,
)

__version__ = "0.1.0"
