"""Flow-matching data assimilation on chaotic toy dynamics.

The package trains a conditional velocity field to transport model
forecasts (backgrounds) toward reference states (analyses) along a
straight-line probability path, conditioned on sparse observations lifted
onto the grid by a SetConv operator. Twin-experiment protocols, classical
baselines, and the CLI live under :mod:`fmda.harness`.
"""

from .baselines import OIConfig, interp_blend, optimal_interpolation
from .dynamics import (
    DynamicsConfig,
    IntegrationBlowupError,
    Trajectory,
    forecast,
    generate_dataset,
    make_background,
    rk4_step,
    rollout,
    tendency,
)
from .flow import (
    FlowConfig,
    ModelArch,
    TrainSample,
    VelocityModel,
    cfm_loss,
    cfm_loss_and_grad,
    euler_assimilate,
    euler_integrate,
    init_model,
    load_checkpoint,
    save_checkpoint,
    tau_embed,
    velocity,
)
from .grid import (
    GridShapeError,
    GridState,
    VariableStats,
    denormalize,
    lerp_states,
    normalize,
    rmse_per_variable,
)
from .obs import (
    EPS_RHO,
    GaussianKernel,
    LearnedKernel,
    LiftResult,
    ObservationSet,
    kernel_weight,
    local_rates,
    perturb_observations,
    read_observations_csv,
    sample_observations,
    setconv_lift,
    with_local_rates,
    write_observations_csv,
)
from .train import (
    AdamState,
    TrainConfig,
    adam_step,
    stage1_iteration,
    stage2_iteration,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
