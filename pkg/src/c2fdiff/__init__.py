"""Coarse-to-fine diffusion sampling and time-step redistribution on analytic oracles."""

__version__ = "0.1.0"

from .c2f import (
    C2fPlan,
    RankCurve,
    c2f_sample,
    find_switch_time,
    pca_cut_index,
    rank_curve,
    renoise,
    select_switch_time,
    upsample,
)
from .estimators import C2FSampler, TRDSearch
from .metrics import (
    CostModel,
    CostReport,
    SamplingPlan,
    fit_gaussian,
    frechet_gaussian_distance,
    l2_batch,
    relative_macs,
)
from .oracle import (
    AnalyticDenoiser,
    Denoiser,
    GaussianMixtureModel,
    ResolutionFamily,
    blob_mixture,
    block_average,
    downsample_mixture,
    point_mass,
    posterior_x0_mean,
    predict_eps_analytic,
    sample_x0,
)
from .rng import BatchRng, RngStream, derive_stream
from .sampler import SamplerKind, Trajectory, ancestral_step, ddim_step, dpm_solver_pp_2m_step, run_sampler
from .schedule import (
    ContinuousSchedule,
    NoiseSchedule,
    TimeStepSequence,
    alpha_bar_at,
    forward_diffuse,
    linear_beta_schedule,
    uniform_sequence,
)
from .trd import (
    C2fReference,
    CalibrationSet,
    PlainReference,
    SearchTrace,
    TrdConfig,
    candidates,
    combined_init,
    evaluate_sequence,
    trd_search,
    trd_search_c2f,
)
