"""Score-distillation image editing with a contrastive structure regularizer.

Library layout mirrors the pipeline: ``schedule`` (forward noising),
``backend`` (denoiser + feature taps), ``distill`` (SDS/DDS directions),
``cut`` (patch-wise contrastive loss), ``editor`` (the optimization loop
and generators), ``diagnostics`` (heatmaps, structure proxy, summaries),
``cli`` (edits, ablations, introspection).
"""

from .backend import (
    BackendDescriptor,
    DenoiserOutput,
    FeatureMap,
    GuidanceConfig,
    LatentDiffusionAdapter,
    TextEmbedding,
    ToyBackend,
    ToyBackendConfig,
    cfg_compose,
)
from .cut import (
    CutLoss,
    PatchConfig,
    PatchSet,
    extract_patches,
    info_nce,
    patchnce_loss,
    patchnce_loss_and_grad,
    sample_locations,
)
from .diagnostics import (
    Heatmap,
    StructureDistance,
    gradient_heatmap,
    self_similarity_distance,
    structure_distance_between_latents,
    summarize_run,
)
from .distill import BranchResult, DistillGrad, dds_grad, eval_branch, sds_grad
from .editor import (
    EditConfig,
    EditResult,
    EditState,
    cds_step,
    contrastive_term,
    decode_latent,
    encode_image,
    load_edit_state,
    run_edit,
    run_generator_edit,
    save_edit_state,
)
from .errors import BackendUnavailableError, NonFiniteUpdateError
from .generators import GridGenerator, IdentityLatentGenerator
from .schedule import (
    NoiseSchedule,
    TimestepRange,
    make_schedule,
    perturb,
    sample_timestep,
)

__version__ = "0.1.0"
