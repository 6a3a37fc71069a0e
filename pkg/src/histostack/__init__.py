"""Serial-section histology reconstruction, registration, and evaluation."""

from .core_image import (
    Image2D,
    Image3D,
    ManifestEntry,
    PreprocessParams,
    SegmentationMask2D,
    StackManifest,
    gaussian_smooth_3d,
    load_section,
    load_volume,
    preprocess_section,
    pyramid,
    sample_bilinear,
    sample_trilinear,
    save_section,
    save_volume,
)
from .transforms import (
    Affine,
    DisplacementField,
    TransformChain,
    apply,
    compose,
    invert_affine,
    invert_chain,
    invert_field,
    jacobian_min_det,
    load_affine,
    load_chain,
    load_field,
    save_affine,
    save_chain,
    save_field,
    warp_image,
)
from .metrics import FeatureBatch, dice, dice_report_row, info_nce, joint_histogram, nmi
from .affine_reg import (
    AffineRegParams,
    AffineResult,
    RegistrationError,
    WeightedTargets,
    com_align,
    eval_multiterm,
    register_affine,
    register_affine_multiterm,
)
from .deformable_reg import DeformableRegParams, register_deformable, register_deformable_multiterm
from .stack_recon import (
    IterationSchedule,
    Phase,
    ReconstructionState,
    map_to_template,
    reconstruct_backlit,
    reconstruct_ish,
    render_stack,
)
from .landmark_eval import (
    CANONICAL_LANDMARKS,
    DisplacementReport,
    LandmarkSet,
    agreement_report,
    is_canonical,
    load_landmarks_csv,
    map_landmarks,
    pairwise_displacement,
    save_landmarks_csv,
)
from .phantom import PhantomManifests, PhantomSpec, PhantomTruth, generate

__version__ = "0.1.0"
