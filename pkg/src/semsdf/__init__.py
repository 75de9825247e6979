"""Compositional semantic SDF fields: rendering, fitting, and mask-driven editing.

A scene is a set of per-class signed distance fields plus a global SDF tied
together by consistency losses.  Rendering converts signed distance to density
and per-class semantic weight, then volume-integrates color, labels, normals,
and depth.  Editing clones a fitted generator, optimizes the clone against a
target segmentation via score distillation on image and normal renderings,
and fuses frozen and edited fields through a 3D semantic mask.
"""

from .config import CameraSpec, EditJob, FitJob, JOB_TYPES, MetricsJob, RenderJob, load_job
from .distill import (
    ConstantScoreModel,
    DiffusionSchedule,
    GaussianOracleScoreModel,
    LatentCodec,
    PerfectDenoiser,
    RemoteScoreModel,
    ScoreModel,
    add_noise,
    cdgt_grad,
    mask_color_mean,
    read_frame,
    sds_grad,
    serve_score_model,
    update_condition,
    weight_one,
    weight_sigma_sq,
    write_frame,
)
from .errors import ConfigError, InputError, MetricUndefined, NumericsError
from .field import (
    Capsule,
    CompositeField,
    DensityParams,
    Ellipsoid,
    GlobalMode,
    HalfSpace,
    Primitive,
    RoundedBox,
    SdfSamples,
    Sphere,
    Union,
    eval_field,
    fd_gradient,
    load_scene,
    save_scene,
    sdf_gradient,
    sdf_to_density,
    sdf_to_semantic,
)
from .fit import run_fit
from .fusion import (
    EditState,
    EditWeights,
    FusedField,
    edit_step,
    evaluate_edit,
    fuse,
    infer_edit_classes,
    init_edit,
    photometric_locality,
    run_edit,
    semantic_3d_mask,
)
from .geometry import Mesh, chamfer_l1, extract_mesh, miou, normal_consistency, sample_mesh, save_obj, union_mesh
from .losses import (
    LossWeights,
    density_consistency,
    density_regularization,
    eikonal_loss,
    generator_losses,
    identity_proxy,
    minimal_surface_loss,
    sample_probes,
    sdf_consistency,
    segmentation_loss,
)
from .render import (
    CATMASK_PALETTE,
    Camera,
    RayBatch,
    RenderOutput,
    camera_rays,
    composite,
    default_palette,
    labels_to_color,
    load_depth_raw,
    load_image_png,
    load_mask_png,
    orbit_camera,
    render_mask,
    render_rays,
    render_scene,
    sample_along_rays,
    save_depth_raw,
    save_image_png,
    save_image_ppm,
    save_mask_png,
    semantic_probs_with_background,
    to_uint8,
)
from .scenes import BUILTIN_SCENES, face_scene, resolve_scene, sphere_scene, two_sphere_scene
from .triplane import (
    Decoder,
    TriPlane,
    TriPlanePair,
    decode,
    init_triplane_sphere,
    is_checkpoint,
    load_checkpoint,
    sample_triplane,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
