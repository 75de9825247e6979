"""Bundled analytic demo scenes.

Two canonical fixtures: a minimal two-sphere scene and a face-like scene
(skin sphere, ear capsules, eye spheres, nose capsule, mouth box) whose five
classes match the bundled semantic palette.  ``resolve_scene`` turns the
scene spec strings used in job configs ("two-sphere", "face@ear_scale=1.6",
or a path to a scene JSON) into a field plus density parameters.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError
from .field import (
    Capsule,
    CompositeField,
    DensityParams,
    GlobalMode,
    RoundedBox,
    Sphere,
    Union,
    load_scene,
)
from .render import CATMASK_PALETTE


def _pal(i: int) -> tuple:
    r, g, b = CATMASK_PALETTE[i]
    return (r / 255.0, g / 255.0, b / 255.0)


def sphere_scene(
    *, radius: float = 1.0, alpha: float = 0.04, extent: float = 4.0
) -> tuple[CompositeField, DensityParams]:
    """Single sphere at the origin, one semantic class."""
    field = CompositeField(
        locals=[Sphere((0.0, 0.0, 0.0), radius, class_id=0, color=_pal(1))],
        global_mode=GlobalMode.EXACT_COMPOSITE,
        extent=extent,
    )
    return field, DensityParams(alpha=alpha)


def two_sphere_scene(
    *, radius: float = 0.8, separation: float = 2.0, alpha: float = 0.04, extent: float = 4.0
) -> tuple[CompositeField, DensityParams]:
    """Two spheres on the x axis, one semantic class each."""
    half = separation / 2.0
    field = CompositeField(
        locals=[
            Sphere((-half, 0.0, 0.0), radius, class_id=0, color=_pal(1)),
            Sphere((half, 0.0, 0.0), radius, class_id=1, color=_pal(2)),
        ],
        global_mode=GlobalMode.EXACT_COMPOSITE,
        extent=extent,
    )
    return field, DensityParams(alpha=alpha)


def face_scene(
    ear_scale: float = 1.0, *, alpha: float = 0.04, extent: float = 3.4
) -> tuple[CompositeField, DensityParams]:
    """Face-like scene: skin, ears, eyes, nose, mouth (classes 0-4).

    ``ear_scale`` grows the ear capsules (radius and length) about their inner
    anchor — the substrate of the "enlarge ears" editing demo.  The camera
    convention looks down -z, so the facial features sit on the +z hemisphere.
    """
    if ear_scale <= 0:
        raise ConfigError("ear_scale must be positive")

    def ear(side: float) -> Capsule:
        anchor = (side * 0.62, 0.45, 0.0)
        tip = (side * (0.62 + 0.43 * ear_scale), 0.45 + 0.35 * ear_scale, 0.0)
        return Capsule(anchor, tip, 0.16 * ear_scale, class_id=1, color=_pal(2))

    field = CompositeField(
        locals=[
            Sphere((0.0, 0.0, 0.0), 1.0, class_id=0, color=_pal(1)),
            Union([ear(-1.0), ear(1.0)], class_id=1, color=_pal(2)),
            Union(
                [
                    Sphere((-0.35, 0.25, 0.88), 0.13, class_id=2, color=_pal(3)),
                    Sphere((0.35, 0.25, 0.88), 0.13, class_id=2, color=_pal(3)),
                ],
                class_id=2,
                color=_pal(3),
            ),
            Capsule((0.0, 0.06, 1.02), (0.0, -0.12, 1.02), 0.10, class_id=3, color=_pal(4)),
            RoundedBox((0.0, -0.42, 0.86), (0.26, 0.07, 0.06), 0.03, class_id=4, color=_pal(5)),
        ],
        global_mode=GlobalMode.EXACT_COMPOSITE,
        extent=extent,
    )
    return field, DensityParams(alpha=alpha)


BUILTIN_SCENES = {
    "sphere": sphere_scene,
    "two-sphere": two_sphere_scene,
    "face": face_scene,
}


def resolve_scene(spec: str) -> tuple[CompositeField, DensityParams]:
    """Scene spec -> (field, params): builtin name[@k=v,...] or a JSON path."""
    if not isinstance(spec, str) or not spec:
        raise ConfigError(f"invalid scene spec: {spec!r}")
    name, _, arg_text = spec.partition("@")
    if name in BUILTIN_SCENES:
        kwargs = {}
        if arg_text:
            for item in arg_text.split(","):
                key, sep, value = item.partition("=")
                if not sep:
                    raise ConfigError(f"bad scene argument {item!r} in {spec!r}")
                try:
                    kwargs[key.strip()] = float(value)
                except ValueError:
                    raise ConfigError(f"scene argument {item!r} is not numeric") from None
        try:
            return BUILTIN_SCENES[name](**kwargs)
        except TypeError as e:
            raise ConfigError(f"bad arguments for scene {name!r}: {e}") from None
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        return load_scene(path)
    raise ConfigError(f"unknown scene {spec!r} (builtins: {sorted(BUILTIN_SCENES)})")
