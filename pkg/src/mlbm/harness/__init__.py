"""Scene configuration, CLI, outputs, and validation experiments."""

from .config import (  # noqa: F401
    SceneConfig,
    SceneParseError,
    SceneValidationError,
    build_scene,
    load_scene,
    validate_scene,
)
