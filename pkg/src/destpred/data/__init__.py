from .schema import (
    COMMAND_DIM,
    DEFAULT_FEATURE_DIM,
    CurvedRoad,
    DatasetSplit,
    Intent,
    PngRoad,
    SceneObject,
    SceneRecord,
    SchemaError,
    StraightRoad,
)

__all__ = [
    "COMMAND_DIM",
    "DEFAULT_FEATURE_DIM",
    "CurvedRoad",
    "DatasetSplit",
    "Intent",
    "PngRoad",
    "SceneObject",
    "SceneRecord",
    "SchemaError",
    "StraightRoad",
]
