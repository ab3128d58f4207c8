"""Exception types shared across the package."""


class DiskSplatError(Exception):
    """Base class for all package errors."""


class SceneFormatError(DiskSplatError):
    """Manifest, image, or label map violates the documented format."""


class CheckpointError(DiskSplatError):
    """Checkpoint file is missing, malformed, or version-incompatible."""


class ExtractionError(DiskSplatError):
    """Target extraction produced an empty set for the requested ID."""


class MeshingError(DiskSplatError):
    """TSDF fusion or surface extraction cannot produce a mesh."""


class TrainingDiverged(DiskSplatError):
    """Loss became non-finite; a rescue checkpoint was written."""


class InpaintServiceError(DiskSplatError):
    """The inpainting service failed or violated its protocol."""
