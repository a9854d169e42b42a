class DepthForgeError(Exception):
    """Base class for every error raised by depthforge."""


class ModelLoadError(DepthForgeError, ValueError):
    """An MDL1 file could not be turned into a valid MorphableModel."""


class ModelHeaderError(ModelLoadError):
    pass


class ModelDimensionError(ModelLoadError):
    pass


class ModelPayloadLengthError(ModelLoadError):
    pass


class ModelNonFiniteError(ModelLoadError):
    pass


class TriangleIndexError(ModelLoadError):
    pass


class DegenerateTriangleError(ModelLoadError):
    pass


class ImageFormatError(DepthForgeError, ValueError):
    """A PGM/PPM file is malformed or truncated."""


class EmbeddingFormatError(DepthForgeError, ValueError):
    """An EMB1 or ACW1 file is malformed or truncated."""


class ManifestError(DepthForgeError, ValueError):
    pass


class DatasetGenerationError(DepthForgeError, RuntimeError):
    def __init__(self, message: str, partial_manifest: str | None, completed: int):
        super().__init__(message)
        self.partial_manifest = partial_manifest
        self.completed = completed


class ModalityMissingError(DepthForgeError, KeyError):
    def __init__(self, modality: str, context: str = ""):
        self.modality = modality
        detail = f"modality '{modality}' missing"
        if context:
            detail = f"{detail} ({context})"
        super().__init__(detail)

    def __str__(self) -> str:
        # KeyError would otherwise repr() the message
        return str(self.args[0])


class ConfigError(DepthForgeError, ValueError):
    pass
