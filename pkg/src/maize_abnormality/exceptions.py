"""Exception and warning types raised across the package."""


class MaizeAbnormalityError(Exception):
    """Base class for all package errors."""


# annotations / geometry
class MalformedExport(MaizeAbnormalityError, ValueError):
    pass


class MissingImageFile(MaizeAbnormalityError, FileNotFoundError):
    pass


class BoxOutOfBounds(MaizeAbnormalityError, ValueError):
    """One or more boxes violate the bounding-box invariants.

    ``errors`` holds ``(image_id, box_index, reason)`` tuples, one per
    rejected box.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        lines = [f"{image_id} box #{idx}: {reason}" for image_id, idx, reason in self.errors]
        super().__init__("invalid bounding boxes:\n  " + "\n  ".join(lines))


class SplitAssignmentError(MaizeAbnormalityError, ValueError):
    pass


class OddDimension(MaizeAbnormalityError, ValueError):
    pass


# tiling
class ExhaustedSampling(MaizeAbnormalityError, RuntimeError):
    pass


class RectOutOfBounds(MaizeAbnormalityError, ValueError):
    pass


class BoxTooLargeForTile(UserWarning):
    """Emitted when a box can never be fully contained in a tile."""


# segmentation
class ImageDecodeError(MaizeAbnormalityError, OSError):
    pass


# models
class ShapeMismatch(MaizeAbnormalityError, ValueError):
    pass


class EmptyManifest(MaizeAbnormalityError, ValueError):
    pass


class SingularScatter(MaizeAbnormalityError, ValueError):
    pass


class GeometryMismatch(MaizeAbnormalityError, ValueError):
    pass


class MixedLabels(MaizeAbnormalityError, ValueError):
    pass


class MissingTarget(MaizeAbnormalityError, KeyError):
    pass


class NoWindows(MaizeAbnormalityError, ValueError):
    pass


# quantification
class CountMismatch(MaizeAbnormalityError, ValueError):
    pass


class NegativeProbability(MaizeAbnormalityError, ValueError):
    pass


class DegenerateVariance(MaizeAbnormalityError, ValueError):
    pass


# pipeline
class ConfigError(MaizeAbnormalityError, ValueError):
    pass


class MissingArtifact(MaizeAbnormalityError, FileNotFoundError):
    pass
