"""Exception types raised across the package."""


class NoduleCloudError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    code = "error"


class SlabOutOfBounds(NoduleCloudError):
    code = "slab_out_of_bounds"


class EmptyMask(NoduleCloudError):
    code = "empty_mask"


class NoMaskPoints(NoduleCloudError):
    code = "no_mask_points"


class DrawBudgetExhausted(NoduleCloudError):
    """Rejection loop ran out of draws; carries the partial sample."""

    code = "draw_budget_exhausted"

    def __init__(self, partial, draws):
        super().__init__(f"accepted {len(partial)} points after {draws} draws")
        self.partial = partial
        self.draws = draws


class DegenerateScale(NoduleCloudError):
    code = "degenerate_scale"


class SingleClassDataset(NoduleCloudError):
    code = "single_class_dataset"


class TooFewPoints(NoduleCloudError):
    code = "too_few_points"


class NoTruths(NoduleCloudError):
    code = "no_truths"


class PlacementFailure(NoduleCloudError):
    code = "placement_failure"


class TooFewScans(NoduleCloudError):
    code = "too_few_scans"


class MalformedFile(NoduleCloudError):
    code = "malformed_file"


class MalformedCloudFile(MalformedFile):
    code = "malformed_cloud_file"
