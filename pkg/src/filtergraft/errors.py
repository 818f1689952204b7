"""Exception types shared across the package."""


class FiltergraftError(Exception):
    """Base class for all errors raised by this package."""


class InvalidSpecError(FiltergraftError):
    """An architecture spec violates one of its invariants."""


class ShapeMismatchError(FiltergraftError):
    """Tensor or weight shapes are incompatible for the requested operation."""


class KernelSizeMismatchError(FiltergraftError):
    """Source and target depthwise kernels have different spatial sizes."""


class HeterogeneousKernelSizeError(FiltergraftError):
    """A filter bank mixes kernels of different spatial sizes."""


class InsufficientStackError(FiltergraftError):
    """A flattened filter stack has fewer kernels than the target demands."""

    def __init__(self, supply: int, demand: int):
        self.supply = supply
        self.demand = demand
        super().__init__(
            f"stack supplies {supply} kernels but target demands {demand}"
        )


class UnknownParameterError(FiltergraftError):
    """A freeze mask names a parameter the model does not have."""


class UnknownDatasetError(FiltergraftError):
    """Dataset name is not in the registry."""


class NoSplitTableError(FiltergraftError):
    """No semantic split table is registered for the dataset."""


class DownloadError(FiltergraftError):
    """A dataset download failed."""


class DigestMismatchError(FiltergraftError):
    """Cached or downloaded content does not match its recorded digest."""


class DuplicateRunError(FiltergraftError):
    """A run with the same config digest already exists in the store."""

    def __init__(self, run_id: str, config_digest: str):
        self.run_id = run_id
        self.config_digest = config_digest
        super().__init__(
            f"run with config digest {config_digest} already stored as {run_id}"
        )


class IncompleteMatrixError(FiltergraftError):
    """A transfer matrix is missing cells required for rendering."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"matrix incomplete, missing cells: {self.missing}")


class MaskViolationError(FiltergraftError):
    """A frozen parameter changed during training (implementation bug)."""


class ZeroBaselineError(FiltergraftError):
    """Retention is undefined for a zero or negative baseline accuracy."""


class EmptyLayerError(FiltergraftError):
    """A filter-grid layer selector matched no kernels."""


class NoRecordsError(FiltergraftError):
    """A report was requested for a tag with no records in the store."""
