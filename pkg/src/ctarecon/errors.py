"""Exception types raised across the reconstruction stack."""

from __future__ import annotations


class CTAError(Exception):
    """Base class for all package errors."""


class ConfigError(CTAError, ValueError):
    """Invalid or inconsistent configuration / input files."""


class DegenerateResolution(CTAError, ValueError):
    pass


class NonTangentialViolation(CTAError, ValueError):
    pass


class ChartUnavailable(CTAError, ValueError):
    pass


class EigenvalueProximity(CTAError):
    def __init__(self, margin: float, threshold: float):
        super().__init__(
            f"0 is within {margin:.3e} of the Dirichlet spectrum (threshold {threshold:.1e})"
        )
        self.margin = margin
        self.threshold = threshold


class WeightOverflow(CTAError):
    pass


class KernelAmbiguous(CTAError):
    def __init__(self, message: str, spectrum):
        super().__init__(message)
        self.spectrum = spectrum


class BeamDegenerate(CTAError):
    pass


class UnderResolved(CTAError):
    pass


class ContractionFailure(CTAError):
    pass


class EquationIllConditioned(CTAError):
    def __init__(self, h: float, margin: float):
        super().__init__(f"trace equation margin {margin:.3e} below threshold at h={h}")
        self.h = h
        self.margin = margin


class GridTooCoarse(CTAError, ValueError):
    pass


class AttenuationTooStrong(CTAError, ValueError):
    pass


class TaylorUnstable(CTAError):
    def __init__(self, k: int, amplification: float):
        super().__init__(f"Taylor order {k} amplifies noise by {amplification:.2e}")
        self.k = k
        self.amplification = amplification


class BoundaryLimitUnstable(CTAError):
    pass


class DataRecoveryNoisy(CTAError):
    pass
