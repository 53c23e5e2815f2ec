"""Exception hierarchy shared by all cmcneck modules."""


class CmcneckError(Exception):
    """Base class for all library errors."""


class DomainViolation(CmcneckError):
    """A point or annulus leaves the valid chart domain."""


class NonPositiveDefinite(CmcneckError):
    """Metric evaluation produced a non-SPD matrix."""


class ScaleOutOfRange(CmcneckError):
    """Gluing scale t outside (0, epsilon^4)."""


class GroupMismatch(CmcneckError):
    """Incompatible quotient groups between glued pieces or fields."""


class CyclicTree(CmcneckError):
    """Gluing map is not one-to-one / the pattern has a cycle."""


class ResolutionTooLow(CmcneckError):
    """Node cloud failed its stencil validation."""


class DegenerateMetric(CmcneckError):
    """A supplied sphere metric field is not positive definite."""


class NearSingular(CmcneckError):
    """Spectral gap of a shifted operator below the safe threshold."""


class DegenerateEmbedding(CmcneckError):
    """Leaf tangent map loses rank."""


class StepFailure(CmcneckError):
    """Geodesic integrator breakdown."""


class GraphCollision(CmcneckError):
    """Normal graph exceeds the normal-injectivity estimate."""


class NoIntersection(CmcneckError):
    """A normal line misses the target surface during regraphing."""


class NotCMC(CmcneckError):
    """Leaf mean curvature varies beyond the allowed tolerance."""


class ContractFailure(CmcneckError):
    """Fixed-point iteration failed to contract."""


class FocalPoint(CmcneckError):
    """Shape operator blow-up along an equidistant evolution."""


class LeafCrossing(CmcneckError):
    """A foliation separation function is nonpositive somewhere."""


class GridTooCoarse(CmcneckError):
    """Radial grid too coarse for the requested consistency."""


class FitDegenerate(CmcneckError):
    """Decay-profile fit has too little or inconsistent signal."""


class ConfigError(CmcneckError):
    """Invalid run configuration."""
