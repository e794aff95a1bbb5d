"""
Exception hierarchy for the estimation toolkit.

Every error raised on purpose by the package derives from OedOpfError so that
callers (the runner, the CLI) can catch a single type and keep partial results.
"""


class OedOpfError(Exception):
    """Base class for all errors raised by this package."""


# Case and configuration input

class CaseFormatError(OedOpfError, ValueError):
    pass


class MalformedBlock(CaseFormatError):
    pass


class InconsistentTopology(CaseFormatError):
    pass


class UnsupportedFeature(CaseFormatError):
    pass


class ConfigError(OedOpfError, ValueError):
    pass


class MissingField(ConfigError):
    pass


class OutOfRange(ConfigError):
    pass


# Grid model

class UnknownLine(OedOpfError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown line"


class DimensionMismatch(OedOpfError, ValueError):
    pass


# Power flow

class PowerFlowError(OedOpfError):
    pass


class SingularJacobian(PowerFlowError):
    pass


class NonConvergence(PowerFlowError):
    pass


class PFFailure(PowerFlowError):
    """The simulated (true) system could not be brought to a power-flow solution."""


# Nonlinear programming

class NLPError(OedOpfError):
    pass


class EvaluationFailure(NLPError):
    pass


class MaxIterations(NLPError):
    pass


class NLPFailure(NLPError):
    pass


class Infeasible(NLPError):
    pass


# Information and trade-off tuning

class NotPositiveDefinite(OedOpfError, ValueError):
    pass


class InformationDecrease(OedOpfError):
    pass


class AllSolvesFailed(OedOpfError):
    pass


class InsufficientSamples(OedOpfError, ValueError):
    pass


class DegenerateFit(OedOpfError, ValueError):
    pass


class HorizonExhausted(OedOpfError):
    pass


class ZeroTruthEntry(OedOpfError, ValueError):
    pass
