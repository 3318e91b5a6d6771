"""Exception hierarchy shared by all modules."""


class EvoAlignError(Exception):
    """Base class for every error raised by the package."""


class ParseError(EvoAlignError, ValueError):
    pass


class SamplingExhausted(EvoAlignError, RuntimeError):
    pass


class ShapeMismatch(EvoAlignError, ValueError):
    pass


class LengthMismatch(EvoAlignError, ValueError):
    pass


class TooFewStimuli(EvoAlignError, ValueError):
    pass


class DegenerateRDM(EvoAlignError, ValueError):
    pass


class RepeatAxisMissing(EvoAlignError, ValueError):
    pass


class UnevaluatedPopulation(EvoAlignError, ValueError):
    pass


class DatasetError(EvoAlignError):
    """Anything wrong with a dataset on disk; maps to CLI exit code 3."""


class FormatError(DatasetError, ValueError):
    pass


class DimensionMismatch(DatasetError, ValueError):
    pass


class MissingRegion(DatasetError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing region"


class ConfigError(EvoAlignError, ValueError):
    pass
