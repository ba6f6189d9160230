"""Exception hierarchy shared across the pipeline."""


class CoEmoGenError(Exception):
    """Base class for all pipeline errors."""


class TaxonomyError(CoEmoGenError, ValueError):
    pass


class TemplateError(CoEmoGenError, ValueError):
    pass


class CurationError(CoEmoGenError):
    pass


class EncoderError(CoEmoGenError):
    pass


class ConfigurationError(CoEmoGenError, ValueError):
    pass


class AdapterError(CoEmoGenError):
    pass


class ScheduleError(CoEmoGenError, ValueError):
    pass


class LossError(CoEmoGenError, ValueError):
    pass


class DataError(CoEmoGenError, ValueError):
    pass


class TrainingError(CoEmoGenError):
    pass


class CompatibilityError(CoEmoGenError):
    pass


class ClusterError(CoEmoGenError):
    pass


class InputError(CoEmoGenError, ValueError):
    pass


class EvalError(CoEmoGenError, ValueError):
    pass
