"""Exception hierarchy shared across the package.

Every error carries a short machine-parseable ``category`` used by the CLI
for its single-line failure output.
"""


class SmmlError(Exception):
    category = "error"


class ConfigurationError(SmmlError):
    category = "config"


class ShapeError(SmmlError):
    category = "shape"


class FormatError(SmmlError):
    category = "format"


class IOError_(SmmlError):
    category = "io"


class ValidationError(SmmlError):
    category = "validation"


class TrainingError(SmmlError):
    category = "training"
