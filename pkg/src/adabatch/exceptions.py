class AdaBatchError(Exception):
    pass


class ParseError(AdaBatchError):

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class EmptyDatasetError(AdaBatchError):
    pass


class ConfigError(AdaBatchError):
    pass


class StatsMismatchError(AdaBatchError):

    def __init__(self, coordinate: int):
        super().__init__(f"coordinate {coordinate} is active in the data but has p(k)=0 in the stats")
        self.coordinate = coordinate


class DivergenceError(AdaBatchError):

    def __init__(self, iteration: int, metrics=None):
        super().__init__(f"non-finite weights after iteration {iteration}")
        self.iteration = iteration
        self.metrics = metrics


class PreconditionError(AdaBatchError):

    def __init__(self, bound: str):
        super().__init__(f"precondition violated: {bound}")
        self.bound = bound


class EnumerationTooLarge(AdaBatchError):
    pass


class UsageError(AdaBatchError):
    pass


class VerificationError(AdaBatchError):
    pass


class GridDivergedError(AdaBatchError):
    pass
