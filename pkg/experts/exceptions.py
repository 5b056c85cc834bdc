class LabError(Exception):
    """Base class for every error raised by the routing lab."""


class InvalidArgument(LabError, ValueError):
    pass


class ConfigurationError(LabError):
    pass


class MissingArtifact(ConfigurationError):
    def __init__(self, path, produced_by=None):
        self.path = str(path)
        self.produced_by = produced_by
        message = f'Missing artifact: {self.path}'
        if produced_by:
            message += f" (run '{produced_by}' first)"
        super().__init__(message)


class CalibrationError(LabError):
    pass


class ContractViolation(LabError):
    pass
