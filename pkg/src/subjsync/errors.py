class SubjSyncError(Exception):
    pass


class ConfigError(SubjSyncError, ValueError):
    pass


class ShapeError(SubjSyncError, ValueError):
    pass


class DegenerateError(SubjSyncError, ArithmeticError):
    """Fully blocked softmax row or zero-length vector."""


class MissingEntryError(SubjSyncError, KeyError):
    pass


class DuplicateEntryError(SubjSyncError, KeyError):
    pass


class InvariantViolation(SubjSyncError, RuntimeError):
    def __init__(self, module, message, timestep=None, layer=None):
        self.module = module
        self.timestep = timestep
        self.layer = layer
        where = f"module={module}"
        if timestep is not None:
            where += f" timestep={timestep}"
        if layer is not None:
            where += f" layer={layer}"
        super().__init__(f"{where}: {message}")


class HookError(SubjSyncError, RuntimeError):
    def __init__(self, timestep, layer, cause):
        self.timestep = timestep
        self.layer = layer
        super().__init__(f"hook failed at timestep={timestep} layer={layer}: {cause!r}")
