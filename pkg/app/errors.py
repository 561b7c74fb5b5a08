"""Exception hierarchy shared by the services, the CLI and the HTTP API."""


class MeshsimError(Exception):
    """Base class for every error raised on purpose by meshsim."""


class MeshParseError(MeshsimError, ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None,
                 section: str | None = None):
        self.line = line
        self.column = column
        self.section = section
        where = []
        if section:
            where.append(f"section '{section}'")
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DegenerateGeometryError(MeshsimError, ValueError):
    pass


class ResolutionError(MeshsimError, ValueError):
    pass


class MeshFragmentError(MeshsimError, ValueError):
    pass


class StructuralError(MeshsimError, ValueError):
    pass


class RigidBodyModeError(MeshsimError, RuntimeError):
    pass


class SolverError(MeshsimError, RuntimeError):
    pass


class TrainingAbortedError(MeshsimError, RuntimeError):
    def __init__(self, message: str, checkpoint_path: str | None = None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class SampleGenerationError(MeshsimError, RuntimeError):
    def __init__(self, message: str, sample_spec: dict | None = None):
        self.sample_spec = sample_spec or {}
        super().__init__(f"{message}; sample {self.sample_spec}")
