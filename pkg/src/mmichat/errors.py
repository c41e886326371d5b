"""Exception hierarchy shared by every stage.

Each class carries a short ``category`` string; the CLI prints it as the
machine-parseable part of its one-line failure message.
"""


class MMIError(Exception):
    category = "internal"


class InputError(MMIError, ValueError):
    """Rejected input: wrong shape, bad token id, missing EOS, empty set."""

    category = "input"


class CorpusError(MMIError):
    category = "corpus"


class ConfigError(MMIError):
    category = "config"

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MissingArtifactError(MMIError):
    category = "missing-artifact"

    def __init__(self, path, hint=""):
        self.path = str(path)
        msg = f"missing artifact {self.path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)


class CheckpointError(MMIError):
    category = "checkpoint"


class TrainingDiverged(MMIError):
    category = "diverged"
