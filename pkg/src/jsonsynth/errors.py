"""Exception types shared across the package."""


class JsonSynthError(Exception):
    """Base class for all package errors."""


class CorpusError(JsonSynthError):
    """Malformed or unusable input corpus."""


class VocabularyMiss(JsonSynthError):
    def __init__(self, unknown):
        self.unknown = list(unknown)
        super().__init__(f"symbols not in vocabulary: {self.unknown}")


class StructureError(JsonSynthError):
    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at token {position})"
        super().__init__(message)


class TransitionError(JsonSynthError):
    def __init__(self, state, token, reason="token not allowed"):
        self.state = state
        self.token = token
        super().__init__(f"{reason}: token {token} in state {state}")


class SchemaError(JsonSynthError):
    pass


class GenerationDeadlock(JsonSynthError):
    def __init__(self, summary):
        self.summary = summary
        super().__init__(f"empty constraint mask: {summary}")


class CheckpointError(JsonSynthError):
    pass
