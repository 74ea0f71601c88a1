from typing import Optional, Tuple


class KnowledgeBaseError(Exception):
    """Base class for every error raised by the spatial knowledge base"""


class GraphInvariantError(KnowledgeBaseError, ValueError):
    """A write would break a scene graph invariant"""

    def __init__(self, invariant: str, message: str):
        self.invariant = invariant
        super().__init__(f"[{invariant}] {message}")


class UnknownNodeError(KnowledgeBaseError, KeyError):
    def __init__(self, node_id):
        self.node_id = node_id
        super().__init__(f"unknown id: {node_id}")

    def __str__(self) -> str:
        return self.args[0]


class MapFormatError(KnowledgeBaseError):
    """A map directory file is missing or corrupted"""

    def __init__(self, path: str, line: Optional[int], message: str):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


class SequenceFormatError(KnowledgeBaseError):
    """A recorded sequence directory does not follow the input schema"""


class IntrinsicsMismatchError(KnowledgeBaseError, ValueError):
    pass


class FeatureError(KnowledgeBaseError, ValueError):
    pass


class DimensionMismatchError(KnowledgeBaseError, ValueError):
    pass


class QueryParseError(KnowledgeBaseError, ValueError):
    """The rule grammar could not find a target in the query text"""

    def __init__(self, message: str, span: Tuple[int, int], text: str = ""):
        self.span = span
        self.text = text
        super().__init__(f"{message} at {span[0]}:{span[1]}")


class ProviderUnavailable(KnowledgeBaseError):
    """A model provider could not produce a usable reply"""

    def __init__(self, role: str, reason: str):
        self.role = role
        self.reason = reason
        super().__init__(f"{role} provider unavailable: {reason}")


class WorldParamsError(KnowledgeBaseError, ValueError):
    pass
