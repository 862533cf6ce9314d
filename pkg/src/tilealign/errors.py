"""Exception hierarchy.

Two families matter to callers: :class:`DataError` (bad or inconsistent
input, CLI exit code 2) and :class:`SolverError` (the linear algebra failed,
CLI exit code 3).
"""


class TileAlignError(Exception):
    pass


class DataError(TileAlignError):
    pass


class ParseError(DataError):
    def __init__(self, path, record, message):
        self.path = path
        self.record = record
        super().__init__(f"{path}: record {record}: {message}")


class DanglingReference(DataError):
    def __init__(self, tile_id, where=""):
        self.tile_id = tile_id
        suffix = f" ({where})" if where else ""
        super().__init__(f"match references unknown tile {tile_id!r}{suffix}")


class EmptySystem(DataError):
    pass


class UnknownTile(DataError):
    pass


class UnknownSection(DataError):
    pass


class OverlapEmpty(DataError):
    pass


class SolverError(TileAlignError):
    pass


class SingularSystem(SolverError):
    pass


class NotPositiveDefinite(SolverError):
    def __init__(self, message="normal matrix is not positive definite"):
        super().__init__(message + "; increase lambda or fix a tile")


class DegenerateBlock(SolverError):
    pass


class SolverBreakdown(SolverError):
    pass
