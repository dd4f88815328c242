"""Exception hierarchy shared by the pipeline.

Every error carries a short ``code`` so the CLI and the HTTP service can emit
machine-readable error bodies.
"""


class TriageError(Exception):
    code = "TriageError"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self), **self.details}


class UnreadableImage(TriageError):
    code = "UnreadableImage"

    def __init__(self, row_ids, message: str = ""):
        self.row_ids = list(row_ids)
        shown = ", ".join(self.row_ids[:10])
        super().__init__(
            message or f"{len(self.row_ids)} unreadable image(s): {shown}",
            row_ids=self.row_ids,
        )


# dataset
class MissingColumn(TriageError):
    code = "MissingColumn"


class UnknownSpeciesValue(TriageError):
    code = "UnknownSpeciesValue"


class UnknownConfidenceValue(TriageError):
    code = "UnknownConfidenceValue"


class DuplicateId(TriageError):
    code = "DuplicateId"


class TooFewRecords(TriageError):
    code = "TooFewRecords"


class SingleClassInput(TriageError):
    code = "SingleClassInput"


class EmptyTestSet(TriageError):
    code = "EmptyTestSet"


# preprocess
class ZeroDimensionInput(TriageError):
    code = "ZeroDimensionInput"


class EmptyStream(TriageError):
    code = "EmptyStream"


# model
class WeightsUnavailable(TriageError):
    code = "WeightsUnavailable"


class UnknownFamily(TriageError):
    code = "UnknownFamily"


class ShapeMismatch(TriageError):
    code = "ShapeMismatch"


class UnknownLayer(TriageError):
    code = "UnknownLayer"


# train
class DivergenceDetected(TriageError):
    code = "DivergenceDetected"


# metrics
class LengthMismatch(TriageError):
    code = "LengthMismatch"


class TooFewValues(TriageError):
    code = "TooFewValues"


# report
class SampleTooLarge(TriageError):
    code = "SampleTooLarge"


class MissingHeatmap(TriageError):
    code = "MissingHeatmap"


# cli
class ConfigInvalid(TriageError):
    code = "ConfigInvalid"


class PathMissing(TriageError):
    code = "PathMissing"
