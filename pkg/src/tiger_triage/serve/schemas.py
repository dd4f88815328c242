from typing import Literal, Optional

from pydantic import BaseModel, Field


class ClassificationResponse(BaseModel):
    class_: Literal["tiger", "non_tiger"] = Field(alias="class")
    probability: float = Field(ge=0.5, le=1.0)
    model_hash: str
    heatmap_png: Optional[str] = None

    model_config = {"populate_by_name": True}


class HealthResponse(BaseModel):
    status: str
    model_hash: Optional[str] = None
    uptime: float


class ErrorResponse(BaseModel):
    error: str
    message: str
