"""Wire records for the streaming protocol: one JSON object per line."""

from __future__ import annotations

import json
import math
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, StrictBool, StrictInt, ValidationError, field_validator

SPO2_RANGE = (50.0, 100.0)


class SampleRequest(BaseModel):
    """``{"session", "minute", "spo2"}`` with ``spo2`` null when missing.

    ``attrib`` optionally switches attribution on or off for the session
    from this sample onward.
    """

    model_config = ConfigDict(extra="forbid")

    session: str = Field(min_length=1, max_length=256)
    minute: StrictInt = Field(ge=0)
    spo2: Optional[float]
    attrib: Optional[StrictBool] = None

    @field_validator("spo2")
    @classmethod
    def _in_range(cls, v: float | None) -> float | None:
        if v is None:
            return v
        if not math.isfinite(v) or not SPO2_RANGE[0] <= v <= SPO2_RANGE[1]:
            raise ValueError(f"spo2 must be null or within [{SPO2_RANGE[0]:g}, {SPO2_RANGE[1]:g}]")
        return v


class TopAttribution(BaseModel):
    minute: int
    offset: int
    value: float


class RiskResponse(BaseModel):
    session: str
    minute: int
    risk: float
    top_attributions: Optional[list[TopAttribution]] = None


class ErrorResponse(BaseModel):
    error: str
    session: Optional[str] = None
    minute: Optional[int] = None
    line: Optional[str] = None


def encode_line(msg: BaseModel) -> str:
    """Compact JSON without absent optional fields; floats round-trip exactly."""
    return json.dumps(msg.model_dump(exclude_none=True), separators=(",", ":"), allow_nan=False)


def parse_line(line: str) -> SampleRequest:
    """Raises ``ValueError`` (JSON) or ``ValidationError`` (schema)."""
    obj: Any = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    return SampleRequest.model_validate(obj)


def describe_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "record"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)
