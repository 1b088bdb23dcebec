"""Per-session rolling buffers and the line handler shared by every transport."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from pydantic import ValidationError

from ..artifact import ModelArtifact
from ..explain import UnsupportedAttributionError, explain
from ..models.boosting import GBTModel
from ..models.neural import _NetModel
from ..pipeline import WINDOW
from .protocol import (
    ErrorResponse,
    RiskResponse,
    SampleRequest,
    TopAttribution,
    describe_validation_error,
    encode_line,
    parse_line,
)

TOP_K = 3
_ECHO_LIMIT = 512


class OutOfOrderError(ValueError):
    pass


def supports_attribution(artifact: ModelArtifact) -> bool:
    return isinstance(artifact.model, (GBTModel, _NetModel))


@dataclass
class Session:
    """The last 60 minutes of raw samples for one stream, NaN where missing.

    Minutes before the first sample and skipped minutes count as missing,
    so the buffer always equals the batch window ending at ``last_minute``.
    """

    session_id: str
    attrib: bool = False
    buffer: np.ndarray = field(default_factory=lambda: np.full(WINDOW, np.nan))
    last_minute: int | None = None

    def push(self, minute: int, value: float | None) -> np.ndarray:
        """Advance to ``minute``; returns the updated buffer (a view)."""
        if self.last_minute is not None and minute <= self.last_minute:
            raise OutOfOrderError(f"minute {minute} is not after the last minute {self.last_minute}")
        step = minute + 1 if self.last_minute is None else minute - self.last_minute
        if step >= WINDOW:
            self.buffer[:] = np.nan
        else:
            self.buffer[:-step] = self.buffer[step:]
            self.buffer[-step:] = np.nan
        self.buffer[-1] = np.nan if value is None else value
        self.last_minute = minute
        return self.buffer


class StreamHandler:
    """Applies samples to sessions and produces wire responses."""

    def __init__(self, artifact: ModelArtifact, attrib: bool = False, ig_steps: int = 300) -> None:
        if attrib and not supports_attribution(artifact):
            raise UnsupportedAttributionError(
                f"attribution is not supported for model kind {artifact.kind!r}"
            )
        self.artifact = artifact
        self.attrib_default = attrib
        self.ig_steps = ig_steps
        self.sessions: dict[str, Session] = {}

    def drop(self, session_id: str) -> bool:
        return self.sessions.pop(session_id, None) is not None

    def handle(self, req: SampleRequest) -> RiskResponse | ErrorResponse:
        session = self.sessions.get(req.session)
        if session is None:
            session = Session(req.session, attrib=self.attrib_default)
        if req.attrib and not supports_attribution(self.artifact):
            return ErrorResponse(
                error=f"attribution is not supported for model kind {self.artifact.kind!r}",
                session=req.session,
                minute=req.minute,
            )
        try:
            window = session.push(req.minute, req.spo2)
        except OutOfOrderError as exc:
            return ErrorResponse(error=str(exc), session=req.session, minute=req.minute)
        self.sessions[req.session] = session
        if req.attrib is not None:
            session.attrib = req.attrib

        features = self.artifact.features(window.reshape(1, -1))
        risk = float(self.artifact.model.predict_risk(features)[0])
        top = None
        if session.attrib:
            attr = explain(self.artifact.model, features[0], self.artifact.background, self.ig_steps)
            top = [
                TopAttribution(minute=req.minute - (WINDOW - 1 - i), offset=i - (WINDOW - 1), value=v)
                for i, v in attr.top(TOP_K)
            ]
        return RiskResponse(session=req.session, minute=req.minute, risk=risk, top_attributions=top)

    def handle_line(self, line: str) -> str | None:
        """One request line in, one response line out (``None`` for blank lines)."""
        text = line.strip()
        if not text:
            return None
        echo = text if len(text) <= _ECHO_LIMIT else text[:_ECHO_LIMIT] + "..."
        try:
            req = parse_line(text)
        except ValidationError as exc:
            return encode_line(ErrorResponse(error=f"invalid record: {describe_validation_error(exc)}", line=echo))
        except (ValueError, json.JSONDecodeError) as exc:
            return encode_line(ErrorResponse(error=f"malformed line: {exc}", line=echo))
        return encode_line(self.handle(req))
