from .protocol import ErrorResponse, RiskResponse, SampleRequest, TopAttribution
from .server import EndpointError, parse_endpoint, run_server
from .session import OutOfOrderError, Session, StreamHandler

__all__ = [
    "EndpointError",
    "ErrorResponse",
    "OutOfOrderError",
    "RiskResponse",
    "SampleRequest",
    "Session",
    "StreamHandler",
    "TopAttribution",
    "parse_endpoint",
    "run_server",
]
