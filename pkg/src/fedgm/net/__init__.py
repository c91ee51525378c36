"""Wire protocol and runtime: framing, transports, aggregator, silo clients."""

from .framing import (
    FrameError,
    MalformedPayloadError,
    OversizeFrameError,
    TruncatedFrameError,
    PROTOCOL_VERSION,
    array_from_wire,
    array_to_wire,
    decode_frame,
    encode_frame,
)
from .transport import Connection, InProcConn, TcpConn, connect_tcp, inproc_pair
from .aggregator import Aggregator, AggregatorServer, SessionConfig
from .silo import SiloClient, SiloResult

__all__ = [
    "FrameError",
    "MalformedPayloadError",
    "OversizeFrameError",
    "TruncatedFrameError",
    "PROTOCOL_VERSION",
    "array_from_wire",
    "array_to_wire",
    "decode_frame",
    "encode_frame",
    "Connection",
    "InProcConn",
    "TcpConn",
    "connect_tcp",
    "inproc_pair",
    "Aggregator",
    "AggregatorServer",
    "SessionConfig",
    "SiloClient",
    "SiloResult",
]
