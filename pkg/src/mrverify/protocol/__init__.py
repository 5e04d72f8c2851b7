from .client import (
    HUMAN_REACTION_MS,
    SessionLog,
    StepRecord,
    hand_frame,
    run_client_session,
    run_motion_session,
    run_sessions,
)
from .server import EdgeServer, parse_endpoint, serve
from .wire import (
    MAGIC,
    VERSION,
    Error,
    ErrorCode,
    MessageReader,
    MessageType,
    ReferenceFrame,
    SessionInit,
    StepControl,
    TargetFrame,
    VerifyResult,
    WireMessage,
    decode_header,
    decode_message,
    encode_message,
)

__all__ = [
    "HUMAN_REACTION_MS",
    "SessionLog",
    "StepRecord",
    "hand_frame",
    "run_client_session",
    "run_motion_session",
    "run_sessions",
    "EdgeServer",
    "parse_endpoint",
    "serve",
    "MAGIC",
    "VERSION",
    "Error",
    "ErrorCode",
    "MessageReader",
    "MessageType",
    "ReferenceFrame",
    "SessionInit",
    "StepControl",
    "TargetFrame",
    "VerifyResult",
    "WireMessage",
    "decode_header",
    "decode_message",
    "encode_message",
]
