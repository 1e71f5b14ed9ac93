"""Federated training: wire protocol, aggregation, server and client."""

from .aggregate import ClientUpdate, aggregate_fit, save_aggregated_model
from .wire import (ProtocolError, decode_frame, deserialize_params, encode_frame, load_checkpoint,
                   params_from_bytes, save_checkpoint, serialize_params)

__all__ = [
    "ClientUpdate", "ProtocolError", "aggregate_fit", "decode_frame", "deserialize_params", "encode_frame",
    "load_checkpoint", "params_from_bytes", "save_aggregated_model", "save_checkpoint", "serialize_params",
]
