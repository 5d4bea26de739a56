#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Wire format for the local-socket data plane.

A frame is an 8-byte little-endian length followed by that many bytes:
    kind   1 byte
    tag    8-byte unsigned LE
    ndim   8-byte unsigned LE
    dims   ndim x 8-byte unsigned LE
    body   raw little-endian float64 values
"""

import socket
import struct
from typing import Optional, Tuple

import numpy as np

from ..core.tensor_math import Tensor, tensor
from ..errors import ProtocolError

KIND_TENSOR = 1
KIND_CLOSE = 2

_PREFIX = struct.Struct('<Q')
_HEADER = struct.Struct('<BQQ')
_DIM = struct.Struct('<Q')


def encode_frame(kind: int, tag: int, payload: Optional[Tensor] = None) -> bytes:
    """
    Encode one frame including its length prefix.

    Args:
        kind: KIND_TENSOR or KIND_CLOSE
        tag: Message tag (pipeline unique key)
        payload: Tensor to carry, or None for control frames

    Returns:
        Frame bytes
    """
    shape = () if payload is None else payload.shape
    header = _HEADER.pack(kind, tag, len(shape)) + b''.join(_DIM.pack(d) for d in shape)
    body = b'' if payload is None else np.ascontiguousarray(payload, dtype='<f8').tobytes()
    return _PREFIX.pack(len(header) + len(body)) + header + body


def decode_frame(frame: bytes) -> Tuple[int, int, Optional[Tensor]]:
    """
    Decode a frame without its length prefix.

    Returns:
        (kind, tag, payload or None)
    """
    if len(frame) < _HEADER.size:
        raise ProtocolError(f"frame of {len(frame)} bytes is shorter than its header")
    kind, tag, ndim = _HEADER.unpack_from(frame, 0)
    offset = _HEADER.size
    dims = tuple(_DIM.unpack_from(frame, offset + i * _DIM.size)[0] for i in range(ndim))
    offset += ndim * _DIM.size
    if ndim == 0:
        return kind, tag, None
    count = int(np.prod(dims))
    if len(frame) - offset != count * 8:
        raise ProtocolError(f"frame body holds {len(frame) - offset} bytes for shape {dims}")
    values = np.frombuffer(frame, dtype='<f8', count=count, offset=offset)
    return kind, tag, tensor(values.astype(np.float64), dims)


def _recv_exact(sock: socket.socket, size: int) -> Optional[bytes]:
    chunks, remaining = [], size
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def read_frame(sock: socket.socket) -> Optional[bytes]:
    """Read one frame body from a socket; None on end of stream."""
    prefix = _recv_exact(sock, _PREFIX.size)
    if prefix is None:
        return None
    (length,) = _PREFIX.unpack(prefix)
    return _recv_exact(sock, length)
