"""CTAP2 getAssertion framing.

Client and authenticator exchange only the bytes produced here. Frames are
canonical CBOR (definite lengths, sorted keys) so that encoding never varies
with content order or size class.

Request frame:   0x02 || {1: rpId, 2: clientDataHash, 3: allowList, 5: options}
Response frame:  0x00 || {1: credential, 2: authData, 3: signature}
Error frame:     one status byte
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import cbor2

CMD_GET_ASSERTION = 0x02
STATUS_OK = 0x00

FLAG_UP = 0x01
AUTH_DATA_LEN = 37

# CBOR GetAssertion command parameter keys
_REQ_RP_ID = 0x01
_REQ_CLIENT_DATA_HASH = 0x02
_REQ_ALLOW_LIST = 0x03
_REQ_OPTIONS = 0x05

# CBOR GetAssertion response member keys
_RESP_CREDENTIAL = 0x01
_RESP_AUTH_DATA = 0x02
_RESP_SIGNATURE = 0x03


class CtapStatus(enum.IntEnum):
    INVALID_PARAMETER = 0x02
    INVALID_LENGTH = 0x03
    OPERATION_DENIED = 0x27
    NO_CREDENTIALS = 0x2E


class CtapError(Exception):
    def __init__(self, code: CtapStatus, detail: str = ""):
        self.code = CtapStatus(code)
        super().__init__(f"{self.code.name}" + (f": {detail}" if detail else ""))


class MalformedFrame(CtapError):
    """A byte string that is not a well-formed frame of the expected kind."""

    def __init__(self, detail: str):
        super().__init__(CtapStatus.INVALID_PARAMETER, detail)


@dataclass(frozen=True)
class CredentialDescriptor:
    id: bytes
    type: str = "public-key"

    def __post_init__(self):
        if self.type != "public-key":
            raise ValueError(f"unsupported credential type {self.type!r}")
        if not self.id:
            raise ValueError("credential id must be non-empty")


@dataclass(frozen=True)
class GetAssertionRequest:
    rp_id: str
    client_data_hash: bytes
    allow_list: tuple[CredentialDescriptor, ...] = ()
    up: bool = True

    def __post_init__(self):
        if len(self.client_data_hash) != 32:
            raise ValueError("client_data_hash must be 32 bytes")
        object.__setattr__(self, "allow_list", tuple(self.allow_list))

    @property
    def silent(self) -> bool:
        return not self.up


@dataclass(frozen=True)
class GetAssertionResponse:
    credential: CredentialDescriptor
    auth_data: bytes
    signature: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.auth_data) != AUTH_DATA_LEN:
            raise ValueError(f"auth_data must be {AUTH_DATA_LEN} bytes")

    @property
    def rp_id_hash(self) -> bytes:
        return self.auth_data[:32]

    @property
    def flags(self) -> int:
        return self.auth_data[32]

    @property
    def sign_count(self) -> int:
        return struct.unpack(">I", self.auth_data[33:37])[0]


def build_auth_data(rp_id_hash: bytes, flags: int, sign_count: int) -> bytes:
    return rp_id_hash + bytes([flags]) + struct.pack(">I", sign_count)


def _dumps(obj) -> bytes:
    return cbor2.dumps(obj, canonical=True)


def _loads_strict(payload: bytes):
    """Decode ``payload`` and insist it is the canonical encoding of one item."""
    if not payload:
        raise MalformedFrame("empty CBOR payload")
    try:
        obj = cbor2.loads(payload)
    except (cbor2.CBORDecodeError, ValueError, TypeError, RecursionError) as exc:
        raise MalformedFrame(f"bad CBOR: {exc}") from None
    try:
        canonical = _dumps(obj)
    except (cbor2.CBOREncodeError, TypeError, ValueError) as exc:
        raise MalformedFrame(f"unencodable value: {exc}") from None
    if canonical != payload:
        raise MalformedFrame("non-canonical encoding or trailing bytes")
    return obj


def _descriptor_to_cbor(desc: CredentialDescriptor) -> dict:
    return {"id": desc.id, "type": desc.type}


def _descriptor_from_cbor(obj) -> CredentialDescriptor:
    if not isinstance(obj, dict) or set(obj) != {"id", "type"}:
        raise MalformedFrame("credential descriptor must have exactly id and type")
    if not isinstance(obj["id"], bytes) or obj["type"] != "public-key":
        raise MalformedFrame("bad credential descriptor")
    if not obj["id"]:
        raise MalformedFrame("empty credential id")
    return CredentialDescriptor(id=obj["id"])


def encode_get_assertion(req: GetAssertionRequest) -> bytes:
    body = {
        _REQ_RP_ID: req.rp_id,
        _REQ_CLIENT_DATA_HASH: req.client_data_hash,
        _REQ_OPTIONS: {"up": req.up},
    }
    # CTAP omits an empty allowList
    if req.allow_list:
        body[_REQ_ALLOW_LIST] = [_descriptor_to_cbor(d) for d in req.allow_list]
    return bytes([CMD_GET_ASSERTION]) + _dumps(body)


def decode_get_assertion(frame: bytes) -> GetAssertionRequest:
    if not frame:
        raise MalformedFrame("empty frame")
    if frame[0] != CMD_GET_ASSERTION:
        raise MalformedFrame(f"unexpected command byte 0x{frame[0]:02x}")
    body = _loads_strict(frame[1:])
    if not isinstance(body, dict):
        raise MalformedFrame("request body is not a map")
    unknown = set(body) - {_REQ_RP_ID, _REQ_CLIENT_DATA_HASH, _REQ_ALLOW_LIST, _REQ_OPTIONS}
    if unknown:
        raise MalformedFrame(f"unknown request keys {sorted(map(str, unknown))}")

    rp_id = body.get(_REQ_RP_ID)
    cdh = body.get(_REQ_CLIENT_DATA_HASH)
    if not isinstance(rp_id, str):
        raise MalformedFrame("missing rpId")
    if not isinstance(cdh, bytes) or len(cdh) != 32:
        raise MalformedFrame("clientDataHash must be 32 bytes")

    raw_list = body.get(_REQ_ALLOW_LIST, [])
    if not isinstance(raw_list, list) or (_REQ_ALLOW_LIST in body and not raw_list):
        raise MalformedFrame("allowList must be a non-empty array when present")
    allow_list = tuple(_descriptor_from_cbor(d) for d in raw_list)

    options = body.get(_REQ_OPTIONS, {"up": True})
    if (
        not isinstance(options, dict)
        or set(options) != {"up"}
        or not isinstance(options["up"], bool)
    ):
        raise MalformedFrame("options must be {up: bool}")

    return GetAssertionRequest(
        rp_id=rp_id, client_data_hash=cdh, allow_list=allow_list, up=options["up"]
    )


def encode_response(resp: GetAssertionResponse) -> bytes:
    body = {
        _RESP_CREDENTIAL: _descriptor_to_cbor(resp.credential),
        _RESP_AUTH_DATA: resp.auth_data,
        _RESP_SIGNATURE: resp.signature,
    }
    return bytes([STATUS_OK]) + _dumps(body)


def encode_error(code: CtapStatus) -> bytes:
    return bytes([CtapStatus(code)])


def decode_response(frame: bytes) -> GetAssertionResponse:
    """Parse a response frame.

    A well-formed error frame raises :class:`CtapError` carrying its status;
    anything malformed raises :class:`MalformedFrame`.
    """
    if not frame:
        raise MalformedFrame("empty frame")
    status = frame[0]
    if status != STATUS_OK:
        if len(frame) != 1:
            raise MalformedFrame("error frame carries a payload")
        try:
            code = CtapStatus(status)
        except ValueError:
            raise MalformedFrame(f"unknown status 0x{status:02x}") from None
        raise CtapError(code)

    body = _loads_strict(frame[1:])
    if not isinstance(body, dict) or set(body) != {
        _RESP_CREDENTIAL,
        _RESP_AUTH_DATA,
        _RESP_SIGNATURE,
    }:
        raise MalformedFrame("response must hold credential, authData, signature")
    auth_data = body[_RESP_AUTH_DATA]
    signature = body[_RESP_SIGNATURE]
    if not isinstance(auth_data, bytes) or len(auth_data) != AUTH_DATA_LEN:
        raise MalformedFrame(f"authData must be {AUTH_DATA_LEN} bytes")
    if not isinstance(signature, bytes) or not signature:
        raise MalformedFrame("signature must be non-empty bytes")
    return GetAssertionResponse(
        credential=_descriptor_from_cbor(body[_RESP_CREDENTIAL]),
        auth_data=auth_data,
        signature=signature,
    )


def hexdump(frame: bytes) -> str:
    """Lowercase hex, no separators."""
    return frame.hex()
