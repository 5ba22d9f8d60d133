"""FIDO client (browser / platform) model.

Turns one WebAuthn ``navigator.credentials.get()`` call into CTAP frames:
optional dedup, crash and cap rules, per-handle silent probing, then the
final user-present assertion on the first handle that matched.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional

import numpy as np

from .sim import SimClock, truncated_normal
from .wire import (
    CredentialDescriptor,
    CtapError,
    GetAssertionRequest,
    GetAssertionResponse,
    MalformedFrame,
    decode_response,
    encode_get_assertion,
)

WireLog = Callable[[str, bytes], None]


@dataclass(frozen=True)
class ClientProfile:
    name: str
    max_allow_list: Optional[int] = None
    silent_filtering: bool = True
    dedup_before_ctap: bool = False
    random_error_delay_range: Optional[tuple[float, float]] = None
    crash_threshold: Optional[int] = None

    def __post_init__(self):
        if self.max_allow_list is not None and self.max_allow_list < 1:
            raise ValueError(f"{self.name}: max_allow_list must be >= 1")
        if self.crash_threshold is not None and self.crash_threshold < 1:
            raise ValueError(f"{self.name}: crash_threshold must be >= 1")
        if self.random_error_delay_range is not None:
            lo, hi = self.random_error_delay_range
            if not 0 <= lo <= hi:
                raise ValueError(f"{self.name}: bad random_error_delay_range")

    def with_mitigations(self, **changes) -> "ClientProfile":
        return replace(self, **changes)


@dataclass(frozen=True)
class UserPresenceModel:
    """Time-to-touch distributions (µs), first prompt vs. an immediate repeat."""

    name: str
    unprimed: tuple[float, float]
    primed: tuple[float, float]

    def __post_init__(self):
        for mean, std in (self.unprimed, self.primed):
            if mean <= 0 or std < 0:
                raise ValueError(f"{self.name}: means must be > 0 and stds >= 0")


# Per-subject user study results, ms converted to µs.
SUBJECTS = {
    1: UserPresenceModel("subject1", (5_041_000.0, 943_000.0), (750_000.0, 227_000.0)),
    2: UserPresenceModel("subject2", (3_980_000.0, 585_000.0), (344_000.0, 116_000.0)),
    3: UserPresenceModel("subject3", (5_441_000.0, 844_000.0), (707_000.0, 277_000.0)),
}


def fixed_presence(delay_us: float, name: str = "fixed") -> UserPresenceModel:
    return UserPresenceModel(name, (delay_us, 0.0), (delay_us, 0.0))


class Outcome(enum.Enum):
    OK = "OK"
    ERROR = "ERROR"
    CRASH = "CRASH"


@dataclass
class WebAuthnCallResult:
    outcome: Outcome
    elapsed: float
    presence_events: int = 0
    silent_probe_count: int = 0
    presence_us: float = 0.0
    client_delay_us: float = 0.0
    list_length: int = 0
    response: Optional[GetAssertionResponse] = None
    matched_handle: Optional[bytes] = None


def deduplicate(allow_list: Iterable[bytes]) -> list[bytes]:
    seen = set()
    out = []
    for handle in allow_list:
        if handle not in seen:
            seen.add(handle)
            out.append(handle)
    return out


def sample_presence(user: UserPresenceModel, primed: bool, rng: np.random.Generator) -> float:
    mean, std = user.primed if primed else user.unprimed
    return truncated_normal(rng, mean, std)


def _transact(authenticator, frame: bytes, clock: SimClock, presence, wire_log):
    if wire_log is not None:
        wire_log("req", frame)
    reply = authenticator.process(frame, clock, presence)
    if wire_log is not None:
        wire_log("resp", reply)
    return decode_response(reply)


def credentials_get(
    allow_list: list[bytes],
    rp_id: str,
    client: ClientProfile,
    authenticator,
    user: UserPresenceModel,
    primed: bool,
    clock: SimClock,
    rng: np.random.Generator,
    client_data_hash: Optional[bytes] = None,
    wire_log: Optional[WireLog] = None,
) -> WebAuthnCallResult:
    if not allow_list:
        raise ValueError("allow_list must be non-empty")
    if not rp_id:
        raise ValueError("rp_id must be non-empty")

    start = clock.now
    if client_data_hash is None:
        client_data_hash = hashlib.sha256(rng.bytes(32)).digest()

    handles = deduplicate(allow_list) if client.dedup_before_ctap else list(allow_list)
    if client.crash_threshold is not None and len(handles) >= client.crash_threshold:
        return WebAuthnCallResult(Outcome.CRASH, clock.now - start, list_length=len(handles))
    if client.max_allow_list is not None:
        handles = handles[: client.max_allow_list]

    result = WebAuthnCallResult(Outcome.ERROR, 0.0, list_length=len(handles))

    def presence() -> float:
        wait = sample_presence(user, primed, rng)
        result.presence_events += 1
        result.presence_us += wait
        return wait

    def request(ids, up):
        return encode_get_assertion(
            GetAssertionRequest(
                rp_id=rp_id,
                client_data_hash=client_data_hash,
                allow_list=tuple(CredentialDescriptor(h) for h in ids),
                up=up,
            )
        )

    if len(handles) > 1 and client.silent_filtering:
        match = None
        for handle in handles:
            try:
                _transact(authenticator, request([handle], False), clock, None, wire_log)
            except MalformedFrame:
                raise
            except CtapError:
                result.silent_probe_count += 1
                if client.random_error_delay_range is not None:
                    pad = float(rng.uniform(*client.random_error_delay_range))
                    clock.charge(pad)
                    result.client_delay_us += pad
                continue
            match = handle
            break
        if match is None:
            result.elapsed = clock.now - start
            return result
        final_ids = [match]
    else:
        final_ids = handles

    try:
        resp = _transact(authenticator, request(final_ids, True), clock, presence, wire_log)
    except MalformedFrame:
        raise
    except CtapError:
        result.elapsed = clock.now - start
        return result

    result.outcome = Outcome.OK
    result.response = resp
    result.matched_handle = resp.credential.id
    result.elapsed = clock.now - start
    return result
