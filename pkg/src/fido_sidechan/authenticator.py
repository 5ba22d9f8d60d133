"""Software FIDO2 authenticator with pluggable key-handle schemes.

Every cryptographic step is really executed (AES-256-CBC, HMAC-SHA256,
ECDSA P-256); its *duration* is charged to a :class:`~fido_sidechan.sim.SimClock`
from the :class:`AuthenticatorProfile` cost table. The early-abort wrap scheme
mirrors the usual firmware structure: length guard, MAC check with immediate
abort, then decrypt and compare the relying-party hash.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .sim import Drbg, SimClock, truncated_normal
from .wire import (
    FLAG_UP,
    CredentialDescriptor,
    CtapError,
    CtapStatus,
    GetAssertionRequest,
    GetAssertionResponse,
    MalformedFrame,
    build_auth_data,
    decode_get_assertion,
    encode_error,
    encode_response,
)

# P-256 group order
CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551

IV_LEN = 16
WRAPPED_PAYLOAD_LEN = 64  # sk(32) || rp_id_hash(32), four AES blocks
MAC_LEN = 32
WRAPPED_HANDLE_LEN = IV_LEN + WRAPPED_PAYLOAD_LEN + MAC_LEN  # 112
KDF_HANDLE_LEN = 32
RESIDENT_ID_LEN = 16
RESIDENT_CAPACITY = 25

# A presence source returns the user's reaction time in µs, or None on abort.
PresenceSource = Callable[[], Optional[float]]


class Scheme(enum.Enum):
    WRAP_EARLY_ABORT = "WRAP_EARLY_ABORT"
    WRAP_CONSTANT_TIME = "WRAP_CONSTANT_TIME"
    KDF_DERIVED = "KDF_DERIVED"
    RESIDENT = "RESIDENT"

    @property
    def is_wrap(self) -> bool:
        return self in (Scheme.WRAP_EARLY_ABORT, Scheme.WRAP_CONSTANT_TIME)

    @property
    def handle_length(self) -> int:
        if self.is_wrap:
            return WRAPPED_HANDLE_LEN
        if self is Scheme.KDF_DERIVED:
            return KDF_HANDLE_LEN
        return RESIDENT_ID_LEN


class Stage(enum.Enum):
    LENGTH = "LENGTH"
    MAC = "MAC"
    ORIGIN = "ORIGIN"
    NO_MATCH = "NO_MATCH"


class HandleRejected(Exception):
    """A key handle did not yield a usable key for this relying party.

    ``stage`` is None when the scheme deliberately hides where it failed.
    """

    def __init__(self, stage: Optional[Stage]):
        self.stage = stage
        super().__init__(stage.value if stage else "rejected")


class StorageFull(Exception):
    pass


@dataclass(frozen=True)
class AuthenticatorProfile:
    """Scheme choice plus the simulated cost (µs) of every internal step."""

    name: str
    scheme: Scheme
    cost_mac_verify: float
    cost_aes_decrypt: float
    cost_origin_compare: float
    cost_kdf: float
    cost_sign: float
    jitter_std: float = 0.0
    defense_threshold: Optional[int] = None
    defense_delay_range: Optional[tuple[float, float]] = None
    audible_button: bool = False

    def __post_init__(self):
        costs = (
            self.cost_mac_verify,
            self.cost_aes_decrypt,
            self.cost_origin_compare,
            self.cost_kdf,
            self.cost_sign,
        )
        if any(c < 0 for c in costs):
            raise ValueError(f"{self.name}: costs must be >= 0")
        if self.jitter_std < 0:
            raise ValueError(f"{self.name}: jitter_std must be >= 0")
        if self.defense_threshold is not None and self.defense_threshold < 1:
            raise ValueError(f"{self.name}: defense_threshold must be >= 1")
        if self.defense_threshold is not None and self.defense_delay_range is None:
            raise ValueError(f"{self.name}: defense_threshold needs defense_delay_range")
        if self.defense_delay_range is not None:
            lo, hi = self.defense_delay_range
            if not 0 <= lo <= hi:
                raise ValueError(f"{self.name}: bad defense_delay_range {self.defense_delay_range}")

    @property
    def delta(self) -> float:
        """Extra time a wrong-origin handle costs over a random one (noise-free)."""
        if self.scheme is Scheme.WRAP_EARLY_ABORT:
            return self.cost_aes_decrypt + self.cost_origin_compare
        return 0.0

    @property
    def handle_length(self) -> int:
        return self.scheme.handle_length

    def with_scheme(self, scheme: Scheme) -> "AuthenticatorProfile":
        return replace(self, scheme=scheme)


@dataclass(frozen=True)
class MasterKeys:
    encryption_key: bytes = field(repr=False)
    hmac_key: bytes = field(repr=False)
    kdf_secret: bytes = field(repr=False)

    @classmethod
    def generate(cls, drbg: Drbg) -> "MasterKeys":
        return cls(drbg.bytes(32), drbg.bytes(32), drbg.bytes(32))


@dataclass
class CredentialRecord:
    rp_id: str
    key_handle: bytes
    public_key: ec.EllipticCurvePublicKey
    sign_count: int = 0
    # only populated for resident credentials
    private_scalar: Optional[int] = field(default=None, repr=False)


def rp_id_hash(rp_id: str) -> bytes:
    return hashlib.sha256(rp_id.encode("utf-8")).digest()


def scalar_from_bytes(raw: bytes) -> int:
    d = int.from_bytes(raw, "big") % CURVE_ORDER
    return d or 1


def private_key(scalar: int) -> ec.EllipticCurvePrivateKey:
    return ec.derive_private_key(scalar, ec.SECP256R1())


def public_point(key: ec.EllipticCurvePublicKey) -> bytes:
    return key.public_bytes(Encoding.X962, PublicFormat.UncompressedPoint)


def _charge(clock: SimClock, cost: float, profile: AuthenticatorProfile, rng) -> None:
    if rng is not None and profile.jitter_std > 0:
        cost = truncated_normal(rng, cost, profile.jitter_std)
    clock.charge(cost)


def _aes_cbc(key: bytes, iv: bytes, data: bytes, encrypt: bool) -> bytes:
    cipher = Cipher(algorithms.AES(key), modes.CBC(iv))
    ctx = cipher.encryptor() if encrypt else cipher.decryptor()
    return ctx.update(data) + ctx.finalize()


def wrap_key(mk: MasterKeys, sk: bytes, rp_hash: bytes, iv: Optional[bytes] = None) -> bytes:
    """Encrypt-then-MAC ``sk || rp_hash`` into a 112-byte key handle."""
    if len(sk) != 32 or len(rp_hash) != 32:
        raise ValueError("sk and rp_hash must be 32 bytes each")
    if iv is None:
        iv = os.urandom(IV_LEN)
    body = iv + _aes_cbc(mk.encryption_key, iv, sk + rp_hash, encrypt=True)
    tag = hmac.new(mk.hmac_key, body, hashlib.sha256).digest()
    return body + tag


def unwrap_key(
    mk: MasterKeys,
    handle: bytes,
    rp_hash: bytes,
    clock: SimClock,
    profile: AuthenticatorProfile,
    rng: Optional[np.random.Generator] = None,
) -> bytes:
    """Recover the signing key from a wrapped handle, charging ``clock``.

    Raises :class:`HandleRejected`. Under ``WRAP_EARLY_ABORT`` the stage tells
    whether the MAC or the origin check failed and only the work actually
    done is charged; under ``WRAP_CONSTANT_TIME`` the full pipeline is always
    charged and the stage is withheld.
    """
    if not profile.scheme.is_wrap:
        raise ValueError(f"unwrap_key needs a wrap scheme, got {profile.scheme}")
    # length guard is free, as in the reference firmware
    if len(handle) != WRAPPED_HANDLE_LEN:
        raise HandleRejected(Stage.LENGTH)

    body, tag = handle[:-MAC_LEN], handle[-MAC_LEN:]
    expected = hmac.new(mk.hmac_key, body, hashlib.sha256).digest()
    mac_ok = hmac.compare_digest(expected, tag)

    if profile.scheme is Scheme.WRAP_CONSTANT_TIME:
        plain = _aes_cbc(mk.encryption_key, body[:IV_LEN], body[IV_LEN:], encrypt=False)
        origin_ok = hmac.compare_digest(plain[32:], rp_hash)
        _charge(
            clock,
            profile.cost_mac_verify + profile.cost_aes_decrypt + profile.cost_origin_compare,
            profile,
            rng,
        )
        if not (mac_ok and origin_ok):
            raise HandleRejected(None)
        return plain[:32]

    _charge(clock, profile.cost_mac_verify, profile, rng)
    if not mac_ok:
        raise HandleRejected(Stage.MAC)
    plain = _aes_cbc(mk.encryption_key, body[:IV_LEN], body[IV_LEN:], encrypt=False)
    _charge(clock, profile.cost_aes_decrypt, profile, rng)
    origin_ok = plain[32:] == rp_hash
    _charge(clock, profile.cost_origin_compare, profile, rng)
    if not origin_ok:
        raise HandleRejected(Stage.ORIGIN)
    return plain[:32]


def derive_key(
    mk: MasterKeys,
    nonce: bytes,
    rp_hash: bytes,
    clock: SimClock,
    profile: AuthenticatorProfile,
    rng: Optional[np.random.Generator] = None,
) -> int:
    """HMAC-SHA256(kdf_secret, nonce || rp_hash) reduced into a P-256 scalar.

    Every nonce yields a key; cost is charged once regardless of input.
    """
    if profile.scheme is not Scheme.KDF_DERIVED:
        raise ValueError(f"derive_key needs KDF_DERIVED, got {profile.scheme}")
    if len(nonce) != KDF_HANDLE_LEN or len(rp_hash) != 32:
        raise ValueError("nonce and rp_hash must be 32 bytes each")
    raw = hmac.new(mk.kdf_secret, nonce + rp_hash, hashlib.sha256).digest()
    _charge(clock, profile.cost_kdf, profile, rng)
    return scalar_from_bytes(raw)


def verify_assertion(
    public_key: ec.EllipticCurvePublicKey,
    resp: GetAssertionResponse,
    client_data_hash: bytes,
    rp_id: Optional[str] = None,
) -> bool:
    """Relying-party side check of an assertion signature (and rp binding)."""
    if rp_id is not None and resp.rp_id_hash != rp_id_hash(rp_id):
        return False
    try:
        public_key.verify(
            resp.signature, resp.auth_data + client_data_hash, ec.ECDSA(hashes.SHA256())
        )
    except InvalidSignature:
        return False
    return True


class Authenticator:
    """One simulated token. Not thread-safe: a token processes one command at a time."""

    def __init__(
        self,
        profile: AuthenticatorProfile,
        drbg: Drbg,
        rng: Optional[np.random.Generator] = None,
        resident_capacity: int = RESIDENT_CAPACITY,
    ):
        self.profile = profile
        self._drbg = drbg
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self._mk = MasterKeys.generate(drbg)
        self.resident_capacity = resident_capacity
        self._resident: dict[bytes, CredentialRecord] = {}
        self._kdf_public: set[bytes] = set()
        self.sign_count = 0
        self.consecutive_failures = 0

    @property
    def master_keys(self) -> MasterKeys:
        return self._mk

    def random_bytes(self, n: int) -> bytes:
        return self._drbg.bytes(n)

    def make_credential(self, rp_id: str) -> tuple[CredentialRecord, bytes]:
        if not rp_id:
            raise ValueError("rp_id must be non-empty")
        scheme = self.profile.scheme
        h = rp_id_hash(rp_id)

        if scheme.is_wrap:
            scalar = scalar_from_bytes(self._drbg.bytes(32))
            sk = scalar.to_bytes(32, "big")
            handle = wrap_key(self._mk, sk, h, iv=self._drbg.bytes(IV_LEN))
            record = CredentialRecord(rp_id, handle, private_key(scalar).public_key())
        elif scheme is Scheme.KDF_DERIVED:
            handle = self._drbg.bytes(KDF_HANDLE_LEN)
            scalar = scalar_from_bytes(
                hmac.new(self._mk.kdf_secret, handle + h, hashlib.sha256).digest()
            )
            pub = private_key(scalar).public_key()
            self._kdf_public.add(public_point(pub))
            record = CredentialRecord(rp_id, handle, pub)
        else:
            if len(self._resident) >= self.resident_capacity:
                raise StorageFull(f"resident storage full ({self.resident_capacity} keys)")
            handle = self._drbg.bytes(RESIDENT_ID_LEN)
            scalar = scalar_from_bytes(self._drbg.bytes(32))
            record = CredentialRecord(
                rp_id, handle, private_key(scalar).public_key(), private_scalar=scalar
            )
            self._resident[handle] = record
        return record, handle

    def _check_handle(self, handle: bytes, rp_hash: bytes, clock: SimClock) -> int:
        """Return the private scalar for ``handle`` or raise HandleRejected."""
        p = self.profile
        if p.scheme.is_wrap:
            return int.from_bytes(unwrap_key(self._mk, handle, rp_hash, clock, p, self._rng), "big")
        if len(handle) != p.handle_length:
            raise HandleRejected(Stage.LENGTH)
        if p.scheme is Scheme.KDF_DERIVED:
            scalar = derive_key(self._mk, handle, rp_hash, clock, p, self._rng)
            if public_point(private_key(scalar).public_key()) not in self._kdf_public:
                raise HandleRejected(None)
            return scalar
        # resident: one table lookup plus rp comparison, same cost hit or miss
        record = self._resident.get(handle)
        _charge(clock, p.cost_origin_compare, p, self._rng)
        if record is None or rp_id_hash(record.rp_id) != rp_hash:
            raise HandleRejected(None)
        return record.private_scalar

    def _defense_delay(self, clock: SimClock) -> None:
        p = self.profile
        if p.defense_threshold is not None and self.consecutive_failures >= p.defense_threshold:
            lo, hi = p.defense_delay_range
            clock.charge(float(self._rng.uniform(lo, hi)))

    def get_assertion(
        self,
        req: GetAssertionRequest,
        clock: SimClock,
        presence: Optional[PresenceSource] = None,
    ) -> GetAssertionResponse:
        rp_hash = rp_id_hash(req.rp_id)
        found: Optional[tuple[bytes, int]] = None

        if not req.allow_list:
            if self.profile.scheme is Scheme.RESIDENT:
                _charge(clock, self.profile.cost_origin_compare, self.profile, self._rng)
                for cid, record in self._resident.items():
                    if rp_id_hash(record.rp_id) == rp_hash:
                        found = (cid, record.private_scalar)
                        break
        else:
            for desc in req.allow_list:
                self._defense_delay(clock)
                try:
                    scalar = self._check_handle(desc.id, rp_hash, clock)
                except HandleRejected:
                    self.consecutive_failures += 1
                    continue
                self.consecutive_failures = 0
                found = (desc.id, scalar)
                break

        if found is None:
            raise CtapError(CtapStatus.NO_CREDENTIALS)
        cred_id, scalar = found

        flags = 0
        if req.up:
            wait = presence() if presence is not None else None
            if wait is None:
                raise CtapError(CtapStatus.OPERATION_DENIED, "user presence not given")
            clock.charge(wait)
            flags |= FLAG_UP

        _charge(clock, self.profile.cost_sign, self.profile, self._rng)
        self.sign_count += 1
        auth_data = build_auth_data(rp_hash, flags, self.sign_count)
        signature = private_key(scalar).sign(
            auth_data + req.client_data_hash,
            ec.ECDSA(hashes.SHA256(), deterministic_signing=True),
        )
        return GetAssertionResponse(CredentialDescriptor(cred_id), auth_data, signature)

    def process(
        self, frame: bytes, clock: SimClock, presence: Optional[PresenceSource] = None
    ) -> bytes:
        """Handle one CTAP frame and return the response frame."""
        try:
            req = decode_get_assertion(frame)
        except MalformedFrame:
            return encode_error(CtapStatus.INVALID_PARAMETER)
        try:
            return encode_response(self.get_assertion(req, clock, presence))
        except CtapError as exc:
            return encode_error(exc.code)
