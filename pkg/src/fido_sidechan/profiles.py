"""Key-value profile files for authenticators and clients.

One ``key = value`` pair per line, ``#`` starts a comment. ``none`` and
``unlimited`` mean absent; ranges are written ``lo, hi``.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Optional

from .authenticator import AuthenticatorProfile, Scheme
from .client import ClientProfile

AUTHENTICATOR_PRESETS = ("hyperfido", "feitian", "constant_time", "kdf", "yubikey_defended")
CLIENT_PRESETS = ("chromium_unpatched", "chromium_patched", "windows10", "safari_macos", "firefox")

_ABSENT = {"none", "unlimited", ""}


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<text>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _opt_int(value: str) -> Optional[int]:
    return None if value.lower() in _ABSENT else int(value)


def _opt_range(value: str) -> Optional[tuple[float, float]]:
    if value.lower() in _ABSENT:
        return None
    lo, hi = (float(v) for v in value.split(","))
    return (lo, hi)


def _bool(value: str) -> bool:
    v = value.lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _read_source(name_or_path: str | Path) -> tuple[str, str]:
    path = Path(name_or_path)
    if path.suffix == ".profile" or path.exists():
        if not path.exists():
            raise ConfigError(f"profile file not found: {path}")
        return path.stem, path.read_text(encoding="utf-8")
    preset = resources.files("fido_sidechan.presets") / f"{name_or_path}.profile"
    if not preset.is_file():
        raise ConfigError(f"unknown profile {name_or_path!r}")
    return str(name_or_path), preset.read_text(encoding="utf-8")


def authenticator_profile_from_text(text: str, name: str = "custom") -> AuthenticatorProfile:
    kv = parse_kv(text, name)
    try:
        return AuthenticatorProfile(
            name=kv.get("name", name),
            scheme=Scheme(kv["scheme"].upper()),
            cost_mac_verify=float(kv["cost_mac_verify"]),
            cost_aes_decrypt=float(kv["cost_aes_decrypt"]),
            cost_origin_compare=float(kv["cost_origin_compare"]),
            cost_kdf=float(kv.get("cost_kdf", 0)),
            cost_sign=float(kv["cost_sign"]),
            jitter_std=float(kv.get("jitter_std", 0)),
            defense_threshold=_opt_int(kv.get("defense_threshold", "none")),
            defense_delay_range=_opt_range(kv.get("defense_delay_range", "none")),
            audible_button=_bool(kv.get("audible_button", "false")),
        )
    except KeyError as exc:
        raise ConfigError(f"{name}: missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def client_profile_from_text(text: str, name: str = "custom") -> ClientProfile:
    kv = parse_kv(text, name)
    try:
        return ClientProfile(
            name=kv.get("name", name),
            max_allow_list=_opt_int(kv.get("max_allow_list", "unlimited")),
            silent_filtering=_bool(kv.get("silent_filtering", "true")),
            dedup_before_ctap=_bool(kv.get("dedup_before_ctap", "false")),
            random_error_delay_range=_opt_range(kv.get("random_error_delay_range", "none")),
            crash_threshold=_opt_int(kv.get("crash_threshold", "none")),
        )
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def load_authenticator_profile(name_or_path: str | Path) -> AuthenticatorProfile:
    name, text = _read_source(name_or_path)
    return authenticator_profile_from_text(text, name)


def load_client_profile(name_or_path: str | Path) -> ClientProfile:
    name, text = _read_source(name_or_path)
    return client_profile_from_text(text, name)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}" if value == int(value) else repr(value)
    return str(value)


def authenticator_profile_to_text(p: AuthenticatorProfile) -> str:
    lines = [
        f"name = {p.name}",
        f"scheme = {p.scheme.value}",
        f"cost_mac_verify = {_fmt(p.cost_mac_verify)}",
        f"cost_aes_decrypt = {_fmt(p.cost_aes_decrypt)}",
        f"cost_origin_compare = {_fmt(p.cost_origin_compare)}",
        f"cost_kdf = {_fmt(p.cost_kdf)}",
        f"cost_sign = {_fmt(p.cost_sign)}",
        f"jitter_std = {_fmt(p.jitter_std)}",
        f"defense_threshold = {_fmt(p.defense_threshold)}",
        f"defense_delay_range = {_fmt(p.defense_delay_range)}",
        f"audible_button = {_fmt(p.audible_button)}",
    ]
    return "\n".join(lines) + "\n"
