import numpy as np
import pytest

from fido_sidechan.authenticator import Authenticator, AuthenticatorProfile, Scheme
from fido_sidechan.sim import Drbg


def make_profile(scheme=Scheme.WRAP_EARLY_ABORT, **overrides) -> AuthenticatorProfile:
    fields = dict(
        name="test",
        scheme=scheme,
        cost_mac_verify=2500.0,
        cost_aes_decrypt=7000.0,
        cost_origin_compare=3070.0,
        cost_kdf=12570.0,
        cost_sign=30000.0,
        jitter_std=0.0,
    )
    fields.update(overrides)
    return AuthenticatorProfile(**fields)


def make_token(profile=None, seed=0, **overrides) -> Authenticator:
    profile = profile or make_profile(**overrides)
    return Authenticator(profile, Drbg(seed), np.random.default_rng(seed))


@pytest.fixture
def early_abort():
    return make_profile()


@pytest.fixture
def token():
    return make_token()
